//! Recall, output error, memory-traffic model and counted bytes, and an
//! attention-mass sparsity probe.

use crate::attention::{attention_logits, softmax_weights, TokenSubset};
use crate::error::{QuestError, Result};
use crate::kv_store::{ByteMeter, KvCache};
use crate::vector::l2_norm;

pub const DEFAULT_RECALL_N: usize = 10;

/// Indices of the `n` largest values, ties going to the lower index. Result is
/// in rank order.
pub fn top_n_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let by_rank = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if n < idx.len() && n > 0 {
        idx.select_nth_unstable_by(n - 1, by_rank);
        idx.truncate(n);
    }
    idx.sort_by(by_rank);
    idx.truncate(n);
    idx
}

/// Full-attention top-`n` tokens for `query` by logit.
pub fn full_top_n(query: &[f32], cache: &KvCache, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > cache.token_count() {
        return Err(QuestError::InvalidArgument(format!(
            "n = {n} must be in 1..={}",
            cache.token_count()
        )));
    }
    let logits = attention_logits(query, cache, TokenSubset::All)?;
    Ok(top_n_indices(&logits.logits, n))
}

/// Fraction of `top` present in the ascending `selected` set.
pub fn overlap_fraction(selected: &[usize], top: &[usize]) -> f64 {
    let hits = top
        .iter()
        .filter(|t| selected.binary_search(t).is_ok())
        .count();
    hits as f64 / top.len() as f64
}

/// `|selected ∩ top_n| / n`, where `top_n` comes from full attention.
/// `selected` must be ascending.
pub fn recall_at_n(selected: &[usize], query: &[f32], cache: &KvCache, n: usize) -> Result<f64> {
    let top = full_top_n(query, cache, n)?;
    Ok(overlap_fraction(selected, &top))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub per_step_recall: Vec<f64>,
    pub mean_recall: f64,
    pub n: usize,
    pub budget: usize,
}

impl RecallReport {
    pub fn new(per_step_recall: Vec<f64>, n: usize, budget: usize) -> Self {
        let mean_recall = if per_step_recall.is_empty() {
            0.0
        } else {
            per_step_recall.iter().sum::<f64>() / per_step_recall.len() as f64
        };
        Self {
            per_step_recall,
            mean_recall,
            n,
            budget,
        }
    }
}

/// Closed-form traffic fraction split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficModel {
    /// Metadata loads: `1 / page_size`.
    pub estimation_term: f64,
    /// Selected pages: `K * page_size / token_count`, at most 1.
    pub attention_term: f64,
    pub fraction: f64,
}

impl TrafficModel {
    /// True when the model loads more than dense attention would.
    pub fn exceeds_dense(&self) -> bool {
        self.fraction > 1.0
    }
}

pub fn traffic_model(
    page_size: usize,
    token_count: usize,
    token_budget: usize,
) -> Result<TrafficModel> {
    if page_size == 0 {
        return Err(QuestError::InvalidConfig("page_size must be >= 1".into()));
    }
    if token_count == 0 {
        return Err(QuestError::InvalidArgument(
            "token_count must be >= 1".into(),
        ));
    }
    let selected_tokens = (token_budget / page_size) * page_size;
    let estimation_term = 1.0 / page_size as f64;
    let attention_term = (selected_tokens as f64 / token_count as f64).min(1.0);
    Ok(TrafficModel {
        estimation_term,
        attention_term,
        fraction: estimation_term + attention_term,
    })
}

/// `1/S + floor(budget/S)*S / L`.
pub fn traffic_fraction(page_size: usize, token_count: usize, token_budget: usize) -> Result<f64> {
    traffic_model(page_size, token_count, token_budget).map(|m| m.fraction)
}

/// Byte accounting collected while running one decode step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInstrumentation {
    pub enabled: bool,
    pub meter: ByteMeter,
    pub head_dim: usize,
    pub bytes_per_element: usize,
    pub page_size: usize,
    pub token_count: usize,
    pub token_budget: usize,
}

impl StepInstrumentation {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            meter: ByteMeter::default(),
            head_dim: 0,
            bytes_per_element: 0,
            page_size: 0,
            token_count: 0,
            token_budget: 0,
        }
    }

    pub fn for_cache(cache: &KvCache, token_budget: usize) -> Self {
        let cfg = cache.config();
        Self {
            enabled: true,
            meter: ByteMeter::default(),
            head_dim: cfg.head_dim,
            bytes_per_element: cfg.bytes_per_element,
            page_size: cfg.page_size,
            token_count: cache.token_count(),
            token_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficReport {
    pub fraction_model: f64,
    pub bytes_loaded_counted: u64,
    pub bytes_full: u64,
    pub page_size: usize,
    pub token_budget: usize,
    pub token_count: usize,
}

impl TrafficReport {
    pub fn counted_fraction(&self) -> f64 {
        self.bytes_loaded_counted as f64 / self.bytes_full as f64
    }

    /// One page of K and V, relative to dense bytes: the allowed gap between
    /// counted and modeled fractions.
    pub fn page_slack(&self) -> f64 {
        self.page_size as f64 / self.token_count as f64
    }
}

pub fn counted_bytes(run: &StepInstrumentation) -> Result<TrafficReport> {
    if !run.enabled {
        return Err(QuestError::InstrumentationDisabled);
    }
    let vector_bytes = (run.head_dim * run.bytes_per_element) as u64;
    let bytes_full = 2 * vector_bytes * run.token_count as u64;
    let budget = run.token_budget.min(run.token_count);
    Ok(TrafficReport {
        fraction_model: traffic_fraction(run.page_size, run.token_count, budget)?,
        bytes_loaded_counted: run.meter.total(),
        bytes_full,
        page_size: run.page_size,
        token_budget: run.token_budget,
        token_count: run.token_count,
    })
}

/// Fewest tokens, taken by descending softmax weight, whose mass reaches
/// `mass_threshold`.
pub fn oracle_sparsity(query: &[f32], cache: &KvCache, mass_threshold: f64) -> Result<usize> {
    if !(mass_threshold > 0.0 && mass_threshold < 1.0) {
        return Err(QuestError::InvalidArgument(format!(
            "mass threshold {mass_threshold} not in (0, 1)"
        )));
    }
    let logits = attention_logits(query, cache, TokenSubset::All)?;
    let weights = softmax_weights(&logits.logits)?;
    let order = top_n_indices(&weights, weights.len());
    // Relative slack so that e.g. nine weights of 0.1 count as reaching 0.9.
    let target = mass_threshold * (1.0 - 1e-12);
    let mut mass = 0.0;
    for (taken, &t) in order.iter().enumerate() {
        mass += weights[t];
        if mass >= target {
            return Ok(taken + 1);
        }
    }
    Ok(weights.len())
}

/// `||sparse - full|| / (||full|| + 1e-12)`.
pub fn output_error(sparse: &[f64], full: &[f64]) -> f64 {
    debug_assert_eq!(sparse.len(), full.len());
    let diff: Vec<f64> = sparse.iter().zip(full).map(|(s, f)| s - f).collect();
    l2_norm(&diff) / (l2_norm(full) + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::CacheConfig;

    fn cache_1d(keys: &[f32]) -> KvCache {
        let mut c = KvCache::new(CacheConfig::new(1, 4).unwrap()).unwrap();
        for &k in keys {
            c.append(&[k], &[k]).unwrap();
        }
        c
    }

    #[test]
    fn top_n_ties_prefer_lower_index() {
        assert_eq!(top_n_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_n_indices(&[2.0, 2.0, 2.0], 1), vec![0]);
        assert_eq!(top_n_indices(&[0.0, 5.0, 1.0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn recall_extremes() {
        let keys: Vec<f32> = (0..20).map(|t| t as f32).collect();
        let c = cache_1d(&keys);
        let all: Vec<usize> = (0..20).collect();
        assert_eq!(recall_at_n(&all, &[1.0], &c, 10).unwrap(), 1.0);
        let low: Vec<usize> = (0..10).collect();
        assert_eq!(recall_at_n(&low, &[1.0], &c, 10).unwrap(), 0.0);
        assert!(recall_at_n(&all, &[1.0], &c, 21).is_err());
    }

    #[test]
    fn worked_traffic_example() {
        assert_eq!(traffic_fraction(16, 65536, 4096).unwrap(), 0.125);
    }

    #[test]
    fn full_budget_overhead() {
        let m = traffic_model(16, 4096, 4096).unwrap();
        assert_eq!(m.fraction, 1.0 + 1.0 / 16.0);
        assert!(m.exceeds_dense());
    }

    #[test]
    fn unit_page_size_degenerates() {
        let m = traffic_model(1, 1000, 100).unwrap();
        assert_eq!(m.fraction, 1.0 + 100.0 / 1000.0);
        assert!(m.exceeds_dense());
        assert!(traffic_fraction(0, 10, 1).is_err());
    }

    #[test]
    fn disabled_instrumentation_is_an_error() {
        assert!(matches!(
            counted_bytes(&StepInstrumentation::disabled()),
            Err(QuestError::InstrumentationDisabled)
        ));
    }

    #[test]
    fn sparsity_cases() {
        let mut keys = vec![0.0f32; 50];
        keys[17] = 25.0;
        let c = cache_1d(&keys);
        assert_eq!(oracle_sparsity(&[1.0], &c, 0.99).unwrap(), 1);

        let c = cache_1d(&[0.5; 10]);
        assert_eq!(oracle_sparsity(&[1.0], &c, 0.9).unwrap(), 9);
        assert_eq!(oracle_sparsity(&[1.0], &c, 0.999_999).unwrap(), 10);
        assert!(oracle_sparsity(&[1.0], &c, 1.0).is_err());
        assert!(oracle_sparsity(&[1.0], &c, 0.0).is_err());
    }

    #[test]
    fn output_error_cases() {
        assert_eq!(output_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = output_error(&[0.0, 0.0], &[3.0, 4.0]);
        assert!((e - 1.0).abs() < 1e-12);
    }
}
