//! Experiment drivers behind the CLI subcommands: recall simulation over a
//! decode trace, the traffic model against counted bytes, and a CPU timing
//! benchmark of the decode-step stages.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{
    full_attention, full_attention_metered, sparse_attention, sparse_attention_metered,
    subset_attention, AttentionOutput,
};
use crate::criticality::{estimate_all, estimate_all_metered, select_top_k, SelectionConfig};
use crate::error::{QuestError, Result};
use crate::kv_store::{CacheConfig, KvCache};
use crate::metrics::{
    counted_bytes, output_error, overlap_fraction, top_n_indices, traffic_model,
    StepInstrumentation, TrafficReport,
};
use crate::policies::{PolicyKind, PolicyParams, PolicyState};
use crate::vector::dot;
use crate::workloads::{gen_gaussian_trace, DecodeTrace};

/// Builds a cache holding the keys and values of the first `len` trace steps.
pub fn cache_from_trace(trace: &DecodeTrace, config: CacheConfig, len: usize) -> Result<KvCache> {
    let mut cache = KvCache::new(config)?;
    for step in trace.steps.iter().take(len) {
        cache.append(&step.key, &step.value)?;
    }
    Ok(cache)
}

#[derive(Debug, Clone)]
pub struct RecallExperiment {
    pub page_size: usize,
    pub policies: Vec<PolicyKind>,
    pub budgets: Vec<usize>,
    pub n: usize,
    pub force_include_recent: bool,
}

impl RecallExperiment {
    fn validate(&self, trace_len: usize) -> Result<()> {
        if self.page_size == 0 {
            return Err(QuestError::InvalidConfig("page_size must be >= 1".into()));
        }
        if self.n == 0 {
            return Err(QuestError::InvalidArgument("n must be >= 1".into()));
        }
        for &b in &self.budgets {
            if b > trace_len {
                return Err(QuestError::InvalidArgument(format!(
                    "budget {b} exceeds trace length {trace_len}"
                )));
            }
            if b == 0 {
                return Err(QuestError::InvalidArgument("budget must be >= 1".into()));
            }
            if self.policies.contains(&PolicyKind::Quest) && b < self.page_size {
                return Err(QuestError::InvalidArgument(format!(
                    "quest budget {b} is below page size {}",
                    self.page_size
                )));
            }
        }
        Ok(())
    }

    fn params(&self, budget: usize) -> PolicyParams {
        PolicyParams {
            force_include_recent: self.force_include_recent,
            ..PolicyParams::for_budget(budget, self.page_size)
        }
    }
}

/// One CSV row. `step` is a step index or `mean`; `seed` is the trace seed or
/// `all` for rows averaged across traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub seed: String,
    pub step: String,
    pub policy: String,
    pub budget: usize,
    pub recall: f64,
    pub traffic_fraction: f64,
    pub output_error: f64,
}

/// Per-(policy, budget) series from one trace.
#[derive(Debug, Clone)]
pub struct PolicySeries {
    pub policy: PolicyKind,
    pub budget: usize,
    pub steps: Vec<usize>,
    pub recall: Vec<f64>,
    pub traffic: Vec<f64>,
    pub error: Vec<f64>,
}

impl PolicySeries {
    fn mean(v: &[f64]) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn mean_recall(&self) -> f64 {
        Self::mean(&self.recall)
    }

    pub fn mean_traffic(&self) -> f64 {
        Self::mean(&self.traffic)
    }

    pub fn mean_error(&self) -> f64 {
        Self::mean(&self.error)
    }
}

/// Replays `trace` through every (policy, budget) pair. Recall is recorded at
/// each step once the cache holds at least `n` tokens.
pub fn simulate_recall(
    trace: &DecodeTrace,
    exp: &RecallExperiment,
    with_output_error: bool,
) -> Result<Vec<PolicySeries>> {
    exp.validate(trace.len())?;
    let config = CacheConfig::new(trace.head_dim, exp.page_size)?;
    let mut cache = KvCache::new(config)?;
    let mut runs: Vec<(PolicyState, PolicySeries)> = Vec::new();
    for &policy in &exp.policies {
        for &budget in &exp.budgets {
            runs.push((
                PolicyState::new(policy, exp.params(budget))?,
                PolicySeries {
                    policy,
                    budget,
                    steps: Vec::new(),
                    recall: Vec::new(),
                    traffic: Vec::new(),
                    error: Vec::new(),
                },
            ));
        }
    }

    let scale = 1.0 / (trace.head_dim as f64).sqrt();
    for (t, step) in trace.steps.iter().enumerate() {
        cache.append(&step.key, &step.value)?;
        let q = &step.query;
        let len = cache.token_count();
        let measured = len >= exp.n;
        let top = if measured {
            let logits: Vec<f64> = (0..len)
                .map(|i| dot(q, cache.key(i).expect("in range")) * scale)
                .collect();
            top_n_indices(&logits, exp.n)
        } else {
            Vec::new()
        };
        let dense = if measured && with_output_error {
            Some(full_attention(q, &cache)?)
        } else {
            None
        };
        for (state, series) in &mut runs {
            let selected = state.step(q, &cache, t)?;
            if !measured {
                continue;
            }
            series.steps.push(t);
            series.recall.push(overlap_fraction(&selected, &top));
            let mut loaded = selected.len() as f64 / len as f64;
            if series.policy == PolicyKind::Quest && state.params().per_layer_enabled {
                loaded += cache.page_count() as f64 / len as f64;
            }
            series.traffic.push(loaded);
            if let Some(dense) = &dense {
                let sparse = subset_attention(q, &cache, &selected)?;
                series
                    .error
                    .push(output_error(&sparse.output, &dense.output));
            }
        }
    }
    Ok(runs.into_iter().map(|(_, s)| s).collect())
}

/// Gaussian traces for `seeds`, simulated in parallel. Results keep seed order.
pub fn simulate_gaussian_seeds(
    seeds: &[u64],
    length: usize,
    head_dim: usize,
    exp: &RecallExperiment,
    with_output_error: bool,
) -> Result<Vec<(u64, Vec<PolicySeries>)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let trace = gen_gaussian_trace(seed, length, head_dim)?;
            simulate_recall(&trace, exp, with_output_error).map(|s| (seed, s))
        })
        .collect()
}

/// Flattens simulation results into CSV rows: per-step rows (optional), a mean
/// row per (seed, policy, budget), and cross-seed means.
pub fn recall_rows(results: &[(u64, Vec<PolicySeries>)], per_step: bool) -> Vec<RecallRow> {
    let mut rows = Vec::new();
    for (seed, series) in results {
        for s in series {
            if per_step {
                for (i, &step) in s.steps.iter().enumerate() {
                    rows.push(RecallRow {
                        seed: seed.to_string(),
                        step: step.to_string(),
                        policy: s.policy.to_string(),
                        budget: s.budget,
                        recall: s.recall[i],
                        traffic_fraction: s.traffic[i],
                        output_error: s.error.get(i).copied().unwrap_or(f64::NAN),
                    });
                }
            }
            rows.push(RecallRow {
                seed: seed.to_string(),
                step: "mean".into(),
                policy: s.policy.to_string(),
                budget: s.budget,
                recall: s.mean_recall(),
                traffic_fraction: s.mean_traffic(),
                output_error: if s.error.is_empty() {
                    f64::NAN
                } else {
                    s.mean_error()
                },
            });
        }
    }
    if let Some((_, first)) = results.first() {
        for (i, s) in first.iter().enumerate() {
            let avg = |f: &dyn Fn(&PolicySeries) -> f64| {
                results.iter().map(|(_, r)| f(&r[i])).sum::<f64>() / results.len() as f64
            };
            rows.push(RecallRow {
                seed: "all".into(),
                step: "mean".into(),
                policy: s.policy.to_string(),
                budget: s.budget,
                recall: avg(&|p| p.mean_recall()),
                traffic_fraction: avg(&|p| p.mean_traffic()),
                output_error: if s.error.is_empty() {
                    f64::NAN
                } else {
                    avg(&|p| p.mean_error())
                },
            });
        }
    }
    rows
}

pub fn write_csv<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One Quest decode step (estimate, select, attend) with byte counting.
pub fn instrumented_quest_step(
    query: &[f32],
    cache: &KvCache,
    selection: &SelectionConfig,
) -> Result<(AttentionOutput, StepInstrumentation)> {
    let mut run = StepInstrumentation::for_cache(cache, selection.token_budget);
    let scores = estimate_all_metered(query, cache, &mut run.meter)?;
    let pages = select_top_k(&scores, selection, cache)?;
    let out = sparse_attention_metered(query, cache, &pages, &mut run.meter)?;
    Ok((out, run))
}

/// Dense decode step with byte counting.
pub fn instrumented_full_step(
    query: &[f32],
    cache: &KvCache,
) -> Result<(AttentionOutput, StepInstrumentation)> {
    let mut run = StepInstrumentation::for_cache(cache, cache.token_count());
    let out = full_attention_metered(query, cache, &mut run.meter)?;
    Ok((out, run))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficRow {
    pub page_size: usize,
    pub token_count: usize,
    pub token_budget: usize,
    pub head_dim: usize,
    pub bytes_per_element: usize,
    pub estimation_term: f64,
    pub attention_term: f64,
    pub fraction_model: f64,
    pub bytes_counted: u64,
    pub bytes_full: u64,
    pub counted_fraction: f64,
    pub exceeds_dense: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrafficExperiment {
    pub token_count: usize,
    pub token_budget: usize,
    pub head_dim: usize,
    pub bytes_per_element: usize,
    pub seed: u64,
    pub force_include_recent: bool,
}

/// Model fraction and counted bytes for one page size. Counting runs a real
/// Quest step over a Gaussian cache.
pub fn traffic_row(
    exp: &TrafficExperiment,
    page_size: usize,
) -> Result<(TrafficRow, TrafficReport)> {
    if exp.token_budget > exp.token_count {
        return Err(QuestError::InvalidArgument(format!(
            "budget {} exceeds token count {}",
            exp.token_budget, exp.token_count
        )));
    }
    let model = traffic_model(page_size, exp.token_count, exp.token_budget)?;
    let config =
        CacheConfig::new(exp.head_dim, page_size)?.with_bytes_per_element(exp.bytes_per_element)?;
    let trace = gen_gaussian_trace(exp.seed, exp.token_count, exp.head_dim)?;
    let cache = cache_from_trace(&trace, config, exp.token_count)?;
    let query = &trace.steps[exp.token_count - 1].query;
    let selection = SelectionConfig::new(exp.token_budget.max(page_size))
        .force_include_recent(exp.force_include_recent);
    let (_, run) = instrumented_quest_step(query, &cache, &selection)?;
    let report = counted_bytes(&run)?;
    let row = TrafficRow {
        page_size,
        token_count: exp.token_count,
        token_budget: exp.token_budget,
        head_dim: exp.head_dim,
        bytes_per_element: exp.bytes_per_element,
        estimation_term: model.estimation_term,
        attention_term: model.attention_term,
        fraction_model: model.fraction,
        bytes_counted: report.bytes_loaded_counted,
        bytes_full: report.bytes_full,
        counted_fraction: report.counted_fraction(),
        exceeds_dense: model.exceeds_dense(),
    };
    Ok((row, report))
}

#[derive(Debug, Clone, Copy)]
pub struct BenchExperiment {
    pub token_count: usize,
    pub token_budget: usize,
    pub page_size: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub reps: usize,
    pub warmup: usize,
    pub force_include_recent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub stage: &'static str,
    pub token_count: usize,
    pub page_size: usize,
    pub token_budget: usize,
    pub head_dim: usize,
    pub reps: usize,
    pub warmup: usize,
    pub bytes_touched: u64,
    pub bytes_full: u64,
    pub bytes_ratio: f64,
    pub mean_ns: f64,
    pub min_ns: f64,
}

fn time_stage<T>(
    reps: usize,
    warmup: usize,
    mut f: impl FnMut() -> Result<T>,
) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut total = 0.0;
    let mut min = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        let ns = start.elapsed().as_nanos() as f64;
        total += ns;
        min = min.min(ns);
    }
    Ok((total / reps.max(1) as f64, min))
}

/// Wall-clock time of each decode-step stage on the host CPU, with the bytes
/// each stage reads. This is a CPU analog only; it says nothing about GPU
/// kernel latency.
pub fn run_bench(exp: &BenchExperiment) -> Result<Vec<BenchRow>> {
    if exp.token_budget > exp.token_count {
        return Err(QuestError::InvalidArgument(format!(
            "budget {} exceeds token count {}",
            exp.token_budget, exp.token_count
        )));
    }
    let config = CacheConfig::new(exp.head_dim, exp.page_size)?;
    let trace = gen_gaussian_trace(exp.seed, exp.token_count, exp.head_dim)?;
    let cache = cache_from_trace(&trace, config, exp.token_count)?;
    let query = trace.steps[exp.token_count - 1].query.clone();
    let selection =
        SelectionConfig::new(exp.token_budget).force_include_recent(exp.force_include_recent);

    let (_, full_run) = instrumented_full_step(&query, &cache)?;
    let (_, quest_run) = instrumented_quest_step(&query, &cache, &selection)?;
    let bytes_full = full_run.meter.total();
    let scores = estimate_all(&query, &cache)?;
    let pages = select_top_k(&scores, &selection, &cache)?;

    let full_t = time_stage(exp.reps, exp.warmup, || full_attention(&query, &cache))?;
    let est_t = time_stage(exp.reps, exp.warmup, || estimate_all(&query, &cache))?;
    let topk_t = time_stage(exp.reps, exp.warmup, || {
        select_top_k(&scores, &selection, &cache)
    })?;
    let sparse_t = time_stage(exp.reps, exp.warmup, || {
        sparse_attention(&query, &cache, &pages)
    })?;
    let total_t = time_stage(exp.reps, exp.warmup, || {
        let s = estimate_all(&query, &cache)?;
        let p = select_top_k(&s, &selection, &cache)?;
        sparse_attention(&query, &cache, &p)
    })?;

    let row = |stage, bytes: u64, (mean_ns, min_ns): (f64, f64)| BenchRow {
        stage,
        token_count: exp.token_count,
        page_size: exp.page_size,
        token_budget: exp.token_budget,
        head_dim: exp.head_dim,
        reps: exp.reps,
        warmup: exp.warmup,
        bytes_touched: bytes,
        bytes_full,
        bytes_ratio: bytes as f64 / bytes_full as f64,
        mean_ns,
        min_ns,
    };
    Ok(vec![
        row("full", bytes_full, full_t),
        row("quest-estimate", quest_run.meter.metadata_bytes, est_t),
        row("quest-topk", 0, topk_t),
        row("quest-sparse", quest_run.meter.kv_bytes, sparse_t),
        row("quest-total", quest_run.meter.total(), total_t),
    ])
}
