//! Self-check suites run by `questkv verify`.
//!
//! Each suite exercises one invariant on seeded random instances and reports
//! the number of checks and failures. The attention oracle here is a separate
//! naive implementation (no max subtraction, compensated sums).

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::attention::{full_attention, sparse_attention};
use crate::criticality::{estimate_page_score, SelectionConfig};
use crate::error::Result;
use crate::experiments::{instrumented_full_step, instrumented_quest_step};
use crate::kv_store::{CacheConfig, KvCache, PageMetadata};
use crate::metrics::counted_bytes;
use crate::vector::dot;

pub const SUITES: [&str; 5] = [
    "metadata_scan",
    "upper_bound",
    "full_budget",
    "oracle",
    "traffic",
];

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances per suite is multiplied by this factor (1 = default sizes).
    pub scale: f64,
    /// Corrupt page metadata before checking, to prove the checks can fail.
    pub inject_fault: bool,
    pub suites: Vec<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 1.0,
            inject_fault: false,
            suites: SUITES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: u64,
    pub failures: u64,
    pub detail: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }
}

fn count(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

fn random_cache(
    rng: &mut Xoshiro256PlusPlus,
    head_dim: usize,
    page_size: usize,
    tokens: usize,
) -> Result<KvCache> {
    let mut cache = KvCache::new(CacheConfig::new(head_dim, page_size)?)?;
    for _ in 0..tokens {
        let k = gaussian(rng, head_dim);
        let v = gaussian(rng, head_dim);
        cache.append(&k, &v)?;
    }
    Ok(cache)
}

fn metadata_scan(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x11);
    let mut checks = 0;
    let mut failures = 0;
    for _ in 0..count(10_000, cfg.scale) {
        let head_dim = rng.random_range(1..=16);
        let page_size = rng.random_range(1..=8);
        let tokens = rng.random_range(1..=40);
        let mut cache = random_cache(&mut rng, head_dim, page_size, tokens)?;
        if cfg.inject_fault {
            cache.corrupt_metadata(0);
        }
        if cache.page_count() != tokens.div_ceil(page_size) {
            failures += 1;
        }
        for page in cache.pages() {
            checks += 1;
            if PageMetadata::scan(page.keys(), head_dim).as_ref() != Some(page.metadata()) {
                failures += 1;
            }
        }
    }
    Ok(SuiteResult {
        name: "metadata_scan",
        checks,
        failures,
        detail: "stored page bounds == bounds recomputed by scan".into(),
    })
}

fn upper_bound(cfg: &VerifyConfig) -> Result<SuiteResult> {
    const DIMS: [usize; 3] = [16, 64, 128];
    const PAGES: [usize; 3] = [8, 16, 32];
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x22);
    let mut failures = 0;
    let pairs = count(100_000, cfg.scale);
    for i in 0..pairs {
        let head_dim = DIMS[i % 3];
        let page_size = PAGES[(i / 3) % 3];
        let mut cache = random_cache(&mut rng, head_dim, page_size, page_size)?;
        if cfg.inject_fault {
            cache.corrupt_metadata(0);
        }
        let q = gaussian(&mut rng, head_dim);
        let score = estimate_page_score(&q, cache.page_metadata(0)?)?;
        let slack = 1e-6 * (1.0 + score.abs());
        let page = cache.page(0)?;
        if page
            .keys()
            .chunks_exact(head_dim)
            .any(|k| score + slack < dot(&q, k))
        {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "upper_bound",
        checks: pairs as u64,
        failures,
        detail: "page score >= every in-page logit".into(),
    })
}

fn full_budget(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x33);
    let mut failures = 0;
    let instances = count(1_000, cfg.scale);
    for _ in 0..instances {
        let head_dim = rng.random_range(1..=64);
        let page_size = rng.random_range(1..=32);
        let tokens = rng.random_range(1..=4096);
        let cache = random_cache(&mut rng, head_dim, page_size, tokens)?;
        let q = gaussian(&mut rng, head_dim);
        let pages: Vec<usize> = (0..cache.page_count()).collect();
        if sparse_attention(&q, &cache, &pages)? != full_attention(&q, &cache)? {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "full_budget",
        checks: instances as u64,
        failures,
        detail: "all-page sparse attention is bit-identical to dense".into(),
    })
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Textbook attention: exp of raw scaled logits, normalized at the end.
pub fn naive_attention(query: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>]) -> Vec<f64> {
    let d = query.len();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let exps: Vec<f64> = keys
        .iter()
        .map(|k| {
            let logit = compensated_sum(query.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64));
            (logit * inv_sqrt_d).exp()
        })
        .collect();
    let z = compensated_sum(exps.iter().copied());
    (0..d)
        .map(|c| compensated_sum(exps.iter().zip(values).map(|(e, v)| e * v[c] as f64)) / z)
        .collect()
}

fn oracle(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x44);
    let mut failures = 0;
    let mut worst = 0.0f64;
    let instances = count(1_000, cfg.scale);
    for _ in 0..instances {
        let head_dim = rng.random_range(1..=128);
        let page_size = rng.random_range(1..=32);
        let tokens = rng.random_range(1..=4096);
        let keys: Vec<Vec<f32>> = (0..tokens).map(|_| gaussian(&mut rng, head_dim)).collect();
        let values: Vec<Vec<f32>> = (0..tokens).map(|_| gaussian(&mut rng, head_dim)).collect();
        let mut cache = KvCache::new(CacheConfig::new(head_dim, page_size)?)?;
        for (k, v) in keys.iter().zip(&values) {
            cache.append(k, v)?;
        }
        let q = gaussian(&mut rng, head_dim);
        let got = full_attention(&q, &cache)?.output;
        let want = naive_attention(&q, &keys, &values);
        let err = crate::metrics::output_error(&got, &want);
        worst = worst.max(err);
        if err > 1e-5 {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "oracle",
        checks: instances as u64,
        failures,
        detail: format!("dense attention vs naive oracle, worst rel L2 {worst:.3e}"),
    })
}

fn traffic(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x55);
    let mut checks = 0;
    let mut failures = 0;
    for _ in 0..count(200, cfg.scale) {
        let head_dim = rng.random_range(1..=32);
        let page_size = rng.random_range(1..=32);
        let tokens = rng.random_range(page_size..=2048);
        let budget = rng.random_range(page_size..=tokens);
        let cache = random_cache(&mut rng, head_dim, page_size, tokens)?;
        let q = gaussian(&mut rng, head_dim);

        let (_, run) = instrumented_full_step(&q, &cache)?;
        let dense = counted_bytes(&run)?;
        checks += 1;
        if dense.bytes_loaded_counted != dense.bytes_full {
            failures += 1;
        }

        let (_, run) = instrumented_quest_step(&q, &cache, &SelectionConfig::new(budget))?;
        let report = counted_bytes(&run)?;
        checks += 1;
        let gap = report.counted_fraction() - report.fraction_model;
        if gap.abs() > report.page_slack() + 1e-12 {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "traffic",
        checks,
        failures,
        detail: "counted bytes track the traffic model within one page".into(),
    })
}

pub fn run_suite(name: &str, cfg: &VerifyConfig) -> Option<Result<SuiteResult>> {
    Some(match name {
        "metadata_scan" => metadata_scan(cfg),
        "upper_bound" => upper_bound(cfg),
        "full_budget" => full_budget(cfg),
        "oracle" => oracle(cfg),
        "traffic" => traffic(cfg),
        _ => return None,
    })
}

pub fn run(cfg: &VerifyConfig) -> Result<Vec<SuiteResult>> {
    cfg.suites
        .iter()
        .filter_map(|s| run_suite(s, cfg))
        .collect()
}
