//! Query-time page criticality and Top-K page filtering.
//!
//! A page's score is `sum_i max(q_i * max_key_i, q_i * min_key_i)`. For every
//! key `k` in the page, each term is at least `q_i * k_i`, so the score bounds
//! every in-page logit `q . k` from above. Scores and logits share the same
//! accumulation order and `f64` arithmetic, which keeps the bound exact under
//! rounding, not just in real arithmetic.

use std::cmp::Ordering;

use crate::error::{QuestError, Result};
use crate::kv_store::{ByteMeter, KvCache, PageMetadata};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageScore {
    pub page_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionConfig {
    /// Tokens attended per step, summed over selected pages.
    pub token_budget: usize,
    /// Always keep the newest page; it counts against K.
    pub force_include_recent: bool,
    /// When false, selection is bypassed and every page is attended (dense
    /// layers).
    pub per_layer_enabled: bool,
}

impl SelectionConfig {
    pub fn new(token_budget: usize) -> Self {
        Self {
            token_budget,
            force_include_recent: true,
            per_layer_enabled: true,
        }
    }

    pub fn force_include_recent(mut self, on: bool) -> Self {
        self.force_include_recent = on;
        self
    }

    pub fn per_layer_enabled(mut self, on: bool) -> Self {
        self.per_layer_enabled = on;
        self
    }

    /// Number of pages that fit in the budget, rounding down.
    pub fn pages_in_budget(&self, page_size: usize) -> usize {
        self.token_budget / page_size
    }
}

pub fn estimate_page_score(query: &[f32], metadata: &PageMetadata) -> Result<f64> {
    if query.len() != metadata.head_dim() {
        return Err(QuestError::DimensionMismatch {
            expected: metadata.head_dim(),
            got: query.len(),
        });
    }
    let mut score = 0.0f64;
    for ((&q, &hi), &lo) in query.iter().zip(&metadata.max_key).zip(&metadata.min_key) {
        let q = f64::from(q);
        score += (q * f64::from(hi)).max(q * f64::from(lo));
    }
    Ok(score)
}

/// Scores every page of the cache, in page order.
pub fn estimate_all(query: &[f32], cache: &KvCache) -> Result<Vec<PageScore>> {
    if cache.is_empty() {
        return Err(QuestError::EmptyCache);
    }
    cache
        .pages()
        .iter()
        .enumerate()
        .map(|(page_index, page)| {
            estimate_page_score(query, page.metadata()).map(|score| PageScore { page_index, score })
        })
        .collect()
}

/// [`estimate_all`], charging the metadata reads to `meter`.
pub fn estimate_all_metered(
    query: &[f32],
    cache: &KvCache,
    meter: &mut ByteMeter,
) -> Result<Vec<PageScore>> {
    let scores = estimate_all(query, cache)?;
    meter.charge_metadata(cache.config(), scores.len());
    Ok(scores)
}

/// Higher score first; equal scores go to the lower (older) page.
fn rank(a: &PageScore, b: &PageScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.page_index.cmp(&b.page_index))
}

/// Picks the pages to attend. Output is in ascending page order.
pub fn select_top_k(
    scores: &[PageScore],
    config: &SelectionConfig,
    cache: &KvCache,
) -> Result<Vec<usize>> {
    let page_count = cache.page_count();
    if scores.len() != page_count {
        return Err(QuestError::InvalidArgument(format!(
            "{} scores for {} pages",
            scores.len(),
            page_count
        )));
    }
    if !config.per_layer_enabled {
        return Ok((0..page_count).collect());
    }
    let page_size = cache.page_size();
    if config.token_budget < page_size {
        return Err(QuestError::InvalidArgument(format!(
            "token budget {} is smaller than page size {}",
            config.token_budget, page_size
        )));
    }
    let k = config.pages_in_budget(page_size);
    if k >= page_count || config.token_budget >= cache.token_count() {
        return Ok((0..page_count).collect());
    }

    let mut ranked: Vec<PageScore> = scores.to_vec();
    let mut chosen = Vec::with_capacity(k);
    if config.force_include_recent {
        let recent = page_count - 1;
        chosen.push(recent);
        ranked.retain(|s| s.page_index != recent);
    }
    let remaining = k - chosen.len();
    if remaining > 0 && remaining < ranked.len() {
        ranked.select_nth_unstable_by(remaining - 1, rank);
    }
    chosen.extend(ranked.iter().take(remaining).map(|s| s.page_index));
    chosen.sort_unstable();
    Ok(chosen)
}
