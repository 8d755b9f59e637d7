//! Reference decode-step attention: dense over the whole cache, or restricted
//! to a set of pages.
//!
//! Both paths go through the same routine with tokens visited in ascending
//! index order, so attending every page reproduces dense attention bit for
//! bit.

use crate::error::{QuestError, Result};
use crate::kv_store::{ByteMeter, KvCache};
use crate::vector::dot;

/// Pre-softmax attention weights for a set of tokens, in ascending token order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub tokens: Vec<usize>,
    pub logits: Vec<f64>,
}

impl LogitVector {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `sum_t a_t * value_t` over the attended tokens.
    pub output: Vec<f64>,
    /// Post-softmax mass; 1 up to rounding.
    pub weights_sum: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum TokenSubset<'a> {
    All,
    /// Token indices; must be strictly ascending.
    Tokens(&'a [usize]),
}

fn check_query(query: &[f32], cache: &KvCache) -> Result<()> {
    if query.len() != cache.head_dim() {
        return Err(QuestError::DimensionMismatch {
            expected: cache.head_dim(),
            got: query.len(),
        });
    }
    Ok(())
}

fn check_tokens(tokens: &[usize], cache: &KvCache) -> Result<()> {
    for (i, &t) in tokens.iter().enumerate() {
        if t >= cache.token_count() {
            return Err(QuestError::TokenOutOfRange {
                index: t,
                tokens: cache.token_count(),
            });
        }
        if i > 0 && tokens[i - 1] >= t {
            return Err(QuestError::InvalidArgument(
                "token subset must be strictly ascending".into(),
            ));
        }
    }
    Ok(())
}

fn logits_for(query: &[f32], cache: &KvCache, tokens: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (cache.head_dim() as f64).sqrt();
    tokens
        .iter()
        .map(|&t| dot(query, cache.key(t).expect("validated token")) * scale)
        .collect()
}

/// `dot(q, k_t) / sqrt(head_dim)` for each token in the subset.
pub fn attention_logits(
    query: &[f32],
    cache: &KvCache,
    subset: TokenSubset<'_>,
) -> Result<LogitVector> {
    check_query(query, cache)?;
    let tokens: Vec<usize> = match subset {
        TokenSubset::All => (0..cache.token_count()).collect(),
        TokenSubset::Tokens(ts) => {
            check_tokens(ts, cache)?;
            ts.to_vec()
        }
    };
    let logits = logits_for(query, cache, &tokens);
    Ok(LogitVector { tokens, logits })
}

/// Max-subtracted softmax.
pub fn softmax_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(QuestError::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

fn attend(query: &[f32], cache: &KvCache, tokens: &[usize]) -> AttentionOutput {
    let logits = logits_for(query, cache, tokens);
    let weights = softmax_weights(&logits).expect("non-empty token set");
    let mut output = vec![0.0f64; cache.head_dim()];
    let mut weights_sum = 0.0;
    for (&t, &w) in tokens.iter().zip(&weights) {
        let value = cache.value(t).expect("validated token");
        for (o, &v) in output.iter_mut().zip(value) {
            *o += w * f64::from(v);
        }
        weights_sum += w;
    }
    AttentionOutput {
        output,
        weights_sum,
    }
}

pub fn full_attention(query: &[f32], cache: &KvCache) -> Result<AttentionOutput> {
    check_query(query, cache)?;
    if cache.is_empty() {
        return Err(QuestError::EmptyCache);
    }
    let tokens: Vec<usize> = (0..cache.token_count()).collect();
    Ok(attend(query, cache, &tokens))
}

/// Tokens covered by `pages`, ascending. Pages may be given in any order but
/// must be distinct and in range.
pub fn tokens_of_pages(cache: &KvCache, pages: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = pages.to_vec();
    sorted.sort_unstable();
    let mut tokens = Vec::new();
    for (i, &p) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1] == p {
            return Err(QuestError::DuplicatePage(p));
        }
        tokens.extend(cache.page_tokens(p)?);
    }
    Ok(tokens)
}

/// Attention over the tokens of the selected pages only; the softmax is
/// renormalized over that subset.
pub fn sparse_attention(
    query: &[f32],
    cache: &KvCache,
    selected_pages: &[usize],
) -> Result<AttentionOutput> {
    check_query(query, cache)?;
    if selected_pages.is_empty() {
        return Err(QuestError::EmptySelection);
    }
    let tokens = tokens_of_pages(cache, selected_pages)?;
    Ok(attend(query, cache, &tokens))
}

/// Attention over an arbitrary ascending token set (used for token-granular
/// policies).
pub fn subset_attention(
    query: &[f32],
    cache: &KvCache,
    tokens: &[usize],
) -> Result<AttentionOutput> {
    check_query(query, cache)?;
    if tokens.is_empty() {
        return Err(QuestError::EmptySelection);
    }
    check_tokens(tokens, cache)?;
    Ok(attend(query, cache, tokens))
}

pub fn full_attention_metered(
    query: &[f32],
    cache: &KvCache,
    meter: &mut ByteMeter,
) -> Result<AttentionOutput> {
    let out = full_attention(query, cache)?;
    meter.charge_tokens(cache.config(), cache.token_count());
    Ok(out)
}

pub fn sparse_attention_metered(
    query: &[f32],
    cache: &KvCache,
    selected_pages: &[usize],
    meter: &mut ByteMeter,
) -> Result<AttentionOutput> {
    check_query(query, cache)?;
    if selected_pages.is_empty() {
        return Err(QuestError::EmptySelection);
    }
    let tokens = tokens_of_pages(cache, selected_pages)?;
    meter.charge_tokens(cache.config(), tokens.len());
    Ok(attend(query, cache, &tokens))
}
