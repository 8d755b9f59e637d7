//! Token-selection policies compared in recall experiments.
//!
//! `Full` and `Quest` keep the whole cache and choose what to attend per
//! query. `H2o`, `Tova` and `Streaming` are eviction policies: once a token
//! leaves their retained set it is gone for good. The eviction baselines are
//! single-head, token-granular re-implementations of their selection rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::attention::{attention_logits, softmax_weights, TokenSubset};
use crate::criticality::{estimate_all, select_top_k, SelectionConfig};
use crate::error::{QuestError, Result};
use crate::kv_store::KvCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Full,
    Quest,
    H2o,
    Tova,
    Streaming,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Full,
        PolicyKind::Quest,
        PolicyKind::H2o,
        PolicyKind::Tova,
        PolicyKind::Streaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Quest => "quest",
            PolicyKind::H2o => "h2o",
            PolicyKind::Tova => "tova",
            PolicyKind::Streaming => "streaming",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = QuestError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "dense" => Ok(PolicyKind::Full),
            "quest" => Ok(PolicyKind::Quest),
            "h2o" => Ok(PolicyKind::H2o),
            "tova" => Ok(PolicyKind::Tova),
            "streaming" | "streamingllm" => Ok(PolicyKind::Streaming),
            other => Err(QuestError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Whether a policy permanently discards tokens.
pub fn eviction_is_permanent(kind: PolicyKind) -> bool {
    matches!(
        kind,
        PolicyKind::H2o | PolicyKind::Tova | PolicyKind::Streaming
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyParams {
    /// Tokens attended (Quest) or retained (eviction policies) per step.
    pub budget: usize,
    /// Streaming: leading tokens always kept.
    pub sink_count: usize,
    /// Streaming: trailing tokens kept.
    pub window_count: usize,
    /// H2O: newest tokens that cannot be evicted.
    pub recent_window: usize,
    /// Quest: always attend the newest page.
    pub force_include_recent: bool,
    /// Quest and baselines: when false the policy attends everything.
    pub per_layer_enabled: bool,
}

impl PolicyParams {
    pub const DEFAULT_SINK_COUNT: usize = 4;

    /// Defaults for a given budget and page size: 4 sink tokens for
    /// streaming (fewer if the budget is tiny) and an H2O recent window of one
    /// page.
    pub fn for_budget(budget: usize, page_size: usize) -> Self {
        let sink_count = Self::DEFAULT_SINK_COUNT.min(budget / 2);
        Self {
            budget,
            sink_count,
            window_count: budget - sink_count,
            recent_window: page_size,
            force_include_recent: true,
            per_layer_enabled: true,
        }
    }

    pub fn streaming(sink_count: usize, window_count: usize) -> Self {
        Self {
            budget: sink_count + window_count,
            sink_count,
            window_count,
            recent_window: 0,
            force_include_recent: true,
            per_layer_enabled: true,
        }
    }
}

/// Per-trace state of one policy.
#[derive(Debug, Clone)]
pub struct PolicyState {
    kind: PolicyKind,
    params: PolicyParams,
    retained: BTreeSet<usize>,
    accumulated: BTreeMap<usize, f64>,
}

impl PolicyState {
    pub fn new(kind: PolicyKind, params: PolicyParams) -> Result<Self> {
        let needs_budget = kind != PolicyKind::Full && params.per_layer_enabled;
        if needs_budget && params.budget == 0 {
            return Err(QuestError::InvalidArgument(format!(
                "{kind} needs a positive budget"
            )));
        }
        if kind == PolicyKind::Streaming && params.sink_count + params.window_count == 0 {
            return Err(QuestError::InvalidArgument(
                "streaming needs sink_count + window_count > 0".into(),
            ));
        }
        Ok(Self {
            kind,
            params,
            retained: BTreeSet::new(),
            accumulated: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Tokens still held by an eviction policy.
    pub fn retained(&self) -> &BTreeSet<usize> {
        &self.retained
    }

    pub fn accumulated_score(&self, token: usize) -> Option<f64> {
        self.accumulated.get(&token).copied()
    }

    /// Advances the policy by one decode step. The cache must already hold
    /// `new_token`. Returns the ascending set of tokens attended for `query`.
    pub fn step(&mut self, query: &[f32], cache: &KvCache, new_token: usize) -> Result<Vec<usize>> {
        if new_token >= cache.token_count() {
            return Err(QuestError::TokenOutOfRange {
                index: new_token,
                tokens: cache.token_count(),
            });
        }
        if !self.params.per_layer_enabled {
            return Ok((0..cache.token_count()).collect());
        }
        match self.kind {
            PolicyKind::Full => Ok((0..cache.token_count()).collect()),
            PolicyKind::Quest => self.quest_step(query, cache),
            PolicyKind::H2o => self.h2o_step(query, cache, new_token),
            PolicyKind::Tova => self.tova_step(query, cache, new_token),
            PolicyKind::Streaming => Ok(self.streaming_step(cache.token_count())),
        }
    }

    fn quest_step(&self, query: &[f32], cache: &KvCache) -> Result<Vec<usize>> {
        let config = SelectionConfig::new(self.params.budget)
            .force_include_recent(self.params.force_include_recent);
        let scores = estimate_all(query, cache)?;
        let pages = select_top_k(&scores, &config, cache)?;
        crate::attention::tokens_of_pages(cache, &pages)
    }

    fn candidate_weights(
        &mut self,
        query: &[f32],
        cache: &KvCache,
        new_token: usize,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.retained.insert(new_token);
        let tokens: Vec<usize> = self.retained.iter().copied().collect();
        let logits = attention_logits(query, cache, TokenSubset::Tokens(&tokens))?;
        let weights = softmax_weights(&logits.logits)?;
        Ok((tokens, weights))
    }

    fn h2o_step(&mut self, query: &[f32], cache: &KvCache, new_token: usize) -> Result<Vec<usize>> {
        let (tokens, weights) = self.candidate_weights(query, cache, new_token)?;
        for (&t, &w) in tokens.iter().zip(&weights) {
            *self.accumulated.entry(t).or_insert(0.0) += w;
        }
        let budget = self.params.budget;
        if tokens.len() > budget {
            let protected = self.params.recent_window.min(budget);
            let evictable = &tokens[..tokens.len() - protected];
            let victim = evictable
                .iter()
                .copied()
                .min_by(|a, b| {
                    self.accumulated[a]
                        .total_cmp(&self.accumulated[b])
                        .then(a.cmp(b))
                })
                .expect("at least one evictable token");
            self.retained.remove(&victim);
            self.accumulated.remove(&victim);
        }
        Ok(self.retained.iter().copied().collect())
    }

    fn tova_step(
        &mut self,
        query: &[f32],
        cache: &KvCache,
        new_token: usize,
    ) -> Result<Vec<usize>> {
        let (tokens, weights) = self.candidate_weights(query, cache, new_token)?;
        if tokens.len() > self.params.budget {
            let (victim, _) = tokens
                .iter()
                .zip(&weights)
                .min_by(|(a, wa), (b, wb)| wa.total_cmp(wb).then(a.cmp(b)))
                .expect("non-empty candidates");
            self.retained.remove(victim);
        }
        Ok(self.retained.iter().copied().collect())
    }

    fn streaming_step(&mut self, token_count: usize) -> Vec<usize> {
        let selected = streaming_selection(
            self.params.sink_count,
            self.params.window_count,
            token_count,
        );
        self.retained = selected.iter().copied().collect();
        selected
    }
}

/// Sink tokens plus the trailing window, ascending.
pub fn streaming_selection(
    sink_count: usize,
    window_count: usize,
    token_count: usize,
) -> Vec<usize> {
    let sinks = sink_count.min(token_count);
    let window_start = token_count.saturating_sub(window_count).max(sinks);
    (0..sinks).chain(window_start..token_count).collect()
}
