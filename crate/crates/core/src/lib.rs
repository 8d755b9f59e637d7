//! Paged KV cache with query-aware sparse attention for the decode stage.
//!
//! Each page of the cache tracks channel-wise min/max keys. At every decode
//! step the query scores each page with an upper bound on its best logit, the
//! highest-scoring pages that fit in the token budget are selected, and
//! attention runs over those pages only. The crate also carries the
//! eviction baselines, recall and traffic metrics, and seeded workloads used
//! to measure the trade-off against dense attention.

pub mod attention;
pub mod criticality;
pub mod error;
pub mod experiments;
pub mod kv_store;
pub mod metrics;
pub mod policies;
pub mod vector;
pub mod verify;
pub mod workloads;

pub use attention::{full_attention, sparse_attention, AttentionOutput, LogitVector};
pub use criticality::{
    estimate_all, estimate_page_score, select_top_k, PageScore, SelectionConfig,
};
pub use error::{QuestError, Result};
pub use kv_store::{ByteMeter, CacheConfig, KvCache, Page, PageMetadata};
pub use policies::{eviction_is_permanent, PolicyKind, PolicyParams, PolicyState};
pub use workloads::{DecodeTrace, NeedleSpec, TraceStep};
