//! Append-only paged key/value storage for a single attention head.
//!
//! Every page keeps a channel-wise minimum and maximum over the keys it holds.
//! The metadata is updated on each append, so it is always equal to what a
//! full scan of the page's keys would produce.

use crate::error::{QuestError, Result};

/// Shape and accounting parameters for one cache instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    /// Channels per key/value vector.
    pub head_dim: usize,
    /// Tokens per page.
    pub page_size: usize,
    /// Bytes charged per vector element by the traffic accounting. Storage is
    /// always `f32`; this only affects byte counts.
    pub bytes_per_element: usize,
}

impl CacheConfig {
    pub const DEFAULT_BYTES_PER_ELEMENT: usize = 4;

    pub fn new(head_dim: usize, page_size: usize) -> Result<Self> {
        let config = Self {
            head_dim,
            page_size,
            bytes_per_element: Self::DEFAULT_BYTES_PER_ELEMENT,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_bytes_per_element(mut self, bytes: usize) -> Result<Self> {
        self.bytes_per_element = bytes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(QuestError::InvalidConfig("head_dim must be >= 1".into()));
        }
        if self.page_size == 0 {
            return Err(QuestError::InvalidConfig("page_size must be >= 1".into()));
        }
        if self.bytes_per_element == 0 {
            return Err(QuestError::InvalidConfig(
                "bytes_per_element must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Bytes of one key (or one value) vector.
    pub fn vector_bytes(&self) -> usize {
        self.head_dim * self.bytes_per_element
    }
}

/// Channel-wise bounds over every key stored in a page.
#[derive(Debug, Clone, PartialEq)]
pub struct PageMetadata {
    pub min_key: Vec<f32>,
    pub max_key: Vec<f32>,
}

impl PageMetadata {
    fn from_key(key: &[f32]) -> Self {
        Self {
            min_key: key.to_vec(),
            max_key: key.to_vec(),
        }
    }

    fn absorb(&mut self, key: &[f32]) {
        for ((lo, hi), &k) in self
            .min_key
            .iter_mut()
            .zip(self.max_key.iter_mut())
            .zip(key)
        {
            *hi = hi.max(k);
            *lo = lo.min(k);
        }
    }

    /// Recomputes the bounds by scanning `keys` (row-major, `head_dim` wide).
    pub fn scan(keys: &[f32], head_dim: usize) -> Option<Self> {
        let mut rows = keys.chunks_exact(head_dim);
        let mut meta = Self::from_key(rows.next()?);
        for row in rows {
            meta.absorb(row);
        }
        Some(meta)
    }

    pub fn head_dim(&self) -> usize {
        self.min_key.len()
    }
}

/// A fixed-capacity block of consecutive tokens.
#[derive(Debug, Clone)]
pub struct Page {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
    capacity: usize,
    metadata: PageMetadata,
}

impl Page {
    fn open(config: &CacheConfig, key: &[f32], value: &[f32]) -> Self {
        let mut keys = Vec::with_capacity(config.page_size * config.head_dim);
        let mut values = Vec::with_capacity(config.page_size * config.head_dim);
        keys.extend_from_slice(key);
        values.extend_from_slice(value);
        Self {
            keys,
            values,
            len: 1,
            capacity: config.page_size,
            metadata: PageMetadata::from_key(key),
        }
    }

    fn push(&mut self, key: &[f32], value: &[f32]) {
        debug_assert!(self.len < self.capacity);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.metadata.absorb(key);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn metadata(&self) -> &PageMetadata {
        &self.metadata
    }

    /// Keys of this page, row-major.
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    /// Values of this page, row-major.
    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Paged KV cache for one head. Tokens are only ever appended.
#[derive(Debug, Clone)]
pub struct KvCache {
    config: CacheConfig,
    pages: Vec<Page>,
    token_count: usize,
}

impl KvCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            pages: Vec::new(),
            token_count: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn page_size(&self) -> usize {
        self.config.page_size
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    /// Appends one token and returns its index.
    pub fn append(&mut self, key: &[f32], value: &[f32]) -> Result<usize> {
        let dim = self.config.head_dim;
        for v in [key, value] {
            if v.len() != dim {
                return Err(QuestError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        match self.pages.last_mut() {
            Some(page) if !page.is_full() => page.push(key, value),
            _ => self.pages.push(Page::open(&self.config, key, value)),
        }
        self.token_count += 1;
        Ok(self.token_count - 1)
    }

    pub fn page(&self, index: usize) -> Result<&Page> {
        self.pages.get(index).ok_or(QuestError::PageOutOfRange {
            index,
            pages: self.pages.len(),
        })
    }

    pub fn page_metadata(&self, index: usize) -> Result<&PageMetadata> {
        self.page(index).map(Page::metadata)
    }

    /// Token index range `[start, end)` covered by a page.
    pub fn page_tokens(&self, index: usize) -> Result<std::ops::Range<usize>> {
        let page = self.page(index)?;
        let start = index * self.config.page_size;
        Ok(start..start + page.len())
    }

    pub fn page_of(&self, token: usize) -> usize {
        token / self.config.page_size
    }

    fn locate(&self, token: usize) -> Result<(&Page, std::ops::Range<usize>)> {
        if token >= self.token_count {
            return Err(QuestError::TokenOutOfRange {
                index: token,
                tokens: self.token_count,
            });
        }
        let dim = self.config.head_dim;
        let page = &self.pages[token / self.config.page_size];
        let row = token % self.config.page_size;
        Ok((page, row * dim..(row + 1) * dim))
    }

    pub fn key(&self, token: usize) -> Result<&[f32]> {
        let (page, span) = self.locate(token)?;
        Ok(&page.keys[span])
    }

    pub fn value(&self, token: usize) -> Result<&[f32]> {
        let (page, span) = self.locate(token)?;
        Ok(&page.values[span])
    }

    /// Overwrites every channel's max with its min in one page, so the stored
    /// bounds no longer cover the page. Used to check that the verifier
    /// notices corrupted metadata.
    #[doc(hidden)]
    pub fn corrupt_metadata(&mut self, page: usize) {
        if let Some(p) = self.pages.get_mut(page) {
            let meta = &mut p.metadata;
            meta.max_key.copy_from_slice(&meta.min_key);
        }
    }
}

/// Counts bytes read from a cache during one decode step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteMeter {
    pub metadata_bytes: u64,
    pub kv_bytes: u64,
    pub pages_estimated: u64,
    pub tokens_attended: u64,
}

impl ByteMeter {
    pub fn charge_metadata(&mut self, config: &CacheConfig, pages: usize) {
        self.pages_estimated += pages as u64;
        self.metadata_bytes += (2 * config.vector_bytes() * pages) as u64;
    }

    pub fn charge_tokens(&mut self, config: &CacheConfig, tokens: usize) {
        self.tokens_attended += tokens as u64;
        self.kv_bytes += (2 * config.vector_bytes() * tokens) as u64;
    }

    pub fn total(&self) -> u64 {
        self.metadata_bytes + self.kv_bytes
    }
}
