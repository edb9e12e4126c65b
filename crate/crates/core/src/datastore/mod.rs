//! Multi-source datastore: a repository-local index and a common-code index,
//! both queried by longest-suffix exact match.
//!
//! Each [`SourceIndex`] stores its corpus as one token array in which every
//! ingested segment is followed by [`SENTINEL`]. For every length
//! `n = 1..=n_max` it maps each n-gram to the corpus positions immediately
//! after its occurrences, so the continuation of a match at position `p`
//! starts at `corpus[p]`. Only occurrences followed by at least one token of
//! the same segment are indexed; a match always yields a nonempty
//! continuation.

mod build;
mod format;

use std::collections::HashMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::{TokenId, Vocabulary};

pub use build::{build_common, build_repo, ExcludedSpan};
pub use format::{DATASTORE_MAGIC, DATASTORE_VERSION};

/// Segment terminator inside a corpus. Never a vocabulary id.
pub const SENTINEL: TokenId = TokenId(u32::MAX);

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid exclusion span: {0}")]
    InvalidSpan(String),
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("malformed datastore file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexParams {
    /// Longest suffix length tried, and longest n-gram indexed.
    pub n_max: usize,
    /// Tokens fetched after each match.
    pub cont_len: usize,
    /// Maximum stored positions per n-gram, first occurrences kept.
    pub cap_positions: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            n_max: 16,
            cont_len: 10,
            cap_positions: 256,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<(), DatastoreError> {
        if self.n_max == 0 {
            return Err(DatastoreError::InvalidParams("n_max must be >= 1".into()));
        }
        if self.cont_len == 0 {
            return Err(DatastoreError::InvalidParams(
                "cont_len must be >= 1".into(),
            ));
        }
        if self.cap_positions == 0 {
            return Err(DatastoreError::InvalidParams(
                "cap_positions must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which occurrence counter a retrieval hit contributes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Repo,
    Common,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Continuation {
    pub tokens: Vec<TokenId>,
    pub count_repo: u32,
    pub count_common: u32,
}

impl Continuation {
    pub fn total(&self) -> u32 {
        self.count_repo + self.count_common
    }
}

/// Deduplicated continuations in order of first occurrence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RetrievalResult {
    pub continuations: Vec<Continuation>,
    /// Suffix length that produced the matches; 0 when empty.
    pub match_len: usize,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.continuations.is_empty()
    }
}

/// Accumulates continuations, merging duplicates and summing counts.
#[derive(Default)]
pub(crate) struct ResultBuilder {
    seen: HashMap<Vec<TokenId>, usize>,
    out: Vec<Continuation>,
}

impl ResultBuilder {
    pub(crate) fn add(&mut self, tokens: &[TokenId], source: Source) {
        let idx = match self.seen.get(tokens) {
            Some(&i) => i,
            None => {
                self.seen.insert(tokens.to_vec(), self.out.len());
                self.out.push(Continuation {
                    tokens: tokens.to_vec(),
                    count_repo: 0,
                    count_common: 0,
                });
                self.out.len() - 1
            }
        };
        match source {
            Source::Repo => self.out[idx].count_repo += 1,
            Source::Common => self.out[idx].count_common += 1,
        }
    }

    pub(crate) fn finish(self, match_len: usize) -> RetrievalResult {
        RetrievalResult {
            match_len: if self.out.is_empty() { 0 } else { match_len },
            continuations: self.out,
        }
    }
}

type GramTable = HashMap<Box<[TokenId]>, Vec<u32>>;

/// Suffix-indexed corpus for one source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceIndex {
    params: IndexParams,
    corpus: Vec<TokenId>,
    /// `grams[n - 1]` holds the n-gram table.
    grams: Vec<GramTable>,
}

impl SourceIndex {
    pub fn empty(params: IndexParams) -> Self {
        SourceIndex {
            params,
            corpus: Vec::new(),
            grams: vec![GramTable::new(); params.n_max],
        }
    }

    /// Indexes the given segments; empty segments are dropped.
    pub fn from_segments<'a, I>(segments: I, params: IndexParams) -> Self
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut corpus = Vec::new();
        for seg in segments {
            if seg.is_empty() {
                continue;
            }
            debug_assert!(!seg.contains(&SENTINEL));
            corpus.extend_from_slice(seg);
            corpus.push(SENTINEL);
        }
        Self::from_corpus(corpus, params)
    }

    /// Rebuilds gram tables over a sentinel-delimited corpus.
    pub fn from_corpus(corpus: Vec<TokenId>, params: IndexParams) -> Self {
        let mut grams = vec![GramTable::new(); params.n_max];
        let mut seg_start = 0;
        for p in 0..corpus.len() {
            if corpus[p] == SENTINEL {
                seg_start = p + 1;
                continue;
            }
            // `p` is the continuation start; grams end right before it.
            let longest = params.n_max.min(p - seg_start);
            for n in 1..=longest {
                let key = &corpus[p - n..p];
                let table = &mut grams[n - 1];
                match table.get_mut(key) {
                    Some(list) => {
                        if list.len() < params.cap_positions {
                            list.push(p as u32);
                        }
                    }
                    None => {
                        table.insert(key.into(), vec![p as u32]);
                    }
                }
            }
        }
        SourceIndex {
            params,
            corpus,
            grams,
        }
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    /// Raw corpus including sentinels.
    pub fn corpus(&self) -> &[TokenId] {
        &self.corpus
    }

    /// Number of real tokens (sentinels excluded).
    pub fn token_count(&self) -> usize {
        self.corpus.iter().filter(|&&t| t != SENTINEL).count()
    }

    pub fn segments(&self) -> impl Iterator<Item = &[TokenId]> {
        self.corpus
            .split(|&t| t == SENTINEL)
            .filter(|s| !s.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Positions following each occurrence of `gram`.
    pub fn positions(&self, gram: &[TokenId]) -> &[u32] {
        if gram.is_empty() || gram.len() > self.grams.len() {
            return &[];
        }
        self.grams[gram.len() - 1]
            .get(gram)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub(crate) fn tables(&self) -> &[GramTable] {
        &self.grams
    }

    pub(crate) fn from_parts(
        params: IndexParams,
        corpus: Vec<TokenId>,
        grams: Vec<GramTable>,
    ) -> Self {
        SourceIndex {
            params,
            corpus,
            grams,
        }
    }

    fn continuation_at(&self, p: usize, cont_len: usize) -> &[TokenId] {
        let end = (p + cont_len).min(self.corpus.len());
        let window = &self.corpus[p..end];
        let stop = window
            .iter()
            .position(|&t| t == SENTINEL)
            .unwrap_or(window.len());
        &window[..stop]
    }

    /// Longest-suffix retrieval: tries `n = min(n_max, |context|)` down to 1
    /// and returns the continuations of the first length with any match.
    pub fn retrieve(&self, context: &[TokenId], n_max: usize, source: Source) -> RetrievalResult {
        self.retrieve_with(context, n_max, self.params.cont_len, source)
    }

    /// [`SourceIndex::retrieve`] with an explicit continuation length.
    pub fn retrieve_with(
        &self,
        context: &[TokenId],
        n_max: usize,
        cont_len: usize,
        source: Source,
    ) -> RetrievalResult {
        let longest = n_max.min(context.len()).min(self.grams.len());
        for n in (1..=longest).rev() {
            let positions = self.positions(&context[context.len() - n..]);
            if positions.is_empty() {
                continue;
            }
            let mut builder = ResultBuilder::default();
            for &p in positions {
                builder.add(self.continuation_at(p as usize, cont_len), source);
            }
            return builder.finish(n);
        }
        RetrievalResult::default()
    }
}

/// Free-function form of [`SourceIndex::retrieve`].
pub fn suffix_retrieve(
    index: &SourceIndex,
    context: &[TokenId],
    n_max: usize,
    source: Source,
) -> RetrievalResult {
    index.retrieve(context, n_max, source)
}

/// Repository-local and common-code indexes sharing one vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datastore {
    vocab: Vocabulary,
    params: IndexParams,
    repo: Option<SourceIndex>,
    common: SourceIndex,
}

impl Datastore {
    pub fn new(
        vocab: Vocabulary,
        params: IndexParams,
        repo: Option<SourceIndex>,
        common: SourceIndex,
    ) -> Result<Self, DatastoreError> {
        params.validate()?;
        for idx in repo.iter().chain(std::iter::once(&common)) {
            if idx.params != params {
                return Err(DatastoreError::InvalidParams(
                    "source index built with different parameters".into(),
                ));
            }
        }
        Ok(Datastore {
            vocab,
            params,
            repo,
            common,
        })
    }

    /// A datastore that never matches anything.
    pub fn empty(vocab: Vocabulary, params: IndexParams) -> Self {
        Datastore {
            vocab,
            params,
            repo: None,
            common: SourceIndex::empty(params),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn repo(&self) -> Option<&SourceIndex> {
        self.repo.as_ref()
    }

    pub fn common(&self) -> &SourceIndex {
        &self.common
    }

    pub fn with_repo(mut self, repo: Option<SourceIndex>) -> Self {
        self.repo = repo;
        self
    }

    pub fn token_count(&self) -> usize {
        self.common.token_count() + self.repo.as_ref().map_or(0, SourceIndex::token_count)
    }

    /// Searches both sources concurrently. Returns `(repo, common)`.
    pub fn par_retrieve(&self, context: &[TokenId]) -> (RetrievalResult, RetrievalResult) {
        self.par_retrieve_with(context, true)
    }

    /// Like [`Datastore::par_retrieve`]; `use_repo = false` ignores the
    /// repository index.
    pub fn par_retrieve_with(
        &self,
        context: &[TokenId],
        use_repo: bool,
    ) -> (RetrievalResult, RetrievalResult) {
        let repo = self.repo.as_ref().filter(|_| use_repo);
        par_search(
            repo,
            &self.common,
            context,
            self.params.n_max,
            self.params.cont_len,
        )
    }
}

/// Searches an optional repository index and the common index, the two in
/// parallel when both are present. Returns `(repo, common)`.
pub fn par_search(
    repo: Option<&SourceIndex>,
    common: &SourceIndex,
    context: &[TokenId],
    n_max: usize,
    cont_len: usize,
) -> (RetrievalResult, RetrievalResult) {
    match repo {
        Some(repo) => rayon::join(
            || repo.retrieve_with(context, n_max, cont_len, Source::Repo),
            || common.retrieve_with(context, n_max, cont_len, Source::Common),
        ),
        None => (
            RetrievalResult::default(),
            common.retrieve_with(context, n_max, cont_len, Source::Common),
        ),
    }
}
