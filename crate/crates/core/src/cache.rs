//! Per-session retrieval cache and missing table.
//!
//! The cache holds verified draft sequences (with the context tail that
//! produced them) and fixed-size chunks of the model's own output. It is
//! searched with the same longest-suffix rule as the datastore, but only
//! once it holds at least `activation_threshold` sequences.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, Write};

use serde::Serialize;

use crate::binio::sha256_hex;
use crate::datastore::{ResultBuilder, RetrievalResult, Source};
use crate::token::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheParams {
    pub activation_threshold: usize,
    pub max_sequences: usize,
    pub n_max: usize,
    pub cont_len: usize,
    pub cap_positions: usize,
    /// Output chunk size for [`RetrievalCache::insert_output`].
    pub chunk: usize,
    /// Which counter cache hits are reported under.
    pub count_side: Source,
}

impl Default for CacheParams {
    fn default() -> Self {
        CacheParams {
            activation_threshold: 50,
            max_sequences: 1024,
            n_max: 16,
            cont_len: 10,
            cap_positions: 256,
            chunk: 20,
            count_side: Source::Repo,
        }
    }
}

/// Position of an n-gram end inside a cached sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Hit {
    seq: u64,
    offset: u32,
}

#[derive(Clone, Debug)]
pub struct RetrievalCache {
    params: CacheParams,
    /// `(id, tokens)` oldest first; ids grow monotonically.
    sequences: VecDeque<(u64, Vec<TokenId>)>,
    next_id: u64,
    /// `grams[n - 1]`: n-gram -> hits in insertion order.
    grams: Vec<HashMap<Box<[TokenId]>, VecDeque<Hit>>>,
    output_chunks: usize,
}

impl RetrievalCache {
    pub fn new(params: CacheParams) -> Self {
        RetrievalCache {
            params,
            sequences: VecDeque::new(),
            next_id: 0,
            grams: vec![HashMap::new(); params.n_max],
            output_chunks: 0,
        }
    }

    pub fn params(&self) -> &CacheParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn accessible(&self) -> bool {
        self.sequences.len() >= self.params.activation_threshold
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[TokenId]> {
        self.sequences.iter().map(|(_, s)| s.as_slice())
    }

    /// Appends one sequence, evicting the oldest when full.
    pub fn insert_sequence(&mut self, seq: Vec<TokenId>) {
        if seq.is_empty() || self.params.max_sequences == 0 {
            return;
        }
        while self.sequences.len() >= self.params.max_sequences {
            self.evict_oldest();
        }
        let id = self.next_id;
        self.next_id += 1;
        for end in 1..seq.len() {
            for n in 1..=self.params.n_max.min(end) {
                let hit = Hit {
                    seq: id,
                    offset: end as u32,
                };
                let key = &seq[end - n..end];
                let table = &mut self.grams[n - 1];
                match table.get_mut(key) {
                    Some(list) => list.push_back(hit),
                    None => {
                        table.insert(key.into(), VecDeque::from([hit]));
                    }
                }
            }
        }
        self.sequences.push_back((id, seq));
    }

    fn evict_oldest(&mut self) {
        let Some((id, seq)) = self.sequences.pop_front() else {
            return;
        };
        for end in 1..seq.len() {
            for n in 1..=self.params.n_max.min(end) {
                let key = &seq[end - n..end];
                let table = &mut self.grams[n - 1];
                if let Some(list) = table.get_mut(key) {
                    while list.front().is_some_and(|h| h.seq == id) {
                        list.pop_front();
                    }
                    if list.is_empty() {
                        table.remove(key);
                    }
                }
            }
        }
    }

    /// Stores the last `n_max` context tokens followed by a verified draft.
    pub fn insert_verified(&mut self, context: &[TokenId], accepted: &[TokenId]) {
        if accepted.is_empty() {
            return;
        }
        let tail = &context[context.len().saturating_sub(self.params.n_max)..];
        let mut seq = Vec::with_capacity(tail.len() + accepted.len());
        seq.extend_from_slice(tail);
        seq.extend_from_slice(accepted);
        self.insert_sequence(seq);
    }

    /// Inserts every complete output chunk not inserted yet. `generated` is
    /// the whole output of the current session so far.
    pub fn insert_output(&mut self, generated: &[TokenId]) {
        let chunk = self.params.chunk;
        if chunk == 0 {
            return;
        }
        while (self.output_chunks + 1) * chunk <= generated.len() {
            let start = self.output_chunks * chunk;
            self.insert_sequence(generated[start..start + chunk].to_vec());
            self.output_chunks += 1;
        }
    }

    /// Inserts the trailing partial chunk, if any, at session end.
    pub fn flush_output(&mut self, generated: &[TokenId]) {
        self.insert_output(generated);
        let start = self.output_chunks * self.params.chunk;
        if start < generated.len() {
            self.insert_sequence(generated[start..].to_vec());
        }
    }

    /// Resets output chunk accounting for a new generation.
    pub fn begin_output(&mut self) {
        self.output_chunks = 0;
    }

    /// Longest-suffix search over cached sequences; empty when inaccessible.
    pub fn search(&self, context: &[TokenId]) -> RetrievalResult {
        if !self.accessible() {
            return RetrievalResult::default();
        }
        self.search_unchecked(context)
    }

    fn search_unchecked(&self, context: &[TokenId]) -> RetrievalResult {
        let longest = self.params.n_max.min(context.len());
        for n in (1..=longest).rev() {
            let Some(hits) = self.grams[n - 1].get(&context[context.len() - n..]) else {
                continue;
            };
            let mut builder = ResultBuilder::default();
            let mut taken = 0;
            for hit in hits {
                let Some(seq) = self.sequence_by_id(hit.seq) else {
                    continue;
                };
                if taken == self.params.cap_positions {
                    break;
                }
                let start = hit.offset as usize;
                let end = (start + self.params.cont_len).min(seq.len());
                builder.add(&seq[start..end], self.params.count_side);
                taken += 1;
            }
            if taken > 0 {
                return builder.finish(n);
            }
        }
        RetrievalResult::default()
    }

    fn sequence_by_id(&self, id: u64) -> Option<&[TokenId]> {
        let first = self.sequences.front()?.0;
        let idx = id.checked_sub(first)? as usize;
        self.sequences.get(idx).map(|(_, s)| s.as_slice())
    }
}

/// Context-suffix keys that produced no datastore matches.
#[derive(Clone, Debug, Default)]
pub struct MissingTable {
    n_max: usize,
    keys: HashSet<Vec<TokenId>>,
}

impl MissingTable {
    pub fn new(n_max: usize) -> Self {
        MissingTable {
            n_max,
            keys: HashSet::new(),
        }
    }

    fn key<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        &context[context.len().saturating_sub(self.n_max)..]
    }

    pub fn add(&mut self, context: &[TokenId]) {
        let key = self.key(context);
        if !self.keys.contains(key) {
            self.keys.insert(key.to_vec());
        }
    }

    pub fn contains(&self, context: &[TokenId]) -> bool {
        self.keys.contains(self.key(context))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn clear(&mut self) {
        self.keys.clear();
    }

    /// Sorted hex SHA-256 digests of the little-endian key bytes.
    pub fn digests(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .keys
            .iter()
            .map(|k| {
                let bytes: Vec<u8> = k.iter().flat_map(|t| t.0.to_le_bytes()).collect();
                sha256_hex(&bytes)
            })
            .collect();
        out.sort();
        out
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DumpLine<'a> {
    Cache { tokens: Vec<u32> },
    Missing { digest: &'a str },
}

/// Writes session state as JSON lines: cache sequences oldest first, then
/// missing-table digests.
pub fn dump_session<W: Write>(
    w: &mut W,
    cache: &RetrievalCache,
    missing: &MissingTable,
) -> io::Result<()> {
    for seq in cache.sequences() {
        let line = DumpLine::Cache {
            tokens: seq.iter().map(|t| t.0).collect(),
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    for d in missing.digests() {
        serde_json::to_writer(&mut *w, &DumpLine::Missing { digest: &d })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
