//! Weighted prefix tree over retrieved continuations and its flattening into
//! a draft tree for single-step tree-attention verification.
//!
//! Every trie node carries `weight = alpha * t_repo + beta * t_common`, where
//! the counts are the number of retrieved continuations (per source) passing
//! through that node. Draft paths are ranked by the sum of their node
//! weights; ties go to the lexicographically smaller token sequence.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::datastore::RetrievalResult;
use crate::token::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DraftError {
    #[error("no retrieved continuations to build a draft from")]
    EmptyDraft,
    #[error("invalid draft tree: {0}")]
    InvalidTree(String),
}

#[derive(Clone, Debug)]
pub struct TrieNode {
    pub token: TokenId,
    pub count_repo: u64,
    pub count_common: u64,
    pub weight: f64,
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: BTreeMap<TokenId, usize>,
}

/// Arena trie; node 0 is the virtual root.
#[derive(Clone, Debug)]
pub struct WeightedTrie {
    nodes: Vec<TrieNode>,
}

impl WeightedTrie {
    pub fn node(&self, i: usize) -> &TrieNode {
        &self.nodes[i]
    }

    /// Number of real nodes (root excluded).
    pub fn len(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Node reached by following `path` from the root.
    pub fn find(&self, path: &[TokenId]) -> Option<&TrieNode> {
        let mut cur = 0;
        for t in path {
            cur = *self.nodes[cur].children.get(t)?;
        }
        (cur != 0).then(|| &self.nodes[cur])
    }

    fn path_to(&self, mut i: usize) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.nodes[i].depth);
        while i != 0 {
            path.push(self.nodes[i].token);
            i = self.nodes[i].parent.expect("non-root node has a parent");
        }
        path.reverse();
        path
    }
}

pub fn build_trie(
    repo: &RetrievalResult,
    common: &RetrievalResult,
    alpha: f64,
    beta: f64,
) -> Result<WeightedTrie, DraftError> {
    if repo.is_empty() && common.is_empty() {
        return Err(DraftError::EmptyDraft);
    }
    let mut nodes = vec![TrieNode {
        token: TokenId(u32::MAX),
        count_repo: 0,
        count_common: 0,
        weight: 0.0,
        parent: None,
        depth: 0,
        children: BTreeMap::new(),
    }];
    for cont in repo.continuations.iter().chain(&common.continuations) {
        let mut cur = 0;
        for &tok in &cont.tokens {
            let next = match nodes[cur].children.get(&tok) {
                Some(&n) => n,
                None => {
                    let n = nodes.len();
                    let depth = nodes[cur].depth + 1;
                    nodes.push(TrieNode {
                        token: tok,
                        count_repo: 0,
                        count_common: 0,
                        weight: 0.0,
                        parent: Some(cur),
                        depth,
                        children: BTreeMap::new(),
                    });
                    nodes[cur].children.insert(tok, n);
                    n
                }
            };
            nodes[next].count_repo += u64::from(cont.count_repo);
            nodes[next].count_common += u64::from(cont.count_common);
            cur = next;
        }
    }
    for n in nodes.iter_mut().skip(1) {
        n.weight = alpha * n.count_repo as f64 + beta * n.count_common as f64;
    }
    Ok(WeightedTrie { nodes })
}

/// Row-major N x N boolean matrix stored as bitsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl AttentionMask {
    fn zeros(n: usize) -> Self {
        let words = n.div_ceil(64);
        AttentionMask {
            n,
            words,
            bits: vec![0; n * words],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        assert!(i < self.n && j < self.n);
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    fn copy_row(&mut self, from: usize, to: usize) {
        let (w, f, t) = (self.words, from * self.words, to * self.words);
        self.bits.copy_within(f..f + w, t);
    }

    /// Row `i` as a string of `0`/`1`, column 0 first.
    pub fn row_bits(&self, i: usize) -> String {
        (0..self.n)
            .map(|j| if self.get(i, j) { '1' } else { '0' })
            .collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

/// Flattened draft: nodes in breadth-first order, parents before children.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftTree {
    tokens: Vec<TokenId>,
    parents: Vec<Option<usize>>,
    positions: Vec<usize>,
    mask: AttentionMask,
}

impl DraftTree {
    pub fn empty() -> Self {
        DraftTree {
            tokens: Vec::new(),
            parents: Vec::new(),
            positions: Vec::new(),
            mask: AttentionMask::zeros(0),
        }
    }

    /// Builds a tree from parent links; requires `parents[i] < i`.
    pub fn from_parents(
        tokens: Vec<TokenId>,
        parents: Vec<Option<usize>>,
    ) -> Result<Self, DraftError> {
        if tokens.len() != parents.len() {
            return Err(DraftError::InvalidTree(
                "tokens/parents length mismatch".into(),
            ));
        }
        for (i, p) in parents.iter().enumerate() {
            if p.is_some_and(|p| p >= i) {
                return Err(DraftError::InvalidTree(format!(
                    "node {i} has parent {p:?}"
                )));
            }
        }
        let positions = depth_offsets(&parents);
        let mask = ancestor_mask(&parents);
        Ok(DraftTree {
            tokens,
            parents,
            positions,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Maximum depth, 0 for the empty tree.
    pub fn depth(&self) -> usize {
        self.positions.iter().map(|p| p + 1).max().unwrap_or(0)
    }

    /// Tokens on the root-to-node path ending at `i`.
    pub fn path(&self, i: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.positions[i] + 1);
        let mut cur = Some(i);
        while let Some(c) = cur {
            out.push(self.tokens[c]);
            cur = self.parents[c];
        }
        out.reverse();
        out
    }

    /// Child indices of every node, plus the depth-1 nodes under `None`.
    pub fn children(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut roots = Vec::new();
        let mut kids = vec![Vec::new(); self.len()];
        for (i, p) in self.parents.iter().enumerate() {
            match p {
                Some(p) => kids[*p].push(i),
                None => roots.push(i),
            }
        }
        (roots, kids)
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Dump {
            tokens: Vec<u32>,
            parents: Vec<i64>,
            positions: Vec<usize>,
            mask: Vec<String>,
        }
        let dump = Dump {
            tokens: self.tokens.iter().map(|t| t.0).collect(),
            parents: self
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            positions: self.positions.clone(),
            mask: (0..self.len()).map(|i| self.mask.row_bits(i)).collect(),
        };
        serde_json::to_value(dump).expect("draft tree serializes")
    }
}

/// `mask[i][j]` is set iff `j == i` or `j` is an ancestor of `i`.
pub fn tree_mask(tree: &DraftTree) -> AttentionMask {
    ancestor_mask(&tree.parents)
}

/// Depth offset of each node; depth-1 nodes sit at offset 0.
pub fn position_offsets(tree: &DraftTree) -> Vec<usize> {
    depth_offsets(&tree.parents)
}

fn ancestor_mask(parents: &[Option<usize>]) -> AttentionMask {
    let mut mask = AttentionMask::zeros(parents.len());
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = *p {
            mask.copy_row(p, i);
        }
        mask.set(i, i);
    }
    mask
}

fn depth_offsets(parents: &[Option<usize>]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(parents.len());
    for p in parents {
        let d = p.map_or(0, |p| out[p] + 1);
        out.push(d);
    }
    out
}

/// Picks the top `k` leaf paths by summed node weight and flattens their
/// union, keeping at most `budget` nodes.
pub fn select_top_k(trie: &WeightedTrie, k: usize, budget: usize) -> DraftTree {
    if trie.is_empty() || k == 0 || budget == 0 {
        return DraftTree::empty();
    }
    let nodes = &trie.nodes;
    // path weight of each node = sum of weights from depth 1 down to it
    let mut path_weight = vec![0.0; nodes.len()];
    for i in 1..nodes.len() {
        let p = nodes[i].parent.expect("non-root");
        path_weight[i] = path_weight[p] + nodes[i].weight;
    }
    let mut leaves: Vec<(f64, Vec<TokenId>, usize)> = (1..nodes.len())
        .filter(|&i| nodes[i].children.is_empty())
        .map(|i| (path_weight[i], trie.path_to(i), i))
        .collect();
    leaves.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

    let mut selected = vec![false; nodes.len()];
    for (_, _, leaf) in leaves.iter().take(k) {
        let mut cur = *leaf;
        while cur != 0 && !selected[cur] {
            selected[cur] = true;
            cur = nodes[cur].parent.expect("non-root");
        }
    }

    // breadth-first order over the trie, children by token id
    let mut bfs = Vec::new();
    let mut frontier = vec![0usize];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &n in &frontier {
            for &c in nodes[n].children.values() {
                if selected[c] {
                    bfs.push(c);
                    next.push(c);
                }
            }
        }
        frontier = next;
    }

    if bfs.len() > budget {
        let mut rank: Vec<usize> = (0..bfs.len()).collect();
        rank.sort_by(|&a, &b| {
            nodes[bfs[b]]
                .weight
                .total_cmp(&nodes[bfs[a]].weight)
                .then(a.cmp(&b))
        });
        let mut keep = vec![false; nodes.len()];
        let mut kept = 0;
        // one pass suffices when weights are non-increasing with depth; the
        // loop repeats to stay ancestor-closed otherwise
        while kept < budget {
            let before = kept;
            for &r in &rank {
                let n = bfs[r];
                if kept == budget {
                    break;
                }
                if keep[n] {
                    continue;
                }
                let parent = nodes[n].parent.expect("non-root");
                if parent == 0 || keep[parent] {
                    keep[n] = true;
                    kept += 1;
                }
            }
            if kept == before {
                break;
            }
        }
        bfs.retain(|&n| keep[n]);
    }

    let mut slot = vec![usize::MAX; nodes.len()];
    let mut tokens = Vec::with_capacity(bfs.len());
    let mut parents = Vec::with_capacity(bfs.len());
    for (i, &n) in bfs.iter().enumerate() {
        slot[n] = i;
        tokens.push(nodes[n].token);
        let p = nodes[n].parent.expect("non-root");
        parents.push((p != 0).then(|| slot[p]));
    }
    DraftTree::from_parents(tokens, parents).expect("bfs order is topological")
}
