//! Target-model contract, greedy verification, and a reference n-gram model.
//!
//! A [`TargetModel`] scores a whole draft tree in one forward step. The
//! prediction at each node may depend only on the context plus the tokens on
//! that node's root path, which is what the tree attention mask enforces in a
//! transformer. [`verify`] then walks the tree from the root, accepting the
//! child that matches the model's greedy choice until none does.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::binio::{read_n_tokens, read_u32, read_vocab, write_len, write_u32, write_vocab};
use crate::draft_tree::DraftTree;
use crate::token::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("n-gram order must be >= 1")]
    InvalidOrder,
    #[error("predictions cover {got} nodes, tree has {want}")]
    MismatchedPredictions { got: usize, want: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Greedy next-token predictions for one draft tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predictions {
    /// Next token given the context alone.
    pub at_root: TokenId,
    /// Next token given the context plus the path through each node.
    pub at_node: Vec<TokenId>,
}

pub trait TargetModel {
    /// One forward step over `context` extended by every path of `tree`.
    fn predict_tree(&mut self, context: &[TokenId], tree: &DraftTree) -> Predictions;

    /// Forward steps taken so far.
    fn forward_count(&self) -> u64;

    /// Token that terminates generation, if the model has one.
    fn end_token(&self) -> Option<TokenId> {
        None
    }
}

impl<M: TargetModel + ?Sized> TargetModel for &mut M {
    fn predict_tree(&mut self, context: &[TokenId], tree: &DraftTree) -> Predictions {
        (**self).predict_tree(context, tree)
    }

    fn forward_count(&self) -> u64 {
        (**self).forward_count()
    }

    fn end_token(&self) -> Option<TokenId> {
        (**self).end_token()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationResult {
    pub accepted: Vec<TokenId>,
    pub bonus: TokenId,
    /// Tree indices of the accepted nodes, root side first.
    pub accepted_nodes: Vec<usize>,
}

/// Accepts the longest root path whose tokens match the model's greedy
/// predictions, plus the prediction at the first mismatch.
pub fn verify(tree: &DraftTree, preds: &Predictions) -> Result<VerificationResult, ModelError> {
    if preds.at_node.len() != tree.len() {
        return Err(ModelError::MismatchedPredictions {
            got: preds.at_node.len(),
            want: tree.len(),
        });
    }
    let (roots, kids) = tree.children();
    let tokens = tree.tokens();
    let mut accepted = Vec::new();
    let mut accepted_nodes = Vec::new();
    let mut want = preds.at_root;
    let mut candidates = &roots;
    while let Some(&hit) = candidates.iter().find(|&&c| tokens[c] == want) {
        accepted.push(tokens[hit]);
        accepted_nodes.push(hit);
        want = preds.at_node[hit];
        candidates = &kids[hit];
    }
    Ok(VerificationResult {
        accepted,
        bonus: want,
        accepted_nodes,
    })
}

/// Count-based n-gram model with deterministic greedy argmax.
///
/// Only full `(order - 1)`-token contexts are looked up; anything else falls
/// back to the most frequent unigram. Ties go to the smallest token id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceNgramModel {
    order: usize,
    counts: HashMap<Vec<TokenId>, BTreeMap<TokenId, u32>>,
    unigrams: BTreeMap<TokenId, u64>,
    argmax: HashMap<Vec<TokenId>, TokenId>,
    fallback: TokenId,
    end_token: Option<TokenId>,
}

fn argmax<C: Copy + Ord>(counts: &BTreeMap<TokenId, C>) -> Option<TokenId> {
    // BTreeMap iterates ids ascending; strict > keeps the smallest on ties
    let mut best: Option<(TokenId, C)> = None;
    for (&t, &c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((t, c));
        }
    }
    best.map(|(t, _)| t)
}

pub fn train_ngram<I, S>(
    corpus: I,
    order: usize,
    end_token: Option<TokenId>,
) -> Result<ReferenceNgramModel, ModelError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[TokenId]>,
{
    if order == 0 {
        return Err(ModelError::InvalidOrder);
    }
    let mut counts: HashMap<Vec<TokenId>, BTreeMap<TokenId, u32>> = HashMap::new();
    let mut unigrams: BTreeMap<TokenId, u64> = BTreeMap::new();
    for seq in corpus {
        let seq = seq.as_ref();
        for &t in seq {
            *unigrams.entry(t).or_default() += 1;
        }
        if order > 1 {
            for w in seq.windows(order) {
                let (ctx, next) = w.split_at(order - 1);
                *counts
                    .entry(ctx.to_vec())
                    .or_default()
                    .entry(next[0])
                    .or_default() += 1;
            }
        }
    }
    ReferenceNgramModel::from_counts(order, counts, unigrams, end_token)
}

impl ReferenceNgramModel {
    fn from_counts(
        order: usize,
        counts: HashMap<Vec<TokenId>, BTreeMap<TokenId, u32>>,
        unigrams: BTreeMap<TokenId, u64>,
        end_token: Option<TokenId>,
    ) -> Result<Self, ModelError> {
        let fallback = argmax(&unigrams).ok_or(ModelError::EmptyCorpus)?;
        let argmax = counts
            .iter()
            .filter_map(|(ctx, c)| argmax(c).map(|t| (ctx.clone(), t)))
            .collect();
        Ok(ReferenceNgramModel {
            order,
            counts,
            unigrams,
            argmax,
            fallback,
            end_token,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn end_token(&self) -> Option<TokenId> {
        self.end_token
    }

    pub fn set_end_token(&mut self, end: Option<TokenId>) {
        self.end_token = end;
    }

    pub fn fallback(&self) -> TokenId {
        self.fallback
    }

    /// Largest token id the model can emit, plus one.
    pub fn id_bound(&self) -> usize {
        self.unigrams
            .keys()
            .next_back()
            .map_or(0, |t| t.index() + 1)
    }

    /// Greedy next token after `context`.
    pub fn predict_next(&self, context: &[TokenId]) -> TokenId {
        let k = self.order - 1;
        if k == 0 || context.len() < k {
            return self.fallback;
        }
        self.argmax
            .get(&context[context.len() - k..])
            .copied()
            .unwrap_or(self.fallback)
    }

    /// A forward-step counting handle over this model.
    pub fn session(&self) -> NgramSession<'_> {
        NgramSession {
            model: self,
            forwards: 0,
        }
    }

    /// Writes the model together with the vocabulary its ids refer to.
    ///
    /// ```text
    /// "FCNG" | version u32 | order u32 | end_token u32 (u32::MAX = none)
    /// vocabulary: count u32, then (len u32, utf-8 bytes) per id
    /// unigrams: count u32, then (token u32, count u32) ascending
    /// contexts: count u32, then per context in sorted order
    ///   order-1 ids, entry count u32, (token u32, count u32) ascending
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W, vocab: &Vocabulary) -> io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, MODEL_VERSION)?;
        write_len(w, self.order)?;
        write_u32(w, self.end_token.map_or(u32::MAX, |t| t.0))?;
        write_vocab(w, vocab)?;
        write_len(w, self.unigrams.len())?;
        for (t, &c) in &self.unigrams {
            write_u32(w, t.0)?;
            let c = u32::try_from(c).map_err(|_| io::Error::other("unigram count exceeds u32"))?;
            write_u32(w, c)?;
        }
        let mut ctxs: Vec<_> = self.counts.keys().collect();
        ctxs.sort();
        write_len(w, ctxs.len())?;
        for ctx in ctxs {
            for t in ctx {
                write_u32(w, t.0)?;
            }
            let entries = &self.counts[ctx];
            write_len(w, entries.len())?;
            for (t, &c) in entries {
                write_u32(w, t.0)?;
                write_u32(w, c)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, Vocabulary), ModelError> {
        let fmt = |e: io::Error| match e.kind() {
            io::ErrorKind::UnexpectedEof | io::ErrorKind::InvalidData => {
                ModelError::Format(e.to_string())
            }
            _ => ModelError::Io(e),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MODEL_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = read_u32(r).map_err(fmt)?;
        if version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let order = read_u32(r).map_err(fmt)? as usize;
        if order == 0 {
            return Err(ModelError::InvalidOrder);
        }
        let end = read_u32(r).map_err(fmt)?;
        let end_token = (end != u32::MAX).then_some(TokenId(end));
        let vocab = read_vocab(r).map_err(fmt)?;
        let mut unigrams = BTreeMap::new();
        for _ in 0..read_u32(r).map_err(fmt)? {
            let t = TokenId(read_u32(r).map_err(fmt)?);
            unigrams.insert(t, u64::from(read_u32(r).map_err(fmt)?));
        }
        let mut counts = HashMap::new();
        for _ in 0..read_u32(r).map_err(fmt)? {
            let ctx = read_n_tokens(r, order - 1).map_err(fmt)?;
            let mut entries = BTreeMap::new();
            for _ in 0..read_u32(r).map_err(fmt)? {
                let t = TokenId(read_u32(r).map_err(fmt)?);
                entries.insert(t, read_u32(r).map_err(fmt)?);
            }
            counts.insert(ctx, entries);
        }
        let model = Self::from_counts(order, counts, unigrams, end_token)?;
        if model.id_bound() > vocab.len() {
            return Err(ModelError::Format("model token outside vocabulary".into()));
        }
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), ModelError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w, vocab)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary), ModelError> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"FCNG";
pub const MODEL_VERSION: u32 = 1;

/// [`TargetModel`] over a shared [`ReferenceNgramModel`].
#[derive(Clone, Debug)]
pub struct NgramSession<'a> {
    model: &'a ReferenceNgramModel,
    forwards: u64,
}

impl TargetModel for NgramSession<'_> {
    fn predict_tree(&mut self, context: &[TokenId], tree: &DraftTree) -> Predictions {
        self.forwards += 1;
        let k = self.model.order - 1;
        let tokens = tree.tokens();
        let parents = tree.parents();
        let mut window = Vec::with_capacity(k);
        let at_node = (0..tree.len())
            .map(|i| {
                // last k tokens of context + path(i), collected backwards
                window.clear();
                let mut cur = Some(i);
                while let Some(c) = cur {
                    if window.len() == k {
                        break;
                    }
                    window.push(tokens[c]);
                    cur = parents[c];
                }
                for &t in context.iter().rev() {
                    if window.len() == k {
                        break;
                    }
                    window.push(t);
                }
                window.reverse();
                self.model.predict_next(&window)
            })
            .collect();
        Predictions {
            at_root: self.model.predict_next(context),
            at_node,
        }
    }

    fn forward_count(&self) -> u64 {
        self.forwards
    }

    fn end_token(&self) -> Option<TokenId> {
        self.model.end_token
    }
}

/// Adds a fixed wall-clock cost to every forward step of the inner model.
#[derive(Clone, Debug)]
pub struct DelayedModel<M> {
    pub inner: M,
    pub per_step: Duration,
}

impl<M: TargetModel> TargetModel for DelayedModel<M> {
    fn predict_tree(&mut self, context: &[TokenId], tree: &DraftTree) -> Predictions {
        if !self.per_step.is_zero() {
            std::thread::sleep(self.per_step);
        }
        self.inner.predict_tree(context, tree)
    }

    fn forward_count(&self) -> u64 {
        self.inner.forward_count()
    }

    fn end_token(&self) -> Option<TokenId> {
        self.inner.end_token()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft_tree::tests::t;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&x| TokenId(x)).collect()
    }

    #[test]
    fn bigram_alternation() {
        let m = train_ngram([ids(&[0, 1, 0, 1])], 2, None).unwrap();
        assert_eq!(m.predict_next(&ids(&[0])), t(1));
        assert_eq!(m.predict_next(&ids(&[1])), t(0));
        // unseen context falls back to the unigram argmax (tie -> smaller id)
        assert_eq!(m.predict_next(&ids(&[7])), t(0));
        assert_eq!(m.predict_next(&[]), t(0));
    }

    #[test]
    fn unigram_order() {
        let m = train_ngram([ids(&[3, 1, 1, 2, 3, 1])], 1, None).unwrap();
        for ctx in [ids(&[]), ids(&[3]), ids(&[1, 2])] {
            assert_eq!(m.predict_next(&ctx), t(1));
        }
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_ngram(Vec::<Vec<TokenId>>::new(), 3, None),
            Err(ModelError::EmptyCorpus)
        ));
        assert!(matches!(
            train_ngram([ids(&[1])], 0, None),
            Err(ModelError::InvalidOrder)
        ));
    }

    #[test]
    fn empty_tree_is_plain_step() {
        let m = train_ngram([ids(&[0, 1, 0, 1])], 2, None).unwrap();
        let mut s = m.session();
        let p = s.predict_tree(&ids(&[0]), &DraftTree::empty());
        assert_eq!(p.at_root, t(1));
        assert!(p.at_node.is_empty());
        assert_eq!(s.forward_count(), 1);
    }

    #[test]
    fn chain_equals_sequential() {
        let m = train_ngram([ids(&[0, 1, 2, 0, 1, 3, 1, 2, 2])], 3, None).unwrap();
        let tree = DraftTree::from_parents(ids(&[1, 2]), vec![None, Some(0)]).unwrap();
        let ctx = ids(&[3, 0]);
        let p = m.session().predict_tree(&ctx, &tree);
        assert_eq!(p.at_root, m.predict_next(&ctx));
        assert_eq!(p.at_node[0], m.predict_next(&ids(&[3, 0, 1])));
        assert_eq!(p.at_node[1], m.predict_next(&ids(&[3, 0, 1, 2])));
    }

    #[test]
    fn branch_never_sees_sibling() {
        let m = train_ngram([ids(&[0, 1, 5, 0, 2, 6])], 2, None).unwrap();
        let tree = DraftTree::from_parents(ids(&[0, 1, 2]), vec![None, Some(0), Some(0)]).unwrap();
        let p = m.session().predict_tree(&ids(&[9]), &tree);
        assert_eq!(p.at_node[1], t(5));
        assert_eq!(p.at_node[2], t(6));
    }

    #[test]
    fn verify_cases() {
        let tree =
            DraftTree::from_parents(ids(&[10, 11, 12]), vec![None, Some(0), Some(0)]).unwrap();
        // first node accepted, no child matches
        let p = Predictions {
            at_root: t(10),
            at_node: ids(&[99, 0, 0]),
        };
        let v = verify(&tree, &p).unwrap();
        assert_eq!(
            (v.accepted, v.bonus, v.accepted_nodes),
            (ids(&[10]), t(99), vec![0])
        );
        // nothing matches at the root
        let p = Predictions {
            at_root: t(7),
            at_node: ids(&[12, 0, 0]),
        };
        let v = verify(&tree, &p).unwrap();
        assert!(v.accepted.is_empty());
        assert_eq!(v.bonus, t(7));
        // full chain
        let chain = DraftTree::from_parents(ids(&[1, 2, 3]), vec![None, Some(0), Some(1)]).unwrap();
        let p = Predictions {
            at_root: t(1),
            at_node: ids(&[2, 3, 4]),
        };
        let v = verify(&chain, &p).unwrap();
        assert_eq!((v.accepted, v.bonus), (ids(&[1, 2, 3]), t(4)));
        // second branch
        let p = Predictions {
            at_root: t(10),
            at_node: ids(&[12, 5, 6]),
        };
        let v = verify(&tree, &p).unwrap();
        assert_eq!(
            (v.accepted, v.bonus, v.accepted_nodes),
            (ids(&[10, 12]), t(6), vec![0, 2])
        );
    }

    #[test]
    fn verify_length_mismatch() {
        let tree = DraftTree::from_parents(ids(&[1]), vec![None]).unwrap();
        let p = Predictions {
            at_root: t(1),
            at_node: vec![],
        };
        assert!(matches!(
            verify(&tree, &p),
            Err(ModelError::MismatchedPredictions { got: 0, want: 1 })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let mut v = Vocabulary::new();
        let seq = v.tokenize_extend("a b a c a b\n");
        let m = train_ngram([seq.ids()], 3, Some(v.get("\n").unwrap())).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf, &v).unwrap();
        assert_eq!(&buf[..4], b"FCNG");
        let (back, vb) = ReferenceNgramModel::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(vb, v);
        let mut again = Vec::new();
        back.write_to(&mut again, &vb).unwrap();
        assert_eq!(again, buf);
        assert!(ReferenceNgramModel::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn tree_predictions_match_per_path(
            corpus in prop::collection::vec(0u32..5, 1..200),
            order in 1usize..5,
            ctx in prop::collection::vec(0u32..5, 0..6),
            picks in prop::collection::vec((any::<prop::sample::Index>(), 0u32..5), 1..64),
        ) {
            let m = train_ngram([ids(&corpus)], order, None).unwrap();
            let parents: Vec<Option<usize>> = picks.iter().enumerate()
                .map(|(i, (ix, _))| { let c = ix.index(i + 1); (c < i).then_some(c) }).collect();
            let tokens = picks.iter().map(|(_, tok)| TokenId(*tok)).collect();
            let tree = DraftTree::from_parents(tokens, parents).unwrap();
            let ctx = ids(&ctx);
            let p = m.session().predict_tree(&ctx, &tree);
            prop_assert_eq!(p.at_root, m.predict_next(&ctx));
            for i in 0..tree.len() {
                let mut full = ctx.clone();
                full.extend(tree.path(i));
                prop_assert_eq!(p.at_node[i], m.predict_next(&full));
            }
        }
    }
}
