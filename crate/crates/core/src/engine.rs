//! Decode loop: retrieve drafts, verify them in one forward step, repeat.
//!
//! Each step follows a fixed retrieval order. The session cache is searched
//! first once it is accessible. Otherwise, with the retrieval strategy on, a
//! context whose suffix key is in the missing table skips retrieval, and at
//! the first non-whitespace position of a line retrieval happens only when a
//! uniform draw in `[0, 1)` is `< p`. Remaining steps search the repository
//! and common indexes in parallel; if both come back empty the suffix key is
//! recorded as missing.
//!
//! The skip gate draws from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `rng_seed` at the start of every generation, and only at gated positions.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheParams, MissingTable, RetrievalCache};
use crate::datastore::{par_search, Datastore, RetrievalResult, Source, SourceIndex};
use crate::draft_tree::{build_trie, select_top_k, DraftError, DraftTree};
use crate::model::{verify, ModelError, TargetModel};
use crate::token::{is_skip_position, TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("speculative output diverges from autoregressive output at token {index}")]
    MismatchedOutputs { index: usize },
    #[error(transparent)]
    Draft(#[from] DraftError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Cache activation threshold `l`.
    pub l: usize,
    /// Retrieval probability at skip positions.
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub draft_budget: usize,
    pub n_max: usize,
    pub cont_len: usize,
    /// Output chunk size fed to the cache.
    pub chunk: usize,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
    pub persist_session_state: bool,
    pub max_cache_sequences: usize,
    pub cache_count_side: Source,
    pub flush_on_finish: bool,
    pub use_cache: bool,
    /// Skip gate and missing table.
    pub use_strategy: bool,
    pub use_repo: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            l: 50,
            p: 0.5,
            alpha: 1.0,
            beta: 1.0,
            k: 10,
            draft_budget: 64,
            n_max: 16,
            cont_len: 10,
            chunk: 20,
            max_new_tokens: 512,
            rng_seed: 0,
            persist_session_state: false,
            max_cache_sequences: 1024,
            cache_count_side: Source::Repo,
            flush_on_finish: false,
            use_cache: true,
            use_strategy: true,
            use_repo: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_owned()));
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p must be in [0, 1]");
        }
        if !(self.alpha.is_finite()
            && self.alpha >= 0.0
            && self.beta.is_finite()
            && self.beta >= 0.0)
        {
            return bad("alpha and beta must be finite and >= 0");
        }
        for (name, v) in [
            ("k", self.k),
            ("draft_budget", self.draft_budget),
            ("n_max", self.n_max),
            ("cont_len", self.cont_len),
            ("chunk", self.chunk),
            ("max_cache_sequences", self.max_cache_sequences),
        ] {
            if v == 0 {
                return Err(EngineError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    fn cache_params(&self) -> CacheParams {
        CacheParams {
            activation_threshold: self.l,
            max_sequences: self.max_cache_sequences,
            n_max: self.n_max,
            cont_len: self.cont_len,
            cap_positions: 256,
            chunk: self.chunk,
            count_side: self.cache_count_side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalSource {
    Cache,
    Datastore,
    SkippedMissing,
    SkippedProbability,
    /// Datastore searched without a match, or retrieval disabled.
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub retrieval_source: RetrievalSource,
    pub draft_size: usize,
    /// Draft tokens the model agreed with.
    pub accepted_len: usize,
    /// Tokens appended this step, after end-token and length truncation.
    pub emitted: usize,
    pub skip_position: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    /// Tokens emitted (`L`).
    pub emitted: usize,
    /// Forward steps (`F`).
    pub forward_steps: usize,
    pub wall_ms: f64,
    pub traces: Vec<StepTrace>,
}

impl GenerationMetrics {
    /// `L / F`; `None` before the first forward step.
    pub fn acceptance_length(&self) -> Option<f64> {
        (self.forward_steps > 0).then(|| self.emitted as f64 / self.forward_steps as f64)
    }

    /// Milliseconds per emitted token.
    pub fn decoding_speed(&self) -> Option<f64> {
        (self.emitted > 0).then(|| self.wall_ms / self.emitted as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub metrics: GenerationMetrics,
}

/// Cache and missing table carried by a decode session.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub cache: RetrievalCache,
    pub missing: MissingTable,
}

impl SessionState {
    fn new(cfg: &EngineConfig) -> Self {
        SessionState {
            cache: RetrievalCache::new(cfg.cache_params()),
            missing: MissingTable::new(cfg.n_max),
        }
    }
}

pub struct Engine<'a> {
    repo: Option<&'a SourceIndex>,
    common: &'a SourceIndex,
    vocab: &'a Vocabulary,
    cfg: EngineConfig,
    session: SessionState,
}

impl<'a> Engine<'a> {
    /// `vocab` supplies layout flags for generated tokens; it must cover
    /// every id the model can emit.
    pub fn new(
        ds: &'a Datastore,
        vocab: &'a Vocabulary,
        cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        if cfg.n_max > ds.params().n_max {
            return Err(EngineError::InvalidConfig(format!(
                "n_max {} exceeds the datastore's indexed length {}",
                cfg.n_max,
                ds.params().n_max
            )));
        }
        Ok(Engine {
            repo: ds.repo(),
            common: ds.common(),
            vocab,
            session: SessionState::new(&cfg),
            cfg,
        })
    }

    /// Replaces the repository index for subsequent generations. An index
    /// built with a shorter `n_max` caps the usable match length.
    pub fn with_repo(mut self, repo: Option<&'a SourceIndex>) -> Self {
        self.repo = repo;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn session(&self) -> &SessionState {
        &self.session
    }

    pub fn generate<M: TargetModel>(
        &mut self,
        model: &mut M,
        prompt: &TokenSequence,
    ) -> Result<Generation, EngineError> {
        self.generate_with(model, prompt, |_, _| {})
    }

    /// Like [`Engine::generate`], calling `on_step` after every forward step
    /// with its trace and the draft tree that was verified.
    pub fn generate_with<M, F>(
        &mut self,
        model: &mut M,
        prompt: &TokenSequence,
        mut on_step: F,
    ) -> Result<Generation, EngineError>
    where
        M: TargetModel,
        F: FnMut(&StepTrace, &DraftTree),
    {
        if prompt.is_empty() {
            return Err(EngineError::EmptyPrompt);
        }
        let cfg = self.cfg.clone();
        if !cfg.persist_session_state {
            self.session = SessionState::new(&cfg);
        }
        self.session.cache.begin_output();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let end_token = model.end_token();
        let repo = self.repo.filter(|_| cfg.use_repo);

        let start = Instant::now();
        let mut context = prompt.clone();
        let mut generated = TokenSequence::new();
        let mut traces = Vec::new();
        let mut finished = false;

        while !finished && generated.len() < cfg.max_new_tokens {
            let ctx = context.ids();
            let skip = is_skip_position(&context);
            let session = &mut self.session;

            let mut results = (RetrievalResult::default(), RetrievalResult::default());
            let mut source = RetrievalSource::None;
            if cfg.use_cache && session.cache.accessible() {
                let hit = session.cache.search(ctx);
                if !hit.is_empty() {
                    results.0 = hit;
                    source = RetrievalSource::Cache;
                }
            }
            if source != RetrievalSource::Cache {
                if cfg.use_strategy && session.missing.contains(ctx) {
                    source = RetrievalSource::SkippedMissing;
                } else if cfg.use_strategy && skip && rng.gen::<f64>() >= cfg.p {
                    source = RetrievalSource::SkippedProbability;
                } else {
                    results = par_search(repo, self.common, ctx, cfg.n_max, cfg.cont_len);
                    if results.0.is_empty() && results.1.is_empty() {
                        if cfg.use_strategy {
                            session.missing.add(ctx);
                        }
                    } else {
                        source = RetrievalSource::Datastore;
                    }
                }
            }

            let tree = if results.0.is_empty() && results.1.is_empty() {
                DraftTree::empty()
            } else {
                let trie = build_trie(&results.0, &results.1, cfg.alpha, cfg.beta)?;
                select_top_k(&trie, cfg.k, cfg.draft_budget)
            };

            let preds = model.predict_tree(ctx, &tree);
            let verdict = verify(&tree, &preds)?;

            let mut emit = verdict.accepted.clone();
            emit.push(verdict.bonus);
            if let Some(end) = end_token {
                if let Some(i) = emit.iter().position(|&t| t == end) {
                    emit.truncate(i + 1);
                    finished = true;
                }
            }
            emit.truncate(cfg.max_new_tokens - generated.len());
            let accepted_emitted = verdict.accepted.len().min(emit.len());

            if cfg.use_cache && accepted_emitted > 0 {
                session
                    .cache
                    .insert_verified(ctx, &verdict.accepted[..accepted_emitted]);
            }
            for &t in &emit {
                let meta = self.vocab.meta(t);
                context.push(t, meta);
                generated.push(t, meta);
            }
            if cfg.use_cache {
                session.cache.insert_output(generated.ids());
            }

            let trace = StepTrace {
                step: traces.len(),
                retrieval_source: source,
                draft_size: tree.len(),
                accepted_len: verdict.accepted.len(),
                emitted: emit.len(),
                skip_position: skip,
            };
            on_step(&trace, &tree);
            traces.push(trace);
        }
        if cfg.use_cache && cfg.flush_on_finish {
            self.session.cache.flush_output(generated.ids());
        }

        let metrics = GenerationMetrics {
            emitted: generated.len(),
            forward_steps: traces.len(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            traces,
        };
        Ok(Generation {
            tokens: generated,
            metrics,
        })
    }
}

/// Runs one speculative generation with a fresh session.
pub fn generate<M: TargetModel>(
    model: &mut M,
    datastore: &Datastore,
    vocab: &Vocabulary,
    cfg: &EngineConfig,
    prompt: &TokenSequence,
) -> Result<Generation, EngineError> {
    Engine::new(datastore, vocab, cfg.clone())?.generate(model, prompt)
}

/// Plain greedy decoding: one empty-tree forward step per token.
pub fn autoregressive_generate<M: TargetModel>(
    model: &mut M,
    vocab: &Vocabulary,
    prompt: &TokenSequence,
    max_new_tokens: usize,
) -> Generation {
    let start = Instant::now();
    let end_token = model.end_token();
    let empty = DraftTree::empty();
    let mut context = prompt.clone();
    let mut generated = TokenSequence::new();
    let mut traces = Vec::new();
    while generated.len() < max_new_tokens {
        let skip = is_skip_position(&context);
        let next = model.predict_tree(context.ids(), &empty).at_root;
        let meta = vocab.meta(next);
        context.push(next, meta);
        generated.push(next, meta);
        traces.push(StepTrace {
            step: traces.len(),
            retrieval_source: RetrievalSource::None,
            draft_size: 0,
            accepted_len: 0,
            emitted: 1,
            skip_position: skip,
        });
        if Some(next) == end_token {
            break;
        }
    }
    Generation {
        metrics: GenerationMetrics {
            emitted: generated.len(),
            forward_steps: traces.len(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            traces,
        },
        tokens: generated,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// ms per token, speculative run.
    pub decoding_speed: Option<f64>,
    /// ms per token, autoregressive run.
    pub ar_decoding_speed: Option<f64>,
    pub speedup: Option<f64>,
    pub acceptance_length: Option<f64>,
}

/// Compares a speculative run against an autoregressive run of the same
/// model and prompt. Any token difference is an error.
pub fn compute_metrics(spec: &Generation, ar: &Generation) -> Result<MetricsReport, EngineError> {
    let (a, b) = (spec.tokens.ids(), ar.tokens.ids());
    if a != b {
        let index = a
            .iter()
            .zip(b)
            .position(|(x, y)| x != y)
            .unwrap_or(a.len().min(b.len()));
        return Err(EngineError::MismatchedOutputs { index });
    }
    Ok(metrics_from(&spec.metrics, &ar.metrics))
}

pub(crate) fn metrics_from(spec: &GenerationMetrics, ar: &GenerationMetrics) -> MetricsReport {
    let decoding_speed = spec.decoding_speed();
    let ar_decoding_speed = ar.decoding_speed();
    let speedup = match (decoding_speed, ar_decoding_speed) {
        (Some(s), Some(a)) if s > 0.0 => Some(a / s),
        _ => None,
    };
    MetricsReport {
        decoding_speed,
        ar_decoding_speed,
        speedup,
        acceptance_length: spec.acceptance_length(),
    }
}
