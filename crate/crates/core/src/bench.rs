//! Benchmark suites, component ablations, and run manifests.
//!
//! A suite is a directory of `NAME.prompt` files, each optionally paired
//! with `NAME.context`, the repository text indexed as that sample's
//! repository source. Every sample runs once autoregressively and once per
//! ablation configuration; all speculative outputs must equal the
//! autoregressive output.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::sha256_hex;
use crate::datastore::{Datastore, SourceIndex};
use crate::engine::{
    autoregressive_generate, compute_metrics, Engine, EngineConfig, EngineError, Generation,
    RetrievalSource,
};
use crate::model::{DelayedModel, TargetModel};
use crate::report::{token_records, Heatmap, SkipSplit};
use crate::token::{TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("suite {0} has no samples")]
    EmptySuite(String),
    #[error("sample {sample}: {source}")]
    Sample { sample: String, source: EngineError },
    #[error("{} of {total} samples failed", errors.len())]
    Partial {
        total: usize,
        errors: Vec<String>,
        /// Failures where a speculative output diverged from the
        /// autoregressive one.
        mismatches: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub prompt: String,
    pub context: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Suite {
    pub samples: Vec<Sample>,
}

impl Suite {
    pub fn load(dir: &Path) -> Result<Suite, BenchError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "prompt") && path.is_file() {
                if let Some(stem) = path.file_stem() {
                    names.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        names.sort();
        let mut samples = Vec::with_capacity(names.len());
        for name in names {
            let prompt = fs::read_to_string(dir.join(format!("{name}.prompt")))?;
            let ctx_path = dir.join(format!("{name}.context"));
            let context = if ctx_path.is_file() {
                Some(fs::read_to_string(ctx_path)?)
            } else {
                None
            };
            samples.push(Sample {
                name,
                prompt,
                context,
            });
        }
        if samples.is_empty() {
            return Err(BenchError::EmptySuite(dir.display().to_string()));
        }
        Ok(Suite { samples })
    }

    /// Writes the suite in the on-disk layout read by [`Suite::load`].
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for s in &self.samples {
            fs::write(dir.join(format!("{}.prompt", s.name)), &s.prompt)?;
            if let Some(c) = &s.context {
                fs::write(dir.join(format!("{}.context", s.name)), c)?;
            }
        }
        Ok(())
    }
}

/// Which of the three components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Repository index alongside the common index.
    pub datastore: bool,
    /// Skip gate and missing table.
    pub strategy: bool,
    pub cache: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        datastore: false,
        strategy: false,
        cache: false,
    };
    pub const FULL: Ablation = Ablation {
        datastore: true,
        strategy: true,
        cache: true,
    };

    pub fn name(&self) -> String {
        if *self == Self::BASELINE {
            return "baseline".into();
        }
        if *self == Self::FULL {
            return "full".into();
        }
        let mut s = String::new();
        for (on, n) in [
            (self.datastore, "+datastore"),
            (self.strategy, "+strategy"),
            (self.cache, "+cache"),
        ] {
            if on {
                s.push_str(n);
            }
        }
        s
    }

    pub fn apply(&self, cfg: &EngineConfig) -> EngineConfig {
        EngineConfig {
            use_repo: self.datastore,
            use_strategy: self.strategy,
            use_cache: self.cache,
            ..cfg.clone()
        }
    }

    /// All eight combinations, baseline first and full last.
    pub fn all() -> Vec<Ablation> {
        let mut v: Vec<Ablation> = (0..8u8)
            .map(|b| Ablation {
                datastore: b & 1 != 0,
                strategy: b & 2 != 0,
                cache: b & 4 != 0,
            })
            .collect();
        v.sort_by_key(|a| {
            (
                a.datastore as u8 + a.strategy as u8 + a.cache as u8,
                !a.datastore,
                !a.strategy,
            )
        });
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    None,
    Datastore,
    Cache,
    Strategy,
    All,
}

impl AblationAxis {
    /// Configurations to run: the full configuration alone, baseline plus
    /// one component, or every combination.
    pub fn configs(self) -> Vec<Ablation> {
        let one = |a: Ablation| vec![Ablation::BASELINE, a];
        match self {
            AblationAxis::None => vec![Ablation::FULL],
            AblationAxis::Datastore => one(Ablation {
                datastore: true,
                ..Ablation::BASELINE
            }),
            AblationAxis::Strategy => one(Ablation {
                strategy: true,
                ..Ablation::BASELINE
            }),
            AblationAxis::Cache => one(Ablation {
                cache: true,
                ..Ablation::BASELINE
            }),
            AblationAxis::All => Ablation::all(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub cache: usize,
    pub datastore: usize,
    pub skipped_missing: usize,
    pub skipped_probability: usize,
    pub none: usize,
}

impl SourceCounts {
    fn of(g: &Generation) -> Self {
        let mut c = SourceCounts::default();
        for t in &g.metrics.traces {
            match t.retrieval_source {
                RetrievalSource::Cache => c.cache += 1,
                RetrievalSource::Datastore => c.datastore += 1,
                RetrievalSource::SkippedMissing => c.skipped_missing += 1,
                RetrievalSource::SkippedProbability => c.skipped_probability += 1,
                RetrievalSource::None => c.none += 1,
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub config: String,
    pub sample: String,
    pub seed: u64,
    pub tokens: usize,
    pub forward_steps: usize,
    pub acceptance_length: Option<f64>,
    pub sources: SourceCounts,
    pub output_digest: String,
    pub ms_per_token: Option<f64>,
    pub ar_ms_per_token: Option<f64>,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config: String,
    pub samples: usize,
    pub tokens: usize,
    pub forward_steps: usize,
    pub mean_acceptance_length: Option<f64>,
    pub mean_ms_per_token: Option<f64>,
    pub mean_speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: EngineConfig,
    pub seed: u64,
    pub ablate: AblationAxis,
    pub forward_cost_us: u64,
    pub datastore_digest: String,
    pub model_digest: String,
    pub samples: Vec<SampleResult>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub config: EngineConfig,
    pub seed: u64,
    pub ablate: AblationAxis,
    /// Simulated cost of one model forward step.
    pub forward_cost: Duration,
}

/// Per-sample seeds: successive draws of ChaCha8 seeded with `seed`.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn digest_tokens(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids.iter().flat_map(|t| t.0.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Tokenized prompt and per-sample repository index.
struct Prepared {
    vocab: Vocabulary,
    prompt: TokenSequence,
    repo: Option<SourceIndex>,
}

fn prepare(ds: &Datastore, vocab: &Vocabulary, sample: &Sample) -> Prepared {
    let mut vocab = vocab.clone();
    let prompt = vocab.tokenize_extend(&sample.prompt);
    let repo = sample.context.as_ref().map(|c| {
        let ids = vocab.tokenize_extend(c);
        SourceIndex::from_segments([ids.ids()], ds.params())
    });
    Prepared {
        vocab,
        prompt,
        repo,
    }
}

fn run_one<M: TargetModel>(
    ds: &Datastore,
    prep: &Prepared,
    cfg: EngineConfig,
    model: &mut M,
) -> Result<Generation, EngineError> {
    let repo = prep.repo.as_ref().or(ds.repo());
    Engine::new(ds, &prep.vocab, cfg)?
        .with_repo(repo)
        .generate(model, &prep.prompt)
}

/// Runs every sample under every configuration of `opts.ablate`.
pub fn run_bench<F, M>(
    ds: &Datastore,
    vocab: &Vocabulary,
    make_model: F,
    model_digest: &str,
    suite: &Suite,
    opts: &BenchOptions,
) -> Result<RunManifest, BenchError>
where
    F: Fn() -> M + Sync,
    M: TargetModel,
{
    if suite.samples.is_empty() {
        return Err(BenchError::EmptySuite("<memory>".into()));
    }
    opts.config.validate().map_err(|e| BenchError::Sample {
        sample: "<config>".into(),
        source: e,
    })?;
    let configs = opts.ablate.configs();
    let seeds = sample_seeds(opts.seed, suite.samples.len());

    // Err carries (is_mismatch, message).
    let per_sample: Vec<Result<Vec<SampleResult>, (bool, String)>> = suite
        .samples
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(sample, &seed)| {
            let prep = prepare(ds, vocab, sample);
            let mut ar_model = DelayedModel {
                inner: make_model(),
                per_step: opts.forward_cost,
            };
            let ar = autoregressive_generate(
                &mut ar_model,
                &prep.vocab,
                &prep.prompt,
                opts.config.max_new_tokens,
            );
            let mut rows = Vec::with_capacity(configs.len());
            for ab in &configs {
                let cfg = EngineConfig {
                    rng_seed: seed,
                    ..ab.apply(&opts.config)
                };
                let mut model = DelayedModel {
                    inner: make_model(),
                    per_step: opts.forward_cost,
                };
                let spec = run_one(ds, &prep, cfg, &mut model)
                    .map_err(|e| (false, format!("{} [{}]: {e}", sample.name, ab.name())))?;
                let m = compute_metrics(&spec, &ar)
                    .map_err(|e| (true, format!("{} [{}]: {e}", sample.name, ab.name())))?;
                rows.push(SampleResult {
                    config: ab.name(),
                    sample: sample.name.clone(),
                    seed,
                    tokens: spec.metrics.emitted,
                    forward_steps: spec.metrics.forward_steps,
                    acceptance_length: m.acceptance_length,
                    sources: SourceCounts::of(&spec),
                    output_digest: digest_tokens(spec.tokens.ids()),
                    ms_per_token: m.decoding_speed,
                    ar_ms_per_token: m.ar_decoding_speed,
                    speedup: m.speedup,
                });
            }
            Ok(rows)
        })
        .collect();

    let total = per_sample.len();
    let failed: Vec<&(bool, String)> = per_sample.iter().filter_map(|r| r.as_ref().err()).collect();
    if !failed.is_empty() {
        return Err(BenchError::Partial {
            total,
            mismatches: failed.iter().filter(|f| f.0).count(),
            errors: failed.iter().map(|f| f.1.clone()).collect(),
        });
    }
    let samples: Vec<SampleResult> = per_sample.into_iter().flat_map(Result::unwrap).collect();
    let aggregates = configs
        .iter()
        .map(|ab| aggregate(&ab.name(), &samples))
        .collect();

    Ok(RunManifest {
        config: opts.config.clone(),
        seed: opts.seed,
        ablate: opts.ablate,
        forward_cost_us: opts.forward_cost.as_micros() as u64,
        datastore_digest: ds.digest(),
        model_digest: model_digest.to_owned(),
        samples,
        aggregates,
    })
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn aggregate(config: &str, rows: &[SampleResult]) -> Aggregate {
    let rows: Vec<&SampleResult> = rows.iter().filter(|r| r.config == config).collect();
    Aggregate {
        config: config.to_owned(),
        samples: rows.len(),
        tokens: rows.iter().map(|r| r.tokens).sum(),
        forward_steps: rows.iter().map(|r| r.forward_steps).sum(),
        mean_acceptance_length: mean(rows.iter().map(|r| r.acceptance_length)),
        mean_ms_per_token: mean(rows.iter().map(|r| r.ms_per_token)),
        mean_speedup: mean(rows.iter().map(|r| r.speedup)),
    }
}

pub const BENCH_HEADER: &str = "config,sample,seed,tokens,forward_steps,acceptance_length,cache_steps,datastore_steps,skipped_missing_steps,skipped_probability_steps,no_retrieval_steps,output_sha256";
pub const TIMING_HEADER: &str = "config,sample,ms_per_token,ar_ms_per_token,speedup";

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.6}"))
}

/// Deterministic per-sample counts, then one `ALL` row per configuration.
pub fn write_bench_csv<W: Write>(w: &mut W, m: &RunManifest) -> io::Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in &m.samples {
        let s = &r.sources;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config,
            r.sample,
            r.seed,
            r.tokens,
            r.forward_steps,
            opt(r.acceptance_length),
            s.cache,
            s.datastore,
            s.skipped_missing,
            s.skipped_probability,
            s.none,
            r.output_digest
        )?;
    }
    for a in &m.aggregates {
        writeln!(
            w,
            "{},ALL,,{},{},{},,,,,,",
            a.config,
            a.tokens,
            a.forward_steps,
            opt(a.mean_acceptance_length)
        )?;
    }
    Ok(())
}

/// Wall-clock figures, kept apart from the deterministic CSV.
pub fn write_timing_csv<W: Write>(w: &mut W, m: &RunManifest) -> io::Result<()> {
    writeln!(w, "{TIMING_HEADER}")?;
    for r in &m.samples {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.config,
            r.sample,
            opt(r.ms_per_token),
            opt(r.ar_ms_per_token),
            opt(r.speedup)
        )?;
    }
    for a in &m.aggregates {
        writeln!(
            w,
            "{},ALL,{},,{}",
            a.config,
            opt(a.mean_ms_per_token),
            opt(a.mean_speedup)
        )?;
    }
    Ok(())
}

/// Aggregated heatmap plus the skip/non-skip split over a suite.
pub struct HeatmapRun {
    pub heatmap: Heatmap,
    pub split: SkipSplit,
}

#[derive(Clone, Debug)]
pub struct HeatmapOptions {
    pub config: EngineConfig,
    pub seed: u64,
    pub max_lines: usize,
    pub max_token_index: usize,
}

pub fn run_heatmap<F, M>(
    ds: &Datastore,
    vocab: &Vocabulary,
    make_model: F,
    suite: &Suite,
    opts: &HeatmapOptions,
) -> Result<HeatmapRun, BenchError>
where
    F: Fn() -> M + Sync,
    M: TargetModel,
{
    if suite.samples.is_empty() {
        return Err(BenchError::EmptySuite("<memory>".into()));
    }
    let seeds = sample_seeds(opts.seed, suite.samples.len());
    let records: Vec<_> = suite
        .samples
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(sample, &seed)| {
            let prep = prepare(ds, vocab, sample);
            let cfg = EngineConfig {
                rng_seed: seed,
                ..opts.config.clone()
            };
            let g = run_one(ds, &prep, cfg, &mut make_model()).map_err(|e| BenchError::Sample {
                sample: sample.name.clone(),
                source: e,
            })?;
            Ok(token_records(&prep.prompt, &g.tokens, &g.metrics.traces))
        })
        .collect::<Result<_, BenchError>>()?;
    let mut heatmap = Heatmap::new(opts.max_lines, opts.max_token_index);
    let mut split = SkipSplit::default();
    for r in &records {
        heatmap.add(r);
        split.add(r);
    }
    Ok(HeatmapRun { heatmap, split })
}

/// Mean acceptance length per configuration name.
pub fn acceptance_by_config(m: &RunManifest) -> BTreeMap<String, f64> {
    m.aggregates
        .iter()
        .filter_map(|a| a.mean_acceptance_length.map(|x| (a.config.clone(), x)))
        .collect()
}
