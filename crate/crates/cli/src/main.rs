mod config;

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use codedraft::bench::{
    run_bench, run_heatmap, write_bench_csv, write_timing_csv, AblationAxis, BenchError,
    BenchOptions, HeatmapOptions, RunManifest, Suite,
};
use codedraft::cache::dump_session;
use codedraft::datastore::{
    build_common, build_repo, Datastore, DatastoreError, ExcludedSpan, IndexParams, SourceIndex,
};
use codedraft::engine::{autoregressive_generate, compute_metrics, Engine, EngineError, StepTrace};
use codedraft::model::{train_ngram, DelayedModel, ReferenceNgramModel};
use codedraft::{sha256_hex, Vocabulary};
use serde::Serialize;

use config::EngineArgs;

const EXIT_USAGE: u8 = 2;
const EXIT_EQUIVALENCE: u8 = 3;

/// Error carrying a specific exit code. Anything else exits with 2.
#[derive(Debug)]
struct Coded {
    code: u8,
    msg: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Coded {}

fn coded(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Coded {
        code,
        msg: msg.into(),
    }
    .into()
}

#[derive(Parser)]
#[command(
    name = "codedraft",
    version,
    about = "Retrieval-based speculative decoding for code"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a repository and/or common-code files into a datastore.
    BuildDatastore(BuildArgs),
    /// Train the reference n-gram target model.
    TrainModel(TrainArgs),
    /// Generate a continuation of a prompt.
    Generate(GenerateArgs),
    /// Run a suite under one or more ablation configurations.
    Bench(BenchArgs),
    /// Retrieval-success and whitespace rates by line and token position.
    Heatmap(HeatmapArgs),
}

#[derive(clap::Args)]
struct BuildArgs {
    /// Repository root, indexed as the repository source.
    #[arg(long)]
    repo: Option<PathBuf>,
    /// Files indexed as the common-code source.
    #[arg(long, num_args = 1..)]
    common: Vec<PathBuf>,
    /// Spans withheld from the repository: `path<TAB>start_byte<TAB>end_byte` per line.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = IndexParams::default().n_max)]
    n_max: usize,
    #[arg(long, default_value_t = IndexParams::default().cont_len)]
    cont_len: usize,
    #[arg(long, default_value_t = IndexParams::default().cap_positions)]
    cap_positions: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training text files.
    #[arg(long, num_args = 1.., required = true)]
    corpus: Vec<PathBuf>,
    /// Start from this datastore's vocabulary so ids agree with it.
    #[arg(long)]
    datastore: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// Token surface that ends generation when emitted.
    #[arg(long)]
    end_token: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct Artifacts {
    #[arg(long)]
    datastore: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Simulated cost of one model forward step, in microseconds.
    #[arg(long, default_value_t = 0)]
    forward_cost_us: u64,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[command(flatten)]
    artifacts: Artifacts,
    #[arg(long)]
    prompt: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// Print a JSON object with the text and generation metrics.
    #[arg(long)]
    json: bool,
    /// Also decode autoregressively and fail with exit 3 on any difference.
    #[arg(long)]
    verify_equivalence: bool,
    /// Write one JSON step trace per line.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write each verified draft tree as one JSON line.
    #[arg(long)]
    dump_drafts: Option<PathBuf>,
    /// Write the cache and missing table as JSON lines after generation.
    #[arg(long)]
    dump_session: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    Datastore,
    Cache,
    Strategy,
    All,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[command(flatten)]
    artifacts: Artifacts,
    /// Directory of NAME.prompt files with optional NAME.context files.
    #[arg(long)]
    suite: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    /// Compare the baseline with one component added, or run all eight
    /// combinations. Without it only the full configuration runs.
    #[arg(long, value_enum)]
    ablate: Option<Ablate>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for manifest.json, bench.csv and timings.csv.
    #[arg(long)]
    out: PathBuf,
    /// Rerun with a previous manifest's settings and check the outputs match.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(clap::Args)]
struct HeatmapArgs {
    #[command(flatten)]
    artifacts: Artifacts,
    #[arg(long)]
    suite: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    max_token_index: usize,
    #[arg(long, default_value_t = 20)]
    max_lines: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::BuildDatastore(a) => build_datastore(a),
        Command::TrainModel(a) => train_model(a),
        Command::Generate(a) => generate(a),
        Command::Bench(a) => bench(a),
        Command::Heatmap(a) => heatmap(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Coded>().map_or(EXIT_USAGE, |c| c.code);
            ExitCode::from(code)
        }
    }
}

fn build_datastore(a: BuildArgs) -> Result<()> {
    if a.repo.is_none() && a.common.is_empty() {
        bail!("nothing to index: pass --repo and/or --common");
    }
    let params = IndexParams {
        n_max: a.n_max,
        cont_len: a.cont_len,
        cap_positions: a.cap_positions,
    };
    params.validate()?;
    let start = Instant::now();
    let mut vocab = Vocabulary::new();
    let repo = match &a.repo {
        Some(root) => {
            let spans = match &a.exclude {
                Some(p) => ExcludedSpan::parse_list(&read_text(p)?)?,
                None => Vec::new(),
            };
            Some(build_repo(root, &spans, &mut vocab, params)?)
        }
        None => None,
    };
    let common = if a.common.is_empty() {
        SourceIndex::empty(params)
    } else {
        let texts = a
            .common
            .iter()
            .map(|p| read_text(p))
            .collect::<Result<Vec<_>>>()?;
        match build_common(&texts, &mut vocab, params) {
            // An all-empty common set is fine when the repository has text.
            Err(DatastoreError::EmptyCorpus) if repo.is_some() => SourceIndex::empty(params),
            r => r?,
        }
    };
    let ds = Datastore::new(vocab, params, repo, common)?;
    ds.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    println!("tokens: {}", ds.token_count());
    println!("vocabulary: {}", ds.vocab().len());
    println!("build_ms: {ms:.1}");
    Ok(())
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn load_datastore(p: &Path) -> Result<Datastore> {
    let (ds, rebuilt) =
        Datastore::load(p).with_context(|| format!("loading datastore {}", p.display()))?;
    if rebuilt {
        eprintln!(
            "note: {} was written by another format version; index rebuilt",
            p.display()
        );
    }
    Ok(ds)
}

fn train_model(a: TrainArgs) -> Result<()> {
    let mut vocab = match &a.datastore {
        Some(p) => load_datastore(p)?.vocab().clone(),
        None => Vocabulary::new(),
    };
    let mut seqs = Vec::with_capacity(a.corpus.len());
    for p in &a.corpus {
        seqs.push(vocab.tokenize_extend(&read_text(p)?).ids().to_vec());
    }
    let end = a.end_token.as_deref().map(|s| vocab.intern(s));
    let model = train_ngram(&seqs, a.order, end)?;
    model
        .save(&a.out, &vocab)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("tokens: {}", seqs.iter().map(Vec::len).sum::<usize>());
    println!("vocabulary: {}", vocab.len());
    Ok(())
}

/// Loaded datastore and model with a vocabulary covering both.
struct Loaded {
    ds: Datastore,
    model: ReferenceNgramModel,
    model_digest: String,
    vocab: Vocabulary,
    forward_cost: Duration,
}

fn load_artifacts(a: &Artifacts) -> Result<Loaded> {
    let ds = load_datastore(&a.datastore)?;
    let bytes = fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let (model, model_vocab) = ReferenceNgramModel::read_from(&mut bytes.as_slice())
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let vocab = if ds.vocab().is_prefix_of(&model_vocab) {
        model_vocab
    } else if model_vocab.is_prefix_of(ds.vocab()) {
        ds.vocab().clone()
    } else {
        bail!("model and datastore vocabularies disagree; train the model with --datastore");
    };
    Ok(Loaded {
        ds,
        model,
        model_digest: sha256_hex(&bytes),
        vocab,
        forward_cost: Duration::from_micros(a.forward_cost_us),
    })
}

#[derive(Serialize)]
struct GenerateReport<'a> {
    text: &'a str,
    metrics: &'a codedraft::engine::GenerationMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<codedraft::engine::MetricsReport>,
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = a.engine.resolve()?;
    let l = load_artifacts(&a.artifacts)?;
    let mut vocab = l.vocab.clone();
    let prompt = vocab.tokenize_extend(&read_text(&a.prompt)?);

    let mut traces: Vec<String> = Vec::new();
    let mut drafts: Vec<String> = Vec::new();
    let mut engine = Engine::new(&l.ds, &vocab, cfg.clone())?;
    let mut model = DelayedModel {
        inner: l.model.session(),
        per_step: l.forward_cost,
    };
    let keep_drafts = a.dump_drafts.is_some();
    let gen = engine.generate_with(&mut model, &prompt, |t: &StepTrace, tree| {
        traces.push(serde_json::to_string(t).expect("trace serializes"));
        if keep_drafts {
            drafts.push(tree.to_json().to_string());
        }
    })?;

    let comparison = if a.verify_equivalence {
        let mut ar_model = DelayedModel {
            inner: l.model.session(),
            per_step: l.forward_cost,
        };
        let ar = autoregressive_generate(&mut ar_model, &vocab, &prompt, cfg.max_new_tokens);
        match compute_metrics(&gen, &ar) {
            Ok(m) => Some(m),
            Err(e @ EngineError::MismatchedOutputs { .. }) => {
                return Err(coded(EXIT_EQUIVALENCE, e.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };

    if let Some(p) = &a.trace {
        write_lines(p, &traces)?;
    }
    if let Some(p) = &a.dump_drafts {
        write_lines(p, &drafts)?;
    }
    if let Some(p) = &a.dump_session {
        let mut w = BufWriter::new(
            fs::File::create(p).with_context(|| format!("writing {}", p.display()))?,
        );
        dump_session(&mut w, &engine.session().cache, &engine.session().missing)?;
        w.flush()?;
    }

    let text = vocab.detokenize(gen.tokens.ids());
    let mut out = io::stdout().lock();
    if a.json {
        let report = GenerateReport {
            text: &text,
            metrics: &gen.metrics,
            comparison,
        };
        serde_json::to_writer(&mut out, &report)?;
        writeln!(out)?;
    } else {
        out.write_all(text.as_bytes())?;
        if let Some(m) = comparison {
            eprintln!(
                "equivalent: yes; L/F {}; speedup {}",
                fmt_opt(m.acceptance_length),
                fmt_opt(m.speedup)
            );
        }
    }
    Ok(())
}

fn write_lines(p: &Path, lines: &[String]) -> Result<()> {
    let mut w =
        BufWriter::new(fs::File::create(p).with_context(|| format!("writing {}", p.display()))?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn bench_error(e: BenchError) -> anyhow::Error {
    match e {
        BenchError::Partial {
            total,
            errors,
            mismatches,
        } => {
            for m in &errors {
                eprintln!("failed: {m}");
            }
            let code = if mismatches > 0 { EXIT_EQUIVALENCE } else { 1 };
            coded(code, format!("{} of {total} samples failed", errors.len()))
        }
        e => e.into(),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let l = load_artifacts(&a.artifacts)?;
    let suite = Suite::load(&a.suite)?;
    let replay: Option<RunManifest> = match &a.replay {
        Some(p) => Some(
            serde_json::from_str(&read_text(p)?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    let opts = match &replay {
        Some(m) => {
            if m.model_digest != l.model_digest {
                bail!("model digest differs from the manifest");
            }
            BenchOptions {
                config: m.config.clone(),
                seed: m.seed,
                ablate: m.ablate,
                forward_cost: Duration::from_micros(m.forward_cost_us),
            }
        }
        None => BenchOptions {
            config: a.engine.resolve()?,
            seed: a.seed,
            ablate: match a.ablate {
                None => AblationAxis::None,
                Some(Ablate::Datastore) => AblationAxis::Datastore,
                Some(Ablate::Cache) => AblationAxis::Cache,
                Some(Ablate::Strategy) => AblationAxis::Strategy,
                Some(Ablate::All) => AblationAxis::All,
            },
            forward_cost: l.forward_cost,
        },
    };
    let model = &l.model;
    let manifest = run_bench(
        &l.ds,
        &l.vocab,
        || model.session(),
        &l.model_digest,
        &suite,
        &opts,
    )
    .map_err(bench_error)?;
    if let Some(m) = &replay {
        if m.datastore_digest != manifest.datastore_digest {
            bail!("datastore digest differs from the manifest");
        }
        let key = |r: &codedraft::bench::SampleResult| {
            (
                r.config.clone(),
                r.sample.clone(),
                r.seed,
                r.output_digest.clone(),
                r.forward_steps,
            )
        };
        let same = m.samples.len() == manifest.samples.len()
            && m.samples
                .iter()
                .zip(&manifest.samples)
                .all(|(x, y)| key(x) == key(y));
        if !same {
            return Err(coded(1, "replay diverged from the manifest"));
        }
        eprintln!("replay matches manifest");
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(
        a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let mut csv = Vec::new();
    write_bench_csv(&mut csv, &manifest)?;
    fs::write(a.out.join("bench.csv"), csv)?;
    let mut csv = Vec::new();
    write_timing_csv(&mut csv, &manifest)?;
    fs::write(a.out.join("timings.csv"), csv)?;

    println!(
        "{:<24} {:>8} {:>8} {:>10} {:>10} {:>8}",
        "config", "tokens", "steps", "L/F", "ms/token", "speedup"
    );
    for g in &manifest.aggregates {
        println!(
            "{:<24} {:>8} {:>8} {:>10} {:>10} {:>8}",
            g.config,
            g.tokens,
            g.forward_steps,
            fmt_opt(g.mean_acceptance_length),
            fmt_opt(g.mean_ms_per_token),
            fmt_opt(g.mean_speedup)
        );
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    if a.max_token_index == 0 || a.max_lines == 0 {
        bail!("--max-token-index and --max-lines must be >= 1");
    }
    let cfg = a.engine.resolve()?;
    let l = load_artifacts(&a.artifacts)?;
    let suite = Suite::load(&a.suite)?;
    let model = &l.model;
    let run = run_heatmap(
        &l.ds,
        &l.vocab,
        || DelayedModel {
            inner: model.session(),
            per_step: l.forward_cost,
        },
        &suite,
        &HeatmapOptions {
            config: cfg,
            seed: a.seed,
            max_lines: a.max_lines,
            max_token_index: a.max_token_index,
        },
    )?;
    let mut buf = Vec::new();
    run.heatmap.write_csv(&mut buf)?;
    match &a.out {
        Some(p) => fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().lock().write_all(&buf)?,
    }
    eprintln!(
        "retrieved at skip positions: {} ({} tokens); elsewhere: {} ({} tokens)",
        fmt_opt(run.split.skip_rate()),
        run.split.skip_total,
        fmt_opt(run.split.other_rate()),
        run.split.other_total
    );
    Ok(())
}
