//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use codedraft::bench::{
    run_bench, run_heatmap, write_bench_csv, Ablation, AblationAxis, BenchOptions, HeatmapOptions,
    Sample, Suite,
};
use codedraft::datastore::{
    build_common, suffix_retrieve, Continuation, Datastore, IndexParams, RetrievalResult, Source,
    SourceIndex, SENTINEL,
};
use codedraft::draft_tree::{build_trie, select_top_k, tree_mask, DraftTree};
use codedraft::engine::{autoregressive_generate, Engine, EngineConfig, Generation, StepTrace};
use codedraft::model::{train_ngram, ReferenceNgramModel, TargetModel};
use codedraft::{TokenId, Vocabulary};
use rand::seq::SliceRandom;
use rand::Rng;

use common::{python_corpus, python_file, repetitive_file, rng};

// Pinned thresholds.
const EQUIVALENCE_TRIPLES: usize = 120;
const EQUIVALENCE_MAX_CORPUS: usize = 50_000;
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(60);
const SUFFIX_QUERIES: usize = 1000;
const SUFFIX_MAX_CORPUS: usize = 10_000;
const MASK_TREES: usize = 500;
const MASK_MAX_NODES: usize = 64;
const CONSISTENCY_TREES: usize = 200;
const SELF_COPY_TOKENS: usize = 200;
const SELF_COPY_MIN_ACCEPTANCE: f64 = 1.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("output equivalence", equivalence),
        ("suffix-match oracle", suffix_oracle),
        ("tree-mask oracle", mask_oracle),
        ("mask consistency", mask_consistency),
        ("acceptance floor and gain", acceptance_floor_and_gain),
        ("ablation trend", ablation_trend),
        ("skip-position trend", skip_trend),
        ("determinism", determinism),
        ("forward-step reduction", forward_reduction),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!o.pass);
        println!(
            "criterion {}: {} - {name}: {} [{:.1}s]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn tokenize_all(vocab: &mut Vocabulary, files: &[String]) -> Vec<Vec<TokenId>> {
    files
        .iter()
        .map(|f| vocab.tokenize_extend(f).ids().to_vec())
        .collect()
}

fn same_tokens(a: &Generation, b: &Generation) -> bool {
    a.tokens.ids() == b.tokens.ids()
}

fn equivalence() -> Outcome {
    let start = Instant::now();
    let mut max_corpus = 0;
    let mut drafted_steps = 0usize;
    for trial in 0..EQUIVALENCE_TRIPLES as u64 {
        let mut r = rng(10_000 + trial);
        let files = python_corpus(r.gen(), r.gen_range(1_000..60_000));
        let split = r.gen_range(0..=files.len());
        let params = IndexParams {
            n_max: r.gen_range(1..=16),
            cont_len: r.gen_range(1..=12),
            cap_positions: r.gen_range(1..=256),
        };
        let mut vocab = Vocabulary::new();
        let repo_ids = tokenize_all(&mut vocab, &files[..split]);
        let common_ids = tokenize_all(&mut vocab, &files[split..]);
        let total: usize = repo_ids.iter().chain(&common_ids).map(Vec::len).sum();
        max_corpus = max_corpus.max(total);
        assert!(total <= EQUIVALENCE_MAX_CORPUS, "corpus of {total} tokens");
        let repo = (!repo_ids.is_empty())
            .then(|| SourceIndex::from_segments(repo_ids.iter().map(Vec::as_slice), params));
        let common = SourceIndex::from_segments(common_ids.iter().map(Vec::as_slice), params);
        let ds = Datastore::new(vocab.clone(), params, repo, common).unwrap();

        // Sometimes the model knows the datastore text, sometimes not.
        let mut train = if r.gen_bool(0.5) {
            files.clone()
        } else {
            Vec::new()
        };
        train.extend(python_corpus(r.gen(), r.gen_range(500..5_000)));
        let train_ids = tokenize_all(&mut vocab, &train);
        let end = r.gen_bool(0.3).then(|| vocab.intern("return"));
        let model = train_ngram(&train_ids, r.gen_range(1..=6), end).unwrap();

        let prompt_text = if r.gen_bool(0.8) {
            let f = train.choose(&mut r).unwrap();
            let cut = r.gen_range(1..=f.len().min(400));
            let cut = (cut..=f.len()).find(|&c| f.is_char_boundary(c)).unwrap();
            f[..cut].to_string()
        } else {
            "zz unseen ¤ text\n    ".to_string()
        };
        let prompt = vocab.tokenize_extend(&prompt_text);

        let cfg = EngineConfig {
            l: r.gen_range(0..60),
            p: *[0.0, 0.3, 0.5, 1.0].choose(&mut r).unwrap(),
            alpha: r.gen_range(0.0..3.0),
            beta: r.gen_range(0.0..3.0),
            k: r.gen_range(1..=12),
            draft_budget: r.gen_range(1..=64),
            n_max: r.gen_range(1..=params.n_max),
            cont_len: r.gen_range(1..=12),
            chunk: r.gen_range(1..=30),
            max_new_tokens: r.gen_range(0..300),
            rng_seed: r.gen(),
            persist_session_state: r.gen_bool(0.3),
            max_cache_sequences: r.gen_range(1..=1024),
            cache_count_side: if r.gen_bool(0.5) {
                Source::Repo
            } else {
                Source::Common
            },
            flush_on_finish: r.gen_bool(0.5),
            use_cache: r.gen_bool(0.8),
            use_strategy: r.gen_bool(0.7),
            use_repo: r.gen_bool(0.8),
        };
        let mut engine = Engine::new(&ds, &vocab, cfg.clone()).unwrap();
        // A persisted session is exercised by a second prompt on the same engine.
        let rounds = if cfg.persist_session_state { 2 } else { 1 };
        for round in 0..rounds {
            let spec = engine.generate(&mut model.session(), &prompt).unwrap();
            let ar =
                autoregressive_generate(&mut model.session(), &vocab, &prompt, cfg.max_new_tokens);
            if !same_tokens(&spec, &ar) {
                return outcome(false, format!("triple {trial} round {round} diverged"));
            }
            drafted_steps += spec
                .metrics
                .traces
                .iter()
                .filter(|t| t.accepted_len > 0)
                .count();
        }
    }
    let elapsed = start.elapsed();
    outcome(
        elapsed < EQUIVALENCE_BUDGET,
        format!(
            "{EQUIVALENCE_TRIPLES} triples identical, largest corpus {max_corpus} tokens, {drafted_steps} steps with accepted drafts, {:.1}s of {}s budget",
            elapsed.as_secs_f64(),
            EQUIVALENCE_BUDGET.as_secs()
        ),
    )
}

/// Scans every segment for the longest context suffix, keeping the first
/// `cap` occurrences whose continuation is nonempty.
fn brute_retrieve(
    segments: &[Vec<TokenId>],
    context: &[TokenId],
    n_max: usize,
    params: IndexParams,
    source: Source,
) -> RetrievalResult {
    let longest = n_max.min(params.n_max).min(context.len());
    for n in (1..=longest).rev() {
        let suffix = &context[context.len() - n..];
        let mut conts: Vec<&[TokenId]> = Vec::new();
        for seg in segments {
            for end in n..seg.len() {
                if conts.len() < params.cap_positions && seg[end - n..end] == *suffix {
                    conts.push(&seg[end..seg.len().min(end + params.cont_len)]);
                }
            }
        }
        if conts.is_empty() {
            continue;
        }
        let mut out: Vec<Continuation> = Vec::new();
        for c in conts {
            let i = match out.iter().position(|x| x.tokens == c) {
                Some(i) => i,
                None => {
                    out.push(Continuation {
                        tokens: c.to_vec(),
                        count_repo: 0,
                        count_common: 0,
                    });
                    out.len() - 1
                }
            };
            match source {
                Source::Repo => out[i].count_repo += 1,
                Source::Common => out[i].count_common += 1,
            }
        }
        return RetrievalResult {
            continuations: out,
            match_len: n,
        };
    }
    RetrievalResult::default()
}

fn suffix_oracle() -> Outcome {
    let mut r = rng(20_000);
    let mut nonempty = 0;
    let mut queries = 0;
    while queries < SUFFIX_QUERIES {
        let params = IndexParams {
            n_max: r.gen_range(1..=16),
            cont_len: r.gen_range(1..=12),
            cap_positions: *[1, 2, 5, 32, 256].choose(&mut r).unwrap(),
        };
        let segments: Vec<Vec<TokenId>> = if r.gen_bool(0.5) {
            let mut vocab = Vocabulary::new();
            tokenize_all(
                &mut vocab,
                &python_corpus(r.gen(), r.gen_range(200..12_000)),
            )
        } else {
            let alphabet = r.gen_range(2..8);
            (0..r.gen_range(1..6))
                .map(|_| {
                    (0..r.gen_range(0..600))
                        .map(|_| TokenId(r.gen_range(0..alphabet)))
                        .collect()
                })
                .collect()
        };
        let total: usize = segments.iter().map(Vec::len).sum();
        if total > SUFFIX_MAX_CORPUS || total == 0 {
            continue;
        }
        let index = SourceIndex::from_segments(segments.iter().map(Vec::as_slice), params);
        let flat: Vec<TokenId> = segments.concat();
        for _ in 0..50 {
            let mut ctx: Vec<TokenId> = if r.gen_bool(0.7) {
                let end = r.gen_range(0..=flat.len());
                flat[end.saturating_sub(r.gen_range(0..24))..end].to_vec()
            } else {
                Vec::new()
            };
            for _ in 0..r.gen_range(0..3) {
                ctx.push(TokenId(r.gen_range(0..40)));
            }
            if r.gen_bool(0.05) {
                ctx.push(SENTINEL);
            }
            let n_max = r.gen_range(1..=params.n_max + 2);
            let source = if r.gen_bool(0.5) {
                Source::Repo
            } else {
                Source::Common
            };
            let got = suffix_retrieve(&index, &ctx, n_max, source);
            let want = brute_retrieve(&segments, &ctx, n_max, params, source);
            if got != want {
                return outcome(false, format!("query {queries} differs: ctx {ctx:?}"));
            }
            nonempty += usize::from(!got.is_empty());
            queries += 1;
        }
    }
    outcome(
        true,
        format!("{queries} queries identical, {nonempty} with matches"),
    )
}

fn random_tree(r: &mut impl Rng, max_nodes: usize, vocab: u32) -> DraftTree {
    let n = r.gen_range(0..=max_nodes);
    let parents = (0..n)
        .map(|i| (i > 0 && r.gen_bool(0.8)).then(|| r.gen_range(0..i)))
        .collect();
    let tokens = (0..n).map(|_| TokenId(r.gen_range(0..vocab))).collect();
    DraftTree::from_parents(tokens, parents).unwrap()
}

/// A draft tree selected from random continuations, as the engine builds it.
fn retrieved_tree(r: &mut impl Rng, vocab: u32) -> DraftTree {
    let mut cont = |count: u32| Continuation {
        tokens: (0..r.gen_range(1..10))
            .map(|_| TokenId(r.gen_range(0..vocab)))
            .collect(),
        count_repo: count,
        count_common: 0,
    };
    let repo = RetrievalResult {
        continuations: (1..=12).map(&mut cont).collect(),
        match_len: 1,
    };
    let trie = build_trie(&repo, &RetrievalResult::default(), 1.0, 1.0).unwrap();
    let k = r.gen_range(1..=10);
    select_top_k(&trie, k, r.gen_range(1..=MASK_MAX_NODES))
}

fn mask_oracle() -> Outcome {
    let mut r = rng(30_000);
    let mut nodes = 0;
    for i in 0..MASK_TREES {
        let tree = if i % 2 == 0 {
            random_tree(&mut r, MASK_MAX_NODES, 6)
        } else {
            retrieved_tree(&mut r, 4)
        };
        let n = tree.len();
        nodes += n;
        let mask = tree_mask(&tree);
        if mask.size() != n || tree.mask() != &mask {
            return outcome(false, format!("tree {i}: mask size"));
        }
        for a in 0..n {
            let mut ancestors = vec![false; n];
            ancestors[a] = true;
            let mut depth = 0;
            let mut cur = tree.parents()[a];
            while let Some(p) = cur {
                ancestors[p] = true;
                depth += 1;
                cur = tree.parents()[p];
            }
            if tree.positions()[a] != depth {
                return outcome(false, format!("tree {i}: position of node {a}"));
            }
            for (b, &want) in ancestors.iter().enumerate() {
                if mask.get(a, b) != want {
                    return outcome(false, format!("tree {i}: mask[{a}][{b}]"));
                }
            }
        }
    }
    outcome(
        true,
        format!("{MASK_TREES} trees ({nodes} nodes) match ancestor scan"),
    )
}

fn mask_consistency() -> Outcome {
    let mut r = rng(40_000);
    let mut vocab = Vocabulary::new();
    let corpus = tokenize_all(&mut vocab, &python_corpus(41, 20_000));
    let flat = corpus.concat();
    let models: Vec<ReferenceNgramModel> = (1..=5)
        .map(|o| train_ngram(&corpus, o, None).unwrap())
        .collect();
    let v = vocab.len() as u32;
    let mut checked = 0;
    for i in 0..CONSISTENCY_TREES {
        let model = &models[i % models.len()];
        let end = r.gen_range(0..=flat.len());
        let ctx = &flat[end.saturating_sub(r.gen_range(0..30))..end];
        // Draft tokens copied from the corpus agree with the model often.
        let tree = if i % 2 == 0 {
            random_tree(&mut r, MASK_MAX_NODES, v)
        } else {
            let n = r.gen_range(1..=MASK_MAX_NODES).min(flat.len() - end);
            let tokens = flat[end..end + n].to_vec();
            let parents = (0..n)
                .map(|j| {
                    (j > 0).then(|| {
                        if r.gen_bool(0.85) {
                            j - 1
                        } else {
                            r.gen_range(0..j)
                        }
                    })
                })
                .collect();
            DraftTree::from_parents(tokens, parents).unwrap()
        };
        let preds = model.session().predict_tree(ctx, &tree);
        let empty = DraftTree::empty();
        if preds.at_root != model.session().predict_tree(ctx, &empty).at_root {
            return outcome(false, format!("tree {i}: root prediction"));
        }
        for node in 0..tree.len() {
            // Path read off the mask row, ordered by depth.
            let mut path: Vec<usize> = (0..tree.len())
                .filter(|&j| tree.mask().get(node, j))
                .collect();
            path.sort_by_key(|&j| tree.positions()[j]);
            let mut full = ctx.to_vec();
            full.extend(path.iter().map(|&j| tree.tokens()[j]));
            let want = model.session().predict_tree(&full, &empty).at_root;
            if preds.at_node[node] != want {
                return outcome(false, format!("tree {i}: node {node}"));
            }
            checked += 1;
        }
    }
    outcome(
        true,
        format!("{CONSISTENCY_TREES} trees, {checked} node predictions equal per-path predictions"),
    )
}

/// Model trained on a Python corpus, its own greedy output from a short
/// prompt, and a datastore holding exactly prompt + output.
struct SelfCopy {
    vocab: Vocabulary,
    model: ReferenceNgramModel,
    prompt: codedraft::TokenSequence,
    ds: Datastore,
}

fn self_copy() -> SelfCopy {
    let mut vocab = Vocabulary::new();
    let files = python_corpus(50, 8_000);
    let corpus = tokenize_all(&mut vocab, &files);
    let model = train_ngram(&corpus, 4, None).unwrap();
    let first_line = files[0].find('\n').unwrap() + 1;
    let prompt = vocab.tokenize_extend(&files[0][..first_line]);
    let reference =
        autoregressive_generate(&mut model.session(), &vocab, &prompt, SELF_COPY_TOKENS);
    let text: Vec<TokenId> = prompt
        .ids()
        .iter()
        .chain(reference.tokens.ids())
        .copied()
        .collect();
    let params = IndexParams::default();
    let ds = Datastore::new(
        vocab.clone(),
        params,
        None,
        SourceIndex::from_segments([text.as_slice()], params),
    )
    .unwrap();
    SelfCopy {
        vocab,
        model,
        prompt,
        ds,
    }
}

fn self_copy_run(sc: &SelfCopy) -> Generation {
    let cfg = EngineConfig {
        max_new_tokens: SELF_COPY_TOKENS,
        ..EngineConfig::default()
    };
    let spec = Engine::new(&sc.ds, &sc.vocab, cfg)
        .unwrap()
        .generate(&mut sc.model.session(), &sc.prompt)
        .unwrap();
    let ar = autoregressive_generate(
        &mut sc.model.session(),
        &sc.vocab,
        &sc.prompt,
        SELF_COPY_TOKENS,
    );
    assert!(same_tokens(&spec, &ar), "self-copy output diverged");
    spec
}

fn acceptance_floor_and_gain() -> Outcome {
    let sc = self_copy();
    let empty = Datastore::empty(sc.vocab.clone(), IndexParams::default());
    let mut floors = Vec::new();
    for use_cache in [true, false] {
        let cfg = EngineConfig {
            max_new_tokens: SELF_COPY_TOKENS,
            use_cache,
            ..EngineConfig::default()
        };
        let g = Engine::new(&empty, &sc.vocab, cfg)
            .unwrap()
            .generate(&mut sc.model.session(), &sc.prompt)
            .unwrap();
        floors.push(g.metrics.acceptance_length().unwrap());
    }
    let spec = self_copy_run(&sc);
    let gain = spec.metrics.acceptance_length().unwrap();
    outcome(
        floors.iter().all(|&f| f == 1.0) && gain >= SELF_COPY_MIN_ACCEPTANCE,
        format!(
            "empty datastore L/F = {:?}; self-copy L/F = {gain:.3} ({} tokens / {} steps), floor {SELF_COPY_MIN_ACCEPTANCE}",
            floors, spec.metrics.emitted, spec.metrics.forward_steps
        ),
    )
}

fn forward_reduction() -> Outcome {
    let sc = self_copy();
    let m = self_copy_run(&sc).metrics;
    outcome(
        m.forward_steps < m.emitted,
        format!("F = {} < L = {}", m.forward_steps, m.emitted),
    )
}

/// Common index from one corpus, a model that also knows the suite's
/// repositories, and the shared vocabulary.
struct Fixture {
    vocab: Vocabulary,
    ds: Datastore,
    model: ReferenceNgramModel,
}

fn fixture(common_seed: u64, extra_training: &[String]) -> Fixture {
    let mut vocab = Vocabulary::new();
    let params = IndexParams::default();
    let common_files = python_corpus(common_seed, 40_000);
    let common = build_common(&common_files, &mut vocab, params).unwrap();
    let ds = Datastore::new(vocab.clone(), params, None, common).unwrap();
    let mut train = tokenize_all(&mut vocab, &common_files);
    train.extend(tokenize_all(&mut vocab, extra_training));
    let model = train_ngram(&train, 4, None).unwrap();
    Fixture { vocab, ds, model }
}

/// Repetitive handler classes: each sample's prompt opens a class the model
/// learned, and its repository holds a sibling class from the same family.
fn repetitive_suite() -> (Suite, Vec<String>) {
    let mut r = rng(60_000);
    let mut samples = Vec::new();
    let mut learned = Vec::new();
    for i in 0..8 {
        let target = repetitive_file(&mut r, 12);
        let sibling = repetitive_file(&mut r, 6);
        let head = target.match_indices('\n').nth(1).unwrap().0 + 1;
        samples.push(Sample {
            name: format!("rep{i:02}"),
            prompt: target[..head].to_string(),
            context: Some(sibling.clone()),
        });
        learned.push(target);
        learned.push(sibling);
    }
    (Suite { samples }, learned)
}

fn mean_of(configs: &[(String, f64)], pick: impl Fn(&str) -> bool) -> f64 {
    let xs: Vec<f64> = configs
        .iter()
        .filter(|(n, _)| pick(n))
        .map(|c| c.1)
        .collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ablation_trend() -> Outcome {
    let (suite, learned) = repetitive_suite();
    let fx = fixture(61, &learned);
    let opts = BenchOptions {
        config: EngineConfig::default(),
        seed: 7,
        ablate: AblationAxis::All,
        forward_cost: Duration::ZERO,
    };
    let m = run_bench(
        &fx.ds,
        &fx.vocab,
        || fx.model.session(),
        "test",
        &suite,
        &opts,
    )
    .unwrap();
    let by: Vec<(String, f64)> = m
        .aggregates
        .iter()
        .map(|a| (a.config.clone(), a.mean_acceptance_length.unwrap()))
        .collect();
    let get = |n: &str| by.iter().find(|c| c.0 == n).unwrap().1;
    let cache_on = mean_of(&by, |n| n == "full" || n.contains("cache"));
    let cache_off = mean_of(&by, |n| !(n == "full" || n.contains("cache")));
    let cache_hits: usize = m.samples.iter().map(|s| s.sources.cache).sum();
    let (full, baseline) = (get(&Ablation::FULL.name()), get(&Ablation::BASELINE.name()));
    let table: Vec<String> = by.iter().map(|(n, v)| format!("{n}={v:.3}")).collect();
    outcome(
        cache_on >= cache_off && full >= baseline,
        format!(
            "cache on {cache_on:.3} vs off {cache_off:.3}; full {full:.3} vs baseline {baseline:.3}; {cache_hits} cache-drafted steps; {}",
            table.join(" ")
        ),
    )
}

fn python_suite(seed: u64, n: usize) -> (Suite, Vec<String>) {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    let mut learned = Vec::new();
    for i in 0..n {
        let target = python_file(&mut r);
        let context = python_file(&mut r);
        let head = target.find("\n\n\n").map_or(target.len(), |c| c + 3);
        samples.push(Sample {
            name: format!("py{i:02}"),
            prompt: target[..head].to_string(),
            context: Some(context.clone()),
        });
        learned.push(target);
        learned.push(context);
    }
    (Suite { samples }, learned)
}

fn skip_trend() -> Outcome {
    let (suite, learned) = python_suite(70_000, 24);
    let fx = fixture(71, &learned);
    let cfg = EngineConfig {
        p: 1.0,
        use_cache: false,
        ..EngineConfig::default()
    };
    let run = run_heatmap(
        &fx.ds,
        &fx.vocab,
        || fx.model.session(),
        &suite,
        &HeatmapOptions {
            config: cfg,
            seed: 3,
            max_lines: 20,
            max_token_index: 12,
        },
    )
    .unwrap();
    let (skip, other) = (
        run.split.skip_rate().unwrap(),
        run.split.other_rate().unwrap(),
    );
    outcome(
        skip <= other,
        format!(
            "retrieved at skip positions {skip:.3} ({} tokens) vs elsewhere {other:.3} ({} tokens)",
            run.split.skip_total, run.split.other_total
        ),
    )
}

fn traces_of(fx: &Fixture, prompt: &str, seed: u64) -> (Vec<TokenId>, Vec<StepTrace>) {
    let mut vocab = fx.vocab.clone();
    let prompt = vocab.tokenize_extend(prompt);
    let cfg = EngineConfig {
        rng_seed: seed,
        l: 5,
        ..EngineConfig::default()
    };
    let g = Engine::new(&fx.ds, &vocab, cfg)
        .unwrap()
        .generate(&mut fx.model.session(), &prompt)
        .unwrap();
    (g.tokens.ids().to_vec(), g.metrics.traces)
}

fn determinism() -> Outcome {
    let (suite, learned) = python_suite(80_000, 6);
    let fx = fixture(81, &learned);
    let opts = BenchOptions {
        config: EngineConfig {
            l: 5,
            ..EngineConfig::default()
        },
        seed: 11,
        ablate: AblationAxis::All,
        forward_cost: Duration::ZERO,
    };
    let csv = || {
        let m = run_bench(
            &fx.ds,
            &fx.vocab,
            || fx.model.session(),
            "test",
            &suite,
            &opts,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &m).unwrap();
        buf
    };
    let heat = || {
        let run = run_heatmap(
            &fx.ds,
            &fx.vocab,
            || fx.model.session(),
            &suite,
            &HeatmapOptions {
                config: opts.config.clone(),
                seed: 11,
                max_lines: 20,
                max_token_index: 12,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        run.heatmap.write_csv(&mut buf).unwrap();
        buf
    };
    let bench_same = csv() == csv();
    let heat_same = heat() == heat();
    let prompt = &suite.samples[0].prompt;
    let traces_same =
        (0..4).all(|seed| traces_of(&fx, prompt, seed) == traces_of(&fx, prompt, seed));
    outcome(
        bench_same && heat_same && traces_same,
        format!("bench CSV identical: {bench_same}; heatmap CSV identical: {heat_same}; outputs and traces identical: {traces_same}"),
    )
}
