//! Flat `key=value` config files and flag overrides for [`EngineConfig`].

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use codedraft::datastore::Source;
use codedraft::engine::EngineConfig;
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

/// Parses `key=value` lines. Keys are [`EngineConfig`] field names; `-`
/// and `_` are interchangeable. `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<EngineConfig> {
    let defaults = serde_json::to_value(EngineConfig::default())?;
    let known = defaults.as_object().expect("config is an object");
    let mut map = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value", i + 1))?;
        let key = key.trim().replace('-', "_");
        if !known.contains_key(&key) {
            bail!("config line {}: unknown key {key:?}", i + 1);
        }
        let value = value.trim();
        let parsed =
            serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        map.insert(key, parsed);
    }
    serde_json::from_value(Value::Object(map)).context("invalid config value")
}

pub fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        None => Ok(EngineConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

/// Engine settings; each flag overrides the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct EngineArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cache activation threshold.
    #[arg(long)]
    pub l: Option<usize>,
    /// Retrieval probability at skip positions.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub draft_budget: Option<usize>,
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long)]
    pub cont_len: Option<usize>,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    #[arg(long)]
    pub persist_session_state: Option<bool>,
    #[arg(long)]
    pub max_cache_sequences: Option<usize>,
    /// Source credited with cache hits: repo or common.
    #[arg(long, value_parser = parse_source)]
    pub cache_count_side: Option<Source>,
    #[arg(long)]
    pub flush_on_finish: Option<bool>,
    #[arg(long)]
    pub use_cache: Option<bool>,
    #[arg(long)]
    pub use_strategy: Option<bool>,
    #[arg(long)]
    pub use_repo: Option<bool>,
}

fn parse_source(s: &str) -> Result<Source, String> {
    match s {
        "repo" => Ok(Source::Repo),
        "common" => Ok(Source::Common),
        _ => Err(format!("expected repo or common, got {s:?}")),
    }
}

impl EngineArgs {
    pub fn resolve(&self) -> Result<EngineConfig> {
        let mut c = load_config(self.config.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    c.$f = v;
                }
            )*};
        }
        set!(
            l,
            p,
            alpha,
            beta,
            k,
            draft_budget,
            n_max,
            cont_len,
            chunk,
            max_new_tokens,
            rng_seed,
            persist_session_state,
            max_cache_sequences,
            cache_count_side,
            flush_on_finish,
            use_cache,
            use_strategy,
            use_repo
        );
        c.validate()?;
        Ok(c)
    }
}
