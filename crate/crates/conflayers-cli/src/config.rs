//! Experiment configuration: a single JSON document selecting the backend,
//! prompt corpus, mode, and the engine parameter blocks.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use conflayers::backend::{ModelBackend, ToyModel, ToyModelConfig, TraceBackend};
use conflayers::decode::DraftConfig;
use conflayers::layer_filter::FilterConfig;
use conflayers::search::SearchConfig;
use conflayers::{SkipSet, TokenId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendSpec {
    Toy(ToyModelConfig),
    Trace(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "conflayers")]
    ConfLayers,
    #[serde(rename = "frozen-set")]
    FrozenSet,
    #[serde(rename = "uniform-baseline")]
    UniformBaseline,
    #[serde(rename = "vanilla")]
    Vanilla,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backend: BackendSpec,
    /// JSON-lines corpus; each line is one prompt as an array of token ids.
    pub prompts: PathBuf,
    pub mode: Mode,
    #[serde(default)]
    pub draft: DraftConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub search: SearchConfig,
    /// Skip ratio of the uniform initial set (and the uniform baseline).
    #[serde(default = "default_uniform_ratio")]
    pub uniform_skip_ratio: f64,
    /// Skip-set file for frozen-set mode: `{"layers": [..]}`.
    #[serde(default)]
    pub skip_set_file: Option<PathBuf>,
    /// Run a vanilla reference per prompt and report Rouge-2 against it.
    #[serde(default = "default_true")]
    pub compute_reference: bool,
    /// Cost of one sublayer projection, in layer-forwards.
    #[serde(default = "default_projection_overhead")]
    pub projection_overhead: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_uniform_ratio() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

fn default_projection_overhead() -> f64 {
    conflayers::metrics::DEFAULT_PROJECTION_OVERHEAD
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.draft.validate().context("draft config")?;
        cfg.filter.validate().context("filter config")?;
        cfg.search.validate().context("search config")?;
        if cfg.mode == Mode::FrozenSet && cfg.skip_set_file.is_none() {
            bail!("frozen-set mode requires skip_set_file");
        }
        Ok(cfg)
    }

    /// Builds the configured backend; `--seed` overrides the toy seed.
    pub fn build_backend(&self, seed_override: Option<u64>) -> Result<Box<dyn ModelBackend>> {
        match &self.backend {
            BackendSpec::Toy(toy_cfg) => {
                let mut toy_cfg = toy_cfg.clone();
                if let Some(seed) = seed_override.or(self.seed) {
                    toy_cfg.seed = seed;
                }
                Ok(Box::new(ToyModel::new(toy_cfg)?))
            }
            BackendSpec::Trace(path) => Ok(Box::new(TraceBackend::load(path)?)),
        }
    }
}

/// Loads a JSON-lines prompt corpus; every line is an array of token ids.
pub fn load_prompts(path: &Path, vocab_size: usize) -> Result<Vec<Vec<TokenId>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading prompts {}", path.display()))?;
    let mut prompts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<TokenId> = serde_json::from_str(line)
            .with_context(|| format!("prompt line {}", idx + 1))?;
        if tokens.is_empty() {
            bail!("prompt line {} is empty", idx + 1);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            bail!(
                "prompt line {} contains token {bad} outside vocabulary {vocab_size}",
                idx + 1
            );
        }
        prompts.push(tokens);
    }
    if prompts.is_empty() {
        bail!("prompt corpus {} is empty", path.display());
    }
    Ok(prompts)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SkipSetFile {
    pub layers: Vec<usize>,
}

pub fn load_skip_set(path: &Path, num_layers: usize) -> Result<SkipSet> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading skip set {}", path.display()))?;
    let file: SkipSetFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing skip set {}", path.display()))?;
    Ok(SkipSet::new(file.layers, num_layers)?)
}
