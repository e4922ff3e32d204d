//! Run manifest and the config files it points at.

use anyhow::{bail, Context, Result};
use radflip::dram::{DramConfig, DramMap, MappingConfig, SchemeId};
use radflip::nn::data::Dataset;
use radflip::nn::suite::SuiteConfig;
use radflip::radiation::ErrorModelConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// `run.json`. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub dram_standard: PathBuf,
    pub dram_mapping: PathBuf,
    pub error_model: PathBuf,
    /// Suite config: task, data seeds, model seed, training, exits.
    pub model: PathBuf,
    /// Evaluation set directory (or its `manifest.json`). Defaults to the
    /// test split generated from the model config.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a subcommand needs, parsed and validated up front.
pub struct Run {
    pub manifest: RunManifest,
    pub dram: DramMap,
    pub scheme: SchemeId,
    pub error_model: ErrorModelConfig,
    pub suite: SuiteConfig,
    pub eval: Dataset,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

impl Run {
    pub fn load(path: &Path, scheme: Option<SchemeId>) -> Result<Run> {
        let mut manifest: RunManifest = read_json(path, "run manifest")?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        manifest.dram_standard = resolve(&manifest.dram_standard);
        manifest.dram_mapping = resolve(&manifest.dram_mapping);
        manifest.error_model = resolve(&manifest.error_model);
        manifest.model = resolve(&manifest.model);
        manifest.dataset = manifest.dataset.as_ref().map(resolve);

        let standard: DramConfig = read_json(&manifest.dram_standard, "DRAM standard")?;
        standard.validate().context("DRAM standard")?;
        let mut mapping: MappingConfig = read_json(&manifest.dram_mapping, "DRAM mapping")?;
        if let Some(id) = scheme {
            if id != mapping.scheme_id {
                // A custom layout belongs to the scheme it was written for.
                mapping = MappingConfig { scheme_id: id, field_layout: None, xor_functions: None };
            }
        }
        let dram = DramMap::new(&standard, &mapping.resolve(&standard).context("DRAM mapping")?)
            .context("DRAM mapping")?;
        let error_model: ErrorModelConfig = read_json(&manifest.error_model, "error model")?;
        error_model.validate().context("error model")?;
        let suite: SuiteConfig = read_json(&manifest.model, "model config")?;
        let spec = suite.base_spec().with_exits(&suite.exit_attach, suite.exit_width, radflip::nn::ActivationKind::LogClip);
        spec.context("model config")?;
        let eval = match &manifest.dataset {
            Some(p) => Dataset::load(p).with_context(|| format!("loading dataset {}", p.display()))?,
            None => suite.datasets().1,
        };
        if eval.task != suite.task {
            bail!("dataset task {} does not match model task {}", eval.task, suite.task);
        }
        Ok(Run { manifest, dram, scheme: mapping.scheme_id, error_model, suite, eval })
    }
}
