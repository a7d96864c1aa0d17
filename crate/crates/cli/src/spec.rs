//! JSON run config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fair_core::data::{FeedbackKind, SynthParams};
use fair_core::fedsim::{CapacityScheme, Consistency, LocalUnit, Mode, RunConfig};
use fair_core::model::DEFAULT_L2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub model: ModelBlock,
    pub federation: FederationBlock,
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
    /// Records held out per user for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    /// Seed for the train/test split; defaults to the federation seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub kind: FeedbackKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub dim: usize,
    pub l2: f64,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub num_negatives: usize,
    pub signed_hash: bool,
    pub scale_item_lr: bool,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            dim: d.dim,
            l2: DEFAULT_L2,
            learning_rate: d.learning_rate,
            init_scale: d.init_scale,
            num_negatives: d.num_negatives,
            signed_hash: d.signed_hash,
            scale_item_lr: d.scale_item_lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationBlock {
    pub mode: Mode,
    pub rounds: usize,
    pub devices_per_round: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_unit")]
    pub local_unit: LocalUnit,
    #[serde(default = "full_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ten")]
    pub eval_every: usize,
    #[serde(default = "twenty")]
    pub ndcg_k: usize,
    #[serde(default = "consistent")]
    pub consistency: Consistency,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Metrics CSV; the manifest and id maps are written next to it.
    pub metrics: PathBuf,
}

fn default_holdout() -> usize {
    2
}
fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}
fn twenty() -> usize {
    20
}
fn default_unit() -> LocalUnit {
    LocalUnit::Epochs
}
fn full_scheme() -> String {
    "1x".into()
}
fn consistent() -> Consistency {
    Consistency::Consistent
}

impl RunSpecFile {
    /// Parses and validates the file. Relative paths resolve against the
    /// file's directory and are stored absolute.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut spec: RunSpecFile = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        if let Some(csv) = &mut spec.dataset.csv {
            csv.path = base.join(&csv.path);
        }
        spec.output.metrics = base.join(&spec.output.metrics);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.dataset.synth, &self.dataset.csv) {
            (Some(_), Some(_)) => bail!("dataset: give either `synth` or `csv`, not both"),
            (None, None) => bail!("dataset: one of `synth` or `csv` is required"),
            _ => {}
        }
        if self.dataset.holdout == 0 {
            bail!("dataset: holdout must be >= 1");
        }
        self.run_config().validate()?;
        if let Some(synth) = &self.dataset.synth {
            CapacityScheme::parse(&self.federation.scheme, synth.num_users)?;
            if self.federation.devices_per_round > synth.num_users {
                bail!(
                    "federation: devices_per_round {} exceeds {} devices",
                    self.federation.devices_per_round,
                    synth.num_users
                );
            }
        }
        if self.output.metrics.file_name().is_none() {
            bail!("output: metrics must name a file");
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        let (m, f) = (&self.model, &self.federation);
        RunConfig {
            mode: f.mode,
            rounds: f.rounds,
            devices_per_round: f.devices_per_round,
            local_epochs: f.local_epochs,
            local_unit: f.local_unit,
            learning_rate: m.learning_rate,
            l2: m.l2,
            dim: m.dim,
            num_negatives: m.num_negatives,
            seed: f.seed,
            eval_every: f.eval_every,
            ndcg_k: f.ndcg_k,
            consistency: f.consistency,
            signed_hash: m.signed_hash,
            scale_item_lr: m.scale_item_lr,
            init_scale: m.init_scale,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.dataset.split_seed.unwrap_or(self.federation.seed)
    }

    /// `<dir>/<stem><suffix>` beside the metrics file.
    pub fn sidecar(&self, suffix: &str) -> PathBuf {
        let stem = self
            .output
            .metrics
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "metrics".into());
        self.output
            .metrics
            .with_file_name(format!("{stem}{suffix}"))
    }
}
