use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::model::DEFAULT_L2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Every device trains in the subspace its own capacity allows.
    #[serde(rename = "FAIR-HET")]
    FairHet,
    /// Every device uses the smallest capacity in the scheme.
    #[serde(rename = "FAIR-HOM")]
    FairHom,
    /// Only full-capacity devices train, on the full model.
    #[serde(rename = "FULL-TRN")]
    FullTrn,
    /// Every device holds the full model.
    #[serde(rename = "FEDAVG")]
    FedAvg,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::FairHet => "FAIR-HET",
            Mode::FairHom => "FAIR-HOM",
            Mode::FullTrn => "FULL-TRN",
            Mode::FedAvg => "FEDAVG",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consistency {
    /// One base hash shared by every device.
    Consistent,
    /// An independently drawn base hash per device (ablation).
    Inconsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalUnit {
    /// `local_epochs` passes over the device's data per round.
    Epochs,
    /// `local_epochs` single-example SGD steps per round.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub rounds: usize,
    pub devices_per_round: usize,
    pub local_epochs: usize,
    pub local_unit: LocalUnit,
    pub learning_rate: f64,
    pub l2: f64,
    pub dim: usize,
    pub num_negatives: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub ndcg_k: usize,
    pub consistency: Consistency,
    pub signed_hash: bool,
    /// Multiplies each device's `psi` learning rate by `m/n`, so a step moves
    /// each virtual coordinate about as far as it would at full capacity.
    pub scale_item_lr: bool,
    /// Standard deviation of the initial server table and user vectors.
    pub init_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FairHet,
            rounds: 100,
            devices_per_round: 10,
            local_epochs: 1,
            local_unit: LocalUnit::Epochs,
            learning_rate: 0.1,
            l2: DEFAULT_L2,
            dim: 8,
            num_negatives: 1,
            seed: 0,
            eval_every: 10,
            ndcg_k: 20,
            consistency: Consistency::Consistent,
            signed_hash: false,
            scale_item_lr: false,
            init_scale: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, name: &str| {
            if v >= 1 {
                Ok(())
            } else {
                Err(FairError::invalid(format!("{name} must be >= 1")))
            }
        };
        positive(self.rounds, "rounds")?;
        positive(self.devices_per_round, "devices_per_round")?;
        positive(self.local_epochs, "local_epochs")?;
        positive(self.eval_every, "eval_every")?;
        self.validate_model()
    }

    /// Checks that do not depend on the round/epoch budget.
    pub(crate) fn validate_model(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(FairError::invalid("dim must be >= 1"));
        }
        if self.ndcg_k == 0 {
            return Err(FairError::invalid("ndcg_k must be >= 1"));
        }
        if self.devices_per_round == 0 {
            return Err(FairError::invalid("devices_per_round must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FairError::invalid("learning_rate must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(FairError::invalid("l2 must be non-negative"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(FairError::invalid("init_scale must be non-negative"));
        }
        Ok(())
    }
}
