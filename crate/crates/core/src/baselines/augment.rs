use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{apply_field, perturbation_field, CorruptionKind, CorruptionSpec, TraceDataset};
use crate::error::{Error, Result};
use crate::predictor::{PredictorParams, TrainConfig};
use crate::provisioning::ProvisioningParams;
use crate::trainer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    #[default]
    Gaussian,
    Cutout,
    Perlin,
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match CorruptionKind::from_str(s)? {
            CorruptionKind::Gaussian => Ok(Self::Gaussian),
            CorruptionKind::Cutout => Ok(Self::Cutout),
            CorruptionKind::Perlin => Ok(Self::Perlin),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    /// Noise scale as a fraction of the dataset maximum.
    pub magnitude: f64,
    pub mask_prob: f64,
    pub perlin_lattice: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kind: AugmentKind::Gaussian,
            magnitude: 0.05,
            mask_prob: 0.05,
            perlin_lattice: 4,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// The equivalent corruption, so that augmenting and corrupting with the
    /// same settings and seed perturb identically.
    pub fn corruption(&self) -> CorruptionSpec {
        let (kind, parameter) = match self.kind {
            AugmentKind::Gaussian => (CorruptionKind::Gaussian, self.magnitude),
            AugmentKind::Cutout => (CorruptionKind::Cutout, self.mask_prob),
            AugmentKind::Perlin => (CorruptionKind::Perlin, self.magnitude),
        };
        CorruptionSpec {
            kind,
            parameter,
            lattice: self.perlin_lattice,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Config(format!("augmentation magnitude {} must be non-negative", self.magnitude)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask probability {} outside [0, 1]", self.mask_prob)));
        }
        if self.perlin_lattice < 2 {
            return Err(Error::Config("Perlin lattice spacing must be at least 2".into()));
        }
        Ok(())
    }
}

/// Original sequences followed by one perturbed copy of each.
pub fn augment(s0: &TraceDataset, cfg: &AugmentConfig) -> Result<TraceDataset> {
    if s0.is_empty() {
        return Err(Error::Argument("cannot augment an empty dataset".into()));
    }
    cfg.validate()?;
    let field = perturbation_field(s0, &cfg.corruption(), cfg.seed)?;
    let mut out = s0.concat(&apply_field(s0, &field))?;
    out.meta.source = format!("{}+da-{:?}", s0.meta.source, cfg.kind).to_lowercase();
    Ok(out)
}

/// Decision-focused training on the augmented dataset.
pub fn train_augmented(
    s0: &TraceDataset,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    p: &ProvisioningParams,
) -> Result<(PredictorParams, Vec<f64>)> {
    trainer::run_dfl(&augment(s0, aug)?, cfg, p)
}
