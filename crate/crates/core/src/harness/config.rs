use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{baseline_train_config, AugmentConfig, KlDroConfig, WDroConfig};
use crate::data::{
    corrupt, shift_dataset, synth_generate, CorruptionSpec, Shift, SynthKind, SynthParams, TraceDataset,
};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::imax::ImaxConfig;
use crate::predictor::TrainConfig;
use crate::provisioning::ProvisioningParams;
use crate::trainer::OuterConfig;

/// Environment variable holding the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DRDFL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "3d")]
    ThreeD,
    #[default]
    #[serde(rename = "dfl")]
    Dfl,
    #[serde(rename = "kl-dro")]
    KlDro,
    #[serde(rename = "w-dro")]
    WDro,
    #[serde(rename = "da")]
    Da,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::ThreeD => "3d",
            Method::Dfl => "dfl",
            Method::KlDro => "kl-dro",
            Method::WDro => "w-dro",
            Method::Da => "da",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3d" => Ok(Method::ThreeD),
            "dfl" => Ok(Method::Dfl),
            "kl-dro" => Ok(Method::KlDro),
            "w-dro" => Ok(Method::WDro),
            "da" => Ok(Method::Da),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    MeanScale { factor: f64 },
    VarianceScale { factor: f64 },
    Mix { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionStep {
    #[serde(flatten)]
    pub spec: CorruptionSpec,
    #[serde(default)]
    pub seed: u64,
}

/// A dataset read from `path` or synthesized, then optionally shifted and
/// corrupted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionStep>,
}

impl DatasetSpec {
    fn files(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.path.iter().map(PathBuf::as_path).collect();
        if let Some(ShiftSpec::Mix { path }) = &self.shift {
            v.push(path);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("dataset id must not be empty".into()));
        }
        match (&self.path, &self.synth) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config(format!(
                    "dataset {:?} needs exactly one of `path` and `synth`",
                    self.id
                )))
            }
            _ => {}
        }
        for f in self.files() {
            if !f.is_file() {
                return Err(Error::Config(format!("dataset {:?}: missing file {}", self.id, f.display())));
            }
        }
        if let Some(c) = &self.corruption {
            c.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(&self) -> Result<TraceDataset> {
        let mut d = match (&self.path, &self.synth) {
            (Some(p), None) => TraceDataset::load(p)?,
            (None, Some(s)) => synth_generate(s.kind, s.count, &s.params, s.seed)?,
            _ => return Err(Error::Config(format!("dataset {:?} is ambiguous", self.id))),
        };
        if let Some(shift) = &self.shift {
            d = match shift {
                ShiftSpec::MeanScale { factor } => shift_dataset(&d, Shift::MeanScale(*factor))?,
                ShiftSpec::VarianceScale { factor } => shift_dataset(&d, Shift::VarianceScale(*factor))?,
                ShiftSpec::Mix { path } => shift_dataset(&d, Shift::Mix(&TraceDataset::load(path)?))?,
            };
        }
        if let Some(c) = &self.corruption {
            d = corrupt(&d, &c.spec, c.seed)?;
        }
        Ok(d)
    }
}

/// Outer-loop settings not covered by a module section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterSettings {
    pub epochs: usize,
    pub adversarial_set_size: Option<usize>,
    pub carry_over: bool,
    pub freeze_diffusion: bool,
    pub validation_fraction: f64,
}

impl Default for OuterSettings {
    fn default() -> Self {
        let o = OuterConfig::default();
        Self {
            epochs: o.epochs,
            adversarial_set_size: o.adversarial_set_size,
            carry_over: o.carry_over,
            freeze_diffusion: o.freeze_diffusion,
            validation_fraction: o.validation_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Row label in reports; the method name when empty.
    pub label: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Saved reference diffusion model; trained per seed when absent.
    pub reference_model: Option<PathBuf>,
    pub train: DatasetSpec,
    pub test: Vec<DatasetSpec>,
    pub provisioning: ProvisioningParams,
    /// Predictor schedule of the 3D method.
    pub predictor: TrainConfig,
    /// Predictor schedule of the DFL, DRO and augmentation methods.
    pub baseline_training: TrainConfig,
    pub outer: OuterSettings,
    pub imax: ImaxConfig,
    pub diffusion: DiffusionConfig,
    pub kl_dro: KlDroConfig,
    pub w_dro: WDroConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::default(),
            label: String::new(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            reference_model: None,
            train: DatasetSpec::default(),
            test: Vec::new(),
            provisioning: ProvisioningParams::default(),
            predictor: TrainConfig::default(),
            baseline_training: baseline_train_config(),
            outer: OuterSettings::default(),
            imax: ImaxConfig::default(),
            diffusion: DiffusionConfig::default(),
            kl_dro: KlDroConfig::default(),
            w_dro: WDroConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn label(&self) -> String {
        if self.label.is_empty() {
            self.method.to_string()
        } else {
            self.label.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.test.is_empty() {
            return Err(Error::Config("at least one test dataset is required".into()));
        }
        self.train.validate()?;
        for t in &self.test {
            t.validate()?;
        }
        let mut ids: Vec<&str> = self.test.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("test dataset ids must be unique".into()));
        }
        if let Some(p) = &self.reference_model {
            if !p.is_file() {
                return Err(Error::Config(format!("missing reference model {}", p.display())));
            }
        }
        self.provisioning.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.predictor.validate()?;
        self.baseline_training.validate()?;
        self.imax.ppo.validate(self.diffusion.t_max)?;
        self.kl_dro.validate()?;
        self.w_dro.validate()?;
        self.augment.validate()?;
        self.outer_config(0).validate()
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Output directory, resolved against the output-root variable when
    /// relative.
    pub fn resolved_output(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Outer-loop configuration with every module seed derived from `seed`.
    pub fn outer_config(&self, seed: u64) -> OuterConfig {
        let mut imax = self.imax;
        imax.ppo.seed = seed;
        OuterConfig {
            epochs: self.outer.epochs,
            adversarial_set_size: self.outer.adversarial_set_size,
            predictor: TrainConfig { seed, ..self.predictor },
            imax,
            diffusion: DiffusionConfig { seed, ..self.diffusion },
            provisioning: self.provisioning,
            carry_over: self.outer.carry_over,
            freeze_diffusion: self.outer.freeze_diffusion,
            validation_fraction: self.outer.validation_fraction,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
method = "3d"
seeds = [1, 2]
output_dir = "out"

[train]
id = "train"
synth = { kind = "ar1", count = 20, seed = 1 }

[[test]]
id = "shifted"
synth = { kind = "ar1", count = 20, seed = 2 }
shift = { kind = "mean_scale", factor = 1.5 }

[imax.dual]
iterations = 3
budget = { mode = "calibrated", margin = 0.01 }
"#;

    #[test]
    fn parses_and_keeps_defaults() {
        let c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.method, Method::ThreeD);
        assert_eq!(c.imax.dual.iterations, 3);
        assert_eq!(c.imax.dual.eta, 0.01);
        assert_eq!(c.imax.ppo.kappa, 0.4);
        assert_eq!(c.baseline_training.lr, 2e-5);
        assert_eq!(c.provisioning, ProvisioningParams::default());
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_missing_files() {
        assert!(ExperimentConfig::from_toml("bogus = 1").unwrap_err().is_config());
        let mut c = ExperimentConfig::from_toml(SAMPLE).unwrap();
        c.test[0] = DatasetSpec {
            id: "x".into(),
            path: Some("/nonexistent/file.csv".into()),
            ..DatasetSpec::default()
        };
        assert!(c.validate().unwrap_err().is_config());
        c.test.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn bare_config_has_reference_constants() {
        let c = ExperimentConfig::default();
        assert_eq!(c.imax.ppo.tail_len, 10);
        assert_eq!(c.imax.ppo.lr, 1e-6);
        assert_eq!(c.predictor.epochs, 15);
        assert_eq!(c.baseline_training.epochs, 100);
        assert_eq!(c.kl_dro.epsilon, 2.0);
        assert_eq!(c.w_dro.epsilon, 2.0);
        assert_eq!(c.diffusion.t_max, 500);
    }
}
