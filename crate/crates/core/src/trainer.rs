//! Outer min-max loop (3D-Learning) and the plain decision-focused trainer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TraceDataset;
use crate::diffusion::{self, DiffusionConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::imax::{self, ImaxConfig};
use crate::predictor::{self, PredictorParams, PredictorTrainer, TrainConfig, WindowedSample};
use crate::provisioning::{self, ProvisioningParams, RegretReport};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterConfig {
    pub epochs: usize,
    /// Generated sequences per epoch; `None` uses `|S0|`.
    pub adversarial_set_size: Option<usize>,
    pub predictor: TrainConfig,
    pub imax: ImaxConfig,
    pub diffusion: DiffusionConfig,
    pub provisioning: ProvisioningParams,
    /// Start each IMAX run from the previous epoch's model instead of `θ0`.
    pub carry_over: bool,
    /// Skip IMAX and sample `θ0` directly.
    pub freeze_diffusion: bool,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            adversarial_set_size: None,
            predictor: TrainConfig::default(),
            imax: ImaxConfig::default(),
            diffusion: DiffusionConfig::default(),
            provisioning: ProvisioningParams::default(),
            carry_over: false,
            freeze_diffusion: false,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adversarial_set_size == Some(0) {
            return Err(Error::Config("adversarial set size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        self.predictor.validate()?;
        self.provisioning.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// IMAX failed and the epoch was skipped.
    pub skipped: bool,
    pub j: Option<f64>,
    pub alpha_trace: Vec<f64>,
    pub j_trace: Vec<f64>,
    pub mean_adversarial_loss: Option<f64>,
    pub predictor_loss: Option<f64>,
    pub validation_regret: Option<f64>,
    /// Mean generated workload in tokens.
    pub mean_workload: Option<f64>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct OuterOutcome {
    pub predictor: PredictorParams,
    pub reference: DiffusionModel,
    pub records: Vec<EpochRecord>,
}

pub fn evaluate_regret(
    predictor: &PredictorParams,
    data: &TraceDataset,
    p: &ProvisioningParams,
    dataset_id: &str,
) -> Result<RegretReport> {
    if data.context != predictor.context || data.horizon != predictor.horizon {
        return Err(Error::Shape(format!(
            "dataset windows {}+{} vs predictor {}+{}",
            data.context, data.horizon, predictor.context, predictor.horizon
        )));
    }
    let (alg, oracle) = predictor::sequence_rewards(predictor, &data.sequences, p)?;
    let mut report = provisioning::regret(&alg, &oracle)?;
    report.dataset_id = dataset_id.to_string();
    Ok(report)
}

fn windows(data: &TraceDataset) -> Result<Vec<WindowedSample>> {
    data.sequences
        .iter()
        .map(|s| predictor::slice_sample(s, data.context))
        .collect()
}

/// Plain decision-focused (or MSE) training on `S0` windows.
pub fn run_dfl(s0: &TraceDataset, cfg: &TrainConfig, p: &ProvisioningParams) -> Result<(PredictorParams, Vec<f64>)> {
    if s0.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    predictor::train(&windows(s0)?, s0.norm, *cfg, p)
}

fn validation_slice(s0: &TraceDataset, fraction: f64, seed: u64) -> Result<TraceDataset> {
    let parts = s0.split(&[fraction, 1.0 - fraction], seed)?;
    Ok(if parts[0].is_empty() { s0.clone() } else { parts[0].clone() })
}

/// Gradient descent with a max-oracle: each epoch finds an adversarial
/// diffusion model, samples a dataset from it and gives the predictor one
/// pass over that dataset. `theta0` is trained from `cfg.diffusion` when
/// absent.
pub fn run_3d_learning(
    s0: &TraceDataset,
    cfg: &OuterConfig,
    theta0: Option<&DiffusionModel>,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<OuterOutcome> {
    if s0.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    cfg.validate()?;
    let reference = match theta0 {
        Some(m) => {
            if m.seq_len() != s0.seq_len() {
                return Err(Error::Shape("reference model length differs from the data".into()));
            }
            m.clone()
        }
        None => diffusion::train_reference(s0, &cfg.diffusion)?.model,
    };
    let mut trainer = PredictorTrainer::for_data(
        &s0.sequences,
        s0.context,
        s0.horizon,
        s0.norm,
        cfg.predictor,
        cfg.provisioning,
    )?;
    let val = validation_slice(s0, cfg.validation_fraction, cfg.seed)?;
    let n_adv = cfg.adversarial_set_size.unwrap_or(s0.len());
    let mut current: Option<DiffusionModel> = None;
    let mut failures = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rec = EpochRecord {
            epoch,
            skipped: false,
            j: None,
            alpha_trace: Vec::new(),
            j_trace: Vec::new(),
            mean_adversarial_loss: None,
            predictor_loss: None,
            validation_regret: None,
            mean_workload: None,
        };
        let theta = if cfg.freeze_diffusion {
            reference.clone()
        } else {
            let mut icfg = cfg.imax;
            icfg.ppo.seed = rng::substream(cfg.seed, "imax-epoch", epoch as u64).next_u64();
            let start = if cfg.carry_over { current.as_ref() } else { None };
            match imax::imax(&trainer.params, &cfg.provisioning, &reference, start, s0, &icfg, &mut |_| {}) {
                Ok(out) => {
                    failures = 0;
                    rec.j = out.records.last().map(|r| r.j);
                    rec.alpha_trace = out.dual.history.iter().map(|h| h.alpha).collect();
                    rec.j_trace = out.dual.history.iter().map(|h| h.j).collect();
                    out.model
                }
                Err(e) => {
                    failures += 1;
                    log::warn!("epoch {epoch}: inner maximization failed: {e}");
                    if failures >= 2 {
                        return Err(Error::Optimization(format!(
                            "inner maximization failed in two consecutive epochs (last: {e})"
                        )));
                    }
                    rec.skipped = true;
                    log(&rec);
                    records.push(rec);
                    continue;
                }
            }
        };
        let mut r = rng::substream(cfg.seed, "adversarial-set", epoch as u64);
        let generated = diffusion::sample(&theta, n_adv, None, &mut r)?.sequences;
        let losses = imax::decision_losses(&generated, &trainer.params, &cfg.provisioning)?;
        rec.mean_adversarial_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        let tokens: usize = generated.iter().map(Vec::len).sum();
        rec.mean_workload = Some(generated.iter().flatten().sum::<f64>() / tokens as f64);
        rec.predictor_loss = Some(trainer.epoch(&generated)?);
        rec.validation_regret = evaluate_regret(&trainer.params, &val, &cfg.provisioning, "validation")?.regret;
        if cfg.carry_over && !cfg.freeze_diffusion {
            current = Some(theta);
        }
        log::info!("{}", rec.to_line());
        log(&rec);
        records.push(rec);
    }
    Ok(OuterOutcome {
        predictor: trainer.params,
        reference,
        records,
    })
}
