use serde::{Deserialize, Serialize};

use crate::data::TraceDataset;
use crate::error::{Error, Result};
use crate::nn::{attach, Mat, Tape};
use crate::predictor::{self, Batch, LossConfig, PredictorParams, PredictorTrainer, TrainConfig};
use crate::provisioning::ProvisioningParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WDroConfig {
    /// Per-sample l2 radius in normalized units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for WDroConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            steps: 5,
            step_size: 0.5,
        }
    }
}

impl WDroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("Wasserstein radius {} must be non-negative", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one ascent step is required".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("ascent step {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    /// Samples left unperturbed because of a non-finite input gradient.
    pub non_finite: usize,
    pub max_radius: f64,
}

/// Per-sample losses and their gradients with respect to the normalized
/// rows `[context | label]`.
fn input_gradient(
    params: &PredictorParams,
    rows: &Mat,
    p: &ProvisioningParams,
    loss: &LossConfig,
) -> (Vec<f64>, Mat) {
    let mut t = Tape::new();
    let vars = attach(&mut t, &params.weights);
    let x = t.leaf(rows.clone());
    let ctx = t.slice_cols(x, 0, params.context);
    let label = t.slice_cols(x, params.context, params.horizon);
    let col = predictor::sample_losses_tape(params, &mut t, &vars, ctx, label, p, loss);
    let values = t.value(col).iter().copied().collect();
    let total = t.sum_all(col);
    let mut g = t.backward(total);
    (values, g.take_or_zeros(x, rows.dim()))
}

/// Normalized gradient ascent on each sample's decision loss inside the l2
/// ball of radius `ε` and the non-negative orthant. A step that would lower
/// a sample's loss is rejected and that sample's step halved.
pub fn perturb_batch(
    params: &PredictorParams,
    batch: &Batch,
    cfg: &WDroConfig,
    p: &ProvisioningParams,
    loss: &LossConfig,
) -> Result<(Batch, PerturbReport)> {
    cfg.validate()?;
    let x0 = batch.rows();
    let mut x = x0.clone();
    let b = x.nrows();
    let mut step = vec![cfg.step_size; b];
    let mut frozen = vec![false; b];
    let mut report = PerturbReport::default();
    if cfg.epsilon == 0.0 {
        return Ok((batch.clone(), report));
    }
    for _ in 0..cfg.steps {
        let (cur, grad) = input_gradient(params, &x, p, loss);
        let mut cand = x.clone();
        for i in 0..b {
            if frozen[i] {
                continue;
            }
            let g = grad.row(i);
            if g.iter().any(|v| !v.is_finite()) || !cur[i].is_finite() {
                frozen[i] = true;
                report.non_finite += 1;
                x.row_mut(i).assign(&x0.row(i));
                cand.row_mut(i).assign(&x0.row(i));
                continue;
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let mut d: Vec<f64> = (0..x.ncols())
                .map(|j| x[(i, j)] + step[i] * g[j] / norm - x0[(i, j)])
                .collect();
            let r = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r > cfg.epsilon {
                d.iter_mut().for_each(|v| *v *= cfg.epsilon / r);
            }
            for (j, dj) in d.into_iter().enumerate() {
                cand[(i, j)] = (x0[(i, j)] + dj).max(0.0);
            }
        }
        let next = predictor::sample_losses(params, &Batch::from_rows(&cand, params.context), p, loss);
        for i in 0..b {
            if frozen[i] {
                continue;
            }
            if next[i].is_finite() && next[i] >= cur[i] {
                x.row_mut(i).assign(&cand.row(i));
            } else {
                step[i] *= 0.5;
            }
        }
    }
    for i in 0..b {
        let r = (&x.row(i) - &x0.row(i)).iter().map(|v| v * v).sum::<f64>().sqrt();
        report.max_radius = report.max_radius.max(r);
    }
    if report.non_finite > 0 {
        log::warn!("{} samples left unperturbed after non-finite input gradients", report.non_finite);
    }
    Ok((Batch::from_rows(&x, params.context), report))
}

/// Predictor training on adversarially perturbed batches.
pub fn train_w_dro(
    s0: &TraceDataset,
    cfg: &TrainConfig,
    w: &WDroConfig,
    p: &ProvisioningParams,
) -> Result<(PredictorParams, Vec<f64>)> {
    if s0.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    w.validate()?;
    let mut trainer = PredictorTrainer::for_data(&s0.sequences, s0.context, s0.horizon, s0.norm, *cfg, *p)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut non_finite = 0usize;
    for _ in 0..cfg.epochs {
        let l = trainer.epoch_with(&s0.sequences, |params, batch, _| {
            let (pert, rep) = perturb_batch(params, &batch, w, p, &cfg.loss)?;
            non_finite += rep.non_finite;
            Ok((pert, None))
        })?;
        losses.push(l);
    }
    if non_finite > 0 {
        log::warn!("W-DRO: {non_finite} perturbations skipped");
    }
    Ok((trainer.params, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthKind, SynthParams};
    use crate::predictor::PredictorArch;
    use crate::rng;

    fn setup() -> (PredictorParams, Batch) {
        let d = synth_generate(SynthKind::Ar1, 12, &SynthParams::default(), 2).unwrap();
        let pred = PredictorParams::init(PredictorArch { hidden1: 6, hidden2: 4 }, 8, 28, d.norm, 0.3, &mut rng::stream(4))
            .unwrap();
        let b = Batch::from_sequences(&d.sequences, 8, d.norm).unwrap();
        (pred, b)
    }

    #[test]
    fn zero_gradient_leaves_samples() {
        let (mut pred, b) = setup();
        // Zero output weights and bias: prediction and loss are constant in the
        // context, and the clipped decision is zero, so the loss depends on
        // the label only through R(0, c) = 0.
        pred.weights[6].fill(0.0);
        pred.weights[7].fill(0.0);
        let (out, _) = perturb_batch(&pred, &b, &WDroConfig::default(), &ProvisioningParams::default(), &LossConfig::default().exact())
            .unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn perturbations_stay_in_ball_and_orthant() {
        let (pred, b) = setup();
        let p = ProvisioningParams::default();
        for eps in [0.05, 0.5, 2.0] {
            let cfg = WDroConfig {
                epsilon: eps,
                ..WDroConfig::default()
            };
            let (out, rep) = perturb_batch(&pred, &b, &cfg, &p, &LossConfig::default()).unwrap();
            let d = &out.rows() - &b.rows();
            for row in d.rows() {
                assert!(row.iter().map(|v| v * v).sum::<f64>().sqrt() <= eps + 1e-12);
            }
            assert!(out.rows().iter().all(|&v| v >= 0.0));
            assert!(rep.max_radius <= eps + 1e-12);
        }
    }

    #[test]
    fn ascent_does_not_lower_loss() {
        let (pred, b) = setup();
        let p = ProvisioningParams::default();
        let loss = LossConfig::default();
        let (out, _) = perturb_batch(&pred, &b, &WDroConfig::default(), &p, &loss).unwrap();
        let clean = predictor::sample_losses(&pred, &b, &p, &loss);
        let pert = predictor::sample_losses(&pred, &out, &p, &loss);
        for (c, q) in clean.iter().zip(&pert) {
            assert!(q + 1e-9 >= *c, "{q} < {c}");
        }
        assert!(pert.iter().sum::<f64>() > clean.iter().sum::<f64>());
    }
}
