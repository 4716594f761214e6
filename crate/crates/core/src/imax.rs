//! Inner maximization: searches for the diffusion model whose samples
//! maximize the expected decision loss while its score-matching loss stays
//! within a budget, by Lagrangian dual ascent with a clipped policy-gradient
//! surrogate over the last `T′` reverse steps.

use rand::Rng;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::data::TraceDataset;
use crate::diffusion::{
    self, draw_noise, log_prob_tail, log_prob_tail_tape, score_matching_loss_tape, DiffusionModel,
    ReverseTrajectory, Trainable,
};
use crate::error::{Error, Result};
use crate::nn::{self, attach, Adam, AdamConfig, Mat, Tape, Var};
use crate::predictor::{self, PredictorParams};
use crate::provisioning::ProvisioningParams;
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualRecord {
    pub j: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub alpha: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub history: Vec<DualRecord>,
}

impl DualState {
    pub fn new(alpha: f64, eta: f64, epsilon: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("initial multiplier {alpha} must be non-negative")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("dual step {eta} must be positive")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("budget {epsilon} must be positive")));
        }
        Ok(Self {
            alpha,
            eta,
            epsilon,
            history: Vec::new(),
        })
    }
}

/// `α ← max(α + η(J − ε), 0)`, appending `(J, α_new)` to the history.
pub fn dual_update(dual: &DualState, j_current: f64) -> DualState {
    let mut next = dual.clone();
    next.alpha = (dual.alpha + dual.eta * (j_current - dual.epsilon)).max(0.0);
    next.history.push(DualRecord {
        j: j_current,
        alpha: next.alpha,
    });
    next
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Budget {
    Fixed { epsilon: f64 },
    /// `ε = J(θ0) + margin` on the evaluation slice.
    Calibrated { margin: f64 },
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Fixed { epsilon: 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualConfig {
    pub alpha0: f64,
    pub eta: f64,
    pub budget: Budget,
    /// Dual iterations `K`.
    pub iterations: usize,
    /// Fraction of `S0` held out for evaluating `J` in the dual update.
    pub eval_fraction: f64,
    pub eval_draws: usize,
    pub eval_seed: u64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            eta: 0.01,
            budget: Budget::default(),
            iterations: 10,
            eval_fraction: 0.2,
            eval_draws: 4,
            eval_seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Clipped importance-ratio surrogate on samples from `θ0`.
    #[default]
    Ppo,
    /// Score-function gradient on samples from the current `θ`.
    Vpg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub kappa: f64,
    pub tail_len: usize,
    pub inner_epochs: usize,
    pub batch: usize,
    pub reward_standardize: bool,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Sampling variance `σ_t²` of the fine-tuned steps.
    pub tail_sigma2: f64,
    pub estimator: Estimator,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            kappa: 0.4,
            tail_len: 10,
            inner_epochs: 10,
            batch: 64,
            reward_standardize: true,
            lr: 1e-6,
            clip_norm: None,
            tail_sigma2: 0.05,
            estimator: Estimator::Ppo,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("clip parameter {} outside (0, 1)", self.kappa)));
        }
        if self.tail_len == 0 || self.tail_len > t_max {
            return Err(Error::Config(format!("tail length {} outside 1..={t_max}", self.tail_len)));
        }
        if self.batch == 0 {
            return Err(Error::Config("trajectory batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("fine-tuning learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImaxConfig {
    pub dual: DualConfig,
    pub ppo: PpoConfig,
}

/// `f = −R(y*(ĉ), c)` for one de-normalized generated sequence.
pub fn decision_loss_of_sample(x0: &[f64], predictor: &PredictorParams, p: &ProvisioningParams) -> Result<f64> {
    if x0.len() != predictor.seq_len() {
        return Err(Error::Shape(format!(
            "sample of length {} vs predictor windows {} + {}",
            x0.len(),
            predictor.context,
            predictor.horizon
        )));
    }
    Ok(decision_losses(&[x0.to_vec()], predictor, p)?[0])
}

pub fn decision_losses(seqs: &[Vec<f64>], predictor: &PredictorParams, p: &ProvisioningParams) -> Result<Vec<f64>> {
    if let Some(s) = seqs.iter().find(|s| s.len() != predictor.seq_len()) {
        return Err(Error::Shape(format!("sample of length {} vs {}", s.len(), predictor.seq_len())));
    }
    let (alg, _) = predictor::sequence_rewards(predictor, seqs, p)?;
    Ok(alg.into_iter().map(|r| -r).collect())
}

/// `min(r·f, clip(r, 1−κ, 1+κ)·f)`.
pub fn clipped_term(r: f64, f: f64, kappa: f64) -> f64 {
    (r * f).min(r.clamp(1.0 - kappa, 1.0 + kappa) * f)
}

/// Batch z-score; all zeros when the spread vanishes.
pub fn standardize(f: &[f64]) -> Vec<f64> {
    let n = f.len().max(1) as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; f.len()];
    }
    f.iter().map(|x| (x - mean) / sd).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoValue {
    pub value: f64,
    pub clip_fraction: f64,
    pub dropped: usize,
}

fn check_losses(trajs: &[ReverseTrajectory], losses: &[f64]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::Argument("no trajectories".into()));
    }
    if trajs.len() != losses.len() {
        return Err(Error::Shape("one loss per trajectory is required".into()));
    }
    Ok(())
}

fn surrogate_losses(losses: &[f64], cfg: &PpoConfig) -> Vec<f64> {
    if cfg.reward_standardize {
        standardize(losses)
    } else {
        losses.to_vec()
    }
}

/// Indices whose ratio `exp(logp − logp0)` is finite.
fn finite_ratios(logp: &[f64], logp0: &[f64]) -> Vec<usize> {
    (0..logp.len())
        .filter(|&i| (logp[i] - logp0[i]).exp().is_finite())
        .collect()
}

/// Clipped surrogate of `theta` against the sampling model `theta0`.
pub fn ppo_objective(
    theta: &DiffusionModel,
    theta0: &DiffusionModel,
    trajs: &[ReverseTrajectory],
    losses: &[f64],
    cfg: &PpoConfig,
) -> Result<PpoValue> {
    check_losses(trajs, losses)?;
    let f = surrogate_losses(losses, cfg);
    let lp = log_prob_tail(theta, trajs)?;
    let lp0 = log_prob_tail(theta0, trajs)?;
    let kept = finite_ratios(&lp, &lp0);
    if kept.is_empty() {
        return Err(Error::Optimization("every trajectory has a non-finite ratio".into()));
    }
    let mut total = 0.0;
    let mut clipped = 0usize;
    for &i in &kept {
        let r = (lp[i] - lp0[i]).exp();
        if (r - 1.0).abs() > cfg.kappa {
            clipped += 1;
        }
        total += clipped_term(r, f[i], cfg.kappa);
    }
    Ok(PpoValue {
        value: total / kept.len() as f64,
        clip_fraction: clipped as f64 / kept.len() as f64,
        dropped: trajs.len() - kept.len(),
    })
}

/// Surrogate on the tape over `kept` trajectories.
fn ppo_tape(
    theta: &DiffusionModel,
    tape: &mut Tape,
    vars: &[Var],
    trajs: &[ReverseTrajectory],
    lp0: &[f64],
    f: &[f64],
    kappa: f64,
) -> Result<Var> {
    let lp = log_prob_tail_tape(theta, tape, vars, trajs)?;
    let lp0 = tape.leaf(Mat::from_shape_fn((trajs.len(), 1), |(i, _)| lp0[i]));
    let d = tape.sub(lp, lp0);
    let r = tape.exp(d);
    let fcol = tape.leaf(Mat::from_shape_fn((trajs.len(), 1), |(i, _)| f[i]));
    let terms = tape.map2(r, fcol, move |r, f| {
        let c = r.clamp(1.0 - kappa, 1.0 + kappa);
        if r * f <= c * f {
            (r * f, f, 0.0)
        } else {
            (c * f, 0.0, 0.0)
        }
    });
    Ok(tape.mean_all(terms))
}

/// `mean_i ∇_θ log P_θ(traj_i)·f_i` over the tail parameters.
pub fn vpg_gradient(theta: &DiffusionModel, trajs: &[ReverseTrajectory], losses: &[f64]) -> Result<Vec<Mat>> {
    check_losses(trajs, losses)?;
    let tail = theta.trainable(Trainable::Tail)?;
    let mut tape = Tape::new();
    let vars = attach(&mut tape, &tail.params);
    let obj = vpg_tape(theta, &mut tape, &vars, trajs, losses)?;
    let mut g = tape.backward(obj);
    Ok(nn::collect_grads(&mut g, &vars, &tail.params))
}

fn vpg_tape(
    theta: &DiffusionModel,
    tape: &mut Tape,
    vars: &[Var],
    trajs: &[ReverseTrajectory],
    f: &[f64],
) -> Result<Var> {
    let lp = log_prob_tail_tape(theta, tape, vars, trajs)?;
    let fcol = tape.leaf(Mat::from_shape_fn((trajs.len(), 1), |(i, _)| f[i]));
    let w = tape.mul(lp, fcol);
    Ok(tape.mean_all(w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Surrogate value at the start of the step.
    pub objective: f64,
    pub clip_fraction: f64,
    pub dropped: usize,
    pub retried: bool,
    pub lr: f64,
}

enum Attempt {
    Done(StepReport),
    NonFinite,
}

/// Tail-step score-matching loss on a random `S0` minibatch, scaled by
/// `T′/T` so its gradient is that of the full uniform-`t` loss.
fn tail_j_tape<R: Rng + ?Sized>(
    theta: &DiffusionModel,
    tape: &mut Tape,
    vars: &[Var],
    s0: &Mat,
    batch: usize,
    rng: &mut R,
) -> Result<Var> {
    let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..s0.nrows())).collect();
    let sub = s0.select(ndarray::Axis(0), &rows);
    let draws = draw_noise(rng, rows.len(), theta.seq_len(), theta.tail_len);
    let j = score_matching_loss_tape(theta, tape, Trainable::Tail, vars, &sub, &draws)?;
    Ok(tape.scale(j, theta.tail_len as f64 / theta.t_max() as f64))
}

#[allow(clippy::too_many_arguments)]
fn attempt_step<R: Rng + ?Sized>(
    theta: &mut DiffusionModel,
    theta0: &DiffusionModel,
    alpha: f64,
    s0: &Mat,
    trajs: &[ReverseTrajectory],
    losses: &[f64],
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<Attempt> {
    let f = surrogate_losses(losses, cfg);
    let lp0 = match cfg.estimator {
        Estimator::Ppo => log_prob_tail(theta0, trajs)?,
        Estimator::Vpg => Vec::new(),
    };
    let mut report = StepReport {
        objective: f64::NAN,
        clip_fraction: 0.0,
        dropped: 0,
        retried: false,
        lr: adam.config.lr,
    };
    for epoch in 0..cfg.inner_epochs.max(1) {
        let params = theta.trainable(Trainable::Tail)?.params.clone();
        let mut tape = Tape::new();
        let vars = attach(&mut tape, &params);
        let obj = match cfg.estimator {
            Estimator::Ppo => {
                let lp = log_prob_tail(theta, trajs)?;
                let kept = finite_ratios(&lp, &lp0);
                report.dropped += trajs.len() - kept.len();
                if kept.is_empty() {
                    return Err(Error::Optimization("every trajectory has a non-finite ratio".into()));
                }
                let sub: Vec<ReverseTrajectory> = kept.iter().map(|&i| trajs[i].clone()).collect();
                let sub_lp0: Vec<f64> = kept.iter().map(|&i| lp0[i]).collect();
                let sub_f: Vec<f64> = kept.iter().map(|&i| f[i]).collect();
                let clipped = kept.iter().filter(|&&i| ((lp[i] - lp0[i]).exp() - 1.0).abs() > cfg.kappa).count();
                report.clip_fraction = clipped as f64 / kept.len() as f64;
                ppo_tape(theta, &mut tape, &vars, &sub, &sub_lp0, &sub_f, cfg.kappa)?
            }
            Estimator::Vpg => vpg_tape(theta, &mut tape, &vars, trajs, &f)?,
        };
        if epoch == 0 {
            report.objective = tape.scalar_value(obj);
        }
        let total = if alpha > 0.0 {
            let j = tail_j_tape(theta, &mut tape, &vars, s0, cfg.batch, rng)?;
            let penalty = tape.scale(j, -alpha);
            tape.add(obj, penalty)
        } else {
            obj
        };
        let value = tape.scalar_value(total);
        let mut g = tape.backward(total);
        let grads = nn::collect_grads(&mut g, &vars, &params);
        if !value.is_finite() || !nn::all_finite(&grads) {
            return Ok(Attempt::NonFinite);
        }
        let tail = theta.trainable_mut(Trainable::Tail)?;
        adam.ascend(&mut tail.params, &grads);
        if !nn::all_finite(&tail.params) {
            return Ok(Attempt::NonFinite);
        }
    }
    Ok(Attempt::Done(report))
}

/// `inner_epochs` ascent passes on `surrogate − α·J(θ, S0)` over the tail
/// parameters. A non-finite pass restores the pre-step parameters, halves
/// the learning rate and retries once.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_step<R: Rng + ?Sized>(
    theta: &mut DiffusionModel,
    theta0: &DiffusionModel,
    alpha: f64,
    s0: &Mat,
    trajs: &[ReverseTrajectory],
    losses: &[f64],
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<StepReport> {
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("multiplier {alpha} must be non-negative")));
    }
    check_losses(trajs, losses)?;
    if alpha > 0.0 && s0.nrows() == 0 {
        return Err(Error::Argument("score-matching term needs data".into()));
    }
    let saved = (theta.clone(), adam.clone());
    if let Attempt::Done(r) = attempt_step(theta, theta0, alpha, s0, trajs, losses, cfg, adam, rng)? {
        return Ok(r);
    }
    log::warn!("non-finite fine-tuning step; retrying at half the learning rate");
    *theta = saved.0;
    *adam = saved.1;
    adam.config.lr *= 0.5;
    match attempt_step(theta, theta0, alpha, s0, trajs, losses, cfg, adam, rng)? {
        Attempt::Done(mut r) => {
            r.retried = true;
            Ok(r)
        }
        Attempt::NonFinite => Err(Error::Optimization("fine-tuning step diverged twice".into())),
    }
}

/// Per-iteration log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImaxRecord {
    pub k: usize,
    pub j: f64,
    pub alpha: f64,
    pub mean_f: f64,
    pub clip_fraction: f64,
    pub dropped: usize,
    pub objective: f64,
}

impl ImaxRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct ImaxOutcome {
    pub model: DiffusionModel,
    pub dual: DualState,
    pub records: Vec<ImaxRecord>,
    /// `J(θ0)` on the evaluation slice.
    pub j0: f64,
}

/// Prepares the reference model for fine-tuning: its tail network is a copy
/// of its reference network and the tail steps use `cfg.tail_sigma2`.
pub fn reference_with_tail(reference: &DiffusionModel, cfg: &PpoConfig) -> Result<DiffusionModel> {
    let mut base = reference.clone();
    base.tail = None;
    base.with_tail(cfg.tail_len, cfg.tail_sigma2)
}

/// Normalized evaluation slice and gradient rows of `S0`.
fn split_s0(s0: &TraceDataset, model: &DiffusionModel, dual: &DualConfig) -> Result<(Mat, Mat)> {
    if s0.is_empty() {
        return Err(Error::Argument("IMAX needs a non-empty training set".into()));
    }
    if s0.seq_len() != model.seq_len() {
        return Err(Error::Shape("training sequences differ from the diffusion length".into()));
    }
    if !(dual.eval_fraction > 0.0 && dual.eval_fraction < 1.0) {
        return Err(Error::Config("evaluation fraction must lie in (0, 1)".into()));
    }
    let parts = s0.split(&[dual.eval_fraction, 1.0 - dual.eval_fraction], dual.eval_seed)?;
    let (eval, rest) = if parts[0].is_empty() || parts[1].is_empty() {
        (s0.clone(), s0.clone())
    } else {
        (parts[0].clone(), parts[1].clone())
    };
    Ok((model.normalize(&eval.sequences), model.normalize(&rest.sequences)))
}

/// Per-sample decision loss of a batch of generated sequences.
pub type SampleLoss<'a> = dyn Fn(&[Vec<f64>]) -> Result<Vec<f64>> + 'a;

/// Algorithm-level inner maximization with an arbitrary per-sample loss.
/// `start` overrides the initial `θ` (carry-over); `theta0` is the sampling
/// reference.
pub fn imax_with(
    loss_fn: &SampleLoss<'_>,
    theta0: &DiffusionModel,
    start: Option<&DiffusionModel>,
    s0: &TraceDataset,
    cfg: &ImaxConfig,
    log: &mut dyn FnMut(&ImaxRecord),
) -> Result<ImaxOutcome> {
    let ppo = &cfg.ppo;
    ppo.validate(theta0.t_max())?;
    let theta0 = reference_with_tail(theta0, ppo)?;
    let (eval, rows) = split_s0(s0, &theta0, &cfg.dual)?;
    let j0 = diffusion::evaluate_j(&theta0, &eval, cfg.dual.eval_draws, cfg.dual.eval_seed)?;
    let epsilon = match cfg.dual.budget {
        Budget::Fixed { epsilon } => epsilon,
        Budget::Calibrated { margin } => j0 + margin,
    };
    let mut dual = DualState::new(cfg.dual.alpha0, cfg.dual.eta, epsilon)?;
    let mut theta = match start {
        Some(m) if m.tail.is_some() && m.tail_len == ppo.tail_len => m.clone(),
        Some(m) => reference_with_tail(m, ppo)?,
        None => theta0.clone(),
    };
    let tail_params = &theta.trainable(Trainable::Tail)?.params;
    let mut adam = Adam::new(
        AdamConfig {
            lr: ppo.lr,
            clip_norm: ppo.clip_norm,
            ..AdamConfig::default()
        },
        tail_params,
    );
    let mut r: Stream = rng::substream(ppo.seed, "imax", 0);
    let mut records = Vec::with_capacity(cfg.dual.iterations);
    for k in 1..=cfg.dual.iterations {
        let sampler = match ppo.estimator {
            Estimator::Ppo => &theta0,
            Estimator::Vpg => &theta,
        };
        let out = diffusion::sample(sampler, ppo.batch, Some(ppo.tail_len), &mut r)?;
        let losses = loss_fn(&out.sequences)?;
        let trajs = out.trajectories.expect("tail recorded");
        let step = lagrangian_step(&mut theta, &theta0, dual.alpha, &rows, &trajs, &losses, ppo, &mut adam, &mut r)?;
        let j = diffusion::evaluate_j(&theta, &eval, cfg.dual.eval_draws, cfg.dual.eval_seed)?;
        dual = dual_update(&dual, j);
        let rec = ImaxRecord {
            k,
            j,
            alpha: dual.alpha,
            mean_f: losses.iter().sum::<f64>() / losses.len() as f64,
            clip_fraction: step.clip_fraction,
            dropped: step.dropped,
            objective: step.objective,
        };
        log::debug!("imax {}", rec.to_line());
        log(&rec);
        records.push(rec);
    }
    Ok(ImaxOutcome {
        model: theta,
        dual,
        records,
        j0,
    })
}

/// Inner maximization of the decision loss of `predictor`.
pub fn imax(
    predictor: &PredictorParams,
    p: &ProvisioningParams,
    theta0: &DiffusionModel,
    start: Option<&DiffusionModel>,
    s0: &TraceDataset,
    cfg: &ImaxConfig,
    log: &mut dyn FnMut(&ImaxRecord),
) -> Result<ImaxOutcome> {
    let loss = |seqs: &[Vec<f64>]| decision_losses(seqs, predictor, p);
    imax_with(&loss, theta0, start, s0, cfg, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::diffusion::{DiffusionSchedule, NetArch, NoiseNet};
    use crate::predictor::PredictorArch;
    use approx::assert_relative_eq;

    fn toy_model(seed: u64) -> DiffusionModel {
        let sched = DiffusionSchedule::linear(20, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(seed);
        let mut net = NoiseNet::init(NetArch::mlp(8), 6, &mut r);
        let n = net.params.len();
        net.params[n - 2].mapv_inplace(|_| r.random_range(-0.2..0.2));
        DiffusionModel::new(sched, net, 100.0, seed)
    }

    fn toy_data(n: usize) -> TraceDataset {
        let seqs = (0..n).map(|i| vec![30.0 + (i % 5) as f64; 6]).collect();
        TraceDataset::new(seqs, 2, 4, 100.0, DatasetMeta::default()).unwrap()
    }

    fn ppo_cfg() -> PpoConfig {
        PpoConfig {
            tail_len: 5,
            inner_epochs: 3,
            batch: 16,
            lr: 1e-3,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn dual_update_examples() {
        let d = DualState::new(0.5, 0.01, 0.03).unwrap();
        assert_relative_eq!(dual_update(&d, 0.05).alpha, 0.5002, max_relative = 1e-12);
        let d = DualState::new(0.001, 0.01, 0.03).unwrap();
        assert_eq!(dual_update(&d, 0.03 - 1.0).alpha, 0.0);
        let d = DualState::new(0.7, 0.01, 0.03).unwrap();
        let u = dual_update(&d, 0.03);
        assert_eq!(u.alpha, 0.7);
        assert_eq!(u.history, vec![DualRecord { j: 0.03, alpha: 0.7 }]);
        assert!(DualState::new(-1.0, 0.01, 0.03).is_err());
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_term(1.5, 2.0, 0.4), 2.8);
        assert_eq!(clipped_term(0.5, -2.0, 0.4), -1.2);
        assert_eq!(clipped_term(1.1, 3.0, 0.4), 1.1 * 3.0);
    }

    #[test]
    fn ratio_is_one_at_reference() {
        let m = reference_with_tail(&toy_model(1), &ppo_cfg()).unwrap();
        let out = diffusion::sample(&m, 12, Some(5), &mut rng::stream(2)).unwrap();
        let trajs = out.trajectories.unwrap();
        let losses: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let cfg = PpoConfig {
            reward_standardize: false,
            ..ppo_cfg()
        };
        let v = ppo_objective(&m, &m, &trajs, &losses, &cfg).unwrap();
        assert_relative_eq!(v.value, 5.5, max_relative = 1e-12);
        assert_eq!(v.clip_fraction, 0.0);
    }

    #[test]
    fn vpg_zero_loss_zero_gradient() {
        let m = reference_with_tail(&toy_model(1), &ppo_cfg()).unwrap();
        let trajs = diffusion::sample(&m, 4, Some(5), &mut rng::stream(3)).unwrap().trajectories.unwrap();
        let g = vpg_gradient(&m, &trajs, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        // Single trajectory: gradient of log-prob scaled by f.
        let one = vpg_gradient(&m, &trajs[..1], &[1.0]).unwrap();
        let three = vpg_gradient(&m, &trajs[..1], &[3.0]).unwrap();
        for (a, b) in one.iter().zip(&three) {
            for (x, y) in a.iter().zip(b) {
                assert_relative_eq!(3.0 * x, *y, max_relative = 1e-12, epsilon = 1e-300);
            }
        }
    }

    #[test]
    fn zero_multiplier_ascends_the_surrogate() {
        let cfg = ppo_cfg();
        let theta0 = reference_with_tail(&toy_model(4), &cfg).unwrap();
        let trajs = diffusion::sample(&theta0, 16, Some(5), &mut rng::stream(5)).unwrap().trajectories.unwrap();
        let losses: Vec<f64> = trajs.iter().map(|t| t.final_state().iter().sum()).collect();
        let mut theta = theta0.clone();
        let before = ppo_objective(&theta, &theta0, &trajs, &losses, &cfg).unwrap().value;
        let mut adam = Adam::new(AdamConfig::with_lr(1e-4), &theta.tail.as_ref().unwrap().params);
        lagrangian_step(&mut theta, &theta0, 0.0, &Mat::zeros((0, 6)), &trajs, &losses, &cfg, &mut adam, &mut rng::stream(1))
            .unwrap();
        let after = ppo_objective(&theta, &theta0, &trajs, &losses, &cfg).unwrap().value;
        assert!(after >= before, "{after} < {before}");
        assert!(theta.base == theta0.base);
    }

    #[test]
    fn large_multiplier_descends_j() {
        let cfg = ppo_cfg();
        let theta0 = reference_with_tail(&toy_model(6), &cfg).unwrap();
        let data = toy_data(40);
        let rows = theta0.normalize(&data.sequences);
        let trajs = diffusion::sample(&theta0, 16, Some(5), &mut rng::stream(5)).unwrap().trajectories.unwrap();
        let losses: Vec<f64> = trajs.iter().map(|t| t.final_state().iter().sum()).collect();
        let mut theta = theta0.clone();
        let j_before = diffusion::evaluate_j(&theta, &rows, 8, 3).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &theta.tail.as_ref().unwrap().params);
        lagrangian_step(&mut theta, &theta0, 1e9, &rows, &trajs, &losses, &cfg, &mut adam, &mut rng::stream(1))
            .unwrap();
        let j_after = diffusion::evaluate_j(&theta, &rows, 8, 3).unwrap();
        assert!(j_after < j_before, "{j_after} vs {j_before}");
    }

    #[test]
    fn zero_iterations_return_reference() {
        let theta0 = toy_model(1);
        let cfg = ImaxConfig {
            dual: DualConfig {
                iterations: 0,
                ..DualConfig::default()
            },
            ppo: ppo_cfg(),
        };
        let loss = |s: &[Vec<f64>]| Ok(vec![0.0; s.len()]);
        let out = imax_with(&loss, &theta0, None, &toy_data(20), &cfg, &mut |_| {}).unwrap();
        assert_eq!(out.model.base, theta0.base);
        assert_eq!(out.model.tail.as_ref().unwrap(), &theta0.base);
        assert!(out.records.is_empty());
    }

    #[test]
    fn constant_loss_keeps_j_within_budget() {
        let theta0 = toy_model(2);
        let cfg = ImaxConfig {
            dual: DualConfig {
                iterations: 3,
                budget: Budget::Calibrated { margin: 0.01 },
                ..DualConfig::default()
            },
            ppo: ppo_cfg(),
        };
        let loss = |s: &[Vec<f64>]| Ok(vec![4.0; s.len()]);
        let out = imax_with(&loss, &theta0, None, &toy_data(20), &cfg, &mut |_| {}).unwrap();
        let eps = out.dual.epsilon;
        assert!(out.records.iter().all(|r| r.j <= 1.1 * eps));
        assert!(out.records.iter().all(|r| r.objective == 0.0));
        assert_eq!(out.dual.history.len(), 3);
    }

    #[test]
    fn decision_loss_composition() {
        let pp = ProvisioningParams::default();
        let pred = PredictorParams::init(PredictorArch { hidden1: 3, hidden2: 2 }, 2, 4, 4e5, 0.2, &mut rng::stream(1))
            .unwrap();
        let x0 = vec![1e5, 2e5, 3e4, 5e4, 2e5, 1e5];
        let f = decision_loss_of_sample(&x0, &pred, &pp).unwrap();
        let c_hat = pred.predict(&x0[..2]).unwrap();
        let a: Vec<f64> = c_hat.iter().map(|&c| crate::provisioning::optimal_capacity(c, &pp)).collect();
        let r = crate::provisioning::net_reward_slices(&a, &x0[2..], &pp).unwrap();
        assert_relative_eq!(f, -r, max_relative = 1e-12);
        assert!(decision_loss_of_sample(&x0[..5], &pred, &pp).is_err());
        let mut zero = pred.clone();
        for w in &mut zero.weights {
            w.fill(0.0);
        }
        assert_eq!(decision_loss_of_sample(&[0.0; 6], &zero, &pp).unwrap(), 0.0);
    }
}
