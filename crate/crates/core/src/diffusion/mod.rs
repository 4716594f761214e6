//! Denoising diffusion model over normalized workload sequences.
//!
//! Forward noising `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`, an `ε`-prediction
//! network, the uniform-weight denoising score-matching loss `J`, and
//! ancestral sampling. A model may carry a second *tail* network that
//! replaces the reference network on the last `T′` reverse steps; that is
//! the only part fine-tuned by the inner maximization.

mod network;
mod schedule;

pub use network::{NetArch, NoiseNet, Precond};
pub use schedule::DiffusionSchedule;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::data::{TraceDataset, HEADROOM};
use crate::error::{Error, Result};
use crate::nn::{self, attach, Adam, AdamConfig, Mat, Tape, Var};
use crate::rng;

pub const DIFF_MAGIC: &str = "DRDFL-DIFF-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub schedule: DiffusionSchedule,
    pub base: NoiseNet,
    /// Network used for `t ∈ 1..=tail_len` when present.
    pub tail: Option<NoiseNet>,
    pub tail_len: usize,
    /// Token count that maps to 1.0 in normalized space.
    pub norm: f64,
    pub headroom: f64,
    pub seed: u64,
}

/// One reverse rollout's last `tail_len + 1` states, `x_{T′}, …, x_0`, in
/// normalized space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseTrajectory {
    pub states: Vec<Vec<f64>>,
    pub tail_len: usize,
}

impl ReverseTrajectory {
    /// `x_t` for `t ∈ 0..=tail_len`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[self.tail_len - t]
    }

    pub fn final_state(&self) -> &[f64] {
        &self.states[self.tail_len]
    }
}

/// A `(t, ε)` pair used by one term of the score-matching loss.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
    /// Importance weight `(1/T)/q(t)`; one under uniform `t`.
    pub weight: f64,
}

pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, len: usize, t_max: usize) -> Vec<NoiseDraw> {
    (0..n)
        .map(|_| NoiseDraw {
            t: rng.random_range(1..=t_max),
            eps: rng::gaussian_vec(rng, len),
            weight: 1.0,
        })
        .collect()
}

/// Draws `t` from `q = (1−f)·uniform + f·(∝ 1/t)` and weights each term by
/// `(1/T)/q(t)`, so the weighted loss keeps the expectation of the uniform
/// one while visiting small `t` far more often.
pub fn draw_noise_weighted<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    len: usize,
    t_max: usize,
    small_t_fraction: f64,
) -> Vec<NoiseDraw> {
    let f = small_t_fraction.clamp(0.0, 1.0);
    if f == 0.0 {
        return draw_noise(rng, n, len, t_max);
    }
    let harmonic: f64 = (1..=t_max).map(|t| 1.0 / t as f64).sum();
    (0..n)
        .map(|_| {
            let t = if rng.random::<f64>() < f {
                let mut u = rng.random::<f64>() * harmonic;
                let mut t = 1;
                while t < t_max && u > 1.0 / t as f64 {
                    u -= 1.0 / t as f64;
                    t += 1;
                }
                t
            } else {
                rng.random_range(1..=t_max)
            };
            let q = (1.0 - f) / t_max as f64 + f / (t as f64 * harmonic);
            NoiseDraw {
                t,
                eps: rng::gaussian_vec(rng, len),
                weight: 1.0 / (t_max as f64 * q),
            }
        })
        .collect()
}

/// Which network receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Base,
    Tail,
}

impl DiffusionModel {
    pub fn new(schedule: DiffusionSchedule, base: NoiseNet, norm: f64, seed: u64) -> Self {
        Self {
            schedule,
            base,
            tail: None,
            tail_len: 0,
            norm,
            headroom: HEADROOM,
            seed,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.base.seq_len
    }

    pub fn t_max(&self) -> usize {
        self.schedule.t_max
    }

    /// Copy whose last `tail_len` reverse steps run a separately trainable
    /// network (initialized to the current one) with sampling variance
    /// `variance`.
    pub fn with_tail(&self, tail_len: usize, variance: f64) -> Result<Self> {
        let schedule = self.schedule.clone().with_tail_variance(tail_len, variance)?;
        Ok(Self {
            schedule,
            tail: Some(self.tail.clone().unwrap_or_else(|| self.base.clone())),
            tail_len,
            ..self.clone()
        })
    }

    pub fn net_for(&self, t: usize) -> &NoiseNet {
        match &self.tail {
            Some(tail) if t <= self.tail_len => tail,
            _ => &self.base,
        }
    }

    pub fn trainable(&self, which: Trainable) -> Result<&NoiseNet> {
        match which {
            Trainable::Base => Ok(&self.base),
            Trainable::Tail => self
                .tail
                .as_ref()
                .ok_or_else(|| Error::Config("model has no fine-tunable tail".into())),
        }
    }

    pub fn trainable_mut(&mut self, which: Trainable) -> Result<&mut NoiseNet> {
        match which {
            Trainable::Base => Ok(&mut self.base),
            Trainable::Tail => self
                .tail
                .as_mut()
                .ok_or_else(|| Error::Config("model has no fine-tunable tail".into())),
        }
    }

    fn routes_to(&self, which: Trainable, t: usize) -> bool {
        let tail_step = self.tail.is_some() && t <= self.tail_len;
        match which {
            Trainable::Tail => tail_step,
            Trainable::Base => !tail_step,
        }
    }

    /// `ε_θ(x, t)` for a batch whose rows may use different steps.
    pub fn eps(&self, x: &Mat, steps: &[usize]) -> Mat {
        let first = steps.first().copied().unwrap_or(1);
        if steps.iter().all(|&t| std::ptr::eq(self.net_for(t), self.net_for(first))) {
            return self.net_for(first).predict(x, steps);
        }
        let mut out = Mat::zeros(x.dim());
        for which in [Trainable::Base, Trainable::Tail] {
            let rows: Vec<usize> = (0..steps.len()).filter(|&i| self.routes_to(which, steps[i])).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = x.select(ndarray::Axis(0), &rows);
            let st: Vec<usize> = rows.iter().map(|&i| steps[i]).collect();
            let pred = self.net_for(st[0]).predict(&sub, &st);
            for (k, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&pred.row(k));
            }
        }
        out
    }

    /// Token counts to normalized rows.
    pub fn normalize(&self, sequences: &[Vec<f64>]) -> Mat {
        rows_to_mat(sequences, 1.0 / self.norm)
    }

    /// Normalized rows to token counts clamped to `[0, headroom·norm]`.
    pub fn denormalize(&self, x: &Mat) -> Vec<Vec<f64>> {
        let hi = self.headroom * self.norm;
        x.rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| (v * self.norm).clamp(0.0, hi)).collect())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            writeln!(w, "{DIFF_MAGIC}")?;
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = String::new();
        r.read_line(&mut magic)?;
        if magic.trim_end() != DIFF_MAGIC {
            return Err(Error::Format(format!("{} is not a {DIFF_MAGIC} checkpoint", path.display())));
        }
        let model: Self = serde_json::from_reader(r)?;
        model.schedule.validate()?;
        Ok(model)
    }
}

pub(crate) fn rows_to_mat(rows: &[Vec<f64>], scale: f64) -> Mat {
    let cols = rows.first().map_or(0, Vec::len);
    Mat::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j] * scale)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_sample(x0: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Shape("noise and sample lengths differ".into()));
    }
    Ok(forward_with_alpha_bar(x0, sched.alpha_bar(t), noise))
}

/// Forward noising at an explicit `ᾱ`.
pub fn forward_with_alpha_bar(x0: &[f64], alpha_bar: f64, noise: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
}

/// Reverse mean `μ(x_t, t) = (x_t − β_t/√(1−ᾱ_t)·ε) / √α_t`.
pub fn posterior_mean(sched: &DiffusionSchedule, x_t: &Mat, t: usize, eps: &Mat) -> Mat {
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    (x_t - &(eps * coef)) / sched.alpha(t).sqrt()
}

/// Builds noised inputs and targets for a batch of `(x_0, draw)` pairs.
fn noised_batch(sched: &DiffusionSchedule, batch: &Mat, draws: &[NoiseDraw]) -> (Mat, Mat, Vec<usize>) {
    let (n, l) = batch.dim();
    let mut x_t = Mat::zeros((n, l));
    let mut target = Mat::zeros((n, l));
    let mut steps = Vec::with_capacity(n);
    for (i, d) in draws.iter().enumerate() {
        let row = forward_with_alpha_bar(
            batch.row(i).as_slice().expect("row-major batch"),
            sched.alpha_bar(d.t),
            &d.eps,
        );
        for j in 0..l {
            x_t[[i, j]] = row[j];
            target[[i, j]] = d.eps[j];
        }
        steps.push(d.t);
    }
    (x_t, target, steps)
}

fn check_draws(model: &DiffusionModel, batch: &Mat, draws: &[NoiseDraw]) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::Argument("score-matching loss needs a non-empty batch".into()));
    }
    if draws.len() != batch.nrows() {
        return Err(Error::Shape("one noise draw per batch row is required".into()));
    }
    if batch.ncols() != model.seq_len() || draws.iter().any(|d| d.eps.len() != model.seq_len()) {
        return Err(Error::Shape("batch width differs from model sequence length".into()));
    }
    for d in draws {
        model.schedule.check_step(d.t)?;
    }
    Ok(())
}

/// Denoising score-matching loss `J`: mean over the batch of
/// `‖ε − ε_θ(x_t, t)‖² / L` with `x_t` built from each row's draw.
pub fn score_matching_loss(model: &DiffusionModel, batch: &Mat, draws: &[NoiseDraw]) -> Result<f64> {
    check_draws(model, batch, draws)?;
    let (x_t, target, steps) = noised_batch(&model.schedule, batch, draws);
    let pred = model.eps(&x_t, &steps);
    Ok((&pred - &target).mapv(|v| v * v).sum() / target.len() as f64)
}

/// [`score_matching_loss`] on a tape, differentiable in the `which`
/// network's parameters (`vars`). Rows routed to the other network enter as
/// constants.
pub fn score_matching_loss_tape(
    model: &DiffusionModel,
    tape: &mut Tape,
    which: Trainable,
    vars: &[Var],
    batch: &Mat,
    draws: &[NoiseDraw],
) -> Result<Var> {
    check_draws(model, batch, draws)?;
    let (x_t, target, steps) = noised_batch(&model.schedule, batch, draws);
    let total = target.len() as f64;
    let root_w: Vec<f64> = draws.iter().map(|d| d.weight.sqrt()).collect();
    let (live, frozen): (Vec<usize>, Vec<usize>) =
        (0..steps.len()).partition(|&i| model.routes_to(which, steps[i]));
    let mut frozen_sq = 0.0;
    if !frozen.is_empty() {
        let sub = x_t.select(ndarray::Axis(0), &frozen);
        let st: Vec<usize> = frozen.iter().map(|&i| steps[i]).collect();
        let pred = model.eps(&sub, &st);
        let tgt = target.select(ndarray::Axis(0), &frozen);
        frozen_sq = (&pred - &tgt)
            .rows()
            .into_iter()
            .zip(&frozen)
            .map(|(r, &i)| draws[i].weight * r.dot(&r))
            .sum();
    }
    let frozen_term = tape.scalar(frozen_sq / total);
    if live.is_empty() {
        return Ok(frozen_term);
    }
    let sub = x_t.select(ndarray::Axis(0), &live);
    let st: Vec<usize> = live.iter().map(|&i| steps[i]).collect();
    let net = model.trainable(which)?;
    let pred = net.forward(tape, vars, &sub, &st);
    let tgt = tape.leaf(target.select(ndarray::Axis(0), &live));
    let diff = tape.sub(pred, tgt);
    let diff = if live.iter().all(|&i| draws[i].weight == 1.0) {
        diff
    } else {
        let w = tape.leaf(Mat::from_shape_fn((live.len(), 1), |(k, _)| root_w[live[k]]));
        tape.mul_col(diff, w)
    };
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    let live_term = tape.scale(s, 1.0 / total);
    Ok(tape.add(live_term, frozen_term))
}

/// `J(θ, S)` on normalized rows with `draws_per_row` draws each from a
/// fixed seed.
pub fn evaluate_j(model: &DiffusionModel, data: &Mat, draws_per_row: usize, seed: u64) -> Result<f64> {
    let reps = draws_per_row.max(1);
    let rows: Vec<usize> = (0..data.nrows()).flat_map(|i| std::iter::repeat_n(i, reps)).collect();
    let batch = data.select(ndarray::Axis(0), &rows);
    let mut r = rng::substream(seed, "j-eval", 0);
    let draws = draw_noise(&mut r, batch.nrows(), model.seq_len(), model.t_max());
    score_matching_loss(model, &batch, &draws)
}

/// One ancestral step `x_{t−1} = μ_θ(x_t, t) + σ_t·noise`; the noise term is
/// dropped at `t = 1`.
pub fn reverse_step(model: &DiffusionModel, x_t: &Mat, t: usize, noise: &Mat) -> Result<Mat> {
    model.schedule.check_step(t)?;
    let eps = model.eps(x_t, &vec![t; x_t.nrows()]);
    let mean = posterior_mean(&model.schedule, x_t, t, &eps);
    if t == 1 {
        return Ok(mean);
    }
    Ok(mean + &(noise * model.schedule.sigma2(t).sqrt()))
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// De-normalized, clamped sequences in tokens.
    pub sequences: Vec<Vec<f64>>,
    pub trajectories: Option<Vec<ReverseTrajectory>>,
}

/// Ancestral sampling from `x_T ~ N(0, I)`, optionally recording the last
/// `tail_record + 1` states of every rollout.
pub fn sample<R: Rng + ?Sized>(
    model: &DiffusionModel,
    count: usize,
    tail_record: Option<usize>,
    rng: &mut R,
) -> Result<SampleOutput> {
    if count == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let l = model.seq_len();
    let t_max = model.t_max();
    if let Some(k) = tail_record {
        if k == 0 || k > t_max {
            return Err(Error::Config(format!("tail record {k} outside 1..={t_max}")));
        }
    }
    let gauss = |rng: &mut R| Mat::from_shape_fn((count, l), |_| rng::gaussian(rng));
    let mut x = gauss(rng);
    let mut recorded: Vec<Mat> = Vec::new();
    if tail_record == Some(t_max) {
        recorded.push(x.clone());
    }
    for t in (1..=t_max).rev() {
        let noise = if t > 1 { gauss(rng) } else { Mat::zeros((count, l)) };
        x = reverse_step(model, &x, t, &noise)?;
        if let Some(k) = tail_record {
            if t - 1 <= k {
                recorded.push(x.clone());
            }
        }
    }
    let trajectories = tail_record.map(|k| {
        (0..count)
            .map(|i| ReverseTrajectory {
                states: recorded.iter().map(|m| m.row(i).to_vec()).collect(),
                tail_len: k,
            })
            .collect()
    });
    Ok(SampleOutput {
        sequences: model.denormalize(&x),
        trajectories,
    })
}

fn check_tail(model: &DiffusionModel, trajs: &[ReverseTrajectory]) -> Result<usize> {
    let k = trajs
        .first()
        .map(|t| t.tail_len)
        .ok_or_else(|| Error::Argument("no trajectories".into()))?;
    if trajs.iter().any(|t| t.tail_len != k || t.states.len() != k + 1) {
        return Err(Error::Shape("trajectories disagree on tail length".into()));
    }
    if model.tail.is_some() && k != model.tail_len {
        return Err(Error::Config(format!(
            "trajectory tail {k} differs from configured tail {}",
            model.tail_len
        )));
    }
    if k == 0 || k > model.t_max() {
        return Err(Error::Config(format!("tail length {k} outside 1..={}", model.t_max())));
    }
    if let Some(t) = (1..=k).find(|&t| model.schedule.sigma2(t) <= 0.0) {
        return Err(Error::Config(format!("sampling variance at step {t} is zero")));
    }
    Ok(k)
}

/// Stacked tail transitions, trajectory-major: row `b·k + (t−1)` holds
/// `x_t` (and `x_{t−1}`) of trajectory `b`.
fn tail_rows(trajs: &[ReverseTrajectory], k: usize) -> (Mat, Mat, Vec<usize>) {
    let l = trajs[0].states[0].len();
    let n = trajs.len() * k;
    let mut cur = Mat::zeros((n, l));
    let mut prev = Mat::zeros((n, l));
    let mut steps = Vec::with_capacity(n);
    for (b, tr) in trajs.iter().enumerate() {
        for t in 1..=k {
            let r = b * k + t - 1;
            cur.row_mut(r).assign(&ndarray::ArrayView1::from(tr.state(t)));
            prev.row_mut(r).assign(&ndarray::ArrayView1::from(tr.state(t - 1)));
            steps.push(t);
        }
    }
    (cur, prev, steps)
}

/// `−Σ_{t=1}^{T′} ‖x_{t−1} − μ_θ(x_t, t)‖² / (2σ_t²)` per trajectory.
pub fn log_prob_tail(model: &DiffusionModel, trajs: &[ReverseTrajectory]) -> Result<Vec<f64>> {
    let k = check_tail(model, trajs)?;
    let (cur, prev, steps) = tail_rows(trajs, k);
    let eps = model.eps(&cur, &steps);
    let mut out = vec![0.0; trajs.len()];
    for (r, &t) in steps.iter().enumerate() {
        let coef = model.schedule.beta(t) / (1.0 - model.schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / model.schedule.alpha(t).sqrt();
        let sq: f64 = (0..cur.ncols())
            .map(|j| {
                let mu = (cur[[r, j]] - coef * eps[[r, j]]) * inv;
                (prev[[r, j]] - mu).powi(2)
            })
            .sum();
        out[r / k] -= sq / (2.0 * model.schedule.sigma2(t));
    }
    Ok(out)
}

/// [`log_prob_tail`] on a tape, differentiable in the tail network
/// parameters `vars`; returns a `(B, 1)` column.
pub fn log_prob_tail_tape(
    model: &DiffusionModel,
    tape: &mut Tape,
    vars: &[Var],
    trajs: &[ReverseTrajectory],
) -> Result<Var> {
    let k = check_tail(model, trajs)?;
    let net = model.trainable(Trainable::Tail)?;
    let (cur, prev, steps) = tail_rows(trajs, k);
    let n = steps.len();
    // residual = x_{t−1} − x_t/√α_t + c_t·ε_θ with c_t = β_t/(√(1−ᾱ_t)√α_t)
    let sched = &model.schedule;
    let mut base = prev.clone();
    let mut coef = Mat::zeros((n, 1));
    let mut weight = Mat::zeros((n, 1));
    for (r, &t) in steps.iter().enumerate() {
        let inv = 1.0 / sched.alpha(t).sqrt();
        let mut row = base.row_mut(r);
        row.scaled_add(-inv, &cur.row(r));
        coef[[r, 0]] = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt() * inv;
        weight[[r, 0]] = -1.0 / (2.0 * sched.sigma2(t));
    }
    let eps = net.forward(tape, vars, &cur, &steps);
    let coef = tape.leaf(coef);
    let scaled = tape.mul_col(eps, coef);
    let base = tape.leaf(base);
    let resid = tape.add(base, scaled);
    let sq = tape.square(resid);
    let per_row = tape.sum_cols(sq);
    let weight = tape.leaf(weight);
    let weighted = tape.mul(per_row, weight);
    let grid = tape.reshape(weighted, trajs.len(), k);
    Ok(tape.sum_cols(grid))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub arch: NetArch,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Noise draws per row when measuring `J` before and after training.
    pub eval_draws: usize,
    /// Cosine decay of the learning rate to zero over training.
    pub cosine_decay: bool,
    /// Exponential moving average of the weights, with the effective decay
    /// `min(d, (1+n)/(10+n))` after `n` steps; the average is returned.
    pub ema_decay: Option<f64>,
    /// Share of training draws taken from `q(t) ∝ 1/t` (importance-weighted).
    pub small_t_fraction: f64,
    /// Independent `(t, ε)` draws per sequence in each minibatch.
    pub noise_draws: usize,
    /// Scale network inputs by the training data's per-slot moments.
    pub precondition: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            arch: NetArch::default(),
            t_max: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            epochs: 10,
            batch: 64,
            lr: 1e-3,
            clip_norm: Some(1.0),
            seed: 0,
            eval_draws: 4,
            cosine_decay: false,
            ema_decay: None,
            precondition: true,
            noise_draws: 1,
            small_t_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDiffusion {
    pub model: DiffusionModel,
    pub epoch_losses: Vec<f64>,
    /// `J` before and after training on the same fixed draws.
    pub initial_j: f64,
    pub final_j: f64,
}

/// Trains the reference model `θ_0` by Adam on the score-matching loss.
pub fn train_reference(dataset: &TraceDataset, config: &DiffusionConfig) -> Result<TrainedDiffusion> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train diffusion on an empty dataset".into()));
    }
    if config.batch == 0 || config.noise_draws == 0 {
        return Err(Error::Config("batch size and noise draws must be at least 1".into()));
    }
    let schedule = DiffusionSchedule::linear(config.t_max, config.beta_start, config.beta_end)?;
    let mut init_rng = rng::substream(config.seed, "diffusion-init", 0);
    let net = NoiseNet::init(config.arch, dataset.seq_len(), &mut init_rng);
    let mut model = DiffusionModel::new(schedule, net, dataset.norm, config.seed);
    let data = model.normalize(&dataset.sequences);
    if config.precondition {
        model.base.precond = Some(Precond::from_data(model.schedule.alpha_bars.clone(), &data));
    }
    let eval_rows: Vec<usize> = (0..data.nrows().min(256)).collect();
    let eval = data.select(ndarray::Axis(0), &eval_rows);
    let initial_j = evaluate_j(&model, &eval, config.eval_draws, config.seed)?;

    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
        &model.base.params,
    );
    let mut r = rng::substream(config.seed, "diffusion-train", 0);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let total_steps = config.epochs * data.nrows().div_ceil(config.batch);
    let mut ema = config.ema_decay.map(|_| model.base.params.clone());
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let rows: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| std::iter::repeat_n(i, config.noise_draws))
                .collect();
            let batch = data.select(ndarray::Axis(0), &rows);
            let draws = draw_noise_weighted(
                &mut r,
                rows.len(),
                model.seq_len(),
                model.t_max(),
                config.small_t_fraction,
            );
            let mut tape = Tape::new();
            let vars = attach(&mut tape, &model.base.params);
            let loss = score_matching_loss_tape(&model, &mut tape, Trainable::Base, &vars, &batch, &draws)?;
            let value = tape.scalar_value(loss);
            let mut grads = tape.backward(loss);
            let grads = nn::collect_grads(&mut grads, &vars, &model.base.params);
            if !value.is_finite() || !nn::all_finite(&grads) {
                return Err(Error::DiffusionDiverged {
                    step,
                    checkpoint: Box::new(model),
                });
            }
            if config.cosine_decay {
                let frac = step as f64 / total_steps.max(1) as f64;
                adam.config.lr = 0.5 * config.lr * (1.0 + (std::f64::consts::PI * frac).cos());
            }
            adam.step(&mut model.base.params, &grads);
            if let (Some(avg), Some(d)) = (ema.as_mut(), config.ema_decay) {
                let n = step as f64;
                let d = d.min((1.0 + n) / (10.0 + n));
                for (a, p) in avg.iter_mut().zip(&model.base.params) {
                    a.zip_mut_with(p, |a, &p| *a = d * *a + (1.0 - d) * p);
                }
            }
            total += value;
            batches += 1;
            step += 1;
        }
        let mean = total / batches.max(1) as f64;
        log::debug!("diffusion epoch loss {mean:.5}");
        epoch_losses.push(mean);
    }
    if let Some(avg) = ema {
        model.base.params = avg;
    }
    let final_j = evaluate_j(&model, &eval, config.eval_draws, config.seed)?;
    Ok(TrainedDiffusion {
        model,
        epoch_losses,
        initial_j,
        final_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DatasetMeta, SynthKind, SynthParams};
    use approx::assert_relative_eq;

    fn tiny_model(t_max: usize, seed: u64) -> DiffusionModel {
        let sched = DiffusionSchedule::linear(t_max, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(seed);
        let net = NoiseNet::init(NetArch::mlp(16), 4, &mut r);
        DiffusionModel::new(sched, net, 10.0, seed)
    }

    /// Randomizes the output layer so the network is not identically zero.
    fn perturbed(mut m: DiffusionModel, seed: u64) -> DiffusionModel {
        let mut r = rng::stream(seed);
        let n = m.base.params.len();
        m.base.params[n - 2].mapv_inplace(|_| r.random_range(-0.3..0.3));
        m
    }

    #[test]
    fn forward_sample_examples() {
        let x0 = [1.0, 1.0, 1.0];
        assert_eq!(forward_with_alpha_bar(&x0, 1.0, &[5.0, 6.0, 7.0]), x0.to_vec());
        assert_eq!(forward_with_alpha_bar(&[9.0, -9.0], 0.0, &[0.1, 0.2]), vec![0.1, 0.2]);
        assert_eq!(forward_with_alpha_bar(&x0, 0.25, &[0.0; 3]), vec![0.5; 3]);
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(matches!(forward_sample(&x0, 0, &[0.0; 3], &s), Err(Error::StepIndex { .. })));
        assert!(forward_sample(&x0, 11, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn forward_preserves_variance() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(5);
        let t = 40;
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = rng::gaussian(&mut r);
                let e = rng::gaussian(&mut r);
                forward_sample(&[x0], t, &[e], &s).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var(x_t) = ᾱ·1 + (1−ᾱ) = 1; SE of the sample variance ≈ √(2/n).
        let se = (2.0 / n as f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn zero_network_loss_is_unit_per_dimension() {
        let m = tiny_model(50, 1);
        let n = 10_000;
        let batch = Mat::from_elem((n, 4), 0.3);
        let mut r = rng::stream(2);
        let draws = draw_noise(&mut r, n, 4, 50);
        let j = score_matching_loss(&m, &batch, &draws).unwrap();
        // Per-row ‖ε‖²/4 has variance 2/4; standard error √(0.5/n).
        let se = (0.5 / n as f64).sqrt();
        assert!((j - 1.0).abs() < 3.0 * se, "J = {j}");
    }

    #[test]
    fn loss_batch_order_and_duplication_invariance() {
        let m = perturbed(tiny_model(50, 3), 4);
        let batch = Mat::from_shape_fn((5, 4), |(i, j)| 0.1 * (i + j) as f64);
        let mut r = rng::stream(6);
        let draws = draw_noise(&mut r, 5, 4, 50);
        let j = score_matching_loss(&m, &batch, &draws).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let pb = batch.select(ndarray::Axis(0), &perm);
        let pd: Vec<NoiseDraw> = perm.iter().map(|&i| draws[i].clone()).collect();
        assert_relative_eq!(score_matching_loss(&m, &pb, &pd).unwrap(), j, max_relative = 1e-12);
        let dup: Vec<usize> = (0..5).chain(0..5).collect();
        let db = batch.select(ndarray::Axis(0), &dup);
        let dd: Vec<NoiseDraw> = dup.iter().map(|&i| draws[i].clone()).collect();
        assert_relative_eq!(score_matching_loss(&m, &db, &dd).unwrap(), j, max_relative = 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = tiny_model(10, 1);
        assert!(matches!(
            score_matching_loss(&m, &Mat::zeros((0, 4)), &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn tape_loss_matches_plain_loss_with_tail() {
        let m = perturbed(tiny_model(20, 7), 8);
        let mut m = m.with_tail(5, 0.05).unwrap();
        // Make the tail differ from the base.
        m.tail.as_mut().unwrap().params[0].mapv_inplace(|v| v * 1.5);
        let batch = Mat::from_shape_fn((12, 4), |(i, j)| 0.05 * (i * j) as f64);
        let mut r = rng::stream(9);
        let draws = draw_noise(&mut r, 12, 4, 20);
        let plain = score_matching_loss(&m, &batch, &draws).unwrap();
        for which in [Trainable::Base, Trainable::Tail] {
            let mut tape = Tape::new();
            let vars = attach(&mut tape, &m.trainable(which).unwrap().params);
            let v = score_matching_loss_tape(&m, &mut tape, which, &vars, &batch, &draws).unwrap();
            assert_relative_eq!(tape.scalar_value(v), plain, max_relative = 1e-12);
        }
    }

    #[test]
    fn reverse_step_examples() {
        let m = perturbed(tiny_model(20, 1), 2);
        let x = Mat::from_elem((2, 4), 0.4);
        let zero = Mat::zeros((2, 4));
        let eps = m.eps(&x, &[5, 5]);
        let mean = posterior_mean(&m.schedule, &x, 5, &eps);
        assert_eq!(reverse_step(&m, &x, 5, &zero).unwrap(), mean);
        let a = reverse_step(&m, &x, 1, &Mat::from_elem((2, 4), 3.0)).unwrap();
        let b = reverse_step(&m, &x, 1, &Mat::from_elem((2, 4), -7.0)).unwrap();
        assert_eq!(a, b);
        assert!(reverse_step(&m, &x, 21, &zero).is_err());
    }

    /// Exact noise for a one-point dataset `x*`: `(x_t − √ᾱ_t x*)/√(1−ᾱ_t)`.
    fn exact_eps(s: &DiffusionSchedule, x: &Mat, t: usize, target: f64) -> Mat {
        x.mapv(|v| (v - s.alpha_bar(t).sqrt() * target) / (1.0 - s.alpha_bar(t)).sqrt())
    }

    #[test]
    fn exact_denoiser_gives_analytic_posterior_mean() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let target = 0.7;
        let x = Mat::from_shape_fn((1, 3), |(_, j)| 0.5 - 0.4 * j as f64);
        for t in [2usize, 17, 100] {
            let mu = posterior_mean(&s, &x, t, &exact_eps(&s, &x, t, target));
            // q(x_{t−1} | x_t, x0) mean.
            let ab = s.alpha_bar(t);
            let abp = s.alpha_bar_prev(t);
            let c0 = abp.sqrt() * s.beta(t) / (1.0 - ab);
            let ct = s.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
            for j in 0..3 {
                assert_relative_eq!(mu[[0, j]], c0 * target + ct * x[[0, j]], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn noiseless_reverse_chain_converges_to_the_point() {
        let s = DiffusionSchedule::linear(200, 1e-4, 0.02).unwrap();
        let target = 0.3;
        let mut x = Mat::from_elem((1, 2), 1.5);
        let mut dists = Vec::new();
        for t in (1..=200).rev() {
            x = posterior_mean(&s, &x, t, &exact_eps(&s, &x, t, target));
            dists.push((x[[0, 0]] - target).abs());
        }
        let tail = &dists[dists.len() - 11..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
        assert!(*dists.last().unwrap() < 1e-9);
    }

    #[test]
    fn sampling_is_reproducible_and_records_tail() {
        let m = perturbed(tiny_model(30, 1), 2);
        let a = sample(&m, 3, Some(10), &mut rng::stream(4)).unwrap();
        let b = sample(&m, 3, Some(10), &mut rng::stream(4)).unwrap();
        assert_eq!(a.sequences, b.sequences);
        let trajs = a.trajectories.unwrap();
        assert_eq!(trajs.len(), 3);
        assert!(trajs.iter().all(|t| t.states.len() == 11));
        for (tr, s) in trajs.iter().zip(&a.sequences) {
            let denorm: Vec<f64> = tr.final_state().iter().map(|v| (v * 10.0).clamp(0.0, 12.5)).collect();
            assert_eq!(&denorm, s);
        }
        let full = sample(&m, 1, Some(30), &mut rng::stream(4)).unwrap();
        assert_eq!(full.trajectories.unwrap()[0].states.len(), 31);
        assert!(sample(&m, 0, None, &mut rng::stream(4)).is_err());
    }

    #[test]
    fn log_prob_examples() {
        let m = perturbed(tiny_model(30, 1), 2).with_tail(10, 0.05).unwrap();
        // Noise-free tail: every transition hits the mean exactly.
        let out = sample(&m, 2, Some(10), &mut rng::stream(8)).unwrap();
        let mut trajs = out.trajectories.unwrap();
        for tr in &mut trajs {
            for t in (1..=10).rev() {
                let x = Mat::from_shape_vec((1, 4), tr.state(t).to_vec()).unwrap();
                let mu = posterior_mean(&m.schedule, &x, t, &m.eps(&x, &[t]));
                let idx = tr.tail_len - (t - 1);
                tr.states[idx] = mu.row(0).to_vec();
            }
        }
        let lp = log_prob_tail(&m, &trajs).unwrap();
        assert!(lp.iter().all(|v| v.abs() < 1e-20));
        let twin = m.clone();
        assert_eq!(log_prob_tail(&twin, &trajs).unwrap(), lp);

        // Hand-built single step: ‖x_0 − μ‖² = 2, σ² = 0.05 → −20.
        let one = perturbed(tiny_model(30, 1), 2).with_tail(1, 0.05).unwrap();
        let x1 = Mat::from_elem((1, 4), 0.2);
        let mu = posterior_mean(&one.schedule, &x1, 1, &one.eps(&x1, &[1]));
        let x0: Vec<f64> = mu.row(0).iter().enumerate().map(|(j, v)| if j < 2 { v + 1.0 } else { *v }).collect();
        let tr = ReverseTrajectory {
            states: vec![x1.row(0).to_vec(), x0],
            tail_len: 1,
        };
        assert_relative_eq!(log_prob_tail(&one, std::slice::from_ref(&tr)).unwrap()[0], -20.0, max_relative = 1e-12);

        // σ₁² = 0 without a configured tail.
        let plain = perturbed(tiny_model(30, 1), 2);
        assert!(matches!(log_prob_tail(&plain, &[tr]), Err(Error::Config(_))));
    }

    #[test]
    fn tape_log_prob_matches_plain() {
        let mut m = perturbed(tiny_model(30, 3), 2).with_tail(5, 0.07).unwrap();
        m.tail.as_mut().unwrap().params[0].mapv_inplace(|v| v * 0.9);
        let trajs = sample(&m, 4, Some(5), &mut rng::stream(1)).unwrap().trajectories.unwrap();
        let plain = log_prob_tail(&m, &trajs).unwrap();
        let mut tape = Tape::new();
        let vars = attach(&mut tape, &m.tail.as_ref().unwrap().params);
        let v = log_prob_tail_tape(&m, &mut tape, &vars, &trajs).unwrap();
        for (a, b) in tape.value(v).iter().zip(&plain) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10);
        }
    }

    #[test]
    fn reference_training_reduces_loss_and_is_seeded() {
        let data = TraceDataset::new(vec![vec![0.0; 4]; 40], 1, 3, 10.0, DatasetMeta::default()).unwrap();
        let cfg = DiffusionConfig {
            arch: NetArch::mlp(16),
            t_max: 50,
            epochs: 40,
            batch: 8,
            lr: 1e-2,
            ..DiffusionConfig::default()
        };
        let a = train_reference(&data, &cfg).unwrap();
        assert!(a.final_j < 0.5 * a.initial_j, "{} vs {}", a.final_j, a.initial_j);
        let b = train_reference(&data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let empty = data.with_sequences(vec![]);
        assert!(matches!(train_reference(&empty, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = perturbed(tiny_model(20, 1), 2).with_tail(3, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.diff");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("DRDFL-DIFF-v1\n"));
        assert_eq!(DiffusionModel::load(&p).unwrap(), m);
        std::fs::write(&p, "nope\n{}").unwrap();
        assert!(DiffusionModel::load(&p).is_err());
    }

    #[test]
    fn synthetic_training_smoke() {
        let p = SynthParams::default();
        let d = synth_generate(SynthKind::Ar1, 16, &p, 1).unwrap();
        let cfg = DiffusionConfig {
            arch: NetArch::mlp(16),
            t_max: 20,
            epochs: 1,
            batch: 8,
            ..DiffusionConfig::default()
        };
        let t = train_reference(&d, &cfg).unwrap();
        assert_eq!(t.epoch_losses.len(), 1);
        assert_eq!(t.model.seq_len(), 36);
    }

    #[test]
    fn weighted_draws_keep_uniform_expectation() {
        let mut r = rng::stream(4);
        let t_max = 500;
        let draws = draw_noise_weighted(&mut r, 200_000, 1, t_max, 0.5);
        let f = |t: usize| (t as f64 / t_max as f64).powi(2);
        let est = draws.iter().map(|d| d.weight * f(d.t)).sum::<f64>() / draws.len() as f64;
        let exact = (1..=t_max).map(f).sum::<f64>() / t_max as f64;
        assert_relative_eq!(est, exact, max_relative = 0.02);
        let small = draws.iter().filter(|d| d.t <= 20).count() as f64 / draws.len() as f64;
        assert!(small > 0.2, "small-t share {small}");
    }
}
