//! Causal workload predictor: a two-layer LSTM rolled out autoregressively
//! over the decision horizon, trained on the provisioning decision loss or
//! on squared error.

use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, attach, init_linear, Adam, AdamConfig, Cursor, Mat, Tape, Var};
use crate::provisioning::{self, slot_reward_partials, smooth_clip, ProvisioningParams};
use crate::rng::{self, Stream};

pub const PRED_MAGIC: &str = "DRDFL-PRED-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorArch {
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for PredictorArch {
    fn default() -> Self {
        Self {
            hidden1: 128,
            hidden2: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub arch: PredictorArch,
    pub context: usize,
    pub horizon: usize,
    /// Token count mapped to 1.0 at the network input and output.
    pub norm: f64,
    /// `[wx1, wh1, b1, wx2, wh2, b2, w_out, b_out]`.
    pub weights: Vec<Mat>,
}

/// A labeled example `x = (v, c)` in tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub context: Vec<f64>,
    pub label: Vec<f64>,
}

impl WindowedSample {
    pub fn concat(&self) -> Vec<f64> {
        let mut s = self.context.clone();
        s.extend_from_slice(&self.label);
        s
    }
}

pub fn slice_sample(sequence: &[f64], context: usize) -> Result<WindowedSample> {
    if context == 0 {
        return Err(Error::Argument("context window must be at least 1".into()));
    }
    if sequence.len() <= context {
        return Err(Error::Shape(format!(
            "sequence of length {} leaves no horizon after a context of {context}",
            sequence.len()
        )));
    }
    Ok(WindowedSample {
        context: sequence[..context].to_vec(),
        label: sequence[context..].to_vec(),
    })
}

/// Normalized `(B, W)` contexts and `(B, N)` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub context: Mat,
    pub label: Mat,
}

impl Batch {
    pub fn from_sequences<S: AsRef<[f64]>>(seqs: &[S], context: usize, norm: f64) -> Result<Self> {
        let l = seqs
            .first()
            .map(|s| s.as_ref().len())
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        if context == 0 || l <= context {
            return Err(Error::Shape(format!("cannot split length {l} with context {context}")));
        }
        if seqs.iter().any(|s| s.as_ref().len() != l) {
            return Err(Error::Shape("batch sequences differ in length".into()));
        }
        let n = l - context;
        Ok(Self {
            context: Mat::from_shape_fn((seqs.len(), context), |(i, j)| seqs[i].as_ref()[j] / norm),
            label: Mat::from_shape_fn((seqs.len(), n), |(i, j)| seqs[i].as_ref()[context + j] / norm),
        })
    }

    pub fn len(&self) -> usize {
        self.context.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized full rows `[context | label]`.
    pub fn rows(&self) -> Mat {
        ndarray::concatenate![ndarray::Axis(1), self.context, self.label]
    }

    pub fn from_rows(rows: &Mat, context: usize) -> Self {
        Self {
            context: rows.slice(ndarray::s![.., ..context]).to_owned(),
            label: rows.slice(ndarray::s![.., context..]).to_owned(),
        }
    }
}

fn lstm_cell(t: &mut Tape, cur: &mut Cursor<'_>, x: Var, h: Var, c: Var, hidden: usize) -> (Var, Var) {
    let wx = cur.next_var();
    let wh = cur.next_var();
    let b = cur.next_var();
    let zx = t.matmul(x, wx);
    let zh = t.matmul(h, wh);
    let z = t.add(zx, zh);
    let z = t.add_row(z, b);
    let i = t.slice_cols(z, 0, hidden);
    let f = t.slice_cols(z, hidden, hidden);
    let g = t.slice_cols(z, 2 * hidden, hidden);
    let o = t.slice_cols(z, 3 * hidden, hidden);
    let i = t.sigmoid(i);
    let f = t.sigmoid(f);
    let g = t.tanh(g);
    let o = t.sigmoid(o);
    let fc = t.mul(f, c);
    let ig = t.mul(i, g);
    let c = t.add(fc, ig);
    let tc = t.tanh(c);
    (t.mul(o, tc), c)
}

impl PredictorParams {
    /// Glorot weights, forget-gate bias one, output bias `output_bias`
    /// (normalized units).
    pub fn init<R: Rng + ?Sized>(
        arch: PredictorArch,
        context: usize,
        horizon: usize,
        norm: f64,
        output_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if arch.hidden1 == 0 || arch.hidden2 == 0 {
            return Err(Error::Config("hidden sizes must be at least 1".into()));
        }
        if context == 0 || horizon == 0 {
            return Err(Error::Argument("context and horizon must be at least 1".into()));
        }
        if !(norm > 0.0) {
            return Err(Error::Argument("norm must be positive".into()));
        }
        let mut weights = Vec::new();
        for (fan_in, h) in [(1, arch.hidden1), (arch.hidden1, arch.hidden2)] {
            let mut tmp = Vec::new();
            init_linear(&mut tmp, fan_in, 4 * h, rng);
            init_linear(&mut tmp, h, 4 * h, rng);
            let (wx, wh) = (tmp[0].clone(), tmp[2].clone());
            let mut b = Mat::zeros((1, 4 * h));
            b.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
            weights.extend([wx, wh, b]);
        }
        init_linear(&mut weights, arch.hidden2, 1, rng);
        weights[7].fill(output_bias);
        Ok(Self {
            arch,
            context,
            horizon,
            norm,
            weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn seq_len(&self) -> usize {
        self.context + self.horizon
    }

    /// Normalized `(B, N)` predictions on the tape.
    pub fn forward(&self, t: &mut Tape, vars: &[Var], ctx: Var) -> Var {
        let (b, w) = t.shape(ctx);
        debug_assert_eq!(w, self.context);
        let (h1n, h2n) = (self.arch.hidden1, self.arch.hidden2);
        let mut h1 = t.leaf(Mat::zeros((b, h1n)));
        let mut c1 = t.leaf(Mat::zeros((b, h1n)));
        let mut h2 = t.leaf(Mat::zeros((b, h2n)));
        let mut c2 = t.leaf(Mat::zeros((b, h2n)));
        let mut outputs = Vec::with_capacity(self.horizon);
        let steps = self.context + self.horizon - 1;
        let mut x = t.slice_cols(ctx, 0, 1);
        for k in 0..steps {
            let mut cur = Cursor::new(vars);
            (h1, c1) = lstm_cell(t, &mut cur, x, h1, c1, h1n);
            (h2, c2) = lstm_cell(t, &mut cur, h1, h2, c2, h2n);
            if k + 1 < self.context {
                x = t.slice_cols(ctx, k + 1, 1);
                continue;
            }
            let y = nn::linear(t, &mut cur, h2);
            let y = t.relu(y);
            outputs.push(y);
            x = y;
        }
        t.concat_cols(&outputs)
    }

    /// Predicted workloads `ĉ_{1:N}` in tokens.
    pub fn predict(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.context {
            return Err(Error::Shape(format!("context of length {} expected, got {}", self.context, v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite context value".into()));
        }
        let ctx = Mat::from_shape_fn((1, self.context), |(_, j)| v[j] / self.norm);
        Ok(self.predict_normalized(&ctx).row(0).iter().map(|x| x * self.norm).collect())
    }

    /// Normalized predictions for a normalized `(B, W)` context matrix.
    pub fn predict_normalized(&self, ctx: &Mat) -> Mat {
        let mut t = Tape::new();
        let vars = attach(&mut t, &self.weights);
        let c = t.leaf(ctx.clone());
        let out = self.forward(&mut t, &vars, c);
        t.value(out).clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            writeln!(w, "{PRED_MAGIC}")?;
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
        if magic.trim_end() != PRED_MAGIC {
            return Err(Error::Format(format!("{} is not a {PRED_MAGIC} checkpoint", path.display())));
        }
        Ok(serde_json::from_reader(r)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Dfl,
    Mse,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dfl" => Ok(Objective::Dfl),
            "mse" => Ok(Objective::Mse),
            other => Err(Error::Argument(format!("unknown objective {other:?}"))),
        }
    }
}

/// Per-sample loss used by the `dfl` objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionLoss {
    /// `f = −R(a*(ĉ), c)` in utility units.
    #[default]
    Provisioning,
    /// Mean squared error in normalized units.
    SquaredError,
}

/// Derivative of the decision loss with respect to the predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Two-point estimate with perturbation `delta` (normalized units).
    ZeroOrder { delta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub objective: Objective,
    pub decision: DecisionLoss,
    /// Softplus clip temperature as a fraction of `a_max`; `None` keeps the
    /// hard clip.
    pub smoothing: Option<f64>,
    pub gradient: GradientMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dfl,
            decision: DecisionLoss::Provisioning,
            smoothing: Some(1e-3),
            gradient: GradientMode::Analytic,
        }
    }
}

impl LossConfig {
    /// Exact (unsmoothed) evaluation form of the same loss.
    pub fn exact(&self) -> Self {
        Self {
            smoothing: None,
            gradient: GradientMode::Analytic,
            ..*self
        }
    }

    fn effective(&self) -> DecisionLoss {
        match self.objective {
            Objective::Mse => DecisionLoss::SquaredError,
            Objective::Dfl => self.decision,
        }
    }
}

/// Decision for a predicted workload (tokens) with `∂a/∂ĉ`.
fn decision_with_slope(c_hat: f64, p: &ProvisioningParams, smoothing: Option<f64>) -> (f64, f64) {
    let g = p.decision_gain();
    let raw = g * c_hat.max(0.0);
    let slope = if c_hat > 0.0 { g } else { 0.0 };
    match smoothing {
        Some(frac) => {
            let (a, d) = smooth_clip(raw, p.a_min, p.a_max, frac * p.a_max);
            (a, d * slope)
        }
        None if raw < p.a_min || c_hat <= 0.0 => (p.a_min, 0.0),
        None if raw > p.a_max => (p.a_max, 0.0),
        None => (raw, slope),
    }
}

/// Per-slot `−r(a*(ĉ), c)` with partials in normalized prediction and label.
fn slot_decision_loss(
    chat_n: f64,
    c_n: f64,
    norm: f64,
    p: &ProvisioningParams,
    cfg: &LossConfig,
) -> (f64, f64, f64) {
    let value_at = |x: f64, smoothing| {
        let (a, da) = decision_with_slope(x * norm, p, smoothing);
        let (r, dr_da, dr_dc) = slot_reward_partials(a, c_n * norm, p);
        (-r, -dr_da * da * norm, -dr_dc * norm)
    };
    let (v, dchat, dc) = value_at(chat_n, cfg.smoothing);
    match cfg.gradient {
        GradientMode::Analytic => (v, dchat, dc),
        GradientMode::ZeroOrder { delta } => {
            let hi = value_at(chat_n + delta, None).0;
            let lo = value_at(chat_n - delta, None).0;
            (v, (hi - lo) / (2.0 * delta), dc)
        }
    }
}

/// Per-sample losses `(B, 1)` on the tape for normalized predictions and
/// labels.
pub fn loss_column(
    t: &mut Tape,
    pred: Var,
    label: Var,
    norm: f64,
    p: &ProvisioningParams,
    cfg: &LossConfig,
) -> Var {
    match cfg.effective() {
        DecisionLoss::SquaredError => {
            let n = t.shape(pred).1 as f64;
            let d = t.sub(pred, label);
            let sq = t.square(d);
            let s = t.sum_cols(sq);
            t.scale(s, 1.0 / n)
        }
        DecisionLoss::Provisioning => {
            let (p, cfg) = (*p, *cfg);
            let per_slot = t.map2(pred, label, move |x, c| slot_decision_loss(x, c, norm, &p, &cfg));
            t.sum_cols(per_slot)
        }
    }
}

/// Per-sample losses of `params` on `batch` as a `(B, 1)` tape column.
pub fn sample_losses_tape(
    params: &PredictorParams,
    t: &mut Tape,
    vars: &[Var],
    ctx: Var,
    label: Var,
    p: &ProvisioningParams,
    cfg: &LossConfig,
) -> Var {
    let pred = params.forward(t, vars, ctx);
    loss_column(t, pred, label, params.norm, p, cfg)
}

pub fn sample_losses(params: &PredictorParams, batch: &Batch, p: &ProvisioningParams, cfg: &LossConfig) -> Vec<f64> {
    let mut t = Tape::new();
    let vars = attach(&mut t, &params.weights);
    let ctx = t.leaf(batch.context.clone());
    let label = t.leaf(batch.label.clone());
    let col = sample_losses_tape(params, &mut t, &vars, ctx, label, p, cfg);
    t.value(col).iter().copied().collect()
}

fn check_batch(params: &PredictorParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("loss needs a non-empty batch".into()));
    }
    if batch.context.ncols() != params.context || batch.label.ncols() != params.horizon {
        return Err(Error::Shape(format!(
            "batch windows ({}, {}) differ from predictor ({}, {})",
            batch.context.ncols(),
            batch.label.ncols(),
            params.context,
            params.horizon
        )));
    }
    Ok(())
}

/// Weighted loss `Σ w_i f_i` (uniform `1/B` when `weights` is `None`) and
/// its parameter gradient.
pub fn loss_and_grad(
    params: &PredictorParams,
    batch: &Batch,
    weights: Option<&[f64]>,
    p: &ProvisioningParams,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Mat>)> {
    check_batch(params, batch)?;
    let b = batch.len();
    let w = match weights {
        Some(w) if w.len() == b => Mat::from_shape_fn((b, 1), |(i, _)| w[i]),
        Some(_) => return Err(Error::Shape("one weight per batch sample is required".into())),
        None => Mat::from_elem((b, 1), 1.0 / b as f64),
    };
    let mut t = Tape::new();
    let vars = attach(&mut t, &params.weights);
    let ctx = t.leaf(batch.context.clone());
    let label = t.leaf(batch.label.clone());
    let col = sample_losses_tape(params, &mut t, &vars, ctx, label, p, cfg);
    let wv = t.leaf(w);
    let weighted = t.mul(col, wv);
    let loss = t.sum_all(weighted);
    let value = t.scalar_value(loss);
    let mut g = t.backward(loss);
    Ok((value, nn::collect_grads(&mut g, &vars, &params.weights)))
}

/// `−mean R(a*(ĉ), c)` over the batch, with the exact decision map.
pub fn dfl_loss(params: &PredictorParams, batch: &Batch, p: &ProvisioningParams) -> Result<f64> {
    check_batch(params, batch)?;
    let cfg = LossConfig::default().exact();
    let losses = sample_losses(params, batch, p, &cfg);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean squared prediction error in normalized units.
pub fn mse_loss(params: &PredictorParams, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    let pred = params.predict_normalized(&batch.context);
    Ok((&pred - &batch.label).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Per-sequence net rewards of the predictor's decisions and of the oracle,
/// both evaluated on the true labels.
pub fn sequence_rewards(
    params: &PredictorParams,
    sequences: &[Vec<f64>],
    p: &ProvisioningParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut alg = Vec::with_capacity(sequences.len());
    let mut oracle = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(256) {
        let batch = Batch::from_sequences(chunk, params.context, params.norm)?;
        check_batch(params, &batch)?;
        let pred = params.predict_normalized(&batch.context);
        for (i, seq) in chunk.iter().enumerate() {
            let c = &seq[params.context..];
            let c_hat: Vec<f64> = pred.row(i).iter().map(|x| x * params.norm).collect();
            let a = provisioning::optimal_decision(&c_hat, p);
            alg.push(provisioning::net_reward_slices(&a.capacities, c, p)?);
            oracle.push(provisioning::oracle_reward(c, p));
        }
    }
    Ok((alg, oracle))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: PredictorArch,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: PredictorArch::default(),
            epochs: 15,
            batch: 64,
            lr: 1e-6,
            clip_norm: Some(1.0),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("predictor batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("predictor learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Per-batch hook: may replace the batch and supply per-sample weights.
pub type BatchPlan = (Batch, Option<Vec<f64>>);

/// Predictor with its optimizer state, so training can proceed one pass at a
/// time.
#[derive(Clone, Debug)]
pub struct PredictorTrainer {
    pub params: PredictorParams,
    pub config: TrainConfig,
    pub provisioning: ProvisioningParams,
    adam: Adam,
    rng: Stream,
    steps: usize,
}

impl PredictorTrainer {
    pub fn new(params: PredictorParams, config: TrainConfig, provisioning: ProvisioningParams) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                clip_norm: config.clip_norm,
                ..AdamConfig::default()
            },
            &params.weights,
        );
        Ok(Self {
            adam,
            rng: rng::substream(config.seed, "predictor-batches", 0),
            params,
            config,
            provisioning,
            steps: 0,
        })
    }

    /// Fresh predictor whose output bias sits at the mean normalized label of
    /// `sequences`.
    pub fn for_data(
        sequences: &[Vec<f64>],
        context: usize,
        horizon: usize,
        norm: f64,
        config: TrainConfig,
        provisioning: ProvisioningParams,
    ) -> Result<Self> {
        let count = sequences.len() * horizon;
        let mean = if count == 0 {
            0.0
        } else {
            sequences.iter().flat_map(|s| s.iter().skip(context)).sum::<f64>() / (count as f64 * norm)
        };
        let mut init_rng = rng::substream(config.seed, "predictor-init", 0);
        let params = PredictorParams::init(config.arch, context, horizon, norm, mean, &mut init_rng)?;
        Self::new(params, config, provisioning)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One shuffled pass over `sequences` (tokens); returns the mean batch
    /// loss.
    pub fn epoch(&mut self, sequences: &[Vec<f64>]) -> Result<f64> {
        self.epoch_with(sequences, |_, b, _| Ok((b, None)))
    }

    /// One pass in which `plan` may transform each batch and weight its
    /// samples before the update.
    pub fn epoch_with(
        &mut self,
        sequences: &[Vec<f64>],
        mut plan: impl FnMut(&PredictorParams, Batch, &mut Stream) -> Result<BatchPlan>,
    ) -> Result<f64> {
        if sequences.is_empty() {
            return Err(Error::Argument("cannot train the predictor on an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch) {
            let seqs: Vec<&[f64]> = chunk.iter().map(|&i| sequences[i].as_slice()).collect();
            let batch = Batch::from_sequences(&seqs, self.params.context, self.params.norm)?;
            let (batch, weights) = plan(&self.params, batch, &mut self.rng)?;
            let (value, grads) =
                loss_and_grad(&self.params, &batch, weights.as_deref(), &self.provisioning, &self.config.loss)?;
            if !value.is_finite() || !nn::all_finite(&grads) {
                return Err(Error::PredictorDiverged {
                    step: self.steps,
                    checkpoint: Box::new(self.params.clone()),
                });
            }
            self.adam.step(&mut self.params.weights, &grads);
            self.steps += 1;
            total += value;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// `config.epochs` passes; returns the per-epoch mean losses.
    pub fn train(&mut self, sequences: &[Vec<f64>]) -> Result<Vec<f64>> {
        (0..self.config.epochs).map(|_| self.epoch(sequences)).collect()
    }
}

/// Trains a fresh predictor on `samples` with `config`.
pub fn train(
    samples: &[WindowedSample],
    norm: f64,
    config: TrainConfig,
    p: &ProvisioningParams,
) -> Result<(PredictorParams, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot train the predictor on an empty dataset".into()))?;
    let (w, n) = (first.context.len(), first.label.len());
    let seqs: Vec<Vec<f64>> = samples.iter().map(WindowedSample::concat).collect();
    let mut trainer = PredictorTrainer::for_data(&seqs, w, n, norm, config, *p)?;
    let losses = trainer.train(&seqs)?;
    Ok((trainer.params, losses))
}
