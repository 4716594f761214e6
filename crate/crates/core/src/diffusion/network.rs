//! Noise-prediction networks `ε_θ(x, t)` over length-`L` sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{attach, init_linear, linear, step_embedding, Cursor, Mat, Tape, Var};

/// Number of full linear maps mixed by the step-dependent input skip.
const SKIP_MAPS: usize = 8;
/// Gaussian bumps over `ln t` that weight the skip maps.
const SKIP_FEATURES: usize = 16;
const SKIP_LN_T_MAX: f64 = 7.0;

fn log_step_features(steps: &[usize]) -> Mat {
    let width = SKIP_LN_T_MAX / (SKIP_FEATURES - 1) as f64;
    Mat::from_shape_fn((steps.len(), SKIP_FEATURES), |(i, k)| {
        let z = ((steps[i].max(1) as f64).ln() - k as f64 * width) / width;
        (-0.5 * z * z).exp()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetArch {
    /// Fully connected residual network: input layer, `blocks` two-layer
    /// residual blocks each receiving its own step-embedding projection,
    /// output layer.
    Mlp {
        hidden: usize,
        blocks: usize,
        temb: usize,
    },
    /// 1-D U-Net with `levels` resolutions; `width` channels at the first
    /// level and `2·width` below it.
    UNet {
        levels: usize,
        width: usize,
        temb: usize,
    },
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch::UNet {
            levels: 4,
            width: 128,
            temb: 32,
        }
    }
}

impl NetArch {
    /// Desk-scale fully connected fallback.
    pub fn mlp(hidden: usize) -> Self {
        NetArch::Mlp {
            hidden,
            blocks: 1,
            temb: 16,
        }
    }

    pub fn unet(width: usize) -> Self {
        NetArch::UNet {
            levels: 4,
            width,
            temb: 32,
        }
    }

    /// Human-readable descriptor (`DFU-128`, `MLP-128x1`).
    pub fn descriptor(&self) -> String {
        match self {
            NetArch::Mlp { hidden, blocks, .. } => format!("MLP-{hidden}x{blocks}"),
            NetArch::UNet { levels, width, .. } if *levels == 4 => format!("DFU-{width}"),
            NetArch::UNet { levels, width, .. } => format!("UNet{levels}-{width}"),
        }
    }

    fn temb(&self) -> usize {
        match *self {
            NetArch::Mlp { temb, .. } | NetArch::UNet { temb, .. } => temb,
        }
    }

    fn channels(&self, level: usize) -> usize {
        match *self {
            NetArch::UNet { width, .. } if level == 0 => width,
            NetArch::UNet { width, .. } => 2 * width,
            NetArch::Mlp { hidden, .. } => hidden,
        }
    }

    /// `(fan_in, fan_out)` of every affine layer in forward order.
    fn layout(&self, seq_len: usize) -> Vec<(usize, usize)> {
        let mut v = self.body_layout(seq_len);
        v.push((SKIP_FEATURES, SKIP_MAPS));
        v.extend(std::iter::repeat_n((seq_len, seq_len), SKIP_MAPS));
        v
    }

    fn body_layout(&self, seq_len: usize) -> Vec<(usize, usize)> {
        let e = self.temb();
        match *self {
            NetArch::Mlp { hidden, blocks, .. } => {
                let mut v = vec![(seq_len + e, hidden)];
                for _ in 0..blocks {
                    v.push((e, hidden));
                    v.push((hidden, hidden));
                    v.push((hidden, hidden));
                }
                v.push((hidden, seq_len));
                v
            }
            NetArch::UNet { levels, .. } => {
                let mut v = Vec::new();
                let mut c_in = 1;
                for lvl in 0..levels {
                    let c = self.channels(lvl);
                    v.push((e, c));
                    v.push((3 * c_in, c));
                    v.push((3 * c, c));
                    c_in = c;
                }
                for lvl in (0..levels.saturating_sub(1)).rev() {
                    let c = self.channels(lvl);
                    v.push((e, c));
                    v.push((3 * (self.channels(lvl + 1) + c), c));
                }
                v.push((self.channels(0), 1));
                v
            }
        }
    }

    fn padded_len(&self, seq_len: usize) -> usize {
        match *self {
            NetArch::Mlp { .. } => seq_len,
            NetArch::UNet { levels, .. } => {
                let m = 1usize << levels.saturating_sub(1);
                seq_len.div_ceil(m) * m
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseNet {
    pub arch: NetArch,
    pub seq_len: usize,
    pub params: Vec<Mat>,
    #[serde(default)]
    pub precond: Option<Precond>,
}

/// Input scaling from data moments: `x_t` is fed to the network as
/// `(x_t − √ᾱ_t μ) / √(ᾱ_t v + 1 − ᾱ_t)`, which has roughly unit scale at
/// every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precond {
    pub alpha_bars: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Precond {
    /// Per-slot moments of `data` (rows are sequences).
    pub fn from_data(alpha_bars: Vec<f64>, data: &Mat) -> Self {
        let mean = data.mean_axis(ndarray::Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        let var = data.var_axis(ndarray::Axis(0), 0.0).mapv(|v| v.max(1e-8)).to_vec();
        Self { alpha_bars, mean, var }
    }

    pub fn apply(&self, x: &Mat, steps: &[usize]) -> Mat {
        let mut out = x.clone();
        for (mut row, &t) in out.rows_mut().into_iter().zip(steps) {
            let ab = self.alpha_bars[t.clamp(1, self.alpha_bars.len()) - 1];
            let s = ab.sqrt();
            for ((v, &m), &var) in row.iter_mut().zip(&self.mean).zip(&self.var) {
                *v = (*v - s * m) / (ab * var + 1.0 - ab).sqrt();
            }
        }
        out
    }
}

impl NoiseNet {
    /// Glorot-initialized network whose output layer and skip maps start at
    /// zero, so a fresh model predicts `ε_θ ≡ 0`.
    pub fn init<R: Rng + ?Sized>(arch: NetArch, seq_len: usize, rng: &mut R) -> Self {
        let mut params = Vec::new();
        for (fan_in, fan_out) in arch.layout(seq_len) {
            init_linear(&mut params, fan_in, fan_out, rng);
        }
        let n = params.len();
        let body = 2 * arch.body_layout(seq_len).len();
        params[body - 2].fill(0.0);
        for p in &mut params[body + 2..n] {
            p.fill(0.0);
        }
        Self {
            arch,
            seq_len,
            params,
            precond: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Forward pass on the tape; `x` is `(B, L)`, output `(B, L)`.
    pub fn forward(&self, t: &mut Tape, vars: &[Var], x: &Mat, steps: &[usize]) -> Var {
        let temb = t.leaf(step_embedding(steps, self.arch.temb()));
        let scaled;
        let x = match &self.precond {
            Some(p) => {
                scaled = p.apply(x, steps);
                &scaled
            }
            None => x,
        };
        let mut cur = Cursor::new(vars);
        let xv = t.leaf(x.clone());
        let out = match self.arch {
            NetArch::Mlp { blocks, .. } => {
                let input = t.concat_cols(&[xv, temb]);
                let mut h = linear(t, &mut cur, input);
                h = t.silu(h);
                for _ in 0..blocks {
                    let emb = linear(t, &mut cur, temb);
                    let a = t.add(h, emb);
                    let a = linear(t, &mut cur, a);
                    let a = t.silu(a);
                    let a = linear(t, &mut cur, a);
                    h = t.add(h, a);
                }
                let h = t.silu(h);
                linear(t, &mut cur, h)
            }
            NetArch::UNet { levels, .. } => {
                let b = x.nrows();
                let lp = self.arch.padded_len(self.seq_len);
                let mut padded = Mat::zeros((b, lp));
                padded
                    .slice_mut(ndarray::s![.., ..self.seq_len])
                    .assign(x);
                let xv = t.leaf(padded);
                let mut h = t.reshape(xv, b * lp, 1);
                let mut seg = lp;
                let mut skips = Vec::with_capacity(levels);
                for lvl in 0..levels {
                    let emb = linear(t, &mut cur, temb);
                    let emb = t.repeat_rows(emb, seg);
                    let p = t.im2col(h, seg, 3);
                    let c1 = linear(t, &mut cur, p);
                    let c1 = t.add(c1, emb);
                    let c1 = t.silu(c1);
                    let p = t.im2col(c1, seg, 3);
                    let c2 = linear(t, &mut cur, p);
                    h = t.silu(c2);
                    skips.push((h, seg));
                    if lvl + 1 < levels {
                        h = t.avg_pool2(h, seg);
                        seg /= 2;
                    }
                }
                for lvl in (0..levels.saturating_sub(1)).rev() {
                    let (skip, skip_seg) = skips[lvl];
                    let up = t.upsample2(h, seg);
                    seg = skip_seg;
                    let cat = t.concat_cols(&[up, skip]);
                    let emb = linear(t, &mut cur, temb);
                    let emb = t.repeat_rows(emb, seg);
                    let p = t.im2col(cat, seg, 3);
                    let c = linear(t, &mut cur, p);
                    let c = t.add(c, emb);
                    h = t.silu(c);
                }
                let o = linear(t, &mut cur, h);
                let o = t.reshape(o, b, lp);
                t.slice_cols(o, 0, self.seq_len)
            }
        };
        // linear skip Σ_j w_j(t)·(x M_j + b_j) on the scaled input
        let feats = t.leaf(log_step_features(steps));
        let w = linear(t, &mut cur, feats);
        let mut out = out;
        for j in 0..SKIP_MAPS {
            let m = linear(t, &mut cur, xv);
            let wj = t.slice_cols(w, j, 1);
            let term = t.mul_col(m, wj);
            out = t.add(out, term);
        }
        debug_assert_eq!(cur.consumed(), self.params.len());
        out
    }

    /// Inference-only forward pass.
    pub fn predict(&self, x: &Mat, steps: &[usize]) -> Mat {
        let mut t = Tape::new();
        let vars = attach(&mut t, &self.params);
        let out = self.forward(&mut t, &vars, x, steps);
        t.value(out).clone()
    }
}
