//! Minimal neural-network toolkit: an autodiff tape, dense layers, and Adam.

mod tape;

pub use tape::{Grads, Mat, Tape, Var};

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

/// Walks a parameter list in the order a network's `init` pushed it.
pub struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

/// Uniform Glorot initialization of a `(fan_in, fan_out)` weight and a zero
/// bias row; pushed as `[w, b]`.
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut Vec<Mat>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    params.push(Mat::from_shape_fn((fan_in, fan_out), |_| {
        rng.random_range(-bound..bound)
    }));
    params.push(Mat::zeros((1, fan_out)));
}

pub fn linear(t: &mut Tape, cur: &mut Cursor<'_>, x: Var) -> Var {
    let w = cur.next_var();
    let b = cur.next_var();
    let h = t.matmul(x, w);
    t.add_row(h, b)
}

/// Puts every parameter on the tape as a leaf.
pub fn attach(t: &mut Tape, params: &[Mat]) -> Vec<Var> {
    params.iter().map(|p| t.leaf(p.clone())).collect()
}

/// Collects parameter gradients, substituting zeros for unused leaves.
pub fn collect_grads(grads: &mut Grads, vars: &[Var], params: &[Mat]) -> Vec<Mat> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
        .collect()
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub fn all_finite(mats: &[Mat]) -> bool {
    mats.iter().all(|m| m.iter().all(|x| x.is_finite()))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global l2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Mat]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descent step: `params ← params − lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = global_norm(grads);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * scale;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= c.lr * mh / (vh.sqrt() + c.eps);
                });
        }
    }

    /// Ascent step on a maximization objective.
    pub fn ascend(&mut self, params: &mut [Mat], grads: &[Mat]) {
        let neg: Vec<Mat> = grads.iter().map(|g| -g).collect();
        self.step(params, &neg);
    }
}

/// Sinusoidal embedding of diffusion step indices, one row per entry.
pub fn step_embedding(steps: &[usize], dim: usize) -> Mat {
    let half = dim / 2;
    Mat::from_shape_fn((steps.len(), dim), |(r, c)| {
        let t = steps[r] as f64;
        let k = c % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        if c < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = vec![Mat::from_elem((2, 2), 0.3)];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Mat::zeros((2, 2))]);
        assert!(p[0].iter().all(|&x| x == 0.3));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Mat::from_elem((1, 3), 5.0)];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..500 {
            let g = vec![&p[0] * 2.0];
            adam.step(&mut p, &g);
        }
        assert!(p[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn step_embedding_is_bounded() {
        let e = step_embedding(&[1, 250, 500], 16);
        assert_eq!(e.dim(), (3, 16));
        assert!(e.iter().all(|x| x.abs() <= 1.0));
    }
}
