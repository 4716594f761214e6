use serde::{Deserialize, Serialize};

use crate::data::TraceDataset;
use crate::error::{Error, Result};
use crate::predictor::{self, PredictorParams, PredictorTrainer, TrainConfig};
use crate::provisioning::ProvisioningParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlDroConfig {
    pub epsilon: f64,
    /// Bracket for `β` as multiples of the loss spread.
    pub bracket: (f64, f64),
    /// Stopping width in `ln β`.
    pub tolerance: f64,
}

impl Default for KlDroConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            bracket: (1e-12, 1e12),
            tolerance: 1e-8,
        }
    }
}

impl KlDroConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bracket;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("KL budget {} must be non-negative", self.epsilon)));
        }
        if !(lo > 0.0 && hi > lo && hi.is_finite()) || !(self.tolerance > 0.0) {
            return Err(Error::Config("KL dual bracket must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCase {
    pub value: f64,
    /// Exponential-tilt weights, summing to one.
    pub weights: Vec<f64>,
    /// Optimal dual variable; `None` for the closed-form cases.
    pub beta: Option<f64>,
}

/// `β·ln mean exp(f/β) + β·ε`, stabilized around `max f`.
fn dual(f: &[f64], max: f64, beta: f64, eps: f64) -> f64 {
    let s = f.iter().map(|&x| ((x - max) / beta).exp()).sum::<f64>() / f.len() as f64;
    max + beta * s.ln() + beta * eps
}

fn tilt(f: &[f64], max: f64, beta: f64) -> Vec<f64> {
    let w: Vec<f64> = f.iter().map(|&x| ((x - max) / beta).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn worst_case(f: &[f64], cfg: &KlDroConfig) -> Result<WorstCase> {
    if f.is_empty() {
        return Err(Error::Argument("worst case of an empty loss vector".into()));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("losses must be finite".into()));
    }
    cfg.validate()?;
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = f.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    if cfg.epsilon == 0.0 || spread <= 1e-15 * (1.0 + max.abs()) {
        return Ok(WorstCase {
            value: if spread == 0.0 { max } else { mean },
            weights: vec![1.0 / n; f.len()],
            beta: None,
        });
    }
    // All mass on the argmax set is feasible once ε ≥ ln(n/k).
    let k = f.iter().filter(|&&x| x == max).count();
    if cfg.epsilon >= (n / k as f64).ln() {
        return Ok(WorstCase {
            value: max,
            weights: f.iter().map(|&x| if x == max { 1.0 / k as f64 } else { 0.0 }).collect(),
            beta: None,
        });
    }
    let g = |u: f64| dual(f, max, u.exp(), cfg.epsilon);
    let (mut a, mut b) = ((cfg.bracket.0 * spread).ln(), (cfg.bracket.1 * spread).ln());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    while b - a > cfg.tolerance {
        if gc <= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + phi * (b - a);
            gd = g(d);
        }
    }
    let u = 0.5 * (a + b);
    let beta = u.exp();
    Ok(WorstCase {
        value: g(u).clamp(mean, max),
        weights: tilt(f, max, beta),
        beta: Some(beta),
    })
}

/// `sup { E_p f : KL(p ‖ uniform) ≤ ε }` through its one-dimensional dual.
pub fn kl_worst_case(f: &[f64], epsilon: f64) -> Result<WorstCase> {
    worst_case(
        f,
        &KlDroConfig {
            epsilon,
            ..KlDroConfig::default()
        },
    )
}

/// Predictor training where each batch loss is reweighted by the worst-case
/// tilt of its per-sample decision losses. Weights are constants within a
/// step.
pub fn train_kl_dro(
    s0: &TraceDataset,
    cfg: &TrainConfig,
    kl: &KlDroConfig,
    p: &ProvisioningParams,
) -> Result<(PredictorParams, Vec<f64>)> {
    if s0.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    kl.validate()?;
    let mut trainer = PredictorTrainer::for_data(&s0.sequences, s0.context, s0.horizon, s0.norm, *cfg, *p)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let l = trainer.epoch_with(&s0.sequences, |params, batch, _| {
            let f = predictor::sample_losses(params, &batch, p, &cfg.loss);
            let wc = worst_case(&f, kl)?;
            Ok((batch, Some(wc.weights)))
        })?;
        losses.push(l);
    }
    Ok((trainer.params, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::RngExt;

    fn kl_uniform(p: &[f64]) -> f64 {
        let n = p.len() as f64;
        p.iter().filter(|&&x| x > 0.0).map(|&x| x * (x * n).ln()).sum()
    }

    /// Random-direction hill climb over the simplex inside the KL ball.
    fn brute_force(f: &[f64], eps: f64, seed: u64) -> f64 {
        let n = f.len();
        let mut r = rng::stream(seed);
        let mut p = vec![1.0 / n as f64; n];
        let obj = |p: &[f64]| p.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        let mut best = obj(&p);
        let mut step = 0.1;
        for it in 0..40_000 {
            let mut d: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let m = d.iter().sum::<f64>() / n as f64;
            d.iter_mut().for_each(|x| *x -= m);
            let q: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            if q.iter().all(|&x| x >= 0.0) && kl_uniform(&q) <= eps {
                let v = obj(&q);
                if v > best {
                    best = v;
                    p = q;
                }
            }
            if it % 2000 == 1999 {
                step *= 0.6;
            }
        }
        best
    }

    #[test]
    fn degenerate_and_zero_budget() {
        assert_eq!(kl_worst_case(&[1.0, 1.0, 1.0], 0.7).unwrap().value, 1.0);
        let f = [0.2, 0.5, 1.1];
        assert_relative_eq!(kl_worst_case(&f, 0.0).unwrap().value, 0.6, max_relative = 1e-15);
        assert!(kl_worst_case(&[], 1.0).is_err());
    }

    #[test]
    fn two_point_at_ln2() {
        let wc = kl_worst_case(&[0.0, 1.0], 2f64.ln()).unwrap();
        assert!((wc.value - 1.0).abs() <= 1e-6);
        // Grid over two-point reweightings.
        let grid = (0..=10_000)
            .map(|i| i as f64 / 1e4)
            .filter(|&q| kl_uniform(&[1.0 - q, q]) <= 2f64.ln() + 1e-12)
            .fold(0.0, f64::max);
        assert!((wc.value - grid).abs() <= 1e-6);
    }

    #[test]
    fn agrees_with_simplex_search() {
        let mut r = rng::stream(11);
        for trial in 0..50 {
            let n = r.random_range(2..=5);
            let f: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
            let eps = r.random_range(0.01..1.0);
            let dual = kl_worst_case(&f, eps).unwrap().value;
            let primal = brute_force(&f, eps, trial);
            assert!(
                (dual - primal).abs() <= 1e-3 * primal.abs(),
                "{f:?} ε={eps}: dual {dual} vs search {primal}"
            );
        }
    }

    #[test]
    fn bounds_and_monotonicity() {
        let mut r = rng::stream(5);
        for _ in 0..20 {
            let f: Vec<f64> = (0..8).map(|_| r.random_range(-3.0..3.0)).collect();
            let mean = f.iter().sum::<f64>() / 8.0;
            let max = f.iter().copied().fold(f64::MIN, f64::max);
            let mut prev = f64::NEG_INFINITY;
            for eps in [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 1e3] {
                let v = kl_worst_case(&f, eps).unwrap().value;
                assert!(v >= mean - 1e-12 && v <= max + 1e-12);
                assert!(v >= prev - 1e-9, "not monotone at ε={eps}");
                prev = v;
            }
            assert!((prev - max).abs() <= 1e-6);
        }
    }

    #[test]
    fn tilt_weights_reproduce_value() {
        let f = [0.3, 0.9, 0.1, 0.5];
        let wc = kl_worst_case(&f, 0.2).unwrap();
        let primal: f64 = wc.weights.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert_relative_eq!(wc.weights.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        assert!((kl_uniform(&wc.weights) - 0.2).abs() < 1e-6);
        assert_relative_eq!(primal, wc.value, max_relative = 1e-6);
    }

    #[test]
    fn huge_losses_do_not_overflow() {
        let wc = kl_worst_case(&[1e6, 2e6, 3e6], 0.3).unwrap();
        assert!(wc.value.is_finite() && wc.value > 2e6 && wc.value < 3e6);
    }
}
