use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete variance-preserving noise schedule. All per-step arrays are
/// indexed by `t − 1` for `t ∈ 1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Reverse-process variances `σ_t²`.
    pub sigma2: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `β` from `beta_start` to `beta_end`, with the posterior variance
    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)` as the sampling variance.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let mut s = Self {
            t_max,
            betas,
            alpha_bars,
            sigma2: Vec::new(),
        };
        s.sigma2 = (1..=t_max).map(|t| s.posterior_variance(t)).collect();
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t_max;
        if self.betas.len() != n || self.alpha_bars.len() != n || self.sigma2.len() != n {
            return Err(Error::Config("schedule arrays disagree with t_max".into()));
        }
        let betas_ok = self.betas.iter().all(|&b| b > 0.0 && b < 1.0)
            && self.betas.windows(2).all(|w| w[0] <= w[1]);
        let bars_ok = self.alpha_bars.windows(2).all(|w| w[1] < w[0]);
        let sig_ok = self.sigma2.iter().all(|&s| s >= 0.0 && s.is_finite())
            && self.sigma2.iter().skip(1).all(|&s| s > 0.0);
        if betas_ok && bars_ok && sig_ok {
            Ok(())
        } else {
            Err(Error::Config("noise schedule violates its invariants".into()))
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::StepIndex { t, t_max: self.t_max })
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t−1}`, equal to one at `t = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t))
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// Sets `σ_t² = variance` for the last `tail_len` reverse steps
    /// (`t ∈ 1..=tail_len`).
    pub fn with_tail_variance(mut self, tail_len: usize, variance: f64) -> Result<Self> {
        if tail_len == 0 || tail_len > self.t_max {
            return Err(Error::Config(format!(
                "tail length {tail_len} outside 1..={}",
                self.t_max
            )));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("tail variance {variance} must be positive")));
        }
        for s in &mut self.sigma2[..tail_len] {
            *s = variance;
        }
        Ok(self)
    }
}
