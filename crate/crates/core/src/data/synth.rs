use std::str::FromStr;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, TraceDataset};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Ar1,
    Seasonal,
    Bursty,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar1" => Ok(Self::Ar1),
            "seasonal" => Ok(Self::Seasonal),
            "bursty" => Ok(Self::Bursty),
            other => Err(Error::Argument(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

/// Generator knobs. Levels are fractions of `norm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub mean_frac: f64,
    /// AR(1) persistence.
    pub phi: f64,
    /// Stationary noise standard deviation.
    pub noise_frac: f64,
    pub period: usize,
    pub amplitude_frac: f64,
    /// Per-slot probability that a burst starts.
    pub burst_rate: f64,
    pub burst_frac: f64,
    /// Geometric decay of a burst per slot.
    pub burst_decay: f64,
    pub norm: f64,
    pub context: usize,
    pub horizon: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            mean_frac: 0.3,
            phi: 0.8,
            noise_frac: 0.05,
            period: 7,
            amplitude_frac: 0.1,
            burst_rate: 0.05,
            burst_frac: 0.3,
            burst_decay: 0.5,
            norm: super::DEFAULT_NORM,
            context: super::DEFAULT_CONTEXT,
            horizon: super::DEFAULT_HORIZON,
        }
    }
}

/// Deterministic synthetic workload sequences of length `context + horizon`,
/// clamped into `[0, norm]`.
pub fn synth_generate(
    kind: SynthKind,
    count: usize,
    params: &SynthParams,
    seed: u64,
) -> Result<TraceDataset> {
    if count == 0 {
        return Err(Error::Argument("synthetic count must be at least 1".into()));
    }
    let p = params;
    let len = p.context + p.horizon;
    let mut rng = rng::stream(seed);
    let mean = p.mean_frac * p.norm;
    let sd = p.noise_frac * p.norm;
    let mut sequences = Vec::with_capacity(count);
    for _ in 0..count {
        let mut s = Vec::with_capacity(len);
        match kind {
            SynthKind::Ar1 => {
                let innov = sd * (1.0 - p.phi * p.phi).max(0.0).sqrt();
                let mut x = mean + sd * rng::gaussian(&mut rng);
                for _ in 0..len {
                    s.push(x);
                    x = mean + p.phi * (x - mean) + innov * rng::gaussian(&mut rng);
                }
            }
            SynthKind::Seasonal => {
                let period = p.period.max(1) as f64;
                let phase = rng.random_range(0.0..period);
                let amp = p.amplitude_frac * p.norm;
                for t in 0..len {
                    let angle = std::f64::consts::TAU * (t as f64 + phase) / period;
                    s.push(mean + amp * angle.sin() + sd * rng::gaussian(&mut rng));
                }
            }
            SynthKind::Bursty => {
                let mut burst = 0.0;
                for _ in 0..len {
                    if rng.random_bool(p.burst_rate.clamp(0.0, 1.0)) {
                        burst += p.burst_frac * p.norm;
                    }
                    s.push(mean + burst + sd * rng::gaussian(&mut rng));
                    burst *= p.burst_decay;
                }
            }
        }
        for x in &mut s {
            *x = x.clamp(0.0, p.norm);
        }
        sequences.push(s);
    }
    let meta = DatasetMeta {
        source: format!("synth:{kind:?}").to_lowercase(),
        slot_seconds: 60.0,
        seed: Some(seed),
    };
    TraceDataset::new(sequences, p.context, p.horizon, p.norm, meta)
}
