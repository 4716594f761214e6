use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::{TraceDataset, HEADROOM};
use crate::error::{Error, Result};
use crate::rng;

/// Controlled distribution shifts.
#[derive(Clone, Copy, Debug)]
pub enum Shift<'a> {
    /// Multiply every value by the factor.
    MeanScale(f64),
    /// Scale deviations from the per-slot mean so variance scales by the factor.
    VarianceScale(f64),
    /// Half-to-half merge: first half of the base, last half of the other.
    Mix(&'a TraceDataset),
}

pub fn shift_dataset(d: &TraceDataset, shift: Shift<'_>) -> Result<TraceDataset> {
    let hi = HEADROOM * d.norm;
    let clamp = |x: f64| x.clamp(0.0, hi);
    let sequences = match shift {
        Shift::MeanScale(f) => {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Argument(format!("mean scale {f} must be non-negative")));
            }
            d.sequences
                .iter()
                .map(|s| s.iter().map(|&x| clamp(x * f)).collect())
                .collect()
        }
        Shift::VarianceScale(f) => {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Argument(format!("variance scale {f} must be non-negative")));
            }
            let (mean, _) = d.slot_moments();
            let k = f.sqrt();
            d.sequences
                .iter()
                .map(|s| {
                    s.iter()
                        .zip(&mean)
                        .map(|(&x, &m)| clamp(m + k * (x - m)))
                        .collect()
                })
                .collect()
        }
        Shift::Mix(other) => {
            if other.seq_len() != d.seq_len() {
                return Err(Error::Shape("mixed datasets must share sequence length".into()));
            }
            let first = d.len().div_ceil(2);
            let second = other.len() / 2;
            d.sequences[..first]
                .iter()
                .chain(&other.sequences[other.len() - second..])
                .map(|s| s.iter().map(|&x| clamp(x)).collect())
                .collect()
        }
    };
    let mut out = d.with_sequences(sequences);
    if let Shift::Mix(other) = shift {
        out.meta.source = format!("{}+{}", d.meta.source, other.meta.source);
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Cutout,
    Perlin,
    Gaussian,
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cutout" => Ok(Self::Cutout),
            "perlin" => Ok(Self::Perlin),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Argument(format!("unknown corruption kind {other:?}"))),
        }
    }
}

/// A corruption: `parameter` is the masking probability for cutout and the
/// noise standard deviation as a fraction of the dataset maximum otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub parameter: f64,
    /// Lattice spacing in slots, Perlin only.
    #[serde(default = "default_lattice")]
    pub lattice: usize,
}

fn default_lattice() -> usize {
    4
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, parameter: f64) -> Self {
        Self {
            kind,
            parameter,
            lattice: default_lattice(),
        }
    }

    /// Default settings: cutout p = 0.005, Perlin 0.05·max, Gaussian 0.10·max.
    pub fn default_for(kind: CorruptionKind) -> Self {
        let parameter = match kind {
            CorruptionKind::Cutout => 0.005,
            CorruptionKind::Perlin => 0.05,
            CorruptionKind::Gaussian => 0.10,
        };
        Self::new(kind, parameter)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            CorruptionKind::Cutout => (0.0..=1.0).contains(&self.parameter),
            _ => self.parameter >= 0.0 && self.parameter.is_finite(),
        } && self.lattice >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid corruption {self:?}")))
        }
    }
}

/// Per-point perturbation field for a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum PerturbationField {
    /// `true` marks a point that is zeroed.
    Mask(Vec<Vec<bool>>),
    /// Additive noise in token units.
    Additive(Vec<Vec<f64>>),
}

/// Draws the perturbation for `d` under `spec`; identical inputs give an
/// identical field, which is how corruption and augmentation stay in step.
pub fn perturbation_field(d: &TraceDataset, spec: &CorruptionSpec, seed: u64) -> Result<PerturbationField> {
    spec.validate()?;
    let mut rng = rng::stream(seed);
    let len = d.seq_len();
    let scale = spec.parameter * d.max_value();
    Ok(match spec.kind {
        CorruptionKind::Cutout => PerturbationField::Mask(
            (0..d.len())
                .map(|_| (0..len).map(|_| rng.random_bool(spec.parameter)).collect())
                .collect(),
        ),
        CorruptionKind::Gaussian => PerturbationField::Additive(
            (0..d.len())
                .map(|_| (0..len).map(|_| scale * rng::gaussian(&mut rng)).collect())
                .collect(),
        ),
        CorruptionKind::Perlin => PerturbationField::Additive(
            (0..d.len())
                .map(|_| {
                    perlin_field(len, spec.lattice, &mut rng)
                        .into_iter()
                        .map(|x| scale * x)
                        .collect()
                })
                .collect(),
        ),
    })
}

pub(crate) fn apply_field(d: &TraceDataset, field: &PerturbationField) -> TraceDataset {
    let hi = HEADROOM * d.norm;
    let sequences = match field {
        PerturbationField::Mask(mask) => d
            .sequences
            .iter()
            .zip(mask)
            .map(|(s, m)| {
                s.iter()
                    .zip(m)
                    .map(|(&x, &zero)| if zero { 0.0 } else { x })
                    .collect()
            })
            .collect(),
        PerturbationField::Additive(noise) => d
            .sequences
            .iter()
            .zip(noise)
            .map(|(s, n)| s.iter().zip(n).map(|(&x, &e)| (x + e).clamp(0.0, hi)).collect())
            .collect(),
    };
    d.with_sequences(sequences)
}

/// Applies the corruption to every sequence; results are clamped to
/// `[0, HEADROOM·norm]`.
pub fn corrupt(d: &TraceDataset, spec: &CorruptionSpec, seed: u64) -> Result<TraceDataset> {
    let field = perturbation_field(d, spec, seed)?;
    let mut out = apply_field(d, &field);
    out.meta.source = format!("{}~{:?}", d.meta.source, spec.kind).to_lowercase();
    out.validate()?;
    Ok(out)
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Standard deviation of raw 1-D gradient noise with gradients uniform on
/// `[-1, 1]` and a uniformly random lattice phase.
fn perlin_raw_std() -> f64 {
    static STD: OnceLock<f64> = OnceLock::new();
    *STD.get_or_init(|| {
        // Var = E[g²]·∫₀¹ u²(1−S)² + (1−u)²S² du, E[g²] = 1/3.
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f = |u: f64| {
            let s = smoothstep(u);
            u * u * (1.0 - s).powi(2) + (1.0 - u).powi(2) * s * s
        };
        let mut acc = f(0.0) + f(1.0);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        (acc * h / 3.0 / 3.0).sqrt()
    })
}

/// Unit-variance 1-D Perlin noise sampled at integer slots, with a random
/// lattice phase and gradients uniform on `[-1, 1]`.
pub fn perlin_field<R: Rng + ?Sized>(len: usize, lattice: usize, rng: &mut R) -> Vec<f64> {
    let spacing = lattice.max(2) as f64;
    let offset = rng.random_range(0.0..spacing);
    let cells = ((len as f64 + offset) / spacing).ceil() as usize + 2;
    let grads: Vec<f64> = (0..cells).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let norm = perlin_raw_std();
    (0..len)
        .map(|i| {
            let x = (i as f64 + offset) / spacing;
            let cell = x.floor() as usize;
            let u = x - cell as f64;
            let s = smoothstep(u);
            let left = grads[cell] * u;
            let right = grads[cell + 1] * (u - 1.0);
            (left + s * (right - left)) / norm
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthKind, SynthParams};

    fn base() -> TraceDataset {
        synth_generate(SynthKind::Ar1, 50, &SynthParams::default(), 4).unwrap()
    }

    #[test]
    fn identity_shifts() {
        let d = base();
        assert_eq!(shift_dataset(&d, Shift::MeanScale(1.0)).unwrap().sequences, d.sequences);
        let mixed = shift_dataset(&d, Shift::Mix(&d)).unwrap();
        let mut a = mixed.sequences.clone();
        let mut b = d.sequences.clone();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mean_scale_scales_slot_means() {
        let d = base();
        let s = shift_dataset(&d, Shift::MeanScale(1.5)).unwrap();
        let (m0, _) = d.slot_moments();
        let (m1, _) = s.slot_moments();
        // The synthetic set stays far below the headroom clamp.
        assert!(d.max_value() * 1.5 < HEADROOM * d.norm);
        for (a, b) in m0.iter().zip(&m1) {
            assert!((b - 1.5 * a).abs() <= 1e-9 * b);
        }
    }

    #[test]
    fn variance_scale_scales_slot_variance() {
        let d = base();
        let s = shift_dataset(&d, Shift::VarianceScale(1.44)).unwrap();
        let (m0, sd0) = d.slot_moments();
        let (_, sd1) = s.slot_moments();
        // The unclamped region: no value is pushed below zero.
        let lowest = d
            .sequences
            .iter()
            .flat_map(|q| q.iter().zip(&m0).map(|(x, m)| m + 1.2 * (x - m)))
            .fold(f64::INFINITY, f64::min);
        assert!(lowest > 0.0);
        for (a, b) in sd0.iter().zip(&sd1) {
            assert!((b - 1.2 * a).abs() <= 1e-6 * b);
        }
    }

    #[test]
    fn zero_cutout_is_identity() {
        let d = base();
        let spec = CorruptionSpec::new(CorruptionKind::Cutout, 0.0);
        assert_eq!(corrupt(&d, &spec, 1).unwrap().sequences, d.sequences);
    }

    #[test]
    fn corruption_validation() {
        let d = base();
        assert!(corrupt(&d, &CorruptionSpec::new(CorruptionKind::Cutout, 1.5), 1).is_err());
        assert!(corrupt(&d, &CorruptionSpec::new(CorruptionKind::Gaussian, -0.1), 1).is_err());
        assert!("blur".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn corrupted_data_keeps_invariants() {
        let d = base();
        for kind in [CorruptionKind::Cutout, CorruptionKind::Perlin, CorruptionKind::Gaussian] {
            let c = corrupt(&d, &CorruptionSpec::new(kind, 0.5), 2).unwrap();
            c.validate().unwrap();
            assert_eq!(c.seq_len(), d.seq_len());
            assert!(c.sequences.iter().flatten().all(|&x| x >= 0.0 && x <= HEADROOM * d.norm));
        }
    }

    #[test]
    fn perlin_vanishes_on_lattice_points_only_through_phase() {
        let mut r = rng::stream(3);
        let f = perlin_field(36, 4, &mut r);
        assert_eq!(f.len(), 36);
        assert!(f.iter().any(|x| x.abs() > 1e-6));
    }
}
