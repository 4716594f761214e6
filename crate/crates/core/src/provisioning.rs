//! Capacity-provisioning decision model for LLM inference serving.
//!
//! Per slot `i` the operator picks a capacity `a_i` (tokens/slot) before the
//! workload `c_i` is observed. Serving utility is `s(min(a,c)/c)·c` with
//! `s(X) = B·ln(A·X + 1)`, energy cost is
//! `ω·(P_act·min(a,c) + P_idle·(a−c)⁺)`, and the sequence reward is
//! `R = Σ_i [utility − γ·cost]`. Training code minimizes `f = −R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProvisioningParams {
    /// Utility curvature `A`.
    pub a: f64,
    /// Utility scale `B` (utility per token).
    pub b: f64,
    /// Cost weight `γ` (utility per kWh).
    pub gamma: f64,
    /// Power usage effectiveness `ω`.
    pub omega: f64,
    /// Active energy per token (kWh).
    pub p_act: f64,
    /// Idle energy per provisioned-but-unused token (kWh).
    pub p_idle: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub n_slots: usize,
}

impl Default for ProvisioningParams {
    fn default() -> Self {
        Self {
            a: 20.0,
            b: 0.2,
            gamma: 0.34,
            omega: 1.1,
            p_act: 4e-6,
            p_idle: 1.4e-6,
            a_min: 0.0,
            a_max: 4e5,
            n_slots: 28,
        }
    }
}

impl ProvisioningParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.b > 0.0
            && self.gamma >= 0.0
            && self.omega >= 1.0
            && self.p_idle >= 0.0
            && self.p_idle <= self.p_act
            && self.a_min >= 0.0
            && self.a_min < self.a_max
            && self.n_slots >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid provisioning parameters: {self:?}")))
        }
    }

    /// `s(X) = B·ln(A·X + 1)`.
    pub fn service_value(&self, x: f64) -> f64 {
        self.b * (self.a * x + 1.0).ln()
    }

    /// Ratio `a°/ĉ` of the interior stationary point on the under-provisioned
    /// branch; `+∞` when energy is free.
    pub fn stationary_ratio(&self) -> f64 {
        let price = self.gamma * self.omega * self.p_act;
        if price <= 0.0 {
            f64::INFINITY
        } else {
            (self.b * self.a / price - 1.0) / self.a
        }
    }

    /// Slope `a ↦ a*(ĉ)` on the unclipped region: `min(a°/ĉ, 1)`.
    pub fn decision_gain(&self) -> f64 {
        self.stationary_ratio().min(1.0)
    }
}

/// Provisioned capacities for one sequence of slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub capacities: Vec<f64>,
}

impl DecisionVector {
    pub fn new(capacities: Vec<f64>, p: &ProvisioningParams) -> Result<Self> {
        if let Some(a) = capacities
            .iter()
            .find(|&&a| !(a >= p.a_min && a <= p.a_max))
        {
            return Err(Error::Domain(format!(
                "capacity {a} outside [{}, {}]",
                p.a_min, p.a_max
            )));
        }
        Ok(Self { capacities })
    }

    pub fn len(&self) -> usize {
        self.capacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capacities.is_empty()
    }
}

fn check_non_negative(a: f64, c: f64) -> Result<()> {
    if a >= 0.0 && c >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "capacity and workload must be non-negative (a={a}, c={c})"
        )))
    }
}

pub fn utility(a: f64, c: f64, p: &ProvisioningParams) -> Result<f64> {
    check_non_negative(a, c)?;
    Ok(utility_unchecked(a, c, p))
}

fn utility_unchecked(a: f64, c: f64, p: &ProvisioningParams) -> f64 {
    if c <= 0.0 {
        0.0
    } else if a >= c {
        p.service_value(1.0) * c
    } else {
        p.service_value(a / c) * c
    }
}

pub fn cost(a: f64, c: f64, p: &ProvisioningParams) -> Result<f64> {
    check_non_negative(a, c)?;
    Ok(cost_unchecked(a, c, p))
}

fn cost_unchecked(a: f64, c: f64, p: &ProvisioningParams) -> f64 {
    p.omega * (p.p_act * a.min(c) + p.p_idle * (a - c).max(0.0))
}

/// Per-slot reward `utility(a,c) − γ·cost(a,c)` for non-negative inputs.
pub fn slot_reward(a: f64, c: f64, p: &ProvisioningParams) -> f64 {
    utility_unchecked(a, c, p) - p.gamma * cost_unchecked(a, c, p)
}

/// Slot reward with its partial derivatives `(r, ∂r/∂a, ∂r/∂c)`.
///
/// At `a = c` the one-sided derivatives differ; the over-provisioned branch
/// is used. Inputs are clamped at zero, with zero partials on the clamped
/// side.
pub fn slot_reward_partials(a: f64, c: f64, p: &ProvisioningParams) -> (f64, f64, f64) {
    let (a_neg, c_neg) = (a < 0.0, c < 0.0);
    let (a, c) = (a.max(0.0), c.max(0.0));
    let (r, mut da, mut dc) = if c <= 0.0 {
        // Zero workload: utility is identically zero, only idle cost remains.
        let r = -p.gamma * p.omega * p.p_idle * a;
        (r, -p.gamma * p.omega * p.p_idle, 0.0)
    } else if a >= c {
        let r = p.service_value(1.0) * c - p.gamma * p.omega * (p.p_act * c + p.p_idle * (a - c));
        let da = -p.gamma * p.omega * p.p_idle;
        let dc = p.service_value(1.0) - p.gamma * p.omega * (p.p_act - p.p_idle);
        (r, da, dc)
    } else {
        let x = p.a * a / c + 1.0;
        let r = p.b * x.ln() * c - p.gamma * p.omega * p.p_act * a;
        let da = p.b * p.a * c / (p.a * a + c) - p.gamma * p.omega * p.p_act;
        let dc = p.b * x.ln() - p.b * p.a * a / (p.a * a + c);
        (r, da, dc)
    };
    if a_neg {
        da = 0.0;
    }
    if c_neg {
        dc = 0.0;
    }
    (r, da, dc)
}

/// `R(a_{1:N}, c_{1:N})`.
pub fn net_reward(a: &DecisionVector, c: &[f64], p: &ProvisioningParams) -> Result<f64> {
    net_reward_slices(&a.capacities, c, p)
}

pub fn net_reward_slices(a: &[f64], c: &[f64], p: &ProvisioningParams) -> Result<f64> {
    if a.len() != c.len() {
        return Err(Error::Shape(format!(
            "decision length {} vs workload length {}",
            a.len(),
            c.len()
        )));
    }
    let mut total = 0.0;
    for (&ai, &ci) in a.iter().zip(c) {
        check_non_negative(ai, ci)?;
        total += slot_reward(ai, ci, p);
    }
    Ok(total)
}

/// Reward-maximizing capacity for a single predicted workload.
pub fn optimal_capacity(c_hat: f64, p: &ProvisioningParams) -> f64 {
    if c_hat <= 0.0 {
        return p.a_min;
    }
    let stationary = c_hat * p.stationary_ratio();
    stationary.min(c_hat).clamp(p.a_min, p.a_max)
}

/// Per-slot argmax of the reward given predicted workloads.
pub fn optimal_decision(c_hat: &[f64], p: &ProvisioningParams) -> DecisionVector {
    DecisionVector {
        capacities: c_hat.iter().map(|&c| optimal_capacity(c, p)).collect(),
    }
}

/// Best achievable reward with the true workload known in advance.
pub fn oracle_reward(c: &[f64], p: &ProvisioningParams) -> f64 {
    c.iter()
        .map(|&ci| slot_reward(optimal_capacity(ci, p), ci.max(0.0), p))
        .sum()
}

/// Softplus-smoothed clip of `x` to `[lo, hi]` with temperature `tau`,
/// returning `(value, derivative)`.
pub fn smooth_clip(x: f64, lo: f64, hi: f64, tau: f64) -> (f64, f64) {
    fn softplus(z: f64) -> (f64, f64) {
        // (log(1+e^z), sigmoid(z)) without overflow
        if z > 30.0 {
            (z, 1.0)
        } else if z < -30.0 {
            (z.exp(), z.exp())
        } else {
            ((1.0 + z.exp()).ln(), 1.0 / (1.0 + (-z).exp()))
        }
    }
    let (s1, d1) = softplus((x - lo) / tau);
    let (s2, d2) = softplus((x - hi) / tau);
    (lo + tau * (s1 - s2), d1 - d2)
}

/// Normalized regret of an algorithm against the oracle on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub dataset_id: String,
    pub mean_alg_reward: f64,
    pub mean_oracle_reward: f64,
    /// `None` when the mean oracle reward is not positive.
    pub regret: Option<f64>,
    /// Wasserstein distance to the training set in token units, when measured.
    pub shift_distance: Option<f64>,
}

pub fn regret(alg_rewards: &[f64], oracle_rewards: &[f64]) -> Result<RegretReport> {
    if alg_rewards.len() != oracle_rewards.len() {
        return Err(Error::Shape(format!(
            "{} algorithm rewards vs {} oracle rewards",
            alg_rewards.len(),
            oracle_rewards.len()
        )));
    }
    if alg_rewards.is_empty() {
        return Err(Error::Argument("regret needs at least one sequence".into()));
    }
    let n = alg_rewards.len() as f64;
    let mean_alg = alg_rewards.iter().sum::<f64>() / n;
    let mean_oracle = oracle_rewards.iter().sum::<f64>() / n;
    let regret = if mean_oracle > 0.0 {
        Some((mean_oracle - mean_alg) / mean_oracle)
    } else {
        log::warn!("regret undefined: mean oracle reward {mean_oracle} is not positive");
        None
    };
    Ok(RegretReport {
        dataset_id: String::new(),
        mean_alg_reward: mean_alg,
        mean_oracle_reward: mean_oracle,
        regret,
        shift_distance: None,
    })
}
