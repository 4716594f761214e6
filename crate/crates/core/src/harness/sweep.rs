use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::plot::line_chart;
use super::run::{run_experiment, write_atomic, RunManifest};
use crate::diffusion::NetArch;
use crate::error::{Error, Result};
use crate::imax::Budget;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// The free budget parameter: `ε` in fixed mode, the margin when calibrated.
    Epsilon,
    DiffusionWidth,
    TailLen,
}

impl SweepParam {
    pub fn label(&self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::DiffusionWidth => "diffusion_width",
            SweepParam::TailLen => "tail_len",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepParam::Epsilon),
            "diffusion_width" | "width" => Ok(SweepParam::DiffusionWidth),
            "tail_len" => Ok(SweepParam::TailLen),
            other => Err(Error::Argument(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

fn as_count(param: SweepParam, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Argument(format!("{} must be a positive integer, got {v}", param.label())))
    }
}

/// `cfg` with `param` set to `value`, writing under its own subdirectory.
pub fn apply(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParam::Epsilon => {
            c.imax.dual.budget = match c.imax.dual.budget {
                Budget::Fixed { .. } => Budget::Fixed { epsilon: value },
                Budget::Calibrated { .. } => Budget::Calibrated { margin: value },
            }
        }
        SweepParam::DiffusionWidth => {
            let w = as_count(param, value)?;
            c.diffusion.arch = match c.diffusion.arch {
                NetArch::Mlp { blocks, temb, .. } => NetArch::Mlp { hidden: w, blocks, temb },
                NetArch::UNet { levels, temb, .. } => NetArch::UNet { levels, width: w, temb },
            }
        }
        SweepParam::TailLen => c.imax.ppo.tail_len = as_count(param, value)?,
    }
    c.output_dir = cfg.output_dir.join(format!("{}-{value}", param.label()));
    c.label = format!("{} {}={value}", cfg.label(), param.label());
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: f64,
    pub manifest: Option<RunManifest>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    /// Mean regret per test dataset plus an `average` curve, one entry per
    /// point.
    pub curves: Vec<(String, Vec<Option<f64>>)>,
    pub plot: PathBuf,
}

/// Runs the experiment once per value and plots regret against the value.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<SweepOutcome> {
    if values.len() < 2 {
        return Err(Error::Argument("a sweep needs at least two values".into()));
    }
    let configs = values
        .iter()
        .map(|&v| apply(cfg, param, v))
        .collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    let points: Vec<SweepPoint> = values
        .iter()
        .zip(&configs)
        .map(|(&value, c)| match run_experiment(c) {
            Ok(m) => SweepPoint {
                value,
                manifest: Some(m),
                error: None,
            },
            Err(e) => {
                log::error!("sweep point {}={value} failed: {e}", param.label());
                SweepPoint {
                    value,
                    manifest: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let mut curves: Vec<(String, Vec<Option<f64>>)> = cfg
        .test
        .iter()
        .map(|t| {
            let ys = points
                .iter()
                .map(|p| p.manifest.as_ref().and_then(|m| m.mean_regret(&t.id)))
                .collect();
            (t.id.clone(), ys)
        })
        .collect();
    let average: Vec<Option<f64>> = (0..points.len())
        .map(|i| {
            let v: Vec<f64> = curves.iter().filter_map(|(_, ys)| ys[i]).collect();
            (v.len() == curves.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    curves.push(("average".into(), average));
    let notes: Vec<(usize, String)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.error.is_some())
        .map(|(i, _)| (i, "failed".to_string()))
        .collect();
    let xs: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let svg = line_chart(
        &format!("{}: regret vs {}", cfg.label(), param.label()),
        param.label(),
        "regret",
        &xs,
        &curves,
        &notes,
    );
    let plot = cfg.resolved_output().join(format!("sweep-{}.svg", param.label()));
    write_atomic(&plot, svg.as_bytes())?;
    Ok(SweepOutcome {
        param,
        points,
        curves,
        plot,
    })
}
