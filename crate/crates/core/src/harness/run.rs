use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method};
use crate::baselines;
use crate::data::{wasserstein_distance, DistanceMethod, TraceDataset};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::predictor::PredictorParams;
use crate::provisioning::RegretReport;
use crate::trainer::{self, evaluate_regret};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub predictor: Option<PathBuf>,
    pub reference_model: Option<PathBuf>,
    pub reports: Vec<RegretReport>,
    pub wall_clock_s: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub method: Method,
    pub config_hash: String,
    pub code_version: String,
    pub train_id: String,
    pub test_ids: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub wall_clock_s: f64,
    /// Resident-set high-water mark in KiB.
    pub peak_memory_kib: Option<u64>,
    /// Accelerator memory; never measured on CPU.
    pub accelerator_memory_kib: Option<u64>,
}

impl RunManifest {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn failed(&self) -> bool {
        self.seeds.iter().all(|s| s.error.is_some())
    }

    /// Mean regret over successful seeds for one test set.
    pub fn mean_regret(&self, dataset_id: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .seeds
            .iter()
            .flat_map(|s| s.reports.iter())
            .filter(|r| r.dataset_id == dataset_id)
            .filter_map(|r| r.regret)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Regret per seed for one test set, in seed order.
    pub fn seed_regrets(&self, dataset_id: &str) -> Vec<Option<f64>> {
        self.seeds
            .iter()
            .map(|s| s.reports.iter().find(|r| r.dataset_id == dataset_id).and_then(|r| r.regret))
            .collect()
    }
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Process resident-set high-water mark from `/proc/self/status`.
pub fn peak_memory_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

struct Trained {
    predictor: PredictorParams,
    reference: Option<DiffusionModel>,
    log: Vec<String>,
}

fn train_one(cfg: &ExperimentConfig, train: &TraceDataset, seed: u64) -> Result<Trained> {
    let base = crate::predictor::TrainConfig {
        seed,
        ..cfg.baseline_training
    };
    let p = &cfg.provisioning;
    let lines = |losses: &[f64]| {
        losses
            .iter()
            .enumerate()
            .map(|(e, l)| format!("{{\"epoch\":{},\"loss\":{l}}}", e + 1))
            .collect()
    };
    Ok(match cfg.method {
        Method::ThreeD => {
            let reference = match &cfg.reference_model {
                Some(path) => Some(DiffusionModel::load(path)?),
                None => None,
            };
            let mut log = Vec::new();
            let out = trainer::run_3d_learning(train, &cfg.outer_config(seed), reference.as_ref(), &mut |r| {
                log.push(r.to_line())
            })?;
            Trained {
                predictor: out.predictor,
                reference: Some(out.reference),
                log,
            }
        }
        Method::Dfl => {
            let (predictor, l) = trainer::run_dfl(train, &base, p)?;
            Trained { predictor, reference: None, log: lines(&l) }
        }
        Method::KlDro => {
            let (predictor, l) = baselines::train_kl_dro(train, &base, &cfg.kl_dro, p)?;
            Trained { predictor, reference: None, log: lines(&l) }
        }
        Method::WDro => {
            let (predictor, l) = baselines::train_w_dro(train, &base, &cfg.w_dro, p)?;
            Trained { predictor, reference: None, log: lines(&l) }
        }
        Method::Da => {
            let aug = baselines::AugmentConfig { seed, ..cfg.augment };
            let (predictor, l) = baselines::train_augmented(train, &base, &aug, p)?;
            Trained { predictor, reference: None, log: lines(&l) }
        }
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    hash: &str,
    out: &Path,
    train: &TraceDataset,
    tests: &[(String, TraceDataset)],
    seed: u64,
) -> Result<SeedResult> {
    let dir = out.join(format!("seed-{seed}"));
    let result_path = dir.join("result.json");
    if let Ok(bytes) = fs::read(&result_path) {
        if let Ok((h, r)) = serde_json::from_slice::<(String, SeedResult)>(&bytes) {
            if h == hash && r.error.is_none() {
                log::info!("seed {seed}: reusing {}", result_path.display());
                return Ok(r);
            }
        }
    }
    fs::create_dir_all(&dir)?;
    let start = Instant::now();
    let trained = train_one(cfg, train, seed)?;
    let pred_path = dir.join("predictor.ckpt");
    trained.predictor.save(&pred_path)?;
    let ref_path = match &trained.reference {
        Some(m) => {
            let p = dir.join("reference.ckpt");
            m.save(&p)?;
            Some(p)
        }
        None => None,
    };
    write_atomic(&dir.join("log.jsonl"), (trained.log.join("\n") + "\n").as_bytes())?;
    let mut reports = Vec::with_capacity(tests.len());
    for (id, data) in tests {
        let mut r = evaluate_regret(&trained.predictor, data, &cfg.provisioning, id)?;
        r.shift_distance = wasserstein_distance(train, data, DistanceMethod::MarginalW1).ok();
        reports.push(r);
    }
    let result = SeedResult {
        seed,
        predictor: Some(pred_path),
        reference_model: ref_path,
        reports,
        wall_clock_s: start.elapsed().as_secs_f64(),
        error: None,
    };
    let metrics: String = result
        .reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect();
    write_atomic(&dir.join("metrics.jsonl"), metrics.as_bytes())?;
    write_atomic(&result_path, &serde_json::to_vec_pretty(&(hash, &result))?)?;
    Ok(result)
}

/// Trains and evaluates every seed, writing checkpoints, metrics and the
/// manifest under the resolved output directory. Seeds whose result already
/// exists for the same configuration are reused.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = cfg.resolved_output();
    fs::create_dir_all(&out)?;
    let hash = cfg.hash();
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let train = cfg.train.load()?;
    let tests = cfg
        .test
        .iter()
        .map(|t| Ok((t.id.clone(), t.load()?)))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let r = run_seed(cfg, &hash, &out, &train, &tests, seed).unwrap_or_else(|e| {
            log::error!("seed {seed} failed: {e}");
            SeedResult {
                seed,
                predictor: None,
                reference_model: None,
                reports: Vec::new(),
                wall_clock_s: t0.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            }
        });
        seeds.push(r);
    }
    let manifest = RunManifest {
        label: cfg.label(),
        method: cfg.method,
        config_hash: hash,
        code_version: CODE_VERSION.into(),
        train_id: cfg.train.id.clone(),
        test_ids: cfg.test.iter().map(|t| t.id.clone()).collect(),
        seeds,
        wall_clock_s: start.elapsed().as_secs_f64(),
        peak_memory_kib: peak_memory_kib(),
        accelerator_memory_kib: None,
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    if manifest.failed() {
        return Err(Error::Optimization(format!(
            "all {} seeds failed; see {}",
            manifest.seeds.len(),
            out.join("manifest.json").display()
        )));
    }
    Ok(manifest)
}
