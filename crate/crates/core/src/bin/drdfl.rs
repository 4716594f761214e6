use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use drdfl::data::{
    corrupt, ingest_traces, synth_generate, wasserstein_distance, CorruptionKind, CorruptionSpec, DistanceMethod,
    SynthKind, SynthParams, TraceDataset,
};
use drdfl::diffusion::{train_reference, DiffusionConfig};
use drdfl::harness::{self, ExperimentConfig, Method, RunManifest, SweepParam, OUTPUT_ROOT_ENV};
use drdfl::predictor::PredictorParams;
use drdfl::provisioning::ProvisioningParams;
use drdfl::trainer::evaluate_regret;
use drdfl::{Error, Result};

#[derive(Parser)]
#[command(name = "drdfl", version, about = "Distributionally robust decision-focused capacity provisioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate a per-request trace CSV into a workload dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        slot_seconds: f64,
        #[arg(long, default_value_t = 8)]
        context: usize,
        #[arg(long, default_value_t = 28)]
        horizon: usize,
        #[arg(long, default_value_t = 4e5)]
        norm: f64,
    },
    /// Generate a synthetic workload dataset.
    Synth {
        #[arg(long, default_value = "ar1")]
        kind: SynthKind,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        mean_scale: Option<f64>,
    },
    /// Train the reference diffusion model on a dataset.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Experiment config whose `[diffusion]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment: train every seed and evaluate on every test set.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Regret of a saved predictor on a dataset.
    Evaluate {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        id: String,
        /// Experiment config whose `[provisioning]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply a cutout, Gaussian or Perlin corruption.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: CorruptionKind,
        #[arg(long)]
        parameter: Option<f64>,
        #[arg(long, default_value_t = 4)]
        lattice: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Wasserstein distance between two datasets, in tokens.
    Distance {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "marginal_w1")]
        method: DistanceMethod,
    },
    /// Run the experiment over a grid of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        parameter: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Regret and ratio tables from run manifests.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Relative paths land under the output root when it is set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn load_data(p: &Path) -> Result<TraceDataset> {
    if !p.is_file() {
        return Err(Error::Config(format!("missing dataset {}", p.display())));
    }
    TraceDataset::load(p)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            output,
            slot_seconds,
            context,
            horizon,
            norm,
        } => {
            if !input.is_file() {
                return Err(Error::Config(format!("missing trace {}", input.display())));
            }
            let rep = ingest_traces(&input, slot_seconds, context, horizon, norm)?;
            let out = out_path(&output);
            ensure_parent(&out)?;
            rep.dataset.save(&out)?;
            println!(
                "{} sequences from {} slots ({} rows skipped) -> {}",
                rep.dataset.len(),
                rep.slots,
                rep.skipped_rows,
                out.display()
            );
        }
        Command::Synth {
            kind,
            count,
            seed,
            output,
            mean_scale,
        } => {
            let mut d = synth_generate(kind, count, &SynthParams::default(), seed)?;
            if let Some(f) = mean_scale {
                d = drdfl::data::shift_dataset(&d, drdfl::data::Shift::MeanScale(f))?;
            }
            let out = out_path(&output);
            ensure_parent(&out)?;
            d.save(&out)?;
            println!("{} sequences -> {}", d.len(), out.display());
        }
        Command::TrainDiffusion {
            data,
            output,
            config,
            seed,
        } => {
            let mut dc = match config {
                Some(p) => ExperimentConfig::load(&p)?.diffusion,
                None => DiffusionConfig::default(),
            };
            if let Some(s) = seed {
                dc.seed = s;
            }
            let d = load_data(&data)?;
            let t = train_reference(&d, &dc)?;
            let out = out_path(&output);
            ensure_parent(&out)?;
            t.model.save(&out)?;
            println!("J {:.5} -> {:.5}; model -> {}", t.initial_j, t.final_j, out.display());
        }
        Command::Train {
            config,
            method,
            seeds,
            output_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(o) = output_dir {
                cfg.output_dir = o;
            }
            let m = harness::run_experiment(&cfg)?;
            for s in &m.seeds {
                match &s.error {
                    Some(e) => println!("seed {}: failed: {e}", s.seed),
                    None => {
                        for r in &s.reports {
                            println!("seed {} {}: regret {:?}", s.seed, r.dataset_id, r.regret);
                        }
                    }
                }
            }
            println!("manifest -> {}", cfg.resolved_output().join("manifest.json").display());
        }
        Command::Evaluate {
            predictor,
            data,
            id,
            config,
        } => {
            let p = match config {
                Some(c) => ExperimentConfig::load(&c)?.provisioning,
                None => ProvisioningParams::default(),
            };
            if !predictor.is_file() {
                return Err(Error::Config(format!("missing predictor {}", predictor.display())));
            }
            let pred = PredictorParams::load(&predictor)?;
            let r = evaluate_regret(&pred, &load_data(&data)?, &p, &id)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Corrupt {
            data,
            kind,
            parameter,
            lattice,
            seed,
            output,
        } => {
            let mut spec = CorruptionSpec::default_for(kind);
            if let Some(v) = parameter {
                spec.parameter = v;
            }
            spec.lattice = lattice;
            let d = corrupt(&load_data(&data)?, &spec, seed)?;
            let out = out_path(&output);
            ensure_parent(&out)?;
            d.save(&out)?;
            println!("{} sequences -> {}", d.len(), out.display());
        }
        Command::Distance { a, b, method } => {
            let v = wasserstein_distance(&load_data(&a)?, &load_data(&b)?, method)?;
            println!("{} {v}", method.label());
        }
        Command::Sweep {
            config,
            parameter,
            values,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = harness::sweep(&cfg, parameter, &values)?;
            for (name, ys) in &out.curves {
                println!("{name}: {ys:?}");
            }
            println!("plot -> {}", out.plot.display());
        }
        Command::Report { manifests, output } => {
            let ms = manifests
                .iter()
                .map(|p| {
                    if p.is_file() {
                        RunManifest::load(p)
                    } else {
                        Err(Error::Config(format!("missing manifest {}", p.display())))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let t = harness::report_tables(&ms)?;
            let out = out_path(&output);
            harness::write_tables(&t, &out)?;
            print!("{}", t.regret.to_text(false));
            if let Some(r) = &t.ratio {
                print!("\n{}", r.to_text(true));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
