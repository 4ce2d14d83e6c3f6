//! Benchmark CLI: synthesize shifted multi-center data, train ensembles per
//! leave-one-center-out fold, evaluate with or without test-time adaptation,
//! run the component ablation grid, and export prediction heatmaps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use denem::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "denem", version, about = "Diversified-ensemble test-time adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory override.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Worker threads for fold-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Use the CPU-friendly desk-scale profile (64x64 patches, small encoder).
    #[arg(long)]
    desk_scale: Option<bool>,
    /// Method override (resnet10 | ensemble | ensemble_mi | ensemble_me |
    /// denem | tent | memo).
    #[arg(long)]
    method: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, denem::Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(dataset) = &self.dataset {
            cfg.dataset = dataset.clone();
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        if let Some(desk) = self.desk_scale {
            cfg.desk_scale = desk;
        }
        if let Some(method) = &self.method {
            cfg.method = method.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-center dataset.
    Synth(Common),
    /// Train per-fold checkpoints for the configured method.
    Train(Common),
    /// Evaluate the configured method over all folds.
    Eval(Common),
    /// Run the five-variant component grid (plus optional norm comparison).
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Add the batch-vs-group norm comparison rows.
        #[arg(long)]
        norm_compare: bool,
    },
    /// Export baseline and adapted heatmaps for one core.
    Heatmap {
        #[command(flatten)]
        common: Common,
        /// Core identifier, e.g. center_a-p003-k1.
        #[arg(long)]
        frame: String,
    },
}

fn run() -> Result<(), denem::Error> {
    match Cli::parse().command {
        Command::Synth(common) => {
            let cfg = common.resolve()?;
            let out = harness::cmd_synth(&cfg)?;
            println!(
                "synthesized {} cores into {} (manifest sha256 {})",
                out.n_cores,
                cfg.dataset.display(),
                out.manifest_sha256
            );
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let paths = harness::cmd_train(&cfg)?;
            println!("trained {} fold checkpoints under {}", paths.len(), cfg.out.display());
        }
        Command::Eval(common) => {
            let cfg = common.resolve()?;
            let out = harness::cmd_eval(&cfg)?;
            println!(
                "method {}: AUROC {:.4}±{:.4}  AUROC-All {:.4}±{:.4}  balanced-acc {:.4}±{:.4}  ECE {:.4}±{:.4}",
                cfg.method.label(),
                out.aggregate.mean.auroc,
                out.aggregate.std.auroc,
                out.aggregate.mean.auroc_all,
                out.aggregate.std.auroc_all,
                out.aggregate.mean.balanced_acc,
                out.aggregate.std.balanced_acc,
                out.aggregate.mean.ece,
                out.aggregate.std.ece,
            );
            println!("aggregate report: {}", out.csv_path.display());
        }
        Command::Ablate { common, norm_compare } => {
            let mut cfg = common.resolve()?;
            cfg.norm_compare |= norm_compare;
            let path = harness::cmd_ablate(&cfg)?;
            println!("ablation table: {}", path.display());
        }
        Command::Heatmap { common, frame } => {
            let cfg = common.resolve()?;
            let paths = harness::cmd_heatmap(&cfg, &frame)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
