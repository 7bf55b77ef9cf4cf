use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use vmra_harness::bench::{scan_bench, write_bench, BenchConfig};
use vmra_harness::dataset::{Dataset, Split};
use vmra_harness::eval::{asym_inspect, evaluate_split, predictions_path, report, write_predictions, write_report, Checkpoint};
use vmra_harness::synth::gen_synthetic;
use vmra_harness::train::train;
use vmra_harness::Config;

#[derive(Parser)]
#[command(name = "vmra", version, about = "Longitudinal multi-view risk model: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write the best checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
        /// Prediction dump; defaults to `<report stem>.predictions.csv`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Time the sequential and parallel selective scans.
    ScanBench {
        #[arg(long, default_value_t = 4096)]
        lmax: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state_dim: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Dump per-exam asymmetry peaks and persistence.
    AsymInspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_ref())?;
            let plans = gen_synthetic(&cfg.data, &out)?;
            info!("wrote {} subjects to {}", plans.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_ref())?;
            let data = Dataset::load(&data).context("loading dataset")?;
            fs::create_dir_all(&out)?;
            let result = train(&cfg, &data, Some(&out))?;
            info!("best epoch {} (val auc {:?})", result.meta.epoch, result.meta.val_auc_mean);
        }
        Command::Eval { ckpt, data, split, report: out, predictions } => {
            let ckpt = Checkpoint::load(&ckpt).context("loading checkpoint")?;
            let data = Dataset::load(&data).context("loading dataset")?;
            let eval = evaluate_split(&ckpt, &data, split)?;
            let rows = report(&ckpt, &eval)?;
            write_report(&out, &rows)?;
            write_predictions(&predictions.unwrap_or_else(|| predictions_path(&out)), &eval)?;
            info!("evaluated {} subjects", eval.subjects.len());
        }
        Command::ScanBench { lmax, channels, state_dim, threads, repeats, csv } => {
            let rows = scan_bench(&BenchConfig { lmax, channels, state_dim, threads, repeats, ..BenchConfig::default() })?;
            for r in &rows {
                info!("L={} threads={} seq {:.2} ms par {:.2} ms speedup {:.2}", r.len, r.threads, r.seq_ms, r.par_ms, r.speedup);
            }
            write_bench(&csv, &rows)?;
        }
        Command::AsymInspect { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt).context("loading checkpoint")?;
            let data = Dataset::load(&data).context("loading dataset")?;
            let n = asym_inspect(&ckpt, &data, &out)?;
            info!("wrote {n} records");
        }
    }
    Ok(())
}
