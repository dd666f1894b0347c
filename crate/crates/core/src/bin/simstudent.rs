use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use simstudent::config::ExperimentConfig;
use simstudent::dataset::Split;
use simstudent::experiment;
use simstudent::trainer::Preset;

#[derive(Parser)]
#[command(name = "simstudent", version, about = "Self-similarity student training on partially labeled slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training preset.
    #[arg(long)]
    preset: Option<Preset>,
    /// Output root.
    #[arg(long, default_value = "simstudent-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its noise statistics.
    Generate(Common),
    /// Train the configured preset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest checkpoint of the run.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on clean labels.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: the run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-patch embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Summarise all runs under the output root.
    Report(Common),
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, val, test)")),
    }
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(p) = c.preset {
        cfg.train.preset = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> anyhow::Result<()> {
    let n = match std::env::var("SIMSTUDENT_THREADS") {
        Ok(v) => v.trim().parse::<usize>().context("SIMSTUDENT_THREADS must be a non-negative integer")?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            let stats = experiment::cmd_generate(&cfg, &c.out)?;
            for (name, s) in [("train", &stats.train), ("val", &stats.val), ("test", &stats.test)] {
                let noise = s.noisiness.map_or("n/a".into(), |n| format!("{:.2}%", 100.0 * n));
                println!("{name}: {} benign, {} cancer, noisiness {noise}", s.benign, s.cancer);
            }
        }
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let out = experiment::cmd_train(&cfg, &common.out, resume)?;
            for r in &out.history {
                let val = r.val_dsc.map_or("-".into(), |d| format!("{d:.2}"));
                println!("epoch {:>3}  loss {:.4}  val DSC {val}", r.epoch, r.loss_total);
            }
            if let (Some(e), Some(d)) = (out.best_epoch, out.best_val_dsc) {
                println!("best epoch {e} (val DSC {d:.2})");
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let r = experiment::cmd_eval(&cfg, &common.out, checkpoint.as_deref())?;
            println!("DSC {:.2}  FROC {:.4}  ({} slides, {} lesions)", r.dsc, r.froc_score, r.slides, r.lesions);
        }
        Command::ExportEmbeddings { common, checkpoint, split } => {
            let cfg = load(&common)?;
            let path = experiment::cmd_export_embeddings(&cfg, &common.out, checkpoint.as_deref(), split)?;
            println!("{}", path.display());
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            experiment::cmd_report(&cfg, &c.out)?;
            print!("{}", std::fs::read_to_string(c.out.join(experiment::SUMMARY_MD))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
