//! Subcommand implementations behind the `simstudent` binary.
//!
//! Everything lives under one output root:
//!
//! ```text
//! <out>/config.json                 the effective config of `generate`
//! <out>/dataset/                    manifest.json, patches.sspx, stats.json
//! <out>/runs/<preset>/              history.jsonl, best.ssck, final.ssck, checkpoints/
//! <out>/runs/<preset>/eval/         report.json, froc.csv, masks/slide-NNNN.pgm
//! <out>/runs/<preset>/embeddings.csv
//! <out>/report.json, report.md      cross-run summary
//! ```
//!
//! Run outputs are write-once: re-running a step into a populated directory
//! is refused (except `train --resume`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Split, SplitStats};
use crate::eval::{self, MetricsReport};
use crate::slidegen::{Label, PatchRecord};
use crate::trainer::{self, RunOptions, TrainOutcome, FINAL_CHECKPOINT, HISTORY_FILE};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_DIR: &str = "eval";
pub const REPORT_FILE: &str = "report.json";
pub const FROC_FILE: &str = "froc.csv";
pub const MASK_DIR: &str = "masks";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SUMMARY_JSON: &str = "report.json";
pub const SUMMARY_MD: &str = "report.md";

pub fn dataset_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    out.join(&cfg.eval.dataset_dir)
}

pub fn run_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    out.join(&cfg.eval.runs_dir).join(cfg.train.preset.name())
}

fn refuse_existing(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::input(format!("{} already exists; choose a fresh output directory", path.display())));
    }
    Ok(())
}

/// Loads the dataset and checks it was generated from this config.
pub fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let dir = dataset_dir(cfg, out);
    if !dir.join(crate::dataset::MANIFEST_FILE).exists() {
        return Err(Error::input(format!("no dataset at {}; run `generate` first", dir.display())));
    }
    let ds = Dataset::load(&dir)?;
    if ds.config != cfg.dataset || ds.seed != cfg.seed {
        return Err(Error::config(format!(
            "dataset at {} was generated from a different dataset block or seed",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Generates the dataset and writes it with its noise statistics.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<SplitStats> {
    cfg.validate()?;
    let dir = dataset_dir(cfg, out);
    refuse_existing(&dir.join(crate::dataset::MANIFEST_FILE))?;
    let ds = Dataset::generate(&cfg.dataset, cfg.seed)?;
    ds.save(&dir)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(ds.stats())
}

/// Trains the configured preset. With `resume`, continues from the newest
/// numbered checkpoint of the run directory.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(cfg, out)?;
    let dir = run_dir(cfg, out);
    if !resume {
        refuse_existing(&dir.join(HISTORY_FILE))?;
    }
    trainer::train(&ds, &cfg.train_config(), &RunOptions { out_dir: Some(dir), resume })
}

fn checkpoint_path(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| run_dir(cfg, out).join(FINAL_CHECKPOINT), Path::to_path_buf)
}

/// Scores a checkpoint on the clean labels of the configured split and writes
/// the report, the FROC curve and per-slide masks.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg, out)?;
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, out, checkpoint))?;
    let split = cfg.eval.split;
    let truth = ds.truth(split);
    if truth.is_empty() || truth.iter().all(|s| s.lesions.is_empty()) {
        return Err(Error::input(format!("the {split:?} split has no clean lesion labels to score against")));
    }
    let patches: Vec<&PatchRecord> = ds.indices(split).into_iter().map(|i| &ds.patches[i]).collect();
    let (probs, _) = trainer::predict_patches(&ckpt.student, &patches)?;
    let cancer: Vec<f64> = probs.iter().map(|q| q[1]).collect();
    let owned: Vec<PatchRecord> = patches.iter().map(|p| PatchRecord { pixels: Vec::new(), ..(*p).clone() }).collect();
    let ev = eval::evaluate_at(&truth, &owned, &cancer, cfg.eval.decision_threshold)?;

    let dir = run_dir(cfg, out).join(EVAL_DIR);
    refuse_existing(&dir.join(REPORT_FILE))?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&ev.report)?)?;
    eval::write_froc_csv(&dir.join(FROC_FILE), &ev.report.curve)?;
    if cfg.eval.write_masks {
        fs::create_dir_all(dir.join(MASK_DIR))?;
        for m in &ev.masks {
            eval::write_mask_pgm(&dir.join(MASK_DIR).join(format!("slide-{:04}.pgm", m.slide_id)), m)?;
        }
    }
    Ok(ev.report)
}

/// Writes eval-mode embeddings of every patch of `split`, in patch-id order:
/// `patch_id,clean_label,e0,...,e63`.
pub fn cmd_export_embeddings(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    split: Split,
) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = load_dataset(cfg, out)?;
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, out, checkpoint))?;
    let patches: Vec<&PatchRecord> = ds.indices(split).into_iter().map(|i| &ds.patches[i]).collect();
    let path = run_dir(cfg, out).join(EMBEDDINGS_FILE);
    refuse_existing(&path)?;
    fs::create_dir_all(run_dir(cfg, out))?;
    write_embeddings(&path, &ckpt, &patches)?;
    Ok(path)
}

pub fn write_embeddings(path: &Path, ckpt: &Checkpoint, patches: &[&PatchRecord]) -> Result<()> {
    let (_, emb) = trainer::predict_patches(&ckpt.student, patches)?;
    let mut w = csv::Writer::from_path(path)?;
    let dim = emb.first().map_or(crate::backbone::EMBED_DIM, Vec::len);
    let mut header = vec!["patch_id".to_string(), "clean_label".to_string()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for (p, z) in patches.iter().zip(&emb) {
        let mut row = vec![p.patch_id.to_string(), (p.clean_label == Label::Cancer).then_some("1").unwrap_or("0").into()];
        row.extend(z.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the cross-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub dsc: Option<f64>,
    pub froc_score: Option<f64>,
}

/// Collects every run under the runs directory into `report.json` and a
/// markdown table `report.md` in the output root.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    let runs = out.join(&cfg.eval.runs_dir);
    if !runs.is_dir() {
        return Err(Error::input(format!("no runs under {}", runs.display())));
    }
    let mut names: Vec<String> = fs::read_dir(&runs)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(HISTORY_FILE).exists())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    names.sort();
    let mut rows = Vec::new();
    for name in names {
        let dir = runs.join(&name);
        let history = trainer::read_history(&dir.join(HISTORY_FILE))?;
        let best = history
            .iter()
            .filter_map(|r| r.val_dsc.map(|d| (r.epoch, d)))
            .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        let metrics: Option<MetricsReport> = match fs::read(dir.join(EVAL_DIR).join(REPORT_FILE)) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        rows.push(RunSummary {
            run: name,
            epochs: history.len(),
            best_epoch: best.map(|b| b.0),
            best_val_dsc: best.map(|b| b.1),
            dsc: metrics.as_ref().map(|m| m.dsc),
            froc_score: metrics.as_ref().map(|m| m.froc_score),
        });
    }
    fs::write(out.join(SUMMARY_JSON), serde_json::to_string_pretty(&rows)?)?;
    fs::write(out.join(SUMMARY_MD), markdown(&rows))?;
    Ok(rows)
}

fn markdown(rows: &[RunSummary]) -> String {
    let f = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.2}", x * scale));
    let mut s = String::from("| run | epochs | best epoch | val DSC | test DSC | FROC |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.epochs,
            r.best_epoch.map_or("-".into(), |e| e.to_string()),
            f(r.best_val_dsc, 1.0),
            f(r.dsc, 1.0),
            f(r.froc_score, 100.0),
        ));
    }
    s
}
