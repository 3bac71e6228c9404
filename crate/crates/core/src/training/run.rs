//! Run orchestration: datasets in, run directories out.
//!
//! ```text
//! <out>/config.json            resolved configuration
//! <out>/losses.jsonl           one JSON object per logged iteration
//! <out>/plc_<iter>.csv|png     P(l | c) snapshots
//! <out>/checkpoints/ckpt_<iter>
//! <out>/metrics.json
//! ```
//!
//! With several seeds each run lives in `<out>/seed_<s>/` and `<out>/summary.json`
//! aggregates them.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{load_checkpoint, save_checkpoint, Trainer};
use crate::config::{LatentMode, Precision, RunConfig};
use crate::data::{load_dataset, Dataset, ManualMapping};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_plc_heatmap, Metrics};
use crate::real::Real;

/// File locations inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn plc(&self, iter: usize) -> PathBuf {
        self.root.join(format!("plc_{iter}.csv"))
    }

    pub fn checkpoint(&self, iter: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("ckpt_{iter}"))
    }

    /// Most recent `plc_<iter>.csv`, if any.
    pub fn latest_plc(&self) -> Option<PathBuf> {
        latest_numbered(&self.root, "plc_", ".csv")
    }

    /// Most recent `checkpoints/ckpt_<iter>`, if any.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        latest_numbered(&self.root.join("checkpoints"), "ckpt_", "")
    }
}

fn latest_numbered(dir: &Path, prefix: &str, suffix: &str) -> Option<PathBuf> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let iter = name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse::<usize>().ok()?;
            Some((iter, p))
        })
        .max_by_key(|(i, _)| *i)
        .map(|(_, p)| p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Per-seed results with their mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<SeedOutcome>,
    pub miou_mean: Option<f64>,
    pub miou_std: Option<f64>,
    pub effective_latent_t01_mean: Option<f64>,
    pub effective_latent_t09_mean: Option<f64>,
    pub dominance_fraction_mean: Option<f64>,
    pub grouping_agreement_mean: Option<f64>,
}

impl ExperimentReport {
    fn from_runs(runs: Vec<SeedOutcome>) -> Self {
        let ok: Vec<&Metrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let mean_of = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = ok.iter().filter_map(|m| f(m)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mious: Vec<f64> = ok.iter().map(|m| m.miou).collect();
        let miou_std = mean_of(&|m| Some(m.miou)).map(|mu| {
            if mious.len() < 2 {
                0.0
            } else {
                let ss: f64 = mious.iter().map(|v| (v - mu).powi(2)).sum();
                (ss / (mious.len() - 1) as f64).sqrt()
            }
        });
        Self {
            miou_mean: mean_of(&|m| Some(m.miou)),
            miou_std,
            effective_latent_t01_mean: mean_of(&|m| m.effective_latent_t01.map(|v| v as f64)),
            effective_latent_t09_mean: mean_of(&|m| m.effective_latent_t09.map(|v| v as f64)),
            dominance_fraction_mean: mean_of(&|m| m.dominance_fraction),
            grouping_agreement_mean: mean_of(&|m| m.grouping_agreement),
            runs,
        }
    }

    pub fn failures(&self) -> Vec<&SeedOutcome> {
        self.runs.iter().filter(|r| r.error.is_some()).collect()
    }
}

/// Training data, evaluation data and the optional manual mapping named by a config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub train: Dataset,
    pub eval: Dataset,
    pub mapping: Option<ManualMapping>,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let root = cfg
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (set `data`)".into()))?;
        let root = Path::new(root);
        let train = load_dataset(root)?;
        let val = root.join("val");
        let eval = if val.join("manifest.json").is_file() {
            load_dataset(&val)?
        } else {
            warn!("no validation split under {}; evaluating on the training images", root.display());
            train.clone()
        };
        if eval.manifest.class_count() != train.manifest.class_count() {
            return Err(Error::Dimension("validation and training class counts differ".into()));
        }
        let mapping = match &cfg.mapping {
            Some(p) => Some(ManualMapping::load(Path::new(p), &train.manifest.class_names)?),
            None => None,
        };
        if cfg.latent_mode == LatentMode::Manual && mapping.is_none() {
            return Err(Error::Config("latent_mode=manual requires `mapping`".into()));
        }
        Ok(Self { train, eval, mapping })
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn log_line(iter: usize, loss: &crate::losses::LossValue) -> String {
    let mut obj = Map::new();
    obj.insert("iter".into(), Value::from(iter));
    obj.insert("total".into(), Value::from(loss.value));
    for (k, v) in &loss.components {
        obj.insert(k.clone(), Value::from(*v));
    }
    Value::Object(obj).to_string()
}

fn run_typed<F: Real>(
    cfg: &RunConfig,
    inputs: &Inputs,
    seed: u64,
    paths: &RunPaths,
    resume: Option<&Path>,
) -> Result<Metrics> {
    let manual = inputs.mapping.as_ref().map(|m| m.assignment.as_slice());
    let mut trainer = match resume {
        Some(ckpt) => {
            let c = load_checkpoint::<F>(ckpt)?;
            Trainer::from_state(cfg, &inputs.train, manual, c.state)?
        }
        None => Trainer::<F>::new(cfg, &inputs.train, manual, seed)?,
    };
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let losses_path = paths.losses();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&losses_path)
        .map_err(|e| Error::io(&losses_path, e))?;
    let mut log = BufWriter::new(file);
    let space = inputs
        .train
        .manifest
        .class_space(trainer.state.seg.latent_count(), true)
        .ok();
    let track_latent = cfg.terms.uses_latent_branch();
    while !trainer.finished() {
        let iter = trainer.state.iter;
        let loss = trainer.step()?;
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            writeln!(log, "{}", log_line(iter, &loss)).map_err(|e| Error::io(&losses_path, e))?;
        }
        let done = trainer.state.iter;
        if done % 100 == 0 {
            info!("seed {seed} iter {done}/{} loss {:.4}", cfg.max_iters, loss.value);
        }
        if track_latent && cfg.plc_every > 0 && done % cfg.plc_every == 0 && done < cfg.max_iters {
            if let Some(p) = trainer.state.projection() {
                export_plc_heatmap(&p, space.as_ref(), &paths.plc(done))?;
            }
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(&trainer.state, cfg, &paths.checkpoint(done))?;
        }
    }
    log.flush().map_err(|e| Error::io(&losses_path, e))?;
    let last = paths.checkpoint(trainer.state.iter);
    if !last.exists() {
        save_checkpoint(&trainer.state, cfg, &last)?;
    }
    let projection = if track_latent { trainer.state.projection() } else { None };
    if let Some(p) = &projection {
        export_plc_heatmap(p, space.as_ref(), &paths.plc(trainer.state.iter))?;
    }
    let metrics = evaluate(&trainer.state.seg, &inputs.eval, projection.as_ref(), trainer.state.seed)?;
    write_json(&paths.metrics(), &metrics)?;
    Ok(metrics)
}

/// Trains and evaluates one seed into `dir`, optionally continuing from a checkpoint.
pub fn run_seed(
    cfg: &RunConfig,
    inputs: &Inputs,
    seed: u64,
    dir: &Path,
    resume: Option<&Path>,
) -> Result<Metrics> {
    let paths = RunPaths::new(dir);
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, inputs, seed, &paths, resume),
        Precision::F64 => run_typed::<f64>(cfg, inputs, seed, &paths, resume),
    }
}

/// Runs `cfg.seeds` independent seeds (`seed`, `seed + 1`, ...) under `out`.
///
/// A failing seed does not stop the others; its error is recorded in the report.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&RunPaths::new(out).config())?;
    let inputs = Inputs::load(cfg)?;
    let mut runs = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let seed = cfg.seed.wrapping_add(s as u64);
        let dir = if cfg.seeds == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seed_{seed}"))
        };
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = seed;
        seed_cfg.seeds = 1;
        if cfg.seeds > 1 {
            seed_cfg.save(&RunPaths::new(&dir).config())?;
        }
        let outcome = match run_seed(&seed_cfg, &inputs, seed, &dir, None) {
            Ok(m) => SeedOutcome {
                seed,
                dir,
                metrics: Some(m),
                error: None,
            },
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                SeedOutcome {
                    seed,
                    dir,
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        };
        runs.push(outcome);
    }
    let report = ExperimentReport::from_runs(runs);
    if cfg.seeds > 1 {
        write_json(&out.join("summary.json"), &report)?;
    }
    Ok(report)
}

fn evaluate_typed<F: Real>(path: &Path, data: Option<&Path>) -> Result<Metrics> {
    let ckpt = load_checkpoint::<F>(path)?;
    let eval = match data {
        Some(root) => load_dataset(root)?,
        None => Inputs::load(&ckpt.config)?.eval,
    };
    let projection = if ckpt.config.terms.uses_latent_branch() {
        ckpt.state.projection()
    } else {
        None
    };
    evaluate(&ckpt.state.seg, &eval, projection.as_ref(), ckpt.state.seed)
}

/// Evaluates a checkpoint on `data`, or on the evaluation split named by its config.
///
/// The model runs in the precision it was trained in, so the result matches the
/// run's own `metrics.json`.
pub fn evaluate_checkpoint(path: &Path, data: Option<&Path>) -> Result<Metrics> {
    match load_checkpoint::<f64>(path)?.config.precision {
        Precision::F32 => evaluate_typed::<f32>(path, data),
        Precision::F64 => evaluate_typed::<f64>(path, data),
    }
}
