//! `latentseg`: dataset generation, training, evaluation, ablations and plots.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latentseg_core::data::{generate_synthetic, ManualMapping, SyntheticSpec};
use latentseg_core::eval::export_plc_heatmap;
use latentseg_core::training::{
    ablation_matrix, evaluate_checkpoint, load_checkpoint, run_experiment, run_seed, Inputs,
    RunPaths, Suite, Trainer,
};
use latentseg_core::{LatentProjection, RunConfig};

#[derive(Parser)]
#[command(name = "latentseg", version, about = "Semi-supervised segmentation with learned latent classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known supercategories.
    GenData(GenArgs),
    /// Train one or more seeds and evaluate them.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run an ablation suite.
    Ablate(AblateArgs),
    /// Render diagnostics of a finished run.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    /// Number of training images.
    #[arg(long, default_value_t = 800)]
    n: usize,
    /// Number of validation images; defaults to a quarter of `--n`.
    #[arg(long)]
    val_n: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "LATENTSEG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Run configuration flags. Precedence, lowest first: defaults, `--config`, `--set`, named flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set terms.adv_unlabeled=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Supercategory CSV for `--latent-mode manual`.
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    lambda_unlabeled: Option<f64>,
    #[arg(long)]
    max_latent: Option<usize>,
    /// Permit more latent classes than semantic classes.
    #[arg(long)]
    allow_latent_overflow: bool,
    #[arg(long, value_enum)]
    latent_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    consistency: Option<VariantArg>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, env = "LATENTSEG_SEED")]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Learned,
    Manual,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    CrossEntropy,
    SymmetricKl,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg = cfg.with_override(k.trim(), v.trim())?;
        }
        let quoted = |s: &str| format!("\"{s}\"");
        let mut named: Vec<(&str, String)> = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                named.push((k, v));
            }
        };
        push("labeled_fraction", self.fraction.map(|v| v.to_string()));
        push("max_iters", self.iters.map(|v| v.to_string()));
        push("warmup_iters", self.warmup.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr0", self.lr.map(|v| v.to_string()));
        push("lambda_adv", self.lambda_adv.map(|v| v.to_string()));
        push("lambda_unlabeled", self.lambda_unlabeled.map(|v| v.to_string()));
        push("max_latent", self.max_latent.map(|v| v.to_string()));
        push("crop_size", self.crop.map(|v| v.to_string()));
        push("seeds", self.seeds.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push(
            "latent_mode",
            self.latent_mode.map(|m| {
                quoted(match m {
                    ModeArg::Learned => "learned",
                    ModeArg::Manual => "manual",
                    ModeArg::Identity => "identity",
                })
            }),
        );
        push(
            "consistency_variant",
            self.consistency.map(|v| {
                quoted(match v {
                    VariantArg::CrossEntropy => "cross_entropy",
                    VariantArg::SymmetricKl => "symmetric_kl",
                })
            }),
        );
        push(
            "precision",
            self.precision.map(|p| {
                quoted(match p {
                    PrecisionArg::F32 => "f32",
                    PrecisionArg::F64 => "f64",
                })
            }),
        );
        if self.allow_latent_overflow {
            push("allow_latent_overflow", Some("true".into()));
        }
        if self.no_augment {
            push("augment", Some("false".into()));
        }
        for (k, v) in named {
            cfg = cfg.with_override(k, &v)?;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.to_string_lossy().into_owned());
        }
        if let Some(m) = &self.mapping {
            cfg.mapping = Some(m.to_string_lossy().into_owned());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Validate configuration and data, then stop without optimizing.
    #[arg(long)]
    dry_run: bool,
    /// Continue a run from `checkpoints/ckpt_<iter>`; its saved config is used.
    #[arg(long, conflicts_with = "dry_run")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; defaults to the newest checkpoint of `--run`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    /// Dataset to evaluate on; defaults to the run's validation split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_suite)]
    suite: Suite,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: latentseg_core::Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotWhat {
    /// Heatmap of P(l | c).
    Plc,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    what: PlotWhat,
    /// Output PNG; defaults to `<run>/plc_heatmap.png`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_data(a: &GenArgs) -> anyhow::Result<()> {
    let mut spec = SyntheticSpec::grouped(a.classes, a.groups);
    spec.image_size = a.size;
    if let Some(noise) = a.noise {
        spec.noise_std = noise;
    }
    let train = generate_synthetic(&spec, a.n, a.seed)?;
    train.save(&a.out)?;
    let val_n = a.val_n.unwrap_or((a.n / 4).max(1));
    if val_n > 0 {
        let val = generate_synthetic(&spec, val_n, a.seed.wrapping_add(1_000_003))?;
        val.save(&a.out.join("val"))?;
    }
    ManualMapping::from_assignment(spec.groups.clone())
        .write_csv(&a.out.join("supercategories.csv"), &spec.class_names())?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "train": a.n, "val": val_n, "classes": a.classes, "groups": a.groups})
    );
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<bool> {
    if let Some(ckpt) = &a.resume {
        let saved = load_checkpoint::<f64>(ckpt)?;
        let cfg = saved.config;
        let inputs = Inputs::load(&cfg)?;
        let m = run_seed(&cfg, &inputs, saved.state.seed, &a.out, Some(ckpt))?;
        println!("{}", serde_json::to_string(&m)?);
        return Ok(true);
    }
    let cfg = a.cfg.resolve()?;
    if cfg.data.is_none() {
        bail!("no dataset given: pass --data or set `data` in the config");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    cfg.save(&RunPaths::new(&a.out).config())?;
    if a.dry_run {
        let inputs = Inputs::load(&cfg)?;
        let manual = inputs.mapping.as_ref().map(|m| m.assignment.as_slice());
        let trainer = Trainer::<f32>::new(&cfg, &inputs.train, manual, cfg.seed)?;
        let (lab, unl) = trainer.peek_batches()?;
        println!(
            "{}",
            serde_json::json!({
                "dry_run": true,
                "train_images": inputs.train.len(),
                "eval_images": inputs.eval.len(),
                "labeled": trainer.state.labeled.ids.len(),
                "unlabeled": trainer.state.unlabeled.ids.len(),
                "latent_classes": trainer.state.seg.latent_count(),
                "batch": lab.images.dim().0,
                "unlabeled_batch": unl.map(|b| b.len()),
            })
        );
        return Ok(true);
    }
    let report = run_experiment(&cfg, &a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "miou": report.runs.iter().map(|r| r.metrics.as_ref().map(|m| m.miou)).collect::<Vec<_>>(),
            "miou_mean": report.miou_mean,
            "miou_std": report.miou_std,
        })
    );
    for f in report.failures() {
        eprintln!("seed {} failed: {}", f.seed, f.error.as_deref().unwrap_or(""));
    }
    Ok(report.failures().is_empty())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = match (&a.checkpoint, &a.run) {
        (Some(c), _) => c.clone(),
        (None, Some(run)) => RunPaths::new(run)
            .latest_checkpoint()
            .ok_or_else(|| anyhow!("no checkpoint under {}", run.display()))?,
        (None, None) => bail!("pass --checkpoint or --run"),
    };
    let metrics = evaluate_checkpoint(&ckpt, a.data.as_deref())?;
    let text = serde_json::to_string_pretty(&metrics)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> anyhow::Result<bool> {
    let cfg = a.cfg.resolve()?;
    let rows = ablation_matrix(&cfg, a.suite, &a.out)?;
    for r in &rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(rows.iter().all(|r| r.failures == 0))
}

fn plot(a: &PlotArgs) -> anyhow::Result<()> {
    match a.what {
        PlotWhat::Plc => {
            let src = RunPaths::new(&a.run)
                .latest_plc()
                .ok_or_else(|| anyhow!("no plc_<iter>.csv under {}", a.run.display()))?;
            let file = std::fs::File::open(&src)?;
            let (p, _) = LatentProjection::read_csv(file)?;
            let png = a.out.clone().unwrap_or_else(|| a.run.join("plc_heatmap.png"));
            let written = export_plc_heatmap(&p, None, &png.with_extension("csv"))?;
            if written != png {
                std::fs::rename(&written, &png)?;
            }
            println!("{}", png.display());
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(core) = e.downcast_ref::<latentseg_core::Error>() {
        return core.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let msg = serde_json::json!({"error": error_kind(&e), "message": format!("{e:#}")});
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}

