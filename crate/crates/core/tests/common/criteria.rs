//! Checks shared by the focused test files and the acceptance report.

use std::path::Path;

use latentseg_core::config::{ConsistencyVariant, EmaAlpha, LossTerms, Precision};
use latentseg_core::cooccurrence::{
    dominance_fraction, effective_latent_count, CoOccurrence, LatentProjection,
};
use latentseg_core::data::{generate_synthetic, SyntheticSpec};
use latentseg_core::losses::{latent_loss, semantic_to_latent};
use latentseg_core::training::{
    load_checkpoint, run_experiment, save_checkpoint, unlabeled_pass, TrainState, Trainer,
};
use latentseg_core::types::{one_hot, Batch, LabelMap, ProbKind, ProbMap, DEFAULT_IGNORE};
use latentseg_core::data::Dataset;
use latentseg_core::RunConfig;
use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

/// Outcome of one criterion with a one-line explanation.
#[derive(Debug, Clone)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    /// Conjunction of several sub-checks, keeping every detail.
    pub fn all(parts: Vec<Check>) -> Self {
        let passed = parts.iter().all(|c| c.passed);
        let detail = parts.iter().map(|c| c.detail.as_str()).collect::<Vec<_>>().join("; ");
        Self { passed, detail }
    }

    pub fn assert(&self, name: &str) {
        assert!(self.passed, "{name}: {}", self.detail);
    }
}

fn labels_of(a: Array3<u8>) -> LabelMap {
    LabelMap {
        labels: a,
        ignore_index: DEFAULT_IGNORE,
    }
}

fn latent_of(values: Array4<f64>) -> ProbMap<f64> {
    ProbMap::new(values, ProbKind::Latent)
}

fn latent_value(labels: &LabelMap, s_l: &ProbMap<f64>, classes: usize) -> f64 {
    let y = one_hot::<f64>(labels, classes).unwrap();
    latent_loss(&y, s_l).unwrap().loss.value
}

pub fn gradient_suite() -> Check {
    let parts = [
        ("ce", grad_suite::cross_entropy()),
        ("latent", grad_suite::latent()),
        ("cons", grad_suite::consistency()),
        ("adv", grad_suite::adversarial()),
        ("disc", grad_suite::discriminator()),
    ];
    let worst = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    let detail = parts
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Check::new(worst <= FD_TOL, format!("worst relative error {worst:.1e} ({detail})"))
}

/// Bijective, uniform and enumerated cases, plus agreement with the term-by-term oracle.
pub fn latent_analytics() -> Check {
    let mut r = rng(7);
    // Bijective: every semantic class owns one latent class.
    let classes = 4;
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..classes).collect();
        p.shuffle(&mut r);
        p
    };
    let labels = random_labels(&mut r, (2, 5, 5), classes, 0.0);
    let mut s = Array4::zeros((2, 5, 5, classes));
    for ((n, h, w), &c) in labels.labels.indexed_iter() {
        s[[n, h, w, perm[c as usize]]] = 1.0;
    }
    let bijective = latent_value(&labels, &latent_of(s), classes);

    // Balanced two classes, uniform latent prediction.
    let labels = labels_of(Array3::from_shape_vec((1, 2, 2), vec![0, 1, 0, 1]).unwrap());
    let uniform = latent_value(&labels, &latent_of(Array4::from_elem((1, 2, 2, 2), 0.5)), 2);

    // Two pixels: (c0, (0.8, 0.2)) and (c1, (0.4, 0.6)).
    let labels = labels_of(Array3::from_shape_vec((1, 1, 2), vec![0, 1]).unwrap());
    let s_l = latent_of(Array4::from_shape_vec((1, 1, 2, 2), vec![0.8, 0.2, 0.4, 0.6]).unwrap());
    let enumerated = latent_value(&labels, &s_l, 2);
    let enumerated_oracle = conditional_entropy_oracle(&joint_oracle(&labels, &s_l, 2));

    // Random batches against the oracle.
    let mut oracle_err = 0.0f64;
    for case in 0..50 {
        let mut r = rng(1000 + case);
        let c = 2 + case as usize % 5;
        let l = 2 + case as usize % 4;
        let labels = random_labels(&mut r, (2, 3, 3), c, 0.1);
        let s_l = random_probmap(&mut r, (2, 3, 3, l), ProbKind::Latent);
        let got = latent_value(&labels, &s_l, c);
        let want = conditional_entropy_oracle(&joint_oracle(&labels, &s_l, c));
        oracle_err = oracle_err.max((got - want).abs());
    }

    let ln2 = std::f64::consts::LN_2;
    Check::all(vec![
        Check::new(bijective.abs() <= 1e-9, format!("bijective {bijective:.2e}")),
        Check::new((uniform - ln2).abs() <= 1e-9, format!("uniform {uniform:.9}")),
        Check::new(
            (enumerated - 0.606842).abs() <= 1e-6 && (enumerated - enumerated_oracle).abs() <= 1e-12,
            format!("two-pixel {enumerated:.7} (oracle {enumerated_oracle:.7})"),
        ),
        Check::new(oracle_err <= 1e-9, format!("random batches vs oracle {oracle_err:.1e}")),
    ])
}

/// Row-stochastic `rows x cols` matrix; some rows get exact zeros.
pub fn random_stochastic(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((rows, cols), |_| {
        if r.random_bool(0.2) {
            0.0
        } else {
            r.random::<f64>().powi(3)
        }
    });
    for mut row in p.rows_mut() {
        if row.sum() == 0.0 {
            row[0] = 1.0;
        }
        let s = row.sum();
        row /= s;
    }
    p
}

/// Fixed point of the EMA, row-stochastic projections and threshold monotonicity.
pub fn ema_projection() -> Check {
    // Stationary batches: the same one-hot map and latent prediction every step.
    let mut r = rng(11);
    let labels = random_labels(&mut r, (2, 4, 4), 3, 0.1);
    let y = one_hot::<f64>(&labels, 3).unwrap();
    let s_l = random_probmap(&mut r, (2, 4, 4, 5), ProbKind::Latent);
    let target = joint_oracle(&labels, &s_l, 3) * labels.valid_pixels() as f64;
    let mut cooc = CoOccurrence::new(3, 5, 0.25).unwrap();
    for _ in 0..100 {
        cooc = cooc.ema_update(&y, &s_l).unwrap();
    }
    let fixed_err = (&cooc.m - &target).iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let mut row_err = 0.0f64;
    let mut negative = false;
    let mut inversions = 0usize;
    for case in 0..1000u64 {
        let mut r = rng(20_000 + case);
        let c = r.random_range(1..8);
        let l = r.random_range(1..12);
        let mut m = Array2::from_shape_fn((c, l), |_| r.random::<f64>() * 10.0);
        if r.random_bool(0.3) {
            m.row_mut(r.random_range(0..c)).fill(0.0);
        }
        let state = CoOccurrence {
            m,
            alpha: 0.1,
            update_count: 1,
        };
        let p = state.project_distribution().unwrap();
        for row in p.p.rows() {
            row_err = row_err.max((row.sum() - 1.0).abs());
            negative |= row.iter().any(|&v| v < 0.0);
        }
        let p = LatentProjection::new(random_stochastic(&mut r, c, l)).unwrap();
        let mut ts: Vec<f64> = (0..12).map(|_| r.random_range(0.01..0.99)).collect();
        ts.sort_by(f64::total_cmp);
        let counts: Vec<usize> = ts.iter().map(|&t| effective_latent_count(&p, t)).collect();
        inversions += counts.windows(2).filter(|w| w[1] > w[0]).count();
    }
    Check::all(vec![
        Check::new(fixed_err <= 1e-6, format!("EMA fixed point error {fixed_err:.1e} at step 100")),
        Check::new(
            row_err <= 1e-6 && !negative,
            format!("row-sum error {row_err:.1e} over 1000 matrices"),
        ),
        Check::new(inversions == 0, format!("{inversions} threshold inversions over 1000 matrices")),
    ])
}

/// Identity projection is exact; random projections keep outputs on the simplex.
pub fn projection_contract() -> Check {
    let mut id_err = 0.0f64;
    for case in 0..50 {
        let mut r = rng(30_000 + case);
        let k = 2 + case as usize % 6;
        let s = random_probmap(&mut r, (2, 3, 3, k), ProbKind::Semantic);
        let out = semantic_to_latent(&s, &LatentProjection::identity(k)).unwrap();
        id_err = id_err.max((&out.values - &s.values).iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    let mut norm_err = 0.0f64;
    let mut negative = false;
    for case in 0..1000 {
        let mut r = rng(40_000 + case);
        let c = r.random_range(1..10);
        let l = r.random_range(1..10);
        let p = LatentProjection::new(random_stochastic(&mut r, c, l)).unwrap();
        let s = random_probmap(&mut r, (1, 2, 2, c), ProbKind::Semantic);
        let out = semantic_to_latent(&s, &p).unwrap();
        for lane in out.values.lanes(ndarray::Axis(3)) {
            norm_err = norm_err.max((lane.sum() - 1.0).abs());
            negative |= lane.iter().any(|&v| v < 0.0);
        }
    }
    Check::all(vec![
        Check::new(id_err <= 1e-12, format!("identity error {id_err:.1e}")),
        Check::new(
            norm_err <= 1e-5 && !negative,
            format!("normalization error {norm_err:.1e} over 1000 inputs"),
        ),
    ])
}

/// Small network configuration used by the quick training checks.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.widths = vec![6, 8, 8];
    cfg.model.dilations = vec![1, 2];
    cfg.model.disc_width = 4;
    cfg.batch_size = 2;
    cfg.crop_size = 32;
    cfg.max_iters = 12;
    cfg.warmup_iters = 4;
    cfg.plc_every = 0;
    cfg.labeled_fraction = 0.25;
    cfg.precision = Precision::F64;
    cfg
}

/// Small synthetic dataset with three groups of two classes.
pub fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    let mut spec = SyntheticSpec::grouped(6, 3);
    spec.image_size = 32;
    generate_synthetic(&spec, n, seed).unwrap()
}

/// Latent-head gradients after an unlabeled-only step with `lambda_adv = 0`.
pub fn isolation() -> Check {
    let mut cfg = tiny_config();
    cfg.lambda_adv = 0.0;
    cfg.warmup_iters = 0;
    let classes = 4;
    let mut worst = 0.0f64;
    let mut shared = f64::INFINITY;
    for (case, terms) in [LossTerms::ALL, LossTerms { adv_unlabeled: false, adv_labeled: false, ..LossTerms::ALL }]
        .into_iter()
        .enumerate()
    {
        cfg.terms = terms;
        let mut state =
            TrainState::<f64>::new(&cfg, classes, 3, 0.5, vec![0], vec![1], case as u64).unwrap();
        let mut r = rng(50 + case as u64);
        let stat = Array2::from_shape_fn((classes, 3), |_| r.random::<f64>());
        state.cooc = state.cooc.ema_step(&stat);
        let images = Array4::from_shape_fn((2, 32, 32, 3), |_| r.random_range(-1.0..1.0));
        let pass = unlabeled_pass(&state, &Batch::unlabeled(images), &cfg).unwrap();
        let norms = pass.grads.norms();
        worst = worst.max(norms.latent);
        shared = shared.min(norms.backbone.min(norms.semantic));
    }
    Check::new(
        worst == 0.0 && shared > 0.0,
        format!("latent-head gradient norm {worst:e}, shared-path norm {shared:.2e}"),
    )
}

/// Per-iteration losses of an uninterrupted run against one resumed from a checkpoint.
pub fn resume_error(dir: &Path) -> f64 {
    let data = tiny_dataset(24, 3);
    let mut cfg = tiny_config();
    cfg.max_iters = 10;
    cfg.warmup_iters = 3;
    cfg.ema_alpha = EmaAlpha::Fixed(0.3);
    let split_at = 6;

    let mut full = Trainer::<f64>::new(&cfg, &data, None, 5).unwrap();
    let mut reference = Vec::new();
    while !full.finished() {
        reference.push(full.step().unwrap());
    }

    let mut first = Trainer::<f64>::new(&cfg, &data, None, 5).unwrap();
    let mut resumed = Vec::new();
    for _ in 0..split_at {
        resumed.push(first.step().unwrap());
    }
    let path = dir.join("resume.ckpt");
    save_checkpoint(&first.state, &cfg, &path).unwrap();
    drop(first);
    let ckpt = load_checkpoint::<f64>(&path).unwrap();
    let mut second = Trainer::from_state(&ckpt.config, &data, None, ckpt.state).unwrap();
    while !second.finished() {
        resumed.push(second.step().unwrap());
    }

    assert_eq!(reference.len(), resumed.len());
    let mut worst = 0.0f64;
    for (a, b) in reference.iter().zip(&resumed) {
        worst = worst.max((a.value - b.value).abs());
        for (k, v) in &a.components {
            worst = worst.max((v - b.components[k]).abs());
        }
    }
    for (a, b) in full.state.seg.params().iter().zip(second.state.seg.params()) {
        let d = (&a.weight - &b.weight).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(d);
    }
    worst
}

/// Two identical runs must write byte-identical `metrics.json`.
pub fn identical_metrics(dir: &Path) -> bool {
    let data_root = dir.join("data");
    let mut spec = SyntheticSpec::grouped(6, 3);
    spec.image_size = 32;
    generate_synthetic(&spec, 24, 1).unwrap().save(&data_root).unwrap();
    let mut cfg = tiny_config();
    cfg.precision = Precision::F32;
    cfg.consistency_variant = ConsistencyVariant::CrossEntropy;
    cfg.data = Some(data_root.to_string_lossy().into_owned());
    let a = dir.join("a");
    let b = dir.join("b");
    run_experiment(&cfg, &a).unwrap();
    run_experiment(&cfg, &b).unwrap();
    let read = |p: &Path| std::fs::read(p.join("metrics.json")).unwrap();
    read(&a) == read(&b)
}

pub fn reproducibility() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let identical = identical_metrics(dir.path());
    let err = resume_error(dir.path());
    Check::all(vec![
        Check::new(identical, format!("metrics.json identical: {identical}")),
        Check::new(err <= 1e-6, format!("resume deviation {err:.1e}")),
    ])
}

/// Summary of the dominance and grouping checks for one projection.
pub fn discovery_stats(p: &LatentProjection) -> (f64, usize) {
    (dominance_fraction(p, 0.9), effective_latent_count(p, 0.9))
}
