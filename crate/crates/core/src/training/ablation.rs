//! Named ablation suites and their consolidated CSV.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{run_experiment, ExperimentReport};
use crate::config::{ConsistencyVariant, LatentMode, LossTerms, RunConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Loss-term ablation: six combinations of the objective.
    Table3,
    /// Latent class count sweep.
    Table4,
    /// Latent-space alternatives: manual groups, identity, symmetric KL.
    Table5,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Self::Table3),
            "table4" => Ok(Self::Table4),
            "table5" => Ok(Self::Table5),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Self::Table3 => "table3",
            Self::Table4 => "table4",
            Self::Table5 => "table5",
            Self::All => "all",
        }
    }
}

pub const LATENT_SWEEP: [usize; 6] = [2, 4, 6, 10, 20, 50];

const fn terms(latent: bool, consistency: bool, adv_labeled: bool, adv_unlabeled: bool) -> LossTerms {
    LossTerms {
        latent,
        consistency,
        adv_labeled,
        adv_unlabeled,
    }
}

/// Row names and configurations of a suite. `classes` decides which sweep values
/// need the latent-overflow override.
pub fn suite_configs(base: &RunConfig, suite: Suite, classes: usize) -> Vec<(Suite, String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Table3 => [
            ("ce", terms(false, false, false, false)),
            ("ce_latent", terms(true, false, false, false)),
            ("ce_latent_cons", terms(true, true, false, false)),
            ("ce_adv_labeled", terms(false, false, true, false)),
            ("ce_adv", terms(false, false, true, true)),
            ("full", LossTerms::ALL),
        ]
        .into_iter()
        .map(|(n, t)| {
            let cfg = with(&|c| {
                c.terms = t;
                c.latent_mode = LatentMode::Learned;
            });
            (Suite::Table3, n.to_string(), cfg)
        })
        .collect(),
        Suite::Table4 => LATENT_SWEEP
            .iter()
            .map(|&m| {
                let cfg = with(&|c| {
                    c.latent_mode = LatentMode::Learned;
                    c.max_latent = m;
                    c.allow_latent_overflow = m > classes;
                });
                (Suite::Table4, format!("latent_{m}"), cfg)
            })
            .collect(),
        Suite::Table5 => {
            let rows: [(&str, LatentMode, ConsistencyVariant); 4] = [
                ("manual", LatentMode::Manual, ConsistencyVariant::CrossEntropy),
                ("identity", LatentMode::Identity, ConsistencyVariant::CrossEntropy),
                ("identity_symmetric_kl", LatentMode::Identity, ConsistencyVariant::SymmetricKl),
                ("learned", LatentMode::Learned, ConsistencyVariant::CrossEntropy),
            ];
            rows.into_iter()
                .map(|(n, mode, variant)| {
                    let cfg = with(&|c| {
                        c.latent_mode = mode;
                        c.consistency_variant = variant;
                    });
                    (Suite::Table5, n.to_string(), cfg)
                })
                .collect()
        }
        Suite::All => [Suite::Table3, Suite::Table4, Suite::Table5]
            .into_iter()
            .flat_map(|s| suite_configs(base, s, classes))
            .collect(),
    }
}

/// One line of the consolidated ablation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: String,
    pub name: String,
    pub latent_mode: String,
    pub max_latent: usize,
    pub seeds: usize,
    pub failures: usize,
    pub miou_mean: Option<f64>,
    pub miou_std: Option<f64>,
    pub effective_latent_t01: Option<f64>,
    pub effective_latent_t09: Option<f64>,
    pub dominance_fraction: Option<f64>,
    pub grouping_agreement: Option<f64>,
}

impl AblationRow {
    fn new(suite: Suite, name: &str, cfg: &RunConfig, r: &ExperimentReport) -> Self {
        Self {
            suite: suite.name().to_string(),
            name: name.to_string(),
            latent_mode: serde_json::to_value(cfg.latent_mode)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            max_latent: cfg.max_latent,
            seeds: r.runs.len(),
            failures: r.failures().len(),
            miou_mean: r.miou_mean,
            miou_std: r.miou_std,
            effective_latent_t01: r.effective_latent_t01_mean,
            effective_latent_t09: r.effective_latent_t09_mean,
            dominance_fraction: r.dominance_fraction_mean,
            grouping_agreement: r.grouping_agreement_mean,
        }
    }
}

/// Runs every configuration of `suite` under `out/<row name>` and writes `out/ablation.csv`.
///
/// Rows needing a supercategory mapping fall back to `<data>/supercategories.csv`.
pub fn ablation_matrix(base: &RunConfig, suite: Suite, out: &Path) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = base
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (set `data`)".into()))?;
    let manifest = crate::data::load_dataset(Path::new(data))?.manifest;
    let mut base = base.clone();
    if base.mapping.is_none() {
        let fallback = Path::new(data).join("supercategories.csv");
        if fallback.is_file() {
            base.mapping = Some(fallback.to_string_lossy().into_owned());
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("ablation.csv");
    let mut rows = Vec::new();
    for (s, name, cfg) in suite_configs(&base, suite, manifest.class_count()) {
        let dir = out.join(&name);
        let report = run_experiment(&cfg, &dir)?;
        rows.push(AblationRow::new(s, &name, &cfg, &report));
        // Rewritten after every row so an interrupted suite keeps its finished rows.
        let mut w = csv::Writer::from_path(&csv_path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(rows)
}
