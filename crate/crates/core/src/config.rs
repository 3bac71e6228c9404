//! Run configuration and its flat dotted-key JSON representation.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyVariant {
    CrossEntropy,
    SymmetricKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Latent classes discovered by the conditional-entropy loss.
    Learned,
    /// Latent branch trained with cross-entropy on a fixed class-to-supercategory mapping.
    Manual,
    /// Latent branch predicts the semantic classes themselves.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// EMA rate for the co-occurrence statistic: fixed, or batch size over dataset size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmaAlpha {
    Auto,
    Fixed(f64),
}

impl Serialize for EmaAlpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EmaAlpha::Auto => s.serialize_str("auto"),
            EmaAlpha::Fixed(a) => s.serialize_f64(*a),
        }
    }
}

impl<'de> Deserialize<'de> for EmaAlpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "auto" => Ok(EmaAlpha::Auto),
            Value::String(s) => s
                .parse::<f64>()
                .map(EmaAlpha::Fixed)
                .map_err(|_| serde::de::Error::custom(format!("bad ema_alpha {s:?}"))),
            Value::Number(n) => Ok(EmaAlpha::Fixed(n.as_f64().unwrap_or(f64::NAN))),
            other => Err(serde::de::Error::custom(format!("bad ema_alpha {other}"))),
        }
    }
}

/// Which loss terms take part in the segmentation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub latent: bool,
    pub consistency: bool,
    pub adv_labeled: bool,
    pub adv_unlabeled: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        latent: true,
        consistency: true,
        adv_labeled: true,
        adv_unlabeled: true,
    };
    pub const CE_ONLY: LossTerms = LossTerms {
        latent: false,
        consistency: false,
        adv_labeled: false,
        adv_unlabeled: false,
    };

    pub fn uses_discriminator(&self) -> bool {
        self.adv_labeled || self.adv_unlabeled
    }

    pub fn uses_latent_branch(&self) -> bool {
        self.latent || self.consistency
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.consistency || self.adv_unlabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the backbone stages; the first three downsample by 2.
    pub widths: Vec<usize>,
    pub dilations: Vec<usize>,
    /// Width of the first discriminator layer; later layers double it.
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32, 32],
            dilations: vec![1, 2, 4, 8],
            disc_width: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lambda_adv: f64,
    pub lambda_unlabeled: f64,
    pub max_latent: usize,
    pub allow_latent_overflow: bool,
    pub ema_alpha: EmaAlpha,
    pub warmup_iters: usize,
    pub lr0: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub disc_betas: (f64, f64),
    pub max_iters: usize,
    pub batch_size: usize,
    pub seeds: usize,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub consistency_variant: ConsistencyVariant,
    pub latent_mode: LatentMode,
    pub reduction: Reduction,
    pub terms: LossTerms,
    /// Train the discriminator's fake term on unlabeled predictions as well.
    pub disc_fakes_unlabeled: bool,
    pub augment: bool,
    pub crop_size: usize,
    pub scale_range: (f64, f64),
    pub precision: Precision,
    pub model: ModelConfig,
    pub log_every: usize,
    pub plc_every: usize,
    pub checkpoint_every: usize,
    /// Dataset root; `<data>/val` is used for evaluation when present.
    #[serde(default)]
    pub data: Option<String>,
    /// Class-to-supercategory CSV for `latent_mode = manual`.
    #[serde(default)]
    pub mapping: Option<String>,
}

impl Default for RunConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            lambda_adv: 0.01,
            lambda_unlabeled: 0.1,
            max_latent: 20,
            allow_latent_overflow: false,
            ema_alpha: EmaAlpha::Auto,
            warmup_iters: 500,
            lr0: 0.05,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            disc_lr: 1e-4,
            disc_betas: (0.9, 0.99),
            max_iters: 2000,
            batch_size: 8,
            seeds: 1,
            seed: 0,
            labeled_fraction: 0.125,
            consistency_variant: ConsistencyVariant::CrossEntropy,
            latent_mode: LatentMode::Learned,
            reduction: Reduction::Mean,
            terms: LossTerms::ALL,
            disc_fakes_unlabeled: true,
            augment: true,
            crop_size: 64,
            scale_range: (0.5, 1.5),
            precision: Precision::F32,
            model: ModelConfig::default(),
            log_every: 1,
            plc_every: 500,
            checkpoint_every: 0,
            data: None,
            mapping: None,
        }
    }
}

impl RunConfig {
    /// Full-scale hyperparameters for Pascal VOC with a ResNet-101 backbone.
    pub fn full_scale() -> Self {
        Self {
            warmup_iters: 5000,
            lr0: 2.5e-4,
            max_iters: 20_000,
            batch_size: 10,
            seeds: 5,
            crop_size: 321,
            model: ModelConfig {
                disc_width: 64,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_unlabeled", self.lambda_unlabeled),
            ("lr0", self.lr0),
            ("disc_lr", self.disc_lr),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.max_latent == 0 {
            return Err(Error::Config("max_latent must be >= 1".into()));
        }
        if let EmaAlpha::Fixed(a) = self.ema_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("ema_alpha must lie in (0, 1), got {a}")));
            }
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale_range ({lo}, {hi})")));
        }
        if self.terms.consistency && !self.terms.latent && self.latent_mode == LatentMode::Learned {
            return Err(Error::Config(
                "the consistency term needs a trained latent branch (enable terms.latent)".into(),
            ));
        }
        if self.model.widths.len() < 3 {
            return Err(Error::Config("backbone needs at least 3 stages".into()));
        }
        if self.model.dilations.is_empty() || self.model.dilations.contains(&0) {
            return Err(Error::Config("dilations must be non-empty and positive".into()));
        }
        if self.model.disc_width == 0 || self.model.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Number of latent channels for a dataset with `semantic` classes.
    ///
    /// `max_latent` is an upper limit capped at the semantic class count unless
    /// `allow_latent_overflow` is set.
    pub fn latent_count(&self, semantic: usize, supercategories: Option<usize>) -> Result<usize> {
        match self.latent_mode {
            LatentMode::Identity => Ok(semantic),
            LatentMode::Manual => supercategories.ok_or_else(|| {
                Error::Config("latent_mode=manual requires a supercategory mapping".into())
            }),
            LatentMode::Learned if self.allow_latent_overflow => Ok(self.max_latent),
            LatentMode::Learned => Ok(self.max_latent.min(semantic)),
        }
    }

    /// Flat map with dotted keys for nested fields.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::default())?;
        for (key, value) in flat {
            set_dotted(&mut base, key, value.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let flat: Map<String, Value> = serde_json::from_str(&text)?;
        Self::from_flat(&flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&Value::Object(self.to_flat()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Applies a `key=value` override; the value is parsed as JSON, falling back to a string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
        let mut flat = self.to_flat();
        if !flat.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        flat.insert(key.to_string(), value);
        Self::from_flat(&flat)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config key {key:?} does not name a field")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}
