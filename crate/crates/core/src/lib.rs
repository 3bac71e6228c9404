//! Semi-supervised semantic segmentation with data-driven latent classes.
//!
//! A shared backbone feeds two heads: a semantic head trained with cross-entropy on
//! labeled pixels, and a latent head trained to minimize the conditional entropy of
//! semantic classes given latent classes. An EMA co-occurrence statistic maps semantic
//! predictions into the latent space, where a consistency loss against the latent
//! head supervises the semantic head on unlabeled images. A fully convolutional
//! discriminator adds an adversarial realism term.

pub mod config;
pub mod cooccurrence;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod training;
pub mod types;

pub use config::{ConsistencyVariant, EmaAlpha, LatentMode, LossTerms, Precision, Reduction, RunConfig};
pub use cooccurrence::{CoOccurrence, LatentProjection};
pub use error::{Error, Result};
pub use losses::LossValue;
pub use real::Real;
pub use types::{one_hot, validate_probmap, Batch, ClassSpace, LabelMap, ProbKind, ProbMap};
