use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stream offset keeping split shuffles independent of other seeded streams.
const SPLIT_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSplit {
    pub labeled_fraction: f64,
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
}

/// Splits `ids` into `round(fraction * len)` labeled ids and the unlabeled rest.
pub fn split_semi(ids: &[usize], fraction: f64, seed: u64) -> Result<SemiSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = (fraction * ids.len() as f64).round() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} images leaves no labeled image",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    shuffled.shuffle(&mut rng);
    let mut labeled_ids = shuffled[..count].to_vec();
    let mut unlabeled_ids = shuffled[count..].to_vec();
    labeled_ids.sort_unstable();
    unlabeled_ids.sort_unstable();
    Ok(SemiSplit {
        labeled_fraction: fraction,
        labeled_ids,
        unlabeled_ids,
    })
}
