//! Shared domain types: class spaces, per-pixel probability maps, label maps and batches.
//!
//! All tensors use the channel-last layout `(N, H, W, K)`.

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Label value excluded from every loss and statistic (void pixels, padding).
pub const DEFAULT_IGNORE: u8 = 255;

/// Tolerance on per-pixel channel sums.
pub const NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpace {
    pub semantic_count: usize,
    pub latent_count: usize,
    pub ignore_index: u8,
    pub names: Option<Vec<String>>,
}

impl ClassSpace {
    /// Builds a class space. More latent than semantic classes requires `allow_overflow`.
    pub fn new(
        semantic_count: usize,
        latent_count: usize,
        ignore_index: u8,
        allow_overflow: bool,
    ) -> Result<Self> {
        if semantic_count < 2 {
            return Err(Error::Config(format!(
                "need at least 2 semantic classes, got {semantic_count}"
            )));
        }
        if latent_count < 1 {
            return Err(Error::Config("need at least 1 latent class".into()));
        }
        if (ignore_index as usize) < semantic_count {
            return Err(Error::Config(format!(
                "ignore index {ignore_index} collides with semantic class range [0, {semantic_count})"
            )));
        }
        if latent_count > semantic_count && !allow_overflow {
            return Err(Error::Config(format!(
                "{latent_count} latent classes exceed {semantic_count} semantic classes; \
                 pass the latent overflow override to allow this"
            )));
        }
        Ok(Self {
            semantic_count,
            latent_count,
            ignore_index,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.semantic_count {
            return Err(Error::Config(format!(
                "{} class names for {} semantic classes",
                names.len(),
                self.semantic_count
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn class_name(&self, c: usize) -> String {
        self.names
            .as_ref()
            .and_then(|n| n.get(c).cloned())
            .unwrap_or_else(|| format!("class_{c}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbKind {
    Semantic,
    Latent,
}

/// Per-pixel distribution over `K` classes.
///
/// `partial` marks one-hot ground truth maps whose ignored pixels carry all-zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<F> {
    pub values: Array4<F>,
    pub kind: ProbKind,
    pub partial: bool,
}

impl<F: Real> ProbMap<F> {
    pub fn new(values: Array4<F>, kind: ProbKind) -> Self {
        Self {
            values,
            kind,
            partial: false,
        }
    }

    /// Wraps and validates in one go.
    pub fn checked(values: Array4<F>, kind: ProbKind) -> Result<Self> {
        let p = Self::new(values, kind);
        validate_probmap(&p)?;
        Ok(p)
    }

    pub fn uniform(n: usize, h: usize, w: usize, k: usize, kind: ProbKind) -> Self {
        Self::new(
            Array4::from_elem((n, h, w, k), F::one() / F::of(k as f64)),
            kind,
        )
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().3
    }

    pub fn pixels(&self) -> usize {
        let (n, h, w, _) = self.values.dim();
        n * h * w
    }

    /// Per-pixel argmax; ties resolve to the lowest index.
    pub fn argmax(&self) -> Array3<usize> {
        let (n, h, w, _) = self.values.dim();
        let mut out = Array3::zeros((n, h, w));
        Zip::from(&mut out)
            .and(self.values.lanes(Axis(3)))
            .for_each(|o, row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                *o = best;
            });
        out
    }
}

/// Integer labels `(N, H, W)`, each in `[0, |C|)` or equal to the ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array3<u8>,
    pub ignore_index: u8,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>, space: &ClassSpace) -> Result<Self> {
        let map = Self {
            labels,
            ignore_index: space.ignore_index,
        };
        map.validate(space.semantic_count)?;
        Ok(map)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        for ((n, h, w), &v) in self.labels.indexed_iter() {
            if v != self.ignore_index && (v as usize) >= classes {
                return Err(Error::LabelRange {
                    n,
                    h,
                    w,
                    value: v as i64,
                    classes,
                    ignore: self.ignore_index as i64,
                });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn valid_pixels(&self) -> usize {
        self.labels.iter().filter(|&&v| v != self.ignore_index).count()
    }

    /// Maps every non-ignored label through `table` (e.g. semantic class to supercategory).
    pub fn remap(&self, table: &[usize]) -> LabelMap {
        let ignore = self.ignore_index;
        LabelMap {
            labels: self
                .labels
                .mapv(|v| if v == ignore { ignore } else { table[v as usize] as u8 }),
            ignore_index: ignore,
        }
    }
}

/// Images `(N, H, W, 3)` in `[0, 1]`, with labels only for labeled batches.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub images: Array4<F>,
    pub labels: Option<LabelMap>,
    pub labeled: bool,
}

impl<F: Real> Batch<F> {
    pub fn labeled(images: Array4<F>, labels: LabelMap) -> Result<Self> {
        let (n, h, w, c) = images.dim();
        if c != 3 {
            return Err(Error::Shape(format!("images need 3 channels, got {c}")));
        }
        if labels.dims() != (n, h, w) {
            return Err(Error::Dimension(format!(
                "images {:?} vs labels {:?}",
                (n, h, w),
                labels.dims()
            )));
        }
        Ok(Self {
            images,
            labels: Some(labels),
            labeled: true,
        })
    }

    pub fn unlabeled(images: Array4<F>) -> Self {
        Self {
            images,
            labels: None,
            labeled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels usable by a loss: `None` for unlabeled batches even if labels are attached.
    pub fn supervision(&self) -> Option<&LabelMap> {
        if self.labeled {
            self.labels.as_ref()
        } else {
            None
        }
    }
}

/// One-hot encodes labels over `classes` channels; ignored pixels get all-zero rows.
pub fn one_hot<F: Real>(labels: &LabelMap, classes: usize) -> Result<ProbMap<F>> {
    labels.validate(classes)?;
    let (n, h, w) = labels.dims();
    let mut values = Array4::zeros((n, h, w, classes));
    for ((i, j, k), &v) in labels.labels.indexed_iter() {
        if v != labels.ignore_index {
            values[[i, j, k, v as usize]] = F::one();
        }
    }
    Ok(ProbMap {
        values,
        kind: ProbKind::Semantic,
        partial: true,
    })
}

/// Checks entries lie in `[0, 1]` and each pixel sums to one (or zero for partial maps).
pub fn validate_probmap<F: Real>(p: &ProbMap<F>) -> Result<()> {
    for (index, &v) in p.values.iter().enumerate() {
        let v = v.f64();
        if !(0.0..=1.0 + NORM_TOL).contains(&v) || v.is_nan() {
            return Err(Error::Range { index, value: v });
        }
    }
    let mut max_deviation = 0.0f64;
    for row in p.values.lanes(Axis(3)) {
        let s: f64 = row.iter().map(|v| v.f64()).sum();
        let dev = if p.partial && s.abs() <= NORM_TOL {
            0.0
        } else {
            (s - 1.0).abs()
        };
        max_deviation = max_deviation.max(dev);
    }
    if max_deviation > NORM_TOL {
        return Err(Error::Normalization { max_deviation });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn space(c: usize) -> ClassSpace {
        ClassSpace::new(c, c, DEFAULT_IGNORE, false).unwrap()
    }

    fn labels(v: Array3<u8>) -> LabelMap {
        LabelMap {
            labels: v,
            ignore_index: DEFAULT_IGNORE,
        }
    }

    #[test]
    fn one_hot_examples() {
        let p: ProbMap<f64> = one_hot(&labels(array![[[0u8]]]), 2).unwrap();
        assert_eq!(p.values.as_slice().unwrap(), &[1.0, 0.0]);

        let p: ProbMap<f64> = one_hot(&labels(array![[[DEFAULT_IGNORE]]]), 2).unwrap();
        assert_eq!(p.values.as_slice().unwrap(), &[0.0, 0.0]);
        validate_probmap(&p).unwrap();

        let p: ProbMap<f64> = one_hot(&labels(array![[[1u8, 0]]]), 3).unwrap();
        assert_eq!(p.values.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let err = one_hot::<f64>(&labels(array![[[0u8, 7]]]), 3).unwrap_err();
        match err {
            Error::LabelRange { n, h, w, value, .. } => {
                assert_eq!((n, h, w, value), (0, 0, 1, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_examples() {
        let u = ProbMap::<f64>::uniform(1, 2, 2, 4, ProbKind::Semantic);
        validate_probmap(&u).unwrap();

        let bad = ProbMap::new(Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.6]).unwrap(), ProbKind::Semantic);
        assert!(matches!(validate_probmap(&bad), Err(Error::Normalization { .. })));

        let neg = ProbMap::new(Array4::from_shape_vec((1, 1, 1, 2), vec![-0.01, 1.01]).unwrap(), ProbKind::Semantic);
        assert!(matches!(validate_probmap(&neg), Err(Error::Range { .. })));
    }

    #[test]
    fn class_space_invariants() {
        assert!(ClassSpace::new(1, 1, 255, false).is_err());
        assert!(ClassSpace::new(4, 0, 255, false).is_err());
        assert!(ClassSpace::new(4, 2, 3, false).is_err());
        assert!(ClassSpace::new(4, 8, 255, false).is_err());
        assert!(ClassSpace::new(4, 8, 255, true).is_ok());
        assert!(space(4).with_names(vec!["a".into()]).is_err());
    }

    #[test]
    fn unlabeled_batch_hides_labels() {
        let images = Array4::<f32>::zeros((1, 2, 2, 3));
        let mut b = Batch::labeled(images, labels(Array3::zeros((1, 2, 2)))).unwrap();
        assert!(b.supervision().is_some());
        b.labeled = false;
        assert!(b.supervision().is_none());
    }

    proptest::proptest! {
        #[test]
        fn argmax_inverts_one_hot(raw in proptest::collection::vec(0u8..6, 12)) {
            let mut v = Array3::from_shape_vec((1, 3, 4), raw).unwrap();
            v[[0, 0, 0]] = DEFAULT_IGNORE;
            let lm = labels(v.clone());
            let p: ProbMap<f32> = one_hot(&lm, 6).unwrap();
            let am = p.argmax();
            for ((i, j, k), &y) in v.indexed_iter() {
                if y != DEFAULT_IGNORE {
                    proptest::prop_assert_eq!(am[[i, j, k]], y as usize);
                }
            }
        }
    }
}
