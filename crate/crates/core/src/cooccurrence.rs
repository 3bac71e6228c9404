//! Running co-occurrence statistic between semantic and latent classes.
//!
//! `M[c, l]` is an exponential moving average of the soft count of pixels labeled `c`
//! that the latent branch assigns to `l`. Row-normalizing `M` gives the projection
//! `P(l | c)` used to map semantic predictions into the latent space.

use std::io::{Read, Write};

use log::warn;
use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::{ClassSpace, ProbMap};

/// Largest admissible EMA rate; the recurrence must stay a proper average.
pub const MAX_ALPHA: f64 = 1.0 - 1e-6;

pub const ROW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrence {
    pub m: Array2<f64>,
    pub alpha: f64,
    pub update_count: usize,
}

impl CoOccurrence {
    pub fn new(semantic: usize, latent: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("EMA rate must lie in (0, 1], got {alpha}")));
        }
        Ok(Self {
            m: Array2::zeros((semantic, latent)),
            alpha,
            update_count: 0,
        })
    }

    pub fn semantic_count(&self) -> usize {
        self.m.nrows()
    }

    pub fn latent_count(&self) -> usize {
        self.m.ncols()
    }

    /// One EMA step with the batch's soft co-occurrence counts; returns the new state.
    pub fn ema_update<F: Real>(&self, y: &ProbMap<F>, s_l: &ProbMap<F>) -> Result<CoOccurrence> {
        let stat = batch_counts(y, s_l)?;
        if stat.dim() != self.m.dim() {
            return Err(Error::Dimension(format!(
                "co-occurrence is {:?}, batch statistic is {:?}",
                self.m.dim(),
                stat.dim()
            )));
        }
        Ok(self.ema_step(&stat))
    }

    /// EMA step with a precomputed batch statistic `sum_pixels y[c] * s_l[l]`.
    pub fn ema_step(&self, stat: &Array2<f64>) -> CoOccurrence {
        let a = self.alpha;
        let mut m = self.m.clone();
        Zip::from(&mut m).and(stat).for_each(|m, &s| *m = (1.0 - a) * *m + a * s);
        CoOccurrence {
            m,
            alpha: a,
            update_count: self.update_count + 1,
        }
    }

    /// Row-normalized `M`; rows never observed fall back to uniform.
    pub fn project_distribution(&self) -> Result<LatentProjection> {
        if self.update_count == 0 {
            return Err(Error::State(
                "projection requested before any statistics".into(),
            ));
        }
        let l = self.latent_count();
        let mut p = self.m.clone();
        for mut row in p.rows_mut() {
            let s: f64 = row.sum();
            if s > 0.0 && s.is_finite() {
                row.mapv_inplace(|v| v / s);
            } else {
                row.fill(1.0 / l as f64);
            }
        }
        Ok(LatentProjection { p })
    }
}

/// Soft counts `sum_{n,h,w} y[n,h,w,c] * s_l[n,h,w,l]`, accumulated in double precision.
pub fn batch_counts<F: Real>(y: &ProbMap<F>, s_l: &ProbMap<F>) -> Result<Array2<f64>> {
    let (n, h, w, c) = y.dims();
    let (n2, h2, w2, l) = s_l.dims();
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::Dimension(format!(
            "one-hot map is {:?}, latent map is {:?}",
            (n, h, w),
            (n2, h2, w2)
        )));
    }
    let mut out = Array2::<f64>::zeros((c, l));
    for (yrow, srow) in y.values.lanes(Axis(3)).into_iter().zip(s_l.values.lanes(Axis(3))) {
        for (ci, &yv) in yrow.iter().enumerate() {
            if yv == F::zero() {
                continue;
            }
            let yv = yv.f64();
            let mut orow = out.row_mut(ci);
            for (o, &s) in orow.iter_mut().zip(srow.iter()) {
                *o += yv * s.f64();
            }
        }
    }
    Ok(out)
}

/// Rate `batch_size / dataset_size`, clamped below one.
pub fn default_alpha(batch_size: usize, dataset_size: usize) -> Result<f64> {
    if dataset_size == 0 {
        return Err(Error::Config("dataset size is zero".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size is zero".into()));
    }
    let a = batch_size as f64 / dataset_size as f64;
    if a >= MAX_ALPHA {
        warn!("EMA rate {a} (batch {batch_size} / dataset {dataset_size}) clamped to {MAX_ALPHA}");
        return Ok(MAX_ALPHA);
    }
    Ok(a)
}

/// Row-stochastic matrix `P(l | c)`, rows indexed by semantic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProjection {
    pub p: Array2<f64>,
}

impl LatentProjection {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        for (c, row) in p.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0 + ROW_TOL).contains(&v)) {
                return Err(Error::Range {
                    index: c,
                    value: row.iter().cloned().fold(f64::NAN, f64::min),
                });
            }
            let dev = (row.sum() - 1.0).abs();
            if dev > ROW_TOL {
                return Err(Error::Normalization { max_deviation: dev });
            }
        }
        Ok(Self { p })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            p: Array2::eye(k),
        }
    }

    /// Deterministic projection from a class-to-group table.
    pub fn from_assignment(assignment: &[usize], groups: usize) -> Result<Self> {
        let mut p = Array2::zeros((assignment.len(), groups));
        for (c, &g) in assignment.iter().enumerate() {
            if g >= groups {
                return Err(Error::Dimension(format!("class {c} mapped to group {g} of {groups}")));
            }
            p[[c, g]] = 1.0;
        }
        Ok(Self { p })
    }

    pub fn semantic_count(&self) -> usize {
        self.p.nrows()
    }

    pub fn latent_count(&self) -> usize {
        self.p.ncols()
    }

    /// Latent class with the largest probability for each semantic class (lowest index on ties).
    pub fn dominant(&self) -> Vec<usize> {
        self.p
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, space: Option<&ClassSpace>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["semantic_class".to_string()];
        header.extend((0..self.latent_count()).map(|l| l.to_string()));
        w.write_record(&header)?;
        for (c, row) in self.p.rows().into_iter().enumerate() {
            let name = space.map(|s| s.class_name(c)).unwrap_or_else(|| format!("class_{c}"));
            let mut rec = vec![name];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Parses the CSV layout produced by [`LatentProjection::write_csv`]; returns names too.
    pub fn read_csv<R: Read>(input: R) -> Result<(Self, Vec<String>)> {
        let mut r = csv::Reader::from_reader(input);
        let latent = r.headers()?.len().saturating_sub(1);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != latent + 1 {
                return Err(Error::Dimension(format!(
                    "row has {} cells, header has {}",
                    rec.len(),
                    latent + 1
                )));
            }
            names.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                values.push(cell.trim().parse::<f64>().map_err(|e| {
                    Error::Dimension(format!("bad matrix entry {cell:?}: {e}"))
                })?);
            }
        }
        let p = Array2::from_shape_vec((names.len(), latent), values)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok((Self::new(p)?, names))
    }
}

/// Number of latent classes `l` with `P(l | c) > t` for some semantic class `c`.
pub fn effective_latent_count(p: &LatentProjection, t: f64) -> usize {
    p.p
        .columns()
        .into_iter()
        .filter(|col| col.iter().any(|&v| v > t))
        .count()
}

/// Fraction of semantic classes whose dominant latent class has probability above `t`.
pub fn dominance_fraction(p: &LatentProjection, t: f64) -> f64 {
    let rows = p.semantic_count();
    if rows == 0 {
        return 0.0;
    }
    let hits = p
        .p
        .rows()
        .into_iter()
        .filter(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > t)
        .count();
    hits as f64 / rows as f64
}
