//! Bit-exact training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header,
//! then every tensor as little-endian `f64` in a fixed order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sampler, TrainState};
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::real::Real;

const MAGIC: &[u8; 8] = b"LSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    precision: Precision,
    config: RunConfig,
    semantic: usize,
    latent: usize,
    seed: u64,
    iter: usize,
    labeled: Sampler,
    unlabeled: Sampler,
    ema_alpha: f64,
    ema_updates: usize,
    adam_steps: u64,
    /// Scalar count of each payload section, in order.
    sections: Vec<(String, usize)>,
}

/// Configuration and state restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub config: RunConfig,
    pub state: TrainState<F>,
}

fn params_flat<F: Real>(ps: &[&ConvParams<F>], out: &mut Vec<f64>) {
    for p in ps {
        for s in p.slices() {
            out.extend(s.iter().map(|v| v.f64()));
        }
    }
}

fn buffers_flat<F: Real>(bufs: &[Vec<F>], out: &mut Vec<f64>) {
    for b in bufs {
        out.extend(b.iter().map(|v| v.f64()));
    }
}

fn sections<F: Real>(state: &TrainState<F>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    let mut seg = Vec::new();
    params_flat(&state.seg.params(), &mut seg);
    out.push(("seg".to_string(), seg));
    let mut disc = Vec::new();
    if let Some(d) = &state.disc {
        params_flat(&d.params(), &mut disc);
    }
    out.push(("disc".to_string(), disc));
    let mut v = Vec::new();
    buffers_flat(&state.seg_opt.velocity, &mut v);
    out.push(("sgd_velocity".to_string(), v));
    let mut m = Vec::new();
    buffers_flat(&state.disc_opt.m, &mut m);
    out.push(("adam_m".to_string(), m));
    let mut v = Vec::new();
    buffers_flat(&state.disc_opt.v, &mut v);
    out.push(("adam_v".to_string(), v));
    out.push(("cooccurrence".to_string(), state.cooc.m.iter().copied().collect()));
    out
}

pub fn save_checkpoint<F: Real>(state: &TrainState<F>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let secs = sections(state);
    let header = Header {
        precision: if F::NAME == "f64" { Precision::F64 } else { Precision::F32 },
        config: cfg.clone(),
        semantic: state.seg.semantic_count(),
        latent: state.seg.latent_count(),
        seed: state.seed,
        iter: state.iter,
        labeled: state.labeled.clone(),
        unlabeled: state.unlabeled.clone(),
        ema_alpha: state.cooc.alpha,
        ema_updates: state.cooc.update_count,
        adam_steps: state.disc_opt.step_count,
        sections: secs.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + secs.iter().map(|s| s.1.len() * 8).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, values) in &secs {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn fill_params<F: Real>(ps: Vec<&mut ConvParams<F>>, values: &[f64]) -> Result<()> {
    let mut it = values.iter();
    for p in ps {
        for s in p.slices_mut() {
            for x in s.iter_mut() {
                *x = F::of(*it.next().ok_or_else(|| Error::Checkpoint("parameter section too short".into()))?);
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::Checkpoint("parameter section too long".into()));
    }
    Ok(())
}

/// Splits `values` into buffers shaped like the parameter list.
fn fill_buffers<F: Real>(shape: &[usize], values: &[f64]) -> Result<Vec<Vec<F>>> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    if shape.iter().sum::<usize>() != values.len() {
        return Err(Error::Checkpoint("optimizer section does not match model".into()));
    }
    let mut out = Vec::with_capacity(shape.len());
    let mut pos = 0;
    for &n in shape {
        out.push(values[pos..pos + n].iter().map(|&v| F::of(v)).collect());
        pos += n;
    }
    Ok(out)
}

fn slot_sizes<F: Real>(ps: &[&ConvParams<F>]) -> Vec<usize> {
    ps.iter().flat_map(|p| p.slices().map(|s| s.len())).collect()
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;
    let cfg = header.config.clone();
    let mut state = TrainState::<F>::new(
        &cfg,
        header.semantic,
        header.latent,
        header.ema_alpha,
        header.labeled.ids.clone(),
        header.unlabeled.ids.clone(),
        header.seed,
    )?;
    state.iter = header.iter;
    state.labeled = header.labeled.clone();
    state.unlabeled = header.unlabeled.clone();
    state.disc_opt.step_count = header.adam_steps;
    state.cooc.update_count = header.ema_updates;
    let seg_sizes = slot_sizes(&state.seg.params());
    let disc_sizes = state.disc.as_ref().map(|d| slot_sizes(&d.params())).unwrap_or_default();
    for (name, n) in &header.sections {
        let values = cur.f64s(*n)?;
        match name.as_str() {
            "seg" => fill_params(state.seg.params_mut(), &values)?,
            "disc" => match state.disc.as_mut() {
                Some(d) => fill_params(d.params_mut(), &values)?,
                None if values.is_empty() => {}
                None => return Err(Error::Checkpoint("discriminator weights without a discriminator".into())),
            },
            "sgd_velocity" => state.seg_opt.velocity = fill_buffers(&seg_sizes, &values)?,
            "adam_m" => state.disc_opt.m = fill_buffers(&disc_sizes, &values)?,
            "adam_v" => state.disc_opt.v = fill_buffers(&disc_sizes, &values)?,
            "cooccurrence" => {
                if values.len() != state.cooc.m.len() {
                    return Err(Error::Checkpoint("co-occurrence size mismatch".into()));
                }
                state.cooc.m = ndarray::Array2::from_shape_vec(state.cooc.m.dim(), values)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
            other => return Err(Error::Checkpoint(format!("unknown section {other:?}"))),
        }
    }
    Ok(Checkpoint { config: cfg, state })
}
