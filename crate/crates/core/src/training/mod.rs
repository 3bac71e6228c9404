//! The joint semi-supervised optimization loop.
//!
//! One iteration, in order:
//!
//! 1. forward the labeled batch;
//! 2. update the co-occurrence EMA from the labels and the latent prediction;
//! 3. labeled loss `L_ce + L_latent + lambda_adv * L_adv` with the discriminator frozen;
//! 4. forward the unlabeled batch;
//! 5. consistency loss through the current `P(l | c)`, once past warmup;
//! 6. unlabeled loss `L_cons + lambda_adv * L_adv`;
//! 7. one SGD step on `L_labeled + lambda_unlabeled * L_unlabeled`;
//! 8. one Adam step of the discriminator on detached predictions against one-hot labels;
//! 9. advance the iteration counter, which drives both learning-rate schedules.

mod ablation;
mod checkpoint;
mod run;

use ndarray::{concatenate, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ConsistencyVariant, LatentMode, RunConfig};
use crate::cooccurrence::{CoOccurrence, LatentProjection};
use crate::data::{augment_sample, AugParams, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    adv_gen_loss, ce_loss, composite_labeled, composite_total, composite_unlabeled,
    consistency_loss, disc_loss, latent_loss, semantic_to_latent, semantic_to_latent_backward,
    LossValue,
};
use crate::models::{Discriminator, SegGrads, SegNet};
use crate::nn::ConvParams;
use crate::optim::{disc_poly_lr, poly_lr, Adam, Sgd};
use crate::real::Real;
use crate::rng::stream;
use crate::types::{one_hot, Batch, LabelMap, ProbMap};

pub use ablation::{ablation_matrix, suite_configs, AblationRow, Suite};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use run::{evaluate_checkpoint, run_experiment, run_seed, ExperimentReport, Inputs, RunPaths, SeedOutcome};

const STREAM_INIT: u64 = 1;
const STREAM_DISC_INIT: u64 = 2;
const STREAM_SAMPLER: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

pub const ROLE_LABELED: u64 = 0;
pub const ROLE_UNLABELED: u64 = 1;

/// Epoch-wise shuffled batches; the order is a pure function of `(seed, stream, epoch)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seed: u64,
    pub stream: u64,
    pub epoch: u64,
    pub cursor: usize,
}

impl Sampler {
    pub fn new(ids: Vec<usize>, batch: usize, seed: u64, stream: u64) -> Self {
        Self {
            ids,
            batch,
            seed,
            stream,
            epoch: 0,
            cursor: 0,
        }
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.ids.clone();
        order.shuffle(&mut stream(self.seed, &[STREAM_SAMPLER, self.stream, epoch]));
        order
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        if self.ids.is_empty() {
            return out;
        }
        let mut order = self.epoch_order(self.epoch);
        while out.len() < self.batch {
            if self.cursor == order.len() {
                self.epoch += 1;
                self.cursor = 0;
                order = self.epoch_order(self.epoch);
            }
            out.push(order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub seg: SegNet<F>,
    pub disc: Option<Discriminator<F>>,
    pub seg_opt: Sgd<F>,
    pub disc_opt: Adam<F>,
    pub cooc: CoOccurrence,
    pub iter: usize,
    pub seed: u64,
    pub labeled: Sampler,
    pub unlabeled: Sampler,
}

impl<F: Real> TrainState<F> {
    pub fn new(
        cfg: &RunConfig,
        classes: usize,
        latent: usize,
        alpha: f64,
        labeled_ids: Vec<usize>,
        unlabeled_ids: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut init = stream(seed, &[STREAM_INIT]);
        let seg = SegNet::new(&cfg.model.widths, &cfg.model.dilations, classes, latent, &mut init)?;
        let disc = if cfg.terms.uses_discriminator() {
            let mut rng = stream(seed, &[STREAM_DISC_INIT]);
            Some(Discriminator::new(classes, cfg.model.disc_width, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            seg,
            disc,
            seg_opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            disc_opt: Adam::new(cfg.disc_betas.0, cfg.disc_betas.1),
            cooc: CoOccurrence::new(classes, latent, alpha)?,
            iter: 0,
            seed,
            labeled: Sampler::new(labeled_ids, cfg.batch_size, seed, ROLE_LABELED),
            unlabeled: Sampler::new(unlabeled_ids, cfg.batch_size, seed, ROLE_UNLABELED),
        })
    }

    /// Current `P(l | c)`, or `None` before the first EMA update.
    pub fn projection(&self) -> Option<LatentProjection> {
        self.cooc.project_distribution().ok()
    }
}

/// Labels of the latent branch outside the learned mode.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentSupervision {
    Learned,
    /// Class-to-supercategory table.
    Manual(Vec<usize>),
    Identity,
}

impl LatentSupervision {
    pub fn from_config(cfg: &RunConfig, manual: Option<&[usize]>) -> Result<Self> {
        match cfg.latent_mode {
            LatentMode::Learned => Ok(Self::Learned),
            LatentMode::Identity => Ok(Self::Identity),
            LatentMode::Manual => manual.map(|m| Self::Manual(m.to_vec())).ok_or_else(|| {
                Error::Config("latent_mode=manual requires a supercategory mapping".into())
            }),
        }
    }
}

fn valid_mask(labels: &LabelMap) -> Array3<bool> {
    labels.labels.mapv(|v| v != labels.ignore_index)
}

fn scaled<F: Real>(a: &Array4<F>, s: f64) -> Array4<F> {
    a * F::of(s)
}

fn add_into<F: Real>(acc: &mut Option<Array4<F>>, d: Array4<F>) {
    *acc = Some(match acc.take() {
        Some(a) => a + d,
        None => d,
    });
}

/// Generator-side adversarial loss of a probability map and its input gradient.
fn adversarial<F: Real>(
    disc: &Discriminator<F>,
    probs: &ProbMap<F>,
    mask: Option<&Array3<bool>>,
    cfg: &RunConfig,
) -> Result<(LossValue, Array4<F>)> {
    let fwd = disc.forward(&probs.values)?;
    let g = adv_gen_loss(&fwd.confidence, mask, cfg.reduction)?;
    let (_, dx) = disc.backward(&fwd, &g.grad, false, true);
    Ok((g.loss, dx.expect("input gradient requested")))
}

/// Loss and segmentation gradients of the unlabeled half of an iteration.
#[derive(Debug, Clone)]
pub struct UnlabeledPass<F> {
    pub loss: LossValue,
    /// Gradients already scaled by `lambda_unlabeled`.
    pub grads: SegGrads<F>,
    /// Predictions to be shown to the discriminator as fakes.
    pub fakes: Option<Array4<F>>,
}

/// Unlabeled part of an iteration. Labels attached to `batch` are never read.
pub fn unlabeled_pass<F: Real>(
    state: &TrainState<F>,
    batch: &Batch<F>,
    cfg: &RunConfig,
) -> Result<UnlabeledPass<F>> {
    if batch.labeled {
        return Err(Error::State("unlabeled pass given a labeled batch".into()));
    }
    let consistency = cfg.terms.consistency && state.iter >= cfg.warmup_iters;
    let adv = cfg.terms.adv_unlabeled;
    let mut loss = composite_unlabeled(&LossValue::zero("cons"), &LossValue::zero("adv"), cfg);
    if batch.is_empty() || !(consistency || adv) {
        return Ok(UnlabeledPass {
            loss,
            grads: state.seg.zero_grads(),
            fakes: None,
        });
    }
    let fwd = state.seg.forward(&batch.images, consistency)?;
    let mut d_sem = None;
    let mut d_lat = None;
    let mut cons_loss = LossValue::zero("cons");
    if consistency {
        let p = state.cooc.project_distribution()?;
        let s_l = fwd.latent.as_ref().expect("latent head ran");
        let s_lc = semantic_to_latent(&fwd.semantic, &p)?;
        let cg = consistency_loss(s_l, &s_lc, cfg.consistency_variant, cfg.reduction)?;
        add_into(&mut d_sem, semantic_to_latent_backward(&cg.d_projected, &p)?);
        d_lat = cg.d_latent;
        cons_loss = cg.loss;
    }
    let mut adv_loss = LossValue::zero("adv");
    if adv {
        let disc = state
            .disc
            .as_ref()
            .ok_or_else(|| Error::State("adversarial term without a discriminator".into()))?;
        let (l, dx) = adversarial(disc, &fwd.semantic, None, cfg)?;
        add_into(&mut d_sem, scaled(&dx, cfg.lambda_adv));
        adv_loss = l;
    }
    loss = composite_unlabeled(&cons_loss, &adv_loss, cfg);
    let lam = cfg.lambda_unlabeled;
    let d_sem = d_sem.map(|d| scaled(&d, lam));
    let d_lat = d_lat.map(|d| scaled(&d, lam));
    let grads = state.seg.backward(&fwd, d_sem.as_ref(), d_lat.as_ref())?;
    let fakes = (adv && cfg.disc_fakes_unlabeled).then(|| fwd.semantic.values.clone());
    Ok(UnlabeledPass { loss, grads, fakes })
}

fn ensure_finite(iter: usize, loss: &LossValue) -> Result<()> {
    if loss.value.is_finite() && loss.components.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite {
        iter,
        components: serde_json::to_string(&loss.components).unwrap_or_default(),
    })
}

fn sum_param_grads<F: Real>(mut a: Vec<ConvParams<F>>, b: Vec<ConvParams<F>>) -> Vec<ConvParams<F>> {
    for (x, y) in a.iter_mut().zip(&b) {
        x.add_assign(y);
    }
    a
}

/// One training iteration; returns the loss components of this iteration.
pub fn train_iteration<F: Real>(
    state: &mut TrainState<F>,
    labeled: &Batch<F>,
    unlabeled: Option<&Batch<F>>,
    cfg: &RunConfig,
    supervision: &LatentSupervision,
) -> Result<LossValue> {
    let labels = labeled
        .supervision()
        .ok_or_else(|| Error::State("labeled pass needs a labeled batch".into()))?;
    let classes = state.seg.semantic_count();
    let red = cfg.reduction;
    let use_latent = cfg.terms.uses_latent_branch();

    // (a) labeled forward, (b) co-occurrence update
    let fwd = state.seg.forward(&labeled.images, use_latent)?;
    let y = one_hot::<F>(labels, classes)?;
    if let Some(s_l) = &fwd.latent {
        state.cooc = state.cooc.ema_update(&y, s_l)?;
    }

    // (c) labeled loss with the discriminator frozen
    let ce = ce_loss(&fwd.semantic, labels, red)?;
    let mut d_sem = Some(ce.grad);
    let mut d_lat = None;
    let mut lat_loss = LossValue::zero("latent");
    if cfg.terms.latent {
        let s_l = fwd.latent.as_ref().expect("latent head ran");
        let g = match supervision {
            LatentSupervision::Learned => latent_loss(&y, s_l)?,
            LatentSupervision::Manual(table) => ce_loss(s_l, &labels.remap(table), red)?,
            LatentSupervision::Identity => ce_loss(s_l, labels, red)?,
        };
        lat_loss = LossValue::scalar("latent", g.loss.value);
        d_lat = Some(g.grad);
    }
    let mask = valid_mask(labels);
    let mut adv_loss = LossValue::zero("adv");
    if cfg.terms.adv_labeled {
        let disc = state
            .disc
            .as_ref()
            .ok_or_else(|| Error::State("adversarial term without a discriminator".into()))?;
        let (l, dx) = adversarial(disc, &fwd.semantic, Some(&mask), cfg)?;
        add_into(&mut d_sem, scaled(&dx, cfg.lambda_adv));
        adv_loss = l;
        // With identity latent classes both branches predict semantic maps and both are judged.
        let symmetric = *supervision == LatentSupervision::Identity
            && cfg.consistency_variant == ConsistencyVariant::SymmetricKl;
        if let (true, Some(s_l)) = (symmetric, fwd.latent.as_ref()) {
            let (l2, dx2) = adversarial(disc, s_l, Some(&mask), cfg)?;
            add_into(&mut d_lat, scaled(&dx2, cfg.lambda_adv));
            adv_loss.value += l2.value;
        }
    }
    let labeled_loss = composite_labeled(&ce.loss, &lat_loss, &adv_loss, cfg);

    // (d)-(f) unlabeled pass
    let unl = match unlabeled {
        Some(b) => unlabeled_pass(state, b, cfg)?,
        None => UnlabeledPass {
            loss: composite_unlabeled(&LossValue::zero("cons"), &LossValue::zero("adv"), cfg),
            grads: state.seg.zero_grads(),
            fakes: None,
        },
    };
    let mut total = composite_total(&labeled_loss, &unl.loss, cfg);
    ensure_finite(state.iter, &total)?;

    // (g) segmentation step
    let mut grads = state.seg.backward(&fwd, d_sem.as_ref(), d_lat.as_ref())?;
    grads.add_assign(&unl.grads);
    let lr = poly_lr(state.iter, cfg);
    state.seg_opt.step(state.seg.params_mut(), grads.params(), lr);
    total.components.insert("lr".into(), lr);

    // (h) discriminator step on detached predictions
    if let Some(disc) = state.disc.as_mut() {
        let (fakes, fake_mask) = match &unl.fakes {
            Some(u) => {
                let (n, h, w, _) = u.dim();
                let all = Array3::from_elem((n, h, w), true);
                (
                    concatenate![Axis(0), fwd.semantic.values.view(), u.view()],
                    concatenate![Axis(0), mask.view(), all.view()],
                )
            }
            None => (fwd.semantic.values.clone(), mask.clone()),
        };
        let on_fake = disc.forward(&fakes)?;
        let on_real = disc.forward(&y.values)?;
        let dl = disc_loss(&on_fake.confidence, &on_real.confidence, Some(&fake_mask), Some(&mask), red)?;
        ensure_finite(state.iter, &dl.loss)?;
        let g_fake = disc.backward(&on_fake, &dl.d_fake, true, false).0.expect("param grads");
        let g_real = disc.backward(&on_real, &dl.d_real, true, false).0.expect("param grads");
        let g = sum_param_grads(g_fake, g_real);
        let dlr = disc_poly_lr(state.iter, cfg);
        state.disc_opt.step(disc.params_mut(), g.iter().collect(), dlr);
        total.components.extend(dl.loss.components);
    }

    // (i)
    state.iter += 1;
    Ok(total)
}

/// Builds an augmented batch of `ids`. Augmentation draws depend on `(seed, iter, role, slot)`.
#[allow(clippy::too_many_arguments)]
pub fn make_batch<F: Real>(
    data: &Dataset,
    ids: &[usize],
    cfg: &RunConfig,
    seed: u64,
    iter: usize,
    role: u64,
    mean: [f64; 3],
    with_labels: bool,
) -> Result<Batch<F>> {
    let crop = cfg.crop_size;
    let ignore = data.manifest.ignore_index;
    let mut images = Array4::<F>::zeros((ids.len(), crop, crop, 3));
    let mut labels = Array3::<u8>::from_elem((ids.len(), crop, crop), ignore);
    for (slot, &i) in ids.iter().enumerate() {
        let img = &data.images[i];
        let (h, w, _) = img.dim();
        let params = if cfg.augment {
            let mut rng = stream(seed, &[STREAM_AUGMENT, iter as u64, role, slot as u64]);
            AugParams::sample(&mut rng, (h, w), crop, cfg.scale_range)
        } else {
            AugParams {
                crop_y: h.saturating_sub(crop) / 2,
                crop_x: w.saturating_sub(crop) / 2,
                ..AugParams::identity()
            }
        };
        let label = if with_labels {
            Some(data.labels[i].as_ref().ok_or_else(|| {
                Error::State(format!("image {} has no label", data.stems[i]))
            })?)
        } else {
            None
        };
        let (aug_img, aug_lbl) = augment_sample(img, label, &params, crop, mean, ignore);
        images
            .index_axis_mut(Axis(0), slot)
            .assign(&aug_img.mapv(F::of));
        if let Some(l) = aug_lbl {
            labels.index_axis_mut(Axis(0), slot).assign(&l);
        }
    }
    if with_labels {
        Batch::labeled(
            images,
            LabelMap {
                labels,
                ignore_index: ignore,
            },
        )
    } else {
        Ok(Batch::unlabeled(images))
    }
}

/// Training driver bound to a dataset: samples batches and runs iterations.
#[derive(Debug, Clone)]
pub struct Trainer<'a, F> {
    pub cfg: RunConfig,
    pub data: &'a Dataset,
    pub state: TrainState<F>,
    pub supervision: LatentSupervision,
    pub mean: [f64; 3],
}

impl<'a, F: Real> Trainer<'a, F> {
    /// Fresh run: splits the labeled images by `seed` and initializes all parameters.
    pub fn new(cfg: &RunConfig, data: &'a Dataset, manual: Option<&[usize]>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let supervision = LatentSupervision::from_config(cfg, manual)?;
        let classes = data.manifest.class_count();
        let groups = manual.map(|m| m.iter().max().map_or(0, |g| g + 1));
        let latent = cfg.latent_count(classes, groups)?;
        let split = crate::data::split_semi(&data.labeled_ids(), cfg.labeled_fraction, seed)?;
        let mut unlabeled = split.unlabeled_ids.clone();
        unlabeled.extend(data.unlabeled_only_ids());
        unlabeled.sort_unstable();
        let alpha = match cfg.ema_alpha {
            crate::config::EmaAlpha::Fixed(a) => a,
            crate::config::EmaAlpha::Auto => {
                crate::cooccurrence::default_alpha(cfg.batch_size, split.labeled_ids.len())?
            }
        };
        let state = TrainState::new(cfg, classes, latent, alpha, split.labeled_ids, unlabeled, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            state,
            supervision,
            mean: data.mean_pixel(),
        })
    }

    pub fn from_state(
        cfg: &RunConfig,
        data: &'a Dataset,
        manual: Option<&[usize]>,
        state: TrainState<F>,
    ) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            data,
            supervision: LatentSupervision::from_config(cfg, manual)?,
            mean: data.mean_pixel(),
            state,
        })
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.cfg.terms.uses_unlabeled() && !self.state.unlabeled.ids.is_empty()
    }

    /// Samples this iteration's batches without advancing any state.
    pub fn peek_batches(&self) -> Result<(Batch<F>, Option<Batch<F>>)> {
        let mut lab = self.state.labeled.clone();
        let mut unl = self.state.unlabeled.clone();
        self.batches(&mut lab, &mut unl)
    }

    fn batches(&self, lab: &mut Sampler, unl: &mut Sampler) -> Result<(Batch<F>, Option<Batch<F>>)> {
        let iter = self.state.iter;
        let seed = self.state.seed;
        let lb = make_batch(self.data, &lab.next_batch(), &self.cfg, seed, iter, ROLE_LABELED, self.mean, true)?;
        let ub = if self.uses_unlabeled() {
            let ids = unl.next_batch();
            Some(make_batch(self.data, &ids, &self.cfg, seed, iter, ROLE_UNLABELED, self.mean, false)?)
        } else {
            None
        };
        Ok((lb, ub))
    }

    pub fn step(&mut self) -> Result<LossValue> {
        let mut lab = self.state.labeled.clone();
        let mut unl = self.state.unlabeled.clone();
        let (lb, ub) = self.batches(&mut lab, &mut unl)?;
        self.state.labeled = lab;
        self.state.unlabeled = unl;
        train_iteration(&mut self.state, &lb, ub.as_ref(), &self.cfg, &self.supervision)
    }

    pub fn finished(&self) -> bool {
        self.state.iter >= self.cfg.max_iters
    }
}
