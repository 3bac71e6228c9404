//! Optimizers and the polynomial learning-rate schedule.

use crate::config::RunConfig;
use crate::nn::ConvParams;
use crate::real::Real;

/// `base * (1 - iter / max_iters)^power`, zero at and past the end.
pub fn poly_decay(base: f64, iter: usize, max_iters: usize, power: f64) -> f64 {
    if max_iters == 0 || iter >= max_iters {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iters as f64).powf(power)
}

/// Segmentation learning rate at `iter`.
pub fn poly_lr(iter: usize, cfg: &RunConfig) -> f64 {
    poly_decay(cfg.lr0, iter, cfg.max_iters, cfg.lr_power)
}

/// Discriminator learning rate at `iter`; same decay as the segmentation network.
pub fn disc_poly_lr(iter: usize, cfg: &RunConfig) -> f64 {
    poly_decay(cfg.disc_lr, iter, cfg.max_iters, cfg.lr_power)
}

fn flat_slices<'a, F: Real>(ps: &'a [&'a ConvParams<F>]) -> Vec<&'a [F]> {
    ps.iter().flat_map(|p| p.slices()).collect()
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut ConvParams<F>>, grads: Vec<&ConvParams<F>>, lr: f64) {
        let grads = flat_slices(&grads);
        let mut slots: Vec<&mut [F]> = params.into_iter().flat_map(|p| p.slices_mut()).collect();
        assert_eq!(slots.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![F::zero(); g.len()]).collect();
        }
        let (mu, wd, lr) = (F::of(self.momentum), F::of(self.weight_decay), F::of(lr));
        for ((p, g), v) in slots.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut ConvParams<F>>, grads: Vec<&ConvParams<F>>, lr: f64) {
        let grads = flat_slices(&grads);
        let mut slots: Vec<&mut [F]> = params.into_iter().flat_map(|p| p.slices_mut()).collect();
        assert_eq!(slots.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![F::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let step = F::of(lr / c1);
        let c2 = F::of(c2);
        let eps = F::of(self.eps);
        for (((p, g), m), v) in slots.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
