//! Plain SGD with global-norm clipping and a plateau learning-rate schedule.

use crate::encoder::ModelParams;
use crate::math::sqrt;

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = sqrt(grads.squared_norm());
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `θ ← θ − lr·g`, leaving frozen embeddings untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) {
    let frozen = params.freeze_embeddings;
    let saved = frozen.then(|| params.embeddings.clone());
    params.add_scaled(grads, -lr);
    if let Some(e) = saved {
        params.embeddings = e;
    }
}

/// Multiplies the learning rate by `decay` after `patience` consecutive
/// epochs without improvement of a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    decay: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
    decays: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            decay,
            patience,
            best: None,
            stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's metric; returns true if it improved on the best.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.decay;
            self.decays += 1;
            self.stale = 0;
        }
        false
    }
}
