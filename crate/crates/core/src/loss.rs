//! Consistency, denoising and contrastive objectives evaluated on plain
//! values. The differentiable versions used for training are assembled on
//! the autograd tape in [`crate::training`].

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{dot, log_sum_exp};
use crate::corpus::Token;
use crate::denoiser::{Denoiser, PositionDistribution};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Time-dependent weight of the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Constant(f64),
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Constant(1.0)
    }
}

impl Weighting {
    pub fn at(&self, _t: f64) -> f64 {
        match *self {
            Weighting::Constant(c) => c,
        }
    }
}

/// `KL(p || q)` with both sides floored.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (libm::log(pi.max(PROB_FLOOR)) - libm::log(qi.max(PROB_FLOOR))))
        .sum::<f64>()
        .max(0.0)
}

/// Mean over the target's positions of `KL(target || learner)`, scaled by
/// `gamma(t_n)`. Target positions the learner does not cover are skipped.
pub fn consistency_loss(learner: &PositionDistribution, target: &PositionDistribution, t_n: f64, gamma: Weighting) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, &pos) in target.positions.iter().enumerate() {
        if let Some(j) = learner.index_of(pos) {
            total += kl_divergence(target.row(k), learner.row(j));
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    gamma.at(t_n) * total / count as f64
}

/// Mean negative log-likelihood of the source items over non-padded
/// positions, whether or not they were masked in the input.
pub fn diffusion_loss(learner: &PositionDistribution, x0: &[Token]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, &pos) in learner.positions.iter().enumerate() {
        if let Some(v) = x0[pos].item() {
            total -= libm::log(learner.row(k)[v].max(PROB_FLOOR));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// InfoNCE with cosine similarity: `-ln(s+ / (s+ + sum s-))` where
/// `s = exp(cos(anchor, .) / tau)`.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine(anchor, positive) / tau);
    logits.extend(negatives.iter().map(|n| cosine(anchor, n) / tau));
    log_sum_exp(&logits) - logits[0]
}

/// Mean of the item-table rows of `items`.
pub fn mean_item_embedding(model: &Denoiser, items: &[usize]) -> Option<Vec<f64>> {
    if items.is_empty() {
        return None;
    }
    let d = model.config.dim;
    let mut e = alloc::vec![0.0; d];
    for &v in items {
        for (acc, x) in e.iter_mut().zip(model.item_row(v)) {
            *acc += x;
        }
    }
    for x in &mut e {
        *x /= items.len() as f64;
    }
    Some(e)
}

/// Contrastive guidance: the mean item embedding of the generated items is
/// pulled towards the user's collaborative embedding and away from the
/// negatives. An empty generated set contributes nothing.
pub fn contrastive_loss(model: &Denoiser, generated: &[usize], user: usize, negatives: &[usize], tau: f64) -> Option<f64> {
    let Some(anchor) = mean_item_embedding(model, generated) else {
        log::warn!("user {user}: no generated items; contrastive term skipped");
        return None;
    };
    let negs: Vec<&[f64]> = negatives.iter().map(|&v| model.item_row(v)).collect();
    Some(info_nce(&anchor, model.user_row(user), &negs, tau))
}
