//! Collaborative user and item embeddings that seed the denoiser, plus a
//! BPR matrix-factorization trainer for when no external tables exist.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionLog;
use crate::rng::{self, purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Loaded,
    FallbackMf,
}

/// User table `P` (`n_users x dim`) and item table `Q` (`n_items x dim`),
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingBundle {
    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, v: usize) -> &[f64] {
        &self.items[v * self.dim..(v + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("embedding width must be positive".into()));
        }
        if self.users.len() != self.n_users * self.dim {
            return Err(Error::Shape {
                what: "user table".into(),
                expected: format!("{}x{}", self.n_users, self.dim),
                found: format!("{} values", self.users.len()),
            });
        }
        if self.items.len() != self.n_items * self.dim {
            return Err(Error::Shape {
                what: "item table".into(),
                expected: format!("{}x{}", self.n_items, self.dim),
                found: format!("{} values", self.items.len()),
            });
        }
        if !self.users.iter().chain(&self.items).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(())
    }

    /// Checks the tables against a corpus id space.
    pub fn check_corpus(&self, n_users: usize, n_items: usize) -> Result<()> {
        if self.n_users != n_users || self.n_items != n_items {
            return Err(Error::Shape {
                what: "embedding tables".into(),
                expected: format!("n={n_users} m={n_items}"),
                found: format!("n={} m={}", self.n_users, self.n_items),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            dim: 64,
            epochs: 30,
            learning_rate: 0.01,
            regularization: 1e-4,
            init_std: 0.1,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// `-ln sigmoid(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        libm::log1p(libm::exp(-x))
    } else {
        -x + libm::log1p(libm::exp(x))
    }
}

/// Trains BPR matrix factorization with SGD: every epoch visits each train
/// event once in random order, draws a uniform non-interacted negative and
/// ascends `ln sigmoid(p_u . q_pos - p_u . q_neg)`. Returns the tables and
/// the mean loss of every epoch.
pub fn train_fallback_mf(train: &InteractionLog, cfg: &MfConfig) -> Result<(EmbeddingBundle, Vec<f64>)> {
    if cfg.dim == 0 {
        return Err(Error::InvalidArgument("embedding width must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train.validate()?;
    let (n, m, d) = (train.n_users, train.n_items, cfg.dim);
    let mut init = rng::stream(cfg.seed, rng::stream_id(purpose::MF, 0, 0));
    let mut gauss = || {
        let u1: f64 = 1.0 - init.gen::<f64>();
        let u2: f64 = init.gen();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2) * cfg.init_std
    };
    let mut p: Vec<f64> = (0..n * d).map(|_| gauss()).collect();
    let mut q: Vec<f64> = (0..m * d).map(|_| gauss()).collect();
    let seen = train.user_items();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let (lr, reg) = (cfg.learning_rate, cfg.regularization);
    let mut diff = vec![0.0; d];

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, rng::stream_id(purpose::MF, epoch as u64 + 1, 0));
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut count = 0usize;
        for &k in &order {
            let e = train.events[k];
            if seen[e.user].len() >= m {
                continue;
            }
            let neg = loop {
                let j = r.gen_range(0..m);
                if seen[e.user].binary_search(&j).is_err() {
                    break j;
                }
            };
            let (u, i, j) = (e.user, e.item, neg);
            let mut x = 0.0;
            for f in 0..d {
                diff[f] = q[i * d + f] - q[j * d + f];
                x += p[u * d + f] * diff[f];
            }
            total += neg_log_sigmoid(x);
            count += 1;
            let g = sigmoid(-x);
            for f in 0..d {
                let pu = p[u * d + f];
                p[u * d + f] += lr * (g * diff[f] - reg * pu);
                q[i * d + f] += lr * (g * pu - reg * q[i * d + f]);
                q[j * d + f] += lr * (-g * pu - reg * q[j * d + f]);
            }
        }
        losses.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    let bundle = EmbeddingBundle {
        n_users: n,
        n_items: m,
        dim: d,
        users: p,
        items: q,
        source: EmbeddingSource::FallbackMf,
    };
    if !bundle.users.iter().chain(&bundle.items).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("matrix factorization".to_string()));
    }
    Ok((bundle, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Event;
    use crate::autograd::dot;

    /// Two user groups, each interacting only with its own half of the items.
    fn block_corpus() -> InteractionLog {
        let mut events = Vec::new();
        let mut r = rng::stream(11, 0);
        for u in 0..40 {
            let base = if u < 20 { 0 } else { 20 };
            for k in 0..30 {
                events.push(Event {
                    user: u,
                    item: base + r.gen_range(0..20),
                    rating: 5.0,
                    timestamp: k,
                });
            }
        }
        InteractionLog { events, n_users: 40, n_items: 40 }
    }

    #[test]
    fn recovers_block_structure() {
        let cfg = MfConfig { dim: 16, epochs: 15, learning_rate: 0.02, ..MfConfig::default() };
        let (b, losses) = train_fallback_mf(&block_corpus(), &cfg).unwrap();
        let (mut inb, mut crossb, mut ni, mut nc) = (0.0, 0.0, 0, 0);
        for u in 0..40 {
            for v in 0..40 {
                let s = dot(b.user(u), b.item(v));
                if (u < 20) == (v < 20) {
                    inb += s;
                    ni += 1;
                } else {
                    crossb += s;
                    nc += 1;
                }
            }
        }
        assert!(inb / ni as f64 > crossb / nc as f64);
        // epoch-mean loss trends down, allowing 10% non-monotone epochs
        let ups = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups * 10 <= losses.len(), "{losses:?}");
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn deterministic_and_validated() {
        let cfg = MfConfig { dim: 4, epochs: 3, ..MfConfig::default() };
        let a = train_fallback_mf(&block_corpus(), &cfg).unwrap();
        let b = train_fallback_mf(&block_corpus(), &cfg).unwrap();
        assert_eq!(a, b);
        let bad = MfConfig { dim: 0, ..cfg };
        assert!(train_fallback_mf(&block_corpus(), &bad).is_err());
        assert!(train_fallback_mf(&InteractionLog::default(), &MfConfig::default()).is_err());
        a.0.validate().unwrap();
        assert!(a.0.check_corpus(40, 41).is_err());
    }
}
