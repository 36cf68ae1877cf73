//! Adam and the EMA target update.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| alloc::vec![0.0; p.data.len()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.data.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape {
                what: "optimizer state".into(),
                expected: alloc::format!("{} tensors", self.m.len()),
                found: alloc::format!("{} params, {} grads", params.len(), grads.data.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.data).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.learning_rate * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

/// `target <- mu * target + (1 - mu) * online`, elementwise.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, mu: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::Shape {
            what: "EMA parameters".into(),
            expected: "matching layout".into(),
            found: "different layout".into(),
        });
    }
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (a, &b) in t.data.iter_mut().zip(&o.data) {
            *a = mu * *a + (1.0 - mu) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", 1, vals.len(), vals.to_vec());
        s
    }

    #[test]
    fn ema_examples() {
        let online = store(&[0.0, 2.0]);
        let mut t = store(&[1.0, 1.0]);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.iter().next().unwrap().data, vec![1.0, 1.0]);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.iter().next().unwrap().data, vec![0.0, 2.0]);
        let mut t = store(&[1.0]);
        ema_update(&mut t, &store(&[0.0]), 0.9).unwrap();
        assert!((t.iter().next().unwrap().data[0] - 0.9).abs() < 1e-15);
        assert!(ema_update(&mut t, &store(&[0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = store(&[3.0, -2.0]);
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let x = p.iter().next().unwrap().data.clone();
            let g = Grads {
                data: vec![x.iter().map(|v| 2.0 * v).collect()],
            };
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().next().unwrap().data.iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps_taken(), 500);
    }

    proptest! {
        #[test]
        fn ema_stays_in_box(start in prop::collection::vec(-1.0f64..1.0, 4),
                            path in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..20),
                            mu in 0.0f64..1.0) {
            let mut t = store(&start);
            for step in &path {
                ema_update(&mut t, &store(step), mu).unwrap();
            }
            for v in &t.iter().next().unwrap().data {
                prop_assert!((-1.0..=1.0).contains(v));
            }
        }
    }
}
