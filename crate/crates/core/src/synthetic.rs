//! Generated block-structured corpora for overfitting and sanity checks.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Event, InteractionLog};
use crate::rng;
use crate::{Error, Result};

/// Users are split round-robin into `blocks` groups; each group owns a
/// disjoint slice of the catalog. Every user orders their block by
/// successive weighted draws without replacement, item `r` of the block
/// having weight `1 / (r + 1)^zipf`, and consumes it in that order. When
/// `per_user` exceeds the block width the earliest items are consumed more
/// than once (back to back); when it is smaller the order is cut short. Head
/// items therefore land early in a history and tail items late.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockCorpus {
    pub n_users: usize,
    pub n_items: usize,
    pub blocks: usize,
    pub per_user: usize,
    pub zipf: f64,
    pub seed: u64,
}

impl Default for BlockCorpus {
    fn default() -> Self {
        BlockCorpus {
            n_users: 50,
            n_items: 30,
            blocks: 2,
            per_user: 20,
            zipf: 1.5,
            seed: 0,
        }
    }
}

impl BlockCorpus {
    /// Block of `user`.
    pub fn block_of_user(&self, user: usize) -> usize {
        user % self.blocks
    }

    /// Item range owned by block `b`.
    pub fn block_items(&self, b: usize) -> core::ops::Range<usize> {
        let width = self.n_items / self.blocks;
        b * width..(b + 1) * width
    }

    pub fn generate(&self) -> Result<InteractionLog> {
        if self.blocks == 0 || self.n_items < self.blocks || self.n_users == 0 || self.per_user == 0 {
            return Err(Error::InvalidArgument("degenerate block corpus".into()));
        }
        let width = self.n_items / self.blocks;
        let weights: Vec<f64> = (0..width).map(|r| libm::pow(r as f64 + 1.0, -self.zipf)).collect();
        let mut r = rng::stream(self.seed, 0);
        let mut events = Vec::with_capacity(self.n_users * self.per_user);
        for user in 0..self.n_users {
            let base = self.block_items(self.block_of_user(user)).start;
            let mut left: Vec<usize> = (0..width).collect();
            let mut order = Vec::with_capacity(width);
            while !left.is_empty() {
                let mass: f64 = left.iter().map(|&i| weights[i]).sum();
                let mut u = r.gen::<f64>() * mass;
                let mut pick = left.len() - 1;
                for (j, &i) in left.iter().enumerate() {
                    if u < weights[i] {
                        pick = j;
                        break;
                    }
                    u -= weights[i];
                }
                order.push(left.remove(pick));
            }
            let mut reps = alloc::vec![0usize; width];
            for j in 0..self.per_user {
                reps[j % width] += 1;
            }
            let mut k = 0i64;
            for (&item, &n) in order.iter().zip(&reps) {
                for _ in 0..n {
                    events.push(Event {
                        user,
                        item: base + item,
                        rating: 1.0,
                        timestamp: k,
                    });
                    k += 1;
                }
            }
        }
        Ok(InteractionLog {
            events,
            n_users: self.n_users,
            n_items: self.n_items,
        })
    }
}
