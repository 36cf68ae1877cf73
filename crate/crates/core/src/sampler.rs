//! Multistep generation, the top-K head and forward-process traces.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, UserSequence};
use crate::denoiser::Denoiser;
use crate::loss::cosine;
use crate::autograd::dot;
use crate::metrics::spearman;
use crate::rng::{self, purpose};
use crate::schedule::{DiffusionState, NoiseSchedule};
use crate::training::TrainingSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    /// Number of denoiser evaluations `N`.
    pub steps: usize,
    pub horizon: f64,
    pub score: ScoreFunction,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            steps: 30,
            horizon: 60.0,
            score: ScoreFunction::Cosine,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn new(steps: usize, horizon: f64) -> Self {
        SamplingPlan {
            steps,
            horizon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    /// `[delta_N, ..., delta_1]` with `delta_n = T n / N`.
    pub fn step_grid(&self) -> Vec<f64> {
        let n = self.steps as f64;
        (1..=self.steps).rev().map(|k| self.horizon * k as f64 / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub state: DiffusionState,
    pub denoiser_calls: usize,
}

impl Generated {
    /// Decoded item ids; any residual `MASK` positions are dropped.
    pub fn items(&self) -> Vec<usize> {
        self.state.tokens.iter().filter_map(|t| t.item()).collect()
    }
}

/// Generates a sequence for `seq.user`: start fully masked at `T`, decode,
/// then for each remaining grid time re-noise the decode through the
/// forward kernel and decode again. `deviations` belong to `seq`; items of
/// the decode that do not occur in `seq` are re-noised with deviation 0.
pub fn sample<R: Rng + ?Sized>(
    model: &Denoiser,
    seq: &UserSequence,
    deviations: &[f64],
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Generated> {
    plan.validate()?;
    let lookup: BTreeMap<usize, f64> = seq
        .items
        .iter()
        .zip(deviations)
        .filter_map(|(t, &d)| t.item().map(|v| (v, d)))
        .collect();
    let grid = plan.step_grid();
    let start = DiffusionState::absorbed(seq, grid[0]);
    let (_, decoded) = model.consistency_apply(&start, seq.user, schedule.epsilon)?;
    let mut x = DiffusionState {
        tokens: decoded,
        t: 0.0,
    };
    let mut calls = 1;
    for &delta in &grid[1..] {
        let devs: Vec<f64> = x
            .tokens
            .iter()
            .map(|t| t.item().and_then(|v| lookup.get(&v).copied()).unwrap_or(0.0))
            .collect();
        let noised = schedule.forward_sample(&x.tokens, delta, &devs, rng);
        let (_, decoded) = model.consistency_apply(&noised, seq.user, schedule.epsilon)?;
        x.tokens = decoded;
        calls += 1;
    }
    Ok(Generated {
        state: x,
        denoiser_calls: calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Ranks items by `scores` (higher first, lower id on ties), skipping the
/// sorted `exclusions`, and keeps the first `k`.
pub fn top_k(user: usize, scores: &[f64], k: usize, exclusions: &[usize]) -> Recommendation {
    let mut order: Vec<usize> = (0..scores.len()).filter(|v| exclusions.binary_search(v).is_err()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Recommendation {
        user,
        scores: order.iter().map(|&v| scores[v]).collect(),
        items: order,
    }
}

/// Scores every item against the mean item-table embedding of `generated`
/// (or the user's collaborative embedding when nothing was generated) and
/// returns the top `k` outside the sorted `exclusions`.
pub fn recommend(
    model: &Denoiser,
    user: usize,
    generated: &[usize],
    k: usize,
    exclusions: &[usize],
    score: ScoreFunction,
) -> Result<Recommendation> {
    if user >= model.n_users {
        return Err(Error::UnknownUser(user));
    }
    let query = match crate::loss::mean_item_embedding(model, generated) {
        Some(e) => e,
        None => {
            log::warn!("user {user}: empty generated set; ranking with the collaborative user embedding");
            model.user_row(user).to_vec()
        }
    };
    let scores: Vec<f64> = (0..model.n_items)
        .map(|v| match score {
            ScoreFunction::Cosine => cosine(&query, model.item_row(v)),
            ScoreFunction::Dot => dot(&query, model.item_row(v)),
        })
        .collect();
    Ok(top_k(user, &scores, k, exclusions))
}

/// One row of a forward-process trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub position: usize,
    pub item_id: usize,
    /// Popularity deviation of the item within the sequence.
    pub deviation: f64,
    pub beta_bar: f64,
    pub masked: bool,
}

/// Simulates one forward trajectory of `seq` observed at `steps` evenly
/// spaced times over `[0, T]`. Each position draws one uniform and is
/// masked from the first time its masking probability exceeds it, so the
/// path is monotone like the absorbing chain itself. Padded positions are
/// omitted.
pub fn trace_forward<R: Rng + ?Sized>(
    seq: &UserSequence,
    deviations: &[f64],
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<TraceRow>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("trace needs at least one time".into()));
    }
    if seq.items.iter().all(|t| t.is_pad()) {
        return Err(Error::AllPadding);
    }
    let draws: Vec<f64> = seq.items.iter().map(|_| rng.gen::<f64>()).collect();
    let mut peak = vec![0.0f64; seq.items.len()];
    let times: Vec<f64> = if steps == 1 {
        vec![schedule.horizon]
    } else {
        (0..steps).map(|j| schedule.horizon * j as f64 / (steps - 1) as f64).collect()
    };
    let mut rows = Vec::new();
    for &t in &times {
        for (i, tok) in seq.items.iter().enumerate() {
            let v = match *tok {
                Token::Item(v) => v,
                _ => continue,
            };
            let dev = deviations[i];
            peak[i] = peak[i].max(schedule.mask_probability(t, dev));
            rows.push(TraceRow {
                t,
                position: i,
                item_id: v,
                deviation: dev,
                beta_bar: schedule.cumulative_beta(t, dev),
                masked: draws[i] < peak[i],
            });
        }
    }
    Ok(rows)
}

/// First masked time of every position present in a trace, keyed by
/// position.
pub fn masking_times(rows: &[TraceRow]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for r in rows {
        if r.masked {
            out.entry(r.position).or_insert(r.t);
        }
    }
    out
}

/// Spearman correlation between popularity deviation and mean first-masked
/// time over `trajectories` forward traces spread round-robin across the
/// training sequences. Each observed (sequence, position) pair is one
/// sample.
pub fn masking_time_correlation(
    set: &TrainingSet,
    schedule: &NoiseSchedule,
    trajectories: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for k in 0..trajectories {
        let idx = k % set.len();
        let mut r = rng::stream(seed, rng::stream_id(purpose::TRACE, idx as u64, k as u64));
        let rows = trace_forward(&set.sequences[idx], &set.deviations[idx], schedule, steps, &mut r)?;
        for (pos, t) in masking_times(&rows) {
            let e = sums.entry((idx, pos)).or_insert((0.0, 0));
            e.0 += t;
            e.1 += 1;
        }
    }
    let (devs, times): (Vec<f64>, Vec<f64>) = sums
        .iter()
        .map(|(&(idx, pos), &(s, n))| (set.deviations[idx][pos], s / n as f64))
        .unzip();
    Ok(spearman(&devs, &times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny;

    fn seq(user: usize, items: &[Option<usize>]) -> UserSequence {
        UserSequence {
            user,
            items: items.iter().map(|o| o.map_or(Token::Pad, Token::Item)).collect(),
        }
    }

    #[test]
    fn grid_shape() {
        let p = SamplingPlan::new(3, 60.0);
        assert_eq!(p.step_grid(), vec![60.0, 40.0, 20.0]);
        assert_eq!(SamplingPlan::new(1, 60.0).step_grid(), vec![60.0]);
        assert!(SamplingPlan::new(0, 60.0).validate().is_err());
    }

    #[test]
    fn call_counts_and_padding() {
        let model = tiny(3, 10, 8, 5, 7);
        let s = seq(1, &[None, None, Some(2), Some(5), Some(2)]);
        let devs = vec![0.0, 0.0, 0.1, -0.2, 0.1];
        let schedule = NoiseSchedule::new(10.0);
        for n in [1, 3, 7] {
            let mut r = rng::stream(0, n as u64);
            let g = sample(&model, &s, &devs, &SamplingPlan::new(n, 10.0), &schedule, &mut r).unwrap();
            assert_eq!(g.denoiser_calls, n);
            assert_eq!(g.state.tokens.len(), 5);
            assert!(g.state.tokens[..2].iter().all(|t| t.is_pad()));
            assert!(g.state.tokens[2..].iter().all(|t| t.item().is_some()));
            let mut r2 = rng::stream(0, n as u64);
            let again = sample(&model, &s, &devs, &SamplingPlan::new(n, 10.0), &schedule, &mut r2).unwrap();
            assert_eq!(g, again);
        }
    }

    #[test]
    fn top_k_examples() {
        let r = top_k(0, &[0.9, 0.1, 0.5, 0.3], 2, &[]);
        assert_eq!(r.items, vec![0, 2]);
        assert_eq!(r.scores, vec![0.9, 0.5]);
        let r = top_k(0, &[0.9, 0.1, 0.5, 0.3], 2, &[0]);
        assert_eq!(r.items, vec![2, 3]);
        let r = top_k(0, &[0.5, 0.5, 0.5], 5, &[1]);
        assert_eq!(r.items, vec![0, 2]);
    }

    #[test]
    fn single_generated_item_is_its_own_query() {
        let model = tiny(2, 9, 8, 4, 3);
        let r = recommend(&model, 0, &[4], 9, &[], ScoreFunction::Cosine).unwrap();
        assert_eq!(r.items[0], 4);
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
        let r = recommend(&model, 0, &[4], 9, &[4], ScoreFunction::Dot).unwrap();
        assert!(!r.items.contains(&4));
        assert_eq!(r.items.len(), 8);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        // empty generated set falls back to the user embedding
        let fallback = recommend(&model, 1, &[], 3, &[], ScoreFunction::Dot).unwrap();
        let scores: Vec<f64> = (0..9).map(|v| dot(model.user_row(1), model.item_row(v))).collect();
        assert_eq!(fallback, top_k(1, &scores, 3, &[]));
    }

    #[test]
    fn trace_is_monotone_and_terminal() {
        let s = seq(0, &[None, Some(1), Some(2), Some(3)]);
        let devs = vec![0.0, 0.4, -0.1, -0.3];
        let schedule = NoiseSchedule::new(60.0);
        let mut r = rng::stream(5, 0);
        for _ in 0..50 {
            let rows = trace_forward(&s, &devs, &schedule, 61, &mut r).unwrap();
            assert_eq!(rows.len(), 61 * 3);
            assert!(rows[rows.len() - 3..].iter().all(|r| r.masked));
            assert!(rows[..3].iter().all(|r| !r.masked));
            for p in 1..4 {
                let path: Vec<bool> = rows.iter().filter(|r| r.position == p).map(|r| r.masked).collect();
                assert!(path.windows(2).all(|w| !w[0] || w[1]));
            }
            assert_eq!(masking_times(&rows).len(), 3);
        }
    }
}
