//! Full-ranking metrics, reference rankers and model evaluation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionLog;
use crate::denoiser::Denoiser;
use crate::rng::{self, purpose};
use crate::sampler::{recommend, sample, Recommendation, SamplingPlan};
use crate::schedule::NoiseSchedule;
use crate::training::TrainingSet;
use crate::Result;

/// `|top-k ∩ relevant| / |relevant|`; `None` when nothing is relevant.
/// `relevant` must be sorted.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|v| relevant.binary_search(v).is_ok()).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with the ideal DCG over `min(k, |relevant|)` hits.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let gain = |r: usize| 1.0 / libm::log2(r as f64 + 1.0);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, v)| relevant.binary_search(v).is_ok())
        .map(|(i, _)| gain(i + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(gain).sum();
    Some(dcg / idcg)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / libm::sqrt(sxx * syy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users_evaluated: usize,
    pub seeds: Vec<u64>,
    pub mean_over_runs: bool,
}

impl MetricsReport {
    /// Averages reports of independent runs key by key.
    pub fn mean(runs: &[MetricsReport]) -> MetricsReport {
        let n = runs.len() as f64;
        let mut recall = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for r in runs {
            for (k, v) in &r.recall {
                *recall.entry(*k).or_insert(0.0) += v / n;
            }
            for (k, v) in &r.ndcg {
                *ndcg.entry(*k).or_insert(0.0) += v / n;
            }
        }
        MetricsReport {
            recall,
            ndcg,
            n_users_evaluated: runs.first().map_or(0, |r| r.n_users_evaluated),
            seeds: runs.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
            mean_over_runs: runs.len() > 1,
        }
    }
}

/// Scores the ranking produced for every user with at least one relevant
/// item. `relevant[u]` must be sorted; users are visited in id order and
/// sums are divided once at the end.
pub fn evaluate_ranker<F>(relevant: &[Vec<usize>], ks: &[usize], mut ranker: F) -> Result<MetricsReport>
where
    F: FnMut(usize, usize) -> Result<Option<Vec<usize>>>,
{
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut rs = alloc::vec![0.0; ks.len()];
    let mut ns = alloc::vec![0.0; ks.len()];
    let mut users = 0usize;
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let Some(ranked) = ranker(u, kmax)? else { continue };
        users += 1;
        for (j, &k) in ks.iter().enumerate() {
            rs[j] += recall_at_k(&ranked, rel, k).unwrap_or(0.0);
            ns[j] += ndcg_at_k(&ranked, rel, k).unwrap_or(0.0);
        }
    }
    let d = users.max(1) as f64;
    Ok(MetricsReport {
        recall: ks.iter().zip(&rs).map(|(&k, &s)| (k, s / d)).collect(),
        ndcg: ks.iter().zip(&ns).map(|(&k, &s)| (k, s / d)).collect(),
        n_users_evaluated: users,
        seeds: Vec::new(),
        mean_over_runs: false,
    })
}

/// Ranks by training interaction count (ties by lower id) regardless of
/// the user, skipping the user's training items.
#[derive(Debug, Clone, PartialEq)]
pub struct MostPopular {
    order: Vec<usize>,
}

impl MostPopular {
    pub fn fit(train: &InteractionLog) -> Self {
        let counts = train.item_counts();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        MostPopular { order }
    }

    pub fn rank(&self, k: usize, exclusions: &[usize]) -> Vec<usize> {
        self.order
            .iter()
            .copied()
            .filter(|v| exclusions.binary_search(v).is_err())
            .take(k)
            .collect()
    }
}

/// A uniformly random ranking of the non-excluded items.
pub fn random_ranking(n_items: usize, k: usize, exclusions: &[usize], seed: u64, user: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..n_items).filter(|v| exclusions.binary_search(v).is_err()).collect();
    items.shuffle(&mut rng::stream(seed, rng::stream_id(purpose::RANDOM_RANKER, 0, user as u64)));
    items.truncate(k);
    items
}

/// Generates and ranks for one training sequence; returns the
/// recommendation and the number of denoiser calls spent.
pub fn recommend_sequence(
    model: &Denoiser,
    set: &TrainingSet,
    idx: usize,
    schedule: &NoiseSchedule,
    plan: &SamplingPlan,
    k: usize,
) -> Result<(Recommendation, usize)> {
    let seq = &set.sequences[idx];
    let mut r = rng::stream(plan.seed, rng::stream_id(purpose::SAMPLE, 0, seq.user as u64));
    let g = sample(model, seq, &set.deviations[idx], plan, schedule, &mut r)?;
    let rec = recommend(model, seq.user, &g.items(), k, &set.interacted[seq.user], plan.score)?;
    Ok((rec, g.denoiser_calls))
}

/// Full-ranking evaluation of the model against `relevant` (sorted items
/// per user id), one run per seed; several seeds are averaged.
pub fn evaluate(
    model: &Denoiser,
    set: &TrainingSet,
    relevant: &[Vec<usize>],
    schedule: &NoiseSchedule,
    plan: &SamplingPlan,
    ks: &[usize],
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut by_user = alloc::vec![None; model.n_users];
    for (idx, s) in set.sequences.iter().enumerate() {
        by_user[s.user] = Some(idx);
    }
    let seeds: Vec<u64> = if seeds.is_empty() { alloc::vec![plan.seed] } else { seeds.to_vec() };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let p = SamplingPlan { seed, ..plan.clone() };
        let mut report = evaluate_ranker(relevant, ks, |u, k| match by_user.get(u).copied().flatten() {
            Some(idx) => Ok(Some(recommend_sequence(model, set, idx, schedule, &p, k)?.0.items)),
            None => Ok(None),
        })?;
        report.seeds = alloc::vec![seed];
        runs.push(report);
    }
    Ok(if runs.len() == 1 { runs.pop().unwrap() } else { MetricsReport::mean(&runs) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[3, 1, 2], &[3], 5), Some(1.0));
        assert_eq!(recall_at_k(&[7, 1, 2], &[1, 9], 5), Some(0.5));
        assert_eq!(recall_at_k(&[7, 8], &[1], 5), Some(0.0));
        assert_eq!(recall_at_k(&[7, 8], &[], 5), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[3, 1], &[3], 5), Some(1.0));
        assert_abs_diff_eq!(ndcg_at_k(&[1, 3], &[3], 5).unwrap(), 1.0 / libm::log2(3.0), epsilon = 1e-12);
        assert_abs_diff_eq!(ndcg_at_k(&[1, 3], &[3], 5).unwrap(), 0.6309, epsilon = 1e-4);
        assert_eq!(ndcg_at_k(&[2, 1, 0, 9], &[0, 1, 2], 10), Some(1.0));
    }

    #[test]
    fn spearman_examples() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0, epsilon = 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
        // ties get average ranks: x ranks [1.5, 1.5, 3]
        let expect = 0.8660254037844387;
        assert_abs_diff_eq!(spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]), expect, epsilon = 1e-12);
    }

    #[test]
    fn oracle_ranker_scores_one() {
        let relevant = vec![vec![1, 4], vec![], vec![0], vec![2, 3, 5]];
        let r = evaluate_ranker(&relevant, &[5, 10], |u, _| Ok(Some(relevant[u].clone()))).unwrap();
        assert_eq!(r.n_users_evaluated, 3);
        assert_eq!(r.recall[&10], 1.0);
        assert_eq!(r.ndcg[&10], 1.0);
    }

    #[test]
    fn random_ranker_expectation() {
        let m = 200;
        let relevant: Vec<Vec<usize>> = (0..4000).map(|u| vec![(u * 37) % m]).collect();
        let r = evaluate_ranker(&relevant, &[10], |u, k| Ok(Some(random_ranking(m, k, &[], 3, u)))).unwrap();
        assert_abs_diff_eq!(r.recall[&10], 10.0 / m as f64, epsilon = 0.01);
    }

    #[test]
    fn most_popular_skips_exclusions() {
        let log = InteractionLog {
            events: [0, 0, 0, 2, 2, 1]
                .iter()
                .enumerate()
                .map(|(i, &v)| crate::corpus::Event { user: i % 2, item: v, rating: 1.0, timestamp: i as i64 })
                .collect(),
            n_users: 2,
            n_items: 4,
        };
        let mp = MostPopular::fit(&log);
        assert_eq!(mp.rank(4, &[]), vec![0, 2, 1, 3]);
        assert_eq!(mp.rank(2, &[0]), vec![2, 1]);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_tail_invariant(perm in Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(),
                                              tail in Just((0..20usize).collect::<Vec<_>>()).prop_shuffle(),
                                              nrel in 1usize..8, k in 1usize..10) {
            let relevant: Vec<usize> = { let mut r: Vec<usize> = perm[..nrel].to_vec(); r.sort(); r };
            let ranked = perm.clone();
            let rec = recall_at_k(&ranked, &relevant, k).unwrap();
            let nd = ndcg_at_k(&ranked, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&rec));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
            // shuffling below rank k changes nothing
            let mut shuffled = ranked.clone();
            if k < 30 {
                let below: Vec<usize> = tail.iter().filter(|&&i| i + k < 30).map(|&i| ranked[k + i]).collect();
                let slots: Vec<usize> = (0..20).filter(|&i| i + k < 30).map(|i| k + i).collect();
                for (s, v) in slots.iter().zip(below) { shuffled[*s] = v; }
            }
            prop_assert_eq!(recall_at_k(&shuffled, &relevant, k), Some(rec));
            prop_assert_eq!(ndcg_at_k(&shuffled, &relevant, k), Some(nd));
        }
    }
}
