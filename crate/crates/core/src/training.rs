//! Joint consistency training with an EMA target network.
//!
//! Each example draws `t_n`, corrupts the user's sequence to `x_{t_n}`,
//! builds the less-noisy partner `x̄_{t_{n-1}}`, and evaluates the target
//! distribution on it with the EMA parameters. The learner's output on
//! `x_{t_n}` is then pulled towards that target (consistency), towards the
//! clean sequence (denoising) and, through the decoded items, towards the
//! user's collaborative embedding (contrastive).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore, Tape, Var};
use crate::corpus::{self, InteractionLog, Token, UserSequence};
use crate::denoiser::{argmax, Denoiser, PositionDistribution};
use crate::loss::{self, Weighting, PROB_FLOOR};
use crate::optim::{ema_update, Adam};
use crate::rng::{self, purpose, StreamRng};
use crate::schedule::{pair_one_step_recovery, DiffusionState, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMethod {
    OneStep,
    #[default]
    PseudoEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu_ema: f64,
    pub tau_cl: f64,
    pub neg_count: usize,
    pub pair_method: PairMethod,
    /// Time interval between the two members of a training pair.
    pub dt: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Hard epoch cap.
    pub epochs: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub gamma: Weighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.4,
            lambda2: 0.01,
            mu_ema: 0.99,
            tau_cl: 0.2,
            neg_count: 16,
            pair_method: PairMethod::PseudoEuler,
            dt: 10.0,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 200,
            patience: 10,
            gamma: Weighting::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.lambda1) {
            return bad(format!("lambda1 must lie in [0, 1], got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0) {
            return bad(format!("lambda2 must be >= 0, got {}", self.lambda2));
        }
        if !(0.0..=1.0).contains(&self.mu_ema) {
            return bad(format!("mu_ema must lie in [0, 1], got {}", self.mu_ema));
        }
        if !(self.tau_cl > 0.0) {
            return bad(format!("tau_cl must be positive, got {}", self.tau_cl));
        }
        if self.neg_count == 0 {
            return bad("neg_count must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub con: f64,
    pub diff: f64,
    pub cl: f64,
    pub total: f64,
}

/// `total = lambda1 * con + (1 - lambda1) * diff + lambda2 * cl`.
pub fn joint_loss(con: f64, diff: f64, cl: f64, cfg: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        con,
        diff,
        cl,
        total: cfg.lambda1 * con + (1.0 - cfg.lambda1) * diff + cfg.lambda2 * cl,
    }
}

/// Sequences, popularity deviations and interaction sets derived from the
/// training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub sequences: Vec<UserSequence>,
    pub deviations: Vec<Vec<f64>>,
    /// Sorted train items per user id.
    pub interacted: Vec<Vec<usize>>,
    pub n_items: usize,
}

impl TrainingSet {
    pub fn new(train: &InteractionLog, seq_len: usize) -> Result<Self> {
        let pop = corpus::popularity(train)?;
        let sequences = corpus::build_sequences(train, seq_len)?;
        let deviations = sequences
            .iter()
            .map(|s| corpus::popularity_deviation(s, &pop))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            sequences,
            deviations,
            interacted: train.user_items(),
            n_items: train.n_items,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Everything random about one training example, fixed before the loss is
/// evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub x0: Vec<Token>,
    pub t_n: f64,
    pub x_t: DiffusionState,
    pub x_prev: DiffusionState,
    /// EMA output on `x_prev`, gradient-blocked.
    pub target: PositionDistribution,
    pub negatives: Vec<usize>,
}

/// Draws `neg_count` items uniformly from those the user never interacted
/// with (with replacement).
pub fn sample_negatives<R: Rng + ?Sized>(interacted: &[usize], n_items: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if interacted.len() >= n_items {
        return Vec::new();
    }
    (0..count)
        .map(|_| loop {
            let v = rng.gen_range(0..n_items);
            if interacted.binary_search(&v).is_err() {
                break v;
            }
        })
        .collect()
}

/// Builds the training pair and target for sequence `idx` of `set`.
pub fn prepare_example<R: Rng + ?Sized>(
    model: &Denoiser,
    target_params: &ParamStore,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    set: &TrainingSet,
    idx: usize,
    rng: &mut R,
) -> Result<Example> {
    let seq = &set.sequences[idx];
    let devs = &set.deviations[idx];
    let eps = schedule.epsilon;
    let t_n = eps + (schedule.horizon - eps) * (1.0 - rng.gen::<f64>());
    let x_t = schedule.forward_sample(&seq.items, t_n, devs, rng);
    let t_prev = (t_n - cfg.dt).max(eps);
    let x_prev = match cfg.pair_method {
        PairMethod::OneStep => {
            let probs = schedule.position_probabilities(&seq.items, t_n, devs);
            let (mut s, _) = pair_one_step_recovery(&x_t, &seq.items, &probs);
            s.t = t_prev;
            s
        }
        PairMethod::PseudoEuler => schedule.pair_pseudo_euler(&x_t, &seq.items, t_n, t_n - t_prev, devs, rng)?,
    };
    let (target, _) = model.consistency_apply_with(target_params, &x_prev, seq.user, eps)?;
    let negatives = sample_negatives(&set.interacted[seq.user], set.n_items, cfg.neg_count, rng);
    Ok(Example {
        user: seq.user,
        x0: seq.items.clone(),
        t_n,
        x_t,
        x_prev,
        target,
        negatives,
    })
}

struct Recorded {
    total: Var,
    breakdown: LossBreakdown,
}

fn record_losses(model: &Denoiser, tape: &mut Tape, ex: &Example, cfg: &TrainConfig) -> Result<Recorded> {
    let m = model.n_items;
    let l = ex.x0.len();
    let lp = model.log_probs_on(tape, &ex.x_t.tokens, ex.user, ex.t_n)?;
    let gamma = cfg.gamma.at(ex.t_n);

    // consistency: gamma * mean_k [sum p log p - sum p log q]
    let covered: Vec<(usize, usize)> = ex
        .target
        .positions
        .iter()
        .enumerate()
        .filter(|(_, &pos)| !ex.x_t.tokens[pos].is_pad())
        .map(|(k, &pos)| (k, pos))
        .collect();
    let con = if covered.is_empty() {
        tape.constant(1, 1, vec![0.0])
    } else {
        let w = gamma / covered.len() as f64;
        let mut weights = vec![0.0; l * m];
        let mut entropy_part = 0.0;
        for &(k, pos) in &covered {
            for (v, &p) in ex.target.row(k).iter().enumerate() {
                if p > 0.0 {
                    weights[pos * m + v] = -w * p;
                    entropy_part += w * p * libm::log(p.max(PROB_FLOOR));
                }
            }
        }
        let ws = tape.weighted_sum(lp, weights);
        tape.lin_comb(&[(ws, 1.0)], entropy_part)
    };

    // denoising: mean over non-PAD positions of -log q(x0)
    let targets: Vec<(usize, usize)> = ex.x0.iter().enumerate().filter_map(|(i, t)| t.item().map(|v| (i, v))).collect();
    let diff = if targets.is_empty() {
        tape.constant(1, 1, vec![0.0])
    } else {
        let mut weights = vec![0.0; l * m];
        for &(i, v) in &targets {
            weights[i * m + v] = -1.0 / targets.len() as f64;
        }
        tape.weighted_sum(lp, weights)
    };

    // contrastive: items decoded from the learner's output at x_t
    let lpv = tape.value(lp);
    let generated: Vec<usize> = (0..l)
        .filter(|&i| !ex.x_t.tokens[i].is_pad())
        .map(|i| argmax(&lpv[i * m..(i + 1) * m]))
        .collect();
    let (cl_value, cl_var) = if cfg.lambda2 > 0.0 && !generated.is_empty() {
        let rows = tape.gather_rows(model.item_table(), &generated);
        let anchor = tape.mean_rows(rows);
        let pos = tape.gather_rows(model.user_table(), &[ex.user]);
        let mut parts = vec![pos];
        if !ex.negatives.is_empty() {
            parts.push(tape.gather_rows(model.item_table(), &ex.negatives));
        }
        let others = tape.concat_rows(&parts);
        let a = tape.l2_normalize_rows(anchor);
        let o = tape.l2_normalize_rows(others);
        let sims = tape.matmul_nt(a, o);
        let logits = tape.scale(sims, 1.0 / cfg.tau_cl);
        let ls = tape.log_softmax_rows(logits);
        let mut w = vec![0.0; ex.negatives.len() + 1];
        w[0] = -1.0;
        let v = tape.weighted_sum(ls, w);
        (tape.scalar(v), Some(v))
    } else {
        let value = loss::contrastive_loss(model, &generated, ex.user, &ex.negatives, cfg.tau_cl).unwrap_or(0.0);
        (value, None)
    };

    let breakdown = joint_loss(tape.scalar(con), tape.scalar(diff), cl_value, cfg);
    let mut terms = vec![(con, cfg.lambda1), (diff, 1.0 - cfg.lambda1)];
    if let Some(v) = cl_var {
        terms.push((v, cfg.lambda2));
    }
    let total = tape.lin_comb(&terms, 0.0);
    Ok(Recorded { total, breakdown })
}

/// Loss of one prepared example under `model`'s current parameters. When
/// `grads` is given, `scale * d total / d theta` is added to it.
pub fn example_objective(
    model: &Denoiser,
    ex: &Example,
    cfg: &TrainConfig,
    grads: Option<(&mut Grads, f64)>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new(&model.params);
    let rec = record_losses(model, &mut tape, ex, cfg)?;
    if let Some((g, scale)) = grads {
        let root = tape.lin_comb(&[(rec.total, scale)], 0.0);
        tape.backward(root, g);
    }
    Ok(rec.breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over the epoch's examples.
    pub loss: LossBreakdown,
    pub steps: usize,
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub stopped_early: bool,
}

/// Learner, EMA target and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Denoiser,
    pub target: ParamStore,
    pub schedule: NoiseSchedule,
    pub cfg: TrainConfig,
    optimizer: Adam,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Denoiser, schedule: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let optimizer = Adam::new(&model.params, cfg.learning_rate);
        Ok(Trainer {
            target: model.params.clone(),
            model,
            schedule,
            cfg,
            optimizer,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over all sequences in seeded random order.
    pub fn train_epoch(&mut self, set: &TrainingSet) -> Result<EpochReport> {
        if set.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epoch;
        let seed = self.cfg.seed;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng::stream(seed, rng::stream_id(purpose::SHUFFLE, epoch as u64, 0)));
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for (batch_no, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut grads = self.model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_sum = LossBreakdown::default();
            let mut drawn: Vec<(usize, f64)> = Vec::with_capacity(batch.len());
            for &idx in batch {
                let user = set.sequences[idx].user;
                let mut r: StreamRng = rng::stream(seed, rng::stream_id(purpose::EXAMPLE, epoch as u64, user as u64));
                let ex = prepare_example(&self.model, &self.target, &self.schedule, &self.cfg, set, idx, &mut r)?;
                drawn.push((user, ex.t_n));
                let b = example_objective(&self.model, &ex, &self.cfg, Some((&mut grads, scale)))?;
                batch_sum.con += b.con;
                batch_sum.diff += b.diff;
                batch_sum.cl += b.cl;
                batch_sum.total += b.total;
            }
            if !batch_sum.total.is_finite() || !grads.all_finite() {
                let detail = format!(
                    "loss {:?} over {} examples; (user, t_n) = {:?}",
                    batch_sum,
                    batch.len(),
                    drawn
                );
                log::error!("non-finite training step at epoch {epoch} batch {batch_no}: {detail}");
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    detail,
                });
            }
            self.optimizer.step(&mut self.model.params, &grads)?;
            ema_update(&mut self.target, &self.model.params, self.cfg.mu_ema)?;
            sum.con += batch_sum.con;
            sum.diff += batch_sum.diff;
            sum.cl += batch_sum.cl;
            sum.total += batch_sum.total;
            steps += 1;
        }
        let n = set.len() as f64;
        let loss = LossBreakdown {
            con: sum.con / n,
            diff: sum.diff / n,
            cl: sum.cl / n,
            total: sum.total / n,
        };
        self.epoch += 1;
        Ok(EpochReport { epoch, loss, steps })
    }

    /// Trains until the epoch cap or until `validate` fails to improve for
    /// `patience` consecutive scored rounds. `validate` sees every epoch's
    /// report and may return `None` to skip scoring. The best-scoring
    /// parameters are restored at the end.
    pub fn fit<F>(&mut self, set: &TrainingSet, mut validate: F) -> Result<FitSummary>
    where
        F: FnMut(&EpochReport, &Denoiser) -> Result<Option<f64>>,
    {
        let mut summary = FitSummary {
            epochs: Vec::new(),
            best_epoch: None,
            best_score: None,
            stopped_early: false,
        };
        let mut best_params: Option<(ParamStore, ParamStore)> = None;
        let mut stale = 0;
        while self.epoch < self.cfg.epochs {
            let report = self.train_epoch(set)?;
            summary.epochs.push(report);
            if let Some(score) = validate(&report, &self.model)? {
                if summary.best_score.is_none_or(|b| score > b) {
                    summary.best_score = Some(score);
                    summary.best_epoch = Some(report.epoch);
                    best_params = Some((self.model.params.clone(), self.target.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= self.cfg.patience {
                        summary.stopped_early = true;
                        break;
                    }
                }
            }
        }
        if let Some((p, t)) = best_params {
            self.model.params = p;
            self.target = t;
        }
        Ok(summary)
    }
}

/// Fraction of masked positions whose argmax prediction equals the source
/// item, over `draws` corruptions of every training sequence at times drawn
/// uniformly from `(epsilon, T]`.
pub fn masked_recovery_accuracy(model: &Denoiser, schedule: &NoiseSchedule, set: &TrainingSet, draws: usize, seed: u64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (idx, seq) in set.sequences.iter().enumerate() {
        let mut r = rng::stream(seed, rng::stream_id(purpose::EXAMPLE, 0xff_ffff, idx as u64));
        for _ in 0..draws {
            let eps = schedule.epsilon;
            let t = eps + (schedule.horizon - eps) * (1.0 - r.gen::<f64>());
            let x_t = schedule.forward_sample(&seq.items, t, &set.deviations[idx], &mut r);
            if x_t.masked_count() == 0 {
                continue;
            }
            let (_, decoded) = model.consistency_apply(&x_t, seq.user, eps)?;
            for i in 0..x_t.tokens.len() {
                if x_t.tokens[i].is_mask() {
                    total += 1;
                    if decoded[i] == seq.items[i] {
                        hits += 1;
                    }
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Event;
    use crate::denoiser::tests::tiny;
    use approx::assert_abs_diff_eq;

    fn block_log(n_users: usize, n_items: usize, per_user: usize) -> InteractionLog {
        let half = n_items / 2;
        let mut events = Vec::new();
        for u in 0..n_users {
            let base = if u % 2 == 0 { 0 } else { half };
            for k in 0..per_user {
                events.push(Event {
                    user: u,
                    item: base + (u + 3 * k) % half,
                    rating: 1.0,
                    timestamp: k as i64,
                });
            }
        }
        InteractionLog {
            events,
            n_users,
            n_items,
        }
    }

    #[test]
    fn joint_loss_arithmetic() {
        let cfg = TrainConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(joint_loss(0.7, 3.0, 9.0, &cfg).total, 0.7);
        let cfg = TrainConfig {
            lambda1: 0.4,
            lambda2: 0.01,
            ..TrainConfig::default()
        };
        assert_abs_diff_eq!(joint_loss(1.0, 2.0, 0.5, &cfg).total, 1.605, epsilon = 1e-12);
    }

    #[test]
    fn config_ranges() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda1: 1.5, ..Default::default() },
            TrainConfig { lambda2: -0.1, ..Default::default() },
            TrainConfig { mu_ema: 2.0, ..Default::default() },
            TrainConfig { tau_cl: 0.0, ..Default::default() },
            TrainConfig { neg_count: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn taped_losses_match_plain_losses() {
        let model = tiny(4, 12, 8, 5, 3);
        let log = block_log(4, 12, 6);
        let set = TrainingSet::new(&log, 5).unwrap();
        let schedule = NoiseSchedule::new(10.0);
        let cfg = TrainConfig {
            lambda2: 0.3,
            dt: 2.0,
            ..TrainConfig::default()
        };
        let mut ema = model.params.clone();
        for p in ema.iter_mut() {
            for v in &mut p.data {
                *v *= 0.97;
            }
        }
        for idx in 0..set.len() {
            let mut r = rng::stream(11, idx as u64);
            let ex = prepare_example(&model, &ema, &schedule, &cfg, &set, idx, &mut r).unwrap();
            let got = example_objective(&model, &ex, &cfg, None).unwrap();
            let (out, decoded) = model.consistency_apply(&ex.x_t, ex.user, -1.0).unwrap();
            let con = loss::consistency_loss(&out, &ex.target, ex.t_n, cfg.gamma);
            let diff = loss::diffusion_loss(&out, &ex.x0);
            let generated: Vec<usize> = decoded.iter().filter_map(|t| t.item()).collect();
            let cl = loss::contrastive_loss(&model, &generated, ex.user, &ex.negatives, cfg.tau_cl).unwrap();
            assert_abs_diff_eq!(got.con, con, epsilon = 1e-9);
            assert_abs_diff_eq!(got.diff, diff, epsilon = 1e-9);
            assert_abs_diff_eq!(got.cl, cl, epsilon = 1e-9);
            assert_abs_diff_eq!(got.total, joint_loss(con, diff, cl, &cfg).total, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_contrastive_weight_leaves_gradients_unchanged() {
        let model = tiny(4, 12, 8, 5, 5);
        let log = block_log(4, 12, 6);
        let set = TrainingSet::new(&log, 5).unwrap();
        let schedule = NoiseSchedule::new(10.0);
        let base = TrainConfig {
            lambda2: 0.0,
            dt: 2.0,
            ..TrainConfig::default()
        };
        let mut r = rng::stream(1, 0);
        let ex = prepare_example(&model, &model.params, &schedule, &base, &set, 1, &mut r).unwrap();
        let mut g0 = model.params.zero_grads();
        example_objective(&model, &ex, &base, Some((&mut g0, 1.0))).unwrap();
        // a different temperature must not matter when the term is off
        let other = TrainConfig { tau_cl: 5.0, neg_count: 3, ..base.clone() };
        let mut g1 = model.params.zero_grads();
        example_objective(&model, &ex, &other, Some((&mut g1, 1.0))).unwrap();
        assert_eq!(g0, g1);
        // and turning it on does change the user table gradient
        let on = TrainConfig { lambda2: 1.0, ..base };
        let mut g2 = model.params.zero_grads();
        example_objective(&model, &ex, &on, Some((&mut g2, 1.0))).unwrap();
        assert_ne!(g0.get(model.user_table()), g2.get(model.user_table()));
        assert!(g0.get(model.user_table()).iter().all(|&g| g == 0.0) || !ex.negatives.is_empty());
    }

    #[test]
    fn t_n_lies_in_half_open_horizon() {
        let model = tiny(4, 12, 8, 5, 1);
        let set = TrainingSet::new(&block_log(4, 12, 6), 5).unwrap();
        let mut schedule = NoiseSchedule::new(10.0);
        schedule.epsilon = 0.5;
        let cfg = TrainConfig { dt: 3.0, ..TrainConfig::default() };
        let mut r = rng::stream(2, 0);
        for k in 0..200 {
            let ex = prepare_example(&model, &model.params, &schedule, &cfg, &set, k % 4, &mut r).unwrap();
            assert!(ex.t_n > 0.5 && ex.t_n <= 10.0);
            assert!(ex.x_prev.t >= 0.5 && ex.x_prev.t < ex.t_n);
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let log = block_log(6, 12, 8);
        let set = TrainingSet::new(&log, 6).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-2,
            epochs: 30,
            dt: 2.0,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut tr = Trainer::new(tiny(6, 12, 8, 6, 4), NoiseSchedule::new(10.0), cfg.clone()).unwrap();
            let s = tr.fit(&set, |_, _| Ok(None)).unwrap();
            (s, tr.model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let first = a.epochs[0].loss.total;
        let last = a.epochs.last().unwrap().loss.total;
        assert!(last < 0.7 * first, "{first} -> {last}");
        assert_eq!(a.epochs.len(), 30);
        assert!(a.epochs.iter().all(|e| e.steps == 3));
    }

    #[test]
    fn early_stopping_restores_best() {
        let set = TrainingSet::new(&block_log(4, 12, 6), 5).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 50,
            patience: 3,
            dt: 2.0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(tiny(4, 12, 8, 5, 2), NoiseSchedule::new(10.0), cfg).unwrap();
        let scores = [0.1, 0.5, 0.4, 0.3, 0.45, 0.2];
        let mut snapshot = None;
        let s = tr
            .fit(&set, |r, m| {
                if r.epoch == 1 {
                    snapshot = Some(m.params.clone());
                }
                Ok(Some(scores[r.epoch]))
            })
            .unwrap();
        assert!(s.stopped_early);
        assert_eq!(s.epochs.len(), 5);
        assert_eq!(s.best_epoch, Some(1));
        assert_eq!(Some(tr.model.params), snapshot);
    }
}
