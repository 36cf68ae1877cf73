//! Popularity-aware absorbing diffusion over item sequences.
//!
//! Every non-padded position runs an independent continuous-time chain whose
//! only non-trivial transition is into `MASK`. The base rate matrix has `-1`
//! on the diagonal for item states, a row of ones into the absorbing state and
//! a zero absorbing column, so `exp(b * R)` keeps an item with probability
//! `e^{-b}` and absorbs it otherwise. The cumulative noise `b` is shifted per
//! item by its popularity deviation through a Gaussian bump centred at `T/2`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, UserSequence};
use crate::{Error, Result};

/// How the cumulative noise value is turned into a masking probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// The cumulative value is the masking probability itself.
    #[default]
    DirectProbability,
    /// The cumulative value is an integrated rate: `p = 1 - exp(-b)`.
    MatrixExponential,
}

impl KernelMode {
    pub fn mask_probability_from_beta(self, beta_bar: f64) -> f64 {
        match self {
            KernelMode::DirectProbability => beta_bar,
            KernelMode::MatrixExponential => 1.0 - libm::exp(-beta_bar),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    /// Total diffusion horizon `T`.
    pub horizon: f64,
    /// Scale of the popularity shift.
    pub omega: f64,
    /// Width of the Gaussian bump.
    pub sigma: f64,
    pub mode: KernelMode,
    /// Boundary time below which no transitions happen.
    pub epsilon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::new(60.0)
    }
}

impl NoiseSchedule {
    /// Defaults: `omega = 0.5`, `sigma = T / 10`, direct probabilities, `epsilon = 0`.
    pub fn new(horizon: f64) -> Self {
        NoiseSchedule {
            horizon,
            omega: 0.5,
            sigma: horizon / 10.0,
            mode: KernelMode::DirectProbability,
            epsilon: 0.0,
        }
    }

    pub fn with_mode(mut self, mode: KernelMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon.is_finite()
            && self.horizon > 0.0
            && self.omega.is_finite()
            && self.omega >= 0.0
            && self.sigma.is_finite()
            && self.sigma > 0.0
            && self.epsilon >= 0.0
            && self.epsilon < self.horizon;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid noise schedule {self:?}")))
        }
    }

    /// Gaussian bump `exp(-(t - T/2)^2 / (2 sigma^2))`.
    pub fn bump(&self, t: f64) -> f64 {
        let z = t - self.horizon / 2.0;
        libm::exp(-(z * z) / (2.0 * self.sigma * self.sigma))
    }

    /// Cumulative noise before clamping and terminal forcing.
    pub fn raw_beta(&self, t: f64, deviation: f64) -> f64 {
        t / self.horizon - self.omega * self.bump(t) * deviation
    }

    /// Cumulative noise of an item with popularity deviation `deviation`,
    /// clamped to `[0, 1]` and exactly 1 at `t >= T`.
    pub fn cumulative_beta(&self, t: f64, deviation: f64) -> f64 {
        if t >= self.horizon {
            return 1.0;
        }
        self.raw_beta(t, deviation).clamp(0.0, 1.0)
    }

    /// Probability that an item is in the absorbing state at time `t`.
    /// Exactly 1 at `t >= T` in both modes.
    pub fn mask_probability(&self, t: f64, deviation: f64) -> f64 {
        if t >= self.horizon {
            return 1.0;
        }
        self.mode
            .mask_probability_from_beta(self.cumulative_beta(t, deviation))
            .clamp(0.0, 1.0)
    }

    /// Row of the transition kernel `q_{t|0}(. | state)`.
    pub fn transition_kernel_row(&self, state: Token, t: f64, deviation: f64) -> Result<TransitionRow> {
        match state {
            Token::Mask => Ok(TransitionRow { keep: None, mask: 1.0 }),
            Token::Item(v) => {
                let p = self.mask_probability(t, deviation);
                Ok(TransitionRow {
                    keep: Some((v, 1.0 - p)),
                    mask: p,
                })
            }
            Token::Pad => Err(Error::InvalidArgument("padding has no transition kernel".into())),
        }
    }

    /// Masking probability of every position of `seq` at time `t`; padded
    /// positions report 0.
    pub fn position_probabilities(&self, seq: &[Token], t: f64, deviations: &[f64]) -> Vec<f64> {
        seq.iter()
            .zip(deviations)
            .map(|(tok, &dev)| if tok.is_pad() { 0.0 } else { self.mask_probability(t, dev) })
            .collect()
    }

    /// Draws `x_t ~ q_{t|0}(. | x0)`: each non-padded position is masked
    /// independently with its own probability.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &[Token],
        t: f64,
        deviations: &[f64],
        rng: &mut R,
    ) -> DiffusionState {
        debug_assert_eq!(x0.len(), deviations.len());
        let tokens = x0
            .iter()
            .zip(deviations)
            .map(|(&tok, &dev)| match tok {
                Token::Pad | Token::Mask => tok,
                Token::Item(_) => {
                    if rng.gen::<f64>() < self.mask_probability(t, dev) {
                        Token::Mask
                    } else {
                        tok
                    }
                }
            })
            .collect();
        DiffusionState { tokens, t }
    }

    /// Pseudo-Euler reverse step over `[t_n - dt, t_n]`: a masked position is
    /// restored to its source item with probability `1 - B (1 - dt / T)`,
    /// where `B` is the position's cumulative noise at `t_n`. Unmasked
    /// positions are kept.
    pub fn pair_pseudo_euler<R: Rng + ?Sized>(
        &self,
        x_t: &DiffusionState,
        x0: &[Token],
        t_n: f64,
        dt: f64,
        deviations: &[f64],
        rng: &mut R,
    ) -> Result<DiffusionState> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let scale = 1.0 - dt / self.horizon;
        let tokens = x_t
            .tokens
            .iter()
            .zip(x0)
            .zip(deviations)
            .map(|((&cur, &src), &dev)| {
                if cur.is_mask() {
                    let stay = self.cumulative_beta(t_n, dev) * scale;
                    if rng.gen::<f64>() < stay {
                        Token::Mask
                    } else {
                        src
                    }
                } else {
                    cur
                }
            })
            .collect();
        Ok(DiffusionState {
            tokens,
            t: t_n - dt,
        })
    }
}

/// Distribution over {keep the item, absorb into MASK}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRow {
    /// `None` when the current state is already `MASK`.
    pub keep: Option<(usize, f64)>,
    pub mask: f64,
}

impl TransitionRow {
    pub fn total(&self) -> f64 {
        self.keep.map_or(0.0, |(_, p)| p) + self.mask
    }
}

/// The structured base rate matrix over `n_items` item states plus `MASK`,
/// evaluated entry by entry. `rate(to, from)` is the jump rate `from -> to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseRate {
    pub n_items: usize,
}

impl BaseRate {
    pub fn rate(&self, to: Token, from: Token) -> f64 {
        match (to, from) {
            (Token::Item(a), Token::Item(b)) if a == b => -1.0,
            (Token::Mask, Token::Item(_)) => 1.0,
            _ => 0.0,
        }
    }

    /// Entry `(to, from)` of `exp(beta_bar * R)` in closed form.
    pub fn kernel(&self, to: Token, from: Token, beta_bar: f64) -> f64 {
        let keep = libm::exp(-beta_bar);
        match (to, from) {
            (Token::Item(a), Token::Item(b)) if a == b => keep,
            (Token::Mask, Token::Item(_)) => 1.0 - keep,
            (Token::Mask, Token::Mask) => 1.0,
            _ => 0.0,
        }
    }
}

/// A partially masked sequence at diffusion time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionState {
    pub tokens: Vec<Token>,
    pub t: f64,
}

impl DiffusionState {
    /// The fully absorbed state at `t` with padding copied from `seq`.
    pub fn absorbed(seq: &UserSequence, t: f64) -> Self {
        let tokens = seq
            .items
            .iter()
            .map(|&tok| if tok.is_pad() { Token::Pad } else { Token::Mask })
            .collect();
        DiffusionState { tokens, t }
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_mask()).count()
    }
}

/// Restores the masked position with the lowest masking probability (lowest
/// index on ties) to its source item. Returns the new state and whether
/// anything was restored.
pub fn pair_one_step_recovery(x_t: &DiffusionState, x0: &[Token], probs: &[f64]) -> (DiffusionState, bool) {
    let mut best: Option<(usize, f64)> = None;
    for (i, tok) in x_t.tokens.iter().enumerate() {
        if tok.is_mask() && best.is_none_or(|(_, p)| probs[i] < p) {
            best = Some((i, probs[i]));
        }
    }
    let mut out = x_t.clone();
    match best {
        Some((i, _)) => {
            out.tokens[i] = x0[i];
            (out, true)
        }
        None => (out, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(60.0)
    }

    #[test]
    fn cumulative_beta_examples() {
        let s = sched();
        assert_abs_diff_eq!(s.cumulative_beta(30.0, 0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.cumulative_beta(30.0, 0.5), 0.25, epsilon = 1e-15);
        assert_eq!(s.cumulative_beta(60.0, 0.9), 1.0);
        assert_eq!(s.cumulative_beta(60.0, -0.9), 1.0);
        // bump at the horizon is exp(-12.5)
        assert_abs_diff_eq!(s.bump(60.0), libm::exp(-12.5), epsilon = 1e-18);
        assert!(s.bump(60.0) < 3.8e-6);
    }

    #[test]
    fn clamping_bounds() {
        let s = sched();
        assert_eq!(s.cumulative_beta(0.0, 0.3), 0.0);
        assert!(s.raw_beta(0.0, 0.3) < 0.0);
        let raw = s.raw_beta(0.0, -0.3);
        assert!(raw <= s.omega * libm::exp(-60.0 * 60.0 / (8.0 * s.sigma * s.sigma)) * 0.3 + 1e-18);
        assert!(s.cumulative_beta(59.0, -1.0) <= 1.0);
    }

    #[test]
    fn mask_probability_modes() {
        let direct = sched();
        let mexp = sched().with_mode(KernelMode::MatrixExponential);
        assert_eq!(direct.mode.mask_probability_from_beta(0.0), 0.0);
        assert_eq!(mexp.mode.mask_probability_from_beta(0.0), 0.0);
        assert_abs_diff_eq!(mexp.mode.mask_probability_from_beta(1.0), 0.632_120_558_828_557_7, epsilon = 1e-15);
        assert_eq!(direct.mode.mask_probability_from_beta(1.0), 1.0);
        assert_eq!(mexp.mask_probability(60.0, 0.2), 1.0);
    }

    #[test]
    fn kernel_rows() {
        let s = sched();
        let row = s.transition_kernel_row(Token::Mask, 17.0, 0.4).unwrap();
        assert_eq!(row, TransitionRow { keep: None, mask: 1.0 });
        let row = s.transition_kernel_row(Token::Item(3), 0.0, 0.0).unwrap();
        assert_eq!(row.keep, Some((3, 1.0)));
        assert_eq!(row.mask, 0.0);
        assert!(s.transition_kernel_row(Token::Pad, 1.0, 0.0).is_err());
    }

    #[test]
    fn base_rate_columns_sum_to_zero() {
        let r = BaseRate { n_items: 4 };
        let states: Vec<Token> = (0..4).map(Token::Item).chain([Token::Mask]).collect();
        for &from in &states {
            let col: f64 = states.iter().map(|&to| r.rate(to, from)).sum();
            assert_eq!(col, 0.0);
            let k: f64 = states.iter().map(|&to| r.kernel(to, from, 0.7)).sum();
            assert_abs_diff_eq!(k, 1.0, epsilon = 1e-15);
        }
        assert_eq!(r.rate(Token::Item(1), Token::Mask), 0.0);
        assert_eq!(r.rate(Token::Item(1), Token::Item(2)), 0.0);
    }

    #[test]
    fn forward_sample_endpoints() {
        let s = sched();
        let x0 = vec![Token::Pad, Token::Item(1), Token::Item(2), Token::Item(3)];
        let dev = vec![0.0, 0.3, -0.1, -0.2];
        let mut r = rng::stream(1, 0);
        assert_eq!(s.forward_sample(&x0, 0.0, &dev, &mut r).tokens, x0);
        let xt = s.forward_sample(&x0, 60.0, &dev, &mut r);
        assert_eq!(xt.tokens, [Token::Pad, Token::Mask, Token::Mask, Token::Mask]);
    }

    #[test]
    fn empirical_mask_rate_matches() {
        let s = sched();
        let mut r = rng::stream(2, 0);
        let x0 = [Token::Item(0)];
        for &(t, dev) in &[(12.0, 0.2), (30.0, -0.3), (45.0, 0.1)] {
            let p = s.mask_probability(t, dev);
            let hits = (0..10_000)
                .filter(|_| s.forward_sample(&x0, t, &[dev], &mut r).tokens[0].is_mask())
                .count();
            assert!((hits as f64 / 10_000.0 - p).abs() < 0.01, "t={t} p={p} hits={hits}");
        }
    }

    #[test]
    fn one_step_recovery_picks_lowest_probability() {
        let x0: Vec<Token> = (0..5).map(Token::Item).collect();
        let xt = DiffusionState {
            tokens: vec![Token::Item(0), Token::Mask, Token::Item(2), Token::Mask, Token::Item(4)],
            t: 10.0,
        };
        let probs = [0.0, 0.7, 0.0, 0.2, 0.0];
        let (out, restored) = pair_one_step_recovery(&xt, &x0, &probs);
        assert!(restored);
        assert_eq!(out.tokens[3], Token::Item(3));
        assert_eq!(out.tokens[1], Token::Mask);

        let (same, restored) = pair_one_step_recovery(&DiffusionState { tokens: x0.clone(), t: 1.0 }, &x0, &probs);
        assert!(!restored);
        assert_eq!(same.tokens, x0);

        let xt = DiffusionState {
            tokens: vec![Token::Item(0), Token::Item(1), Token::Mask, Token::Item(3), Token::Mask],
            t: 10.0,
        };
        let (out, _) = pair_one_step_recovery(&xt, &x0, &[0.1, 0.1, 0.5, 0.1, 0.5]);
        assert_eq!(out.tokens[2], Token::Item(2));
        assert_eq!(out.tokens[4], Token::Mask);
    }

    #[test]
    fn pseudo_euler_restore_rate() {
        // Choose t and deviation so that B = 0.8, with dt / T = 0.25.
        let s = NoiseSchedule { omega: 0.0, ..NoiseSchedule::new(60.0) };
        let t_n = 48.0;
        assert_abs_diff_eq!(s.cumulative_beta(t_n, 0.0), 0.8, epsilon = 1e-15);
        let x0 = [Token::Item(9)];
        let xt = DiffusionState { tokens: vec![Token::Mask], t: t_n };
        let mut r = rng::stream(3, 0);
        let restored = (0..20_000)
            .filter(|_| !s.pair_pseudo_euler(&xt, &x0, t_n, 15.0, &[0.0], &mut r).unwrap().tokens[0].is_mask())
            .count();
        assert!((restored as f64 / 20_000.0 - 0.4).abs() < 0.01);

        // B = 0 restores with certainty
        assert_eq!(s.cumulative_beta(0.0, 0.0), 0.0);
        let at_origin = DiffusionState { tokens: vec![Token::Mask], t: 0.0 };
        for _ in 0..100 {
            let out = s.pair_pseudo_euler(&at_origin, &x0, 0.0, 1.0, &[0.0], &mut r).unwrap();
            assert_eq!(out.tokens[0], Token::Item(9));
        }

        let unmasked = DiffusionState { tokens: vec![Token::Item(9)], t: t_n };
        for _ in 0..100 {
            assert_eq!(s.pair_pseudo_euler(&unmasked, &x0, t_n, 10.0, &[0.0], &mut r).unwrap().tokens[0], Token::Item(9));
        }
        assert!(s.pair_pseudo_euler(&xt, &x0, t_n, 0.0, &[0.0], &mut r).is_err());
    }

    proptest! {
        #[test]
        fn popular_items_corrupt_no_faster(t in 0.0f64..60.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let s = sched();
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            prop_assert!(s.cumulative_beta(t, hi) <= s.cumulative_beta(t, lo));
            let m = s.with_mode(KernelMode::MatrixExponential);
            prop_assert!(m.mask_probability(t, hi) <= m.mask_probability(t, lo));
        }

        #[test]
        fn kernel_rows_sum_to_one(t in 0.0f64..=60.0, dev in -1.0f64..1.0, item in 0usize..50, mexp: bool) {
            let mut s = sched();
            if mexp { s.mode = KernelMode::MatrixExponential; }
            let row = s.transition_kernel_row(Token::Item(item), t, dev).unwrap();
            prop_assert!((row.total() - 1.0).abs() < 1e-12);
            prop_assert!(row.mask >= 0.0 && row.mask <= 1.0);
        }

        #[test]
        fn forward_sample_only_masks(seed: u64, t in 0.0f64..=60.0, pads in 0usize..5) {
            let s = sched();
            let mut x0 = vec![Token::Pad; pads];
            x0.extend((0..8).map(Token::Item));
            let dev: Vec<f64> = (0..x0.len()).map(|i| (i as f64 - 6.0) / 10.0).collect();
            let xt = s.forward_sample(&x0, t, &dev, &mut rng::stream(seed, 0));
            for (a, b) in xt.tokens.iter().zip(&x0) {
                prop_assert!(a == b || (a.is_mask() && !b.is_pad()));
            }
        }
    }
}
