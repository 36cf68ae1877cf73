//! The consistency-parameterized sequence denoiser.
//!
//! A pre-norm Transformer encoder reads `[user slot, item slots...]`. The
//! user slot starts from the user's collaborative embedding and receives the
//! time embedding again at the input of every layer. Item slots carry item,
//! `MASK` or `PAD` embeddings plus learned positions. Each item slot's output
//! is scored against every item embedding by cosine similarity divided by a
//! projection temperature, giving one categorical distribution per position.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::collab::EmbeddingBundle;
use crate::corpus::Token;
use crate::schedule::DiffusionState;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Model width; must match the collaborative embedding width.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Temperature applied to cosine logits.
    pub tau_proj: f64,
    /// Sequence length `l`.
    pub seq_len: usize,
    /// Largest quantized time index; the time table has `max_time + 1` rows.
    pub max_time: usize,
    pub ln_eps: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            tau_proj: 0.1,
            seq_len: 20,
            max_time: 60,
            ln_eps: 1e-5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("denoiser dimensions must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("denoiser dim must be divisible by heads");
        }
        if !(self.tau_proj > 0.0) {
            return bad("projection temperature must be positive");
        }
        if self.seq_len == 0 {
            return bad("sequence length must be positive");
        }
        Ok(())
    }

    /// Index into the time table for a continuous time.
    pub fn time_index(&self, t: f64) -> usize {
        let r = libm::round(t);
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(self.max_time)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    items: ParamId,
    users: ParamId,
    mask: ParamId,
    pad: ParamId,
    pos: ParamId,
    time: ParamId,
    layers: Vec<LayerIds>,
    final_g: ParamId,
    final_b: ParamId,
}

/// Per-position categorical distributions over the item catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistribution {
    pub n_items: usize,
    /// Sequence positions covered, ascending.
    pub positions: Vec<usize>,
    /// `positions.len() x n_items`, row-major.
    pub probs: Vec<f64>,
}

impl PositionDistribution {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.n_items..(k + 1) * self.n_items]
    }

    /// Row index for sequence position `pos`, if covered.
    pub fn index_of(&self, pos: usize) -> Option<usize> {
        self.positions.binary_search(&pos).ok()
    }

    pub fn argmax(&self, k: usize) -> usize {
        argmax(self.row(k))
    }

    pub fn one_hot(n_items: usize, positions: Vec<usize>, items: &[usize]) -> Self {
        let mut probs = vec![0.0; positions.len() * n_items];
        for (k, &v) in items.iter().enumerate() {
            probs[k * n_items + v] = 1.0;
        }
        PositionDistribution {
            n_items,
            positions,
            probs,
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The denoiser `F_theta` together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub n_users: usize,
    pub n_items: usize,
    pub params: ParamStore,
    layout: Layout,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn randn<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * std).collect()
}

impl Denoiser {
    /// Builds a denoiser whose user and item tables are copied from `bundle`;
    /// every other parameter is freshly initialized from `rng`.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, bundle: &EmbeddingBundle, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if bundle.dim != config.dim {
            return Err(Error::Shape {
                what: "embedding width".to_string(),
                expected: format!("{}", config.dim),
                found: format!("{}", bundle.dim),
            });
        }
        let d = config.dim;
        let f = d * config.ffn_mult;
        let mut store = ParamStore::new();
        store.add("item_table", bundle.n_items, d, bundle.items.clone());
        store.add("user_table", bundle.n_users, d, bundle.users.clone());
        store.add("mask_embedding", 1, d, randn(rng, d, 0.1));
        store.add("pad_embedding", 1, d, randn(rng, d, 0.1));
        store.add("position_table", config.seq_len, d, randn(rng, config.seq_len * d, 0.1));
        store.add("time_table", config.max_time + 1, d, randn(rng, (config.max_time + 1) * d, 0.1));
        let w = 1.0 / libm::sqrt(d as f64);
        let wf = 1.0 / libm::sqrt(f as f64);
        for l in 0..config.layers {
            store.add(format!("layer{l}.ln1_gain"), 1, d, vec![1.0; d]);
            store.add(format!("layer{l}.ln1_bias"), 1, d, vec![0.0; d]);
            store.add(format!("layer{l}.w_query"), d, d, randn(rng, d * d, w));
            store.add(format!("layer{l}.w_key"), d, d, randn(rng, d * d, w));
            store.add(format!("layer{l}.w_value"), d, d, randn(rng, d * d, w));
            store.add(format!("layer{l}.w_out"), d, d, randn(rng, d * d, w));
            store.add(format!("layer{l}.ln2_gain"), 1, d, vec![1.0; d]);
            store.add(format!("layer{l}.ln2_bias"), 1, d, vec![0.0; d]);
            store.add(format!("layer{l}.ffn_w1"), d, f, randn(rng, d * f, w));
            store.add(format!("layer{l}.ffn_b1"), 1, f, vec![0.0; f]);
            store.add(format!("layer{l}.ffn_w2"), f, d, randn(rng, f * d, wf));
            store.add(format!("layer{l}.ffn_b2"), 1, d, vec![0.0; d]);
        }
        store.add("final_ln_gain", 1, d, vec![1.0; d]);
        store.add("final_ln_bias", 1, d, vec![0.0; d]);
        Self::from_store(config, bundle.n_users, bundle.n_items, store)
    }

    /// Reassembles a denoiser from a parameter store laid out by [`Denoiser::new`].
    pub fn from_store(config: DenoiserConfig, n_users: usize, n_items: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let f = d * config.ffn_mult;
        let mut expected: Vec<(alloc::string::String, usize, usize)> = vec![
            ("item_table".into(), n_items, d),
            ("user_table".into(), n_users, d),
            ("mask_embedding".into(), 1, d),
            ("pad_embedding".into(), 1, d),
            ("position_table".into(), config.seq_len, d),
            ("time_table".into(), config.max_time + 1, d),
        ];
        for l in 0..config.layers {
            for (name, r, c) in [
                ("ln1_gain", 1, d),
                ("ln1_bias", 1, d),
                ("w_query", d, d),
                ("w_key", d, d),
                ("w_value", d, d),
                ("w_out", d, d),
                ("ln2_gain", 1, d),
                ("ln2_bias", 1, d),
                ("ffn_w1", d, f),
                ("ffn_b1", 1, f),
                ("ffn_w2", f, d),
                ("ffn_b2", 1, d),
            ] {
                expected.push((format!("layer{l}.{name}"), r, c));
            }
        }
        expected.push(("final_ln_gain".into(), 1, d));
        expected.push(("final_ln_bias".into(), 1, d));
        if params.len() != expected.len() {
            return Err(Error::Shape {
                what: "parameter count".into(),
                expected: format!("{}", expected.len()),
                found: format!("{}", params.len()),
            });
        }
        for (p, (name, r, c)) in params.iter().zip(&expected) {
            if &p.name != name || p.rows != *r || p.cols != *c {
                return Err(Error::Shape {
                    what: name.clone(),
                    expected: format!("{name} {r}x{c}"),
                    found: format!("{} {}x{}", p.name, p.rows, p.cols),
                });
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        let id = ParamId;
        let layers = (0..config.layers)
            .map(|l| {
                let b = 6 + 12 * l;
                LayerIds {
                    ln1_g: id(b),
                    ln1_b: id(b + 1),
                    wq: id(b + 2),
                    wk: id(b + 3),
                    wv: id(b + 4),
                    wo: id(b + 5),
                    ln2_g: id(b + 6),
                    ln2_b: id(b + 7),
                    w1: id(b + 8),
                    b1: id(b + 9),
                    w2: id(b + 10),
                    b2: id(b + 11),
                }
            })
            .collect();
        let tail = 6 + 12 * config.layers;
        let layout = Layout {
            items: id(0),
            users: id(1),
            mask: id(2),
            pad: id(3),
            pos: id(4),
            time: id(5),
            layers,
            final_g: id(tail),
            final_b: id(tail + 1),
        };
        Ok(Denoiser {
            config,
            n_users,
            n_items,
            params,
            layout,
        })
    }

    pub fn item_table(&self) -> ParamId {
        self.layout.items
    }

    pub fn user_table(&self) -> ParamId {
        self.layout.users
    }

    /// Item embedding row `v` of the current parameters.
    pub fn item_row(&self, v: usize) -> &[f64] {
        self.params.get(self.layout.items).row(v)
    }

    pub fn user_row(&self, u: usize) -> &[f64] {
        self.params.get(self.layout.users).row(u)
    }

    fn check_input(&self, tokens: &[Token], user: usize) -> Result<()> {
        if user >= self.n_users {
            return Err(Error::UnknownUser(user));
        }
        if tokens.len() != self.config.seq_len {
            return Err(Error::Shape {
                what: "sequence length".into(),
                expected: format!("{}", self.config.seq_len),
                found: format!("{}", tokens.len()),
            });
        }
        if let Some(v) = tokens.iter().filter_map(|t| t.item()).find(|&v| v >= self.n_items) {
            return Err(Error::InvalidArgument(format!("item id {v} out of range")));
        }
        Ok(())
    }

    /// Records the encoder on `tape` and returns the `(l + 1) x d` output,
    /// user slot first. The tape may run over any store with this
    /// denoiser's layout (such as an EMA copy).
    pub fn encode_on(&self, tape: &mut Tape, tokens: &[Token], user: usize, t: f64) -> Result<Var> {
        self.check_input(tokens, user)?;
        let lay = &self.layout;
        let cfg = &self.config;
        let d = cfg.dim;
        let dh = d / cfg.heads;
        let att_scale = 1.0 / libm::sqrt(dh as f64);

        let emb = tape.embed_tokens(lay.items, lay.mask, lay.pad, tokens);
        let pos = tape.param(lay.pos);
        let slots = tape.add(emb, pos);
        let user_row = tape.gather_rows(lay.users, &[user]);
        let time_row = tape.gather_rows(lay.time, &[cfg.time_index(t)]);
        let mut h = tape.concat_rows(&[user_row, slots]);

        for ly in &lay.layers {
            h = tape.add_at_row(h, 0, time_row);
            let (g1, b1) = (tape.param(ly.ln1_g), tape.param(ly.ln1_b));
            let x = tape.layer_norm(h, g1, b1, cfg.ln_eps);
            let (wq, wk, wv, wo) = (tape.param(ly.wq), tape.param(ly.wk), tape.param(ly.wv), tape.param(ly.wo));
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, att_scale);
                let attn = tape.softmax_rows(scores);
                heads.push(tape.matmul(attn, vh));
            }
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let attn_out = tape.matmul(merged, wo);
            h = tape.add(h, attn_out);

            let (g2, b2) = (tape.param(ly.ln2_g), tape.param(ly.ln2_b));
            let x2 = tape.layer_norm(h, g2, b2, cfg.ln_eps);
            let (w1, bias1, w2, bias2) = (tape.param(ly.w1), tape.param(ly.b1), tape.param(ly.w2), tape.param(ly.b2));
            let hidden = tape.matmul(x2, w1);
            let hidden = tape.add_row(hidden, bias1);
            let hidden = tape.gelu(hidden);
            let ffn = tape.matmul(hidden, w2);
            let ffn = tape.add_row(ffn, bias2);
            h = tape.add(h, ffn);
        }
        let (gf, bf) = (tape.param(lay.final_g), tape.param(lay.final_b));
        Ok(tape.layer_norm(h, gf, bf, cfg.ln_eps))
    }

    /// Cosine-projection logits, `rows x m`, for encoder output rows.
    pub fn project_logits_on(&self, tape: &mut Tape, encoded_items: Var) -> Var {
        let normed = tape.l2_normalize_rows(encoded_items);
        let table = tape.param(self.layout.items);
        let table_n = tape.l2_normalize_rows(table);
        let cos = tape.matmul_nt(normed, table_n);
        tape.scale(cos, 1.0 / self.config.tau_proj)
    }

    /// Per-position log-probabilities (`l x m`) of `F_theta(tokens, t)`.
    pub fn log_probs_on(&self, tape: &mut Tape, tokens: &[Token], user: usize, t: f64) -> Result<Var> {
        let enc = self.encode_on(tape, tokens, user, t)?;
        let rows: Vec<usize> = (1..=tokens.len()).collect();
        let items = tape.select_rows(enc, &rows);
        let logits = self.project_logits_on(tape, items);
        Ok(tape.log_softmax_rows(logits))
    }

    /// Encoder output as `l + 1` vectors, user slot first.
    pub fn encode(&self, x: &DiffusionState, user: usize) -> Result<Vec<Vec<f64>>> {
        self.encode_with(&self.params, x, user)
    }

    fn encode_with(&self, store: &ParamStore, x: &DiffusionState, user: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(store);
        let enc = self.encode_on(&mut tape, &x.tokens, user, x.t)?;
        Ok(tape.value(enc).chunks(self.config.dim).map(|c| c.to_vec()).collect())
    }

    /// Projects encoded item slots (user slot excluded) onto the catalog.
    /// Zero-norm outputs yield uniform distributions.
    pub fn project_items(&self, encoded_items: &[Vec<f64>], positions: Vec<usize>) -> PositionDistribution {
        let d = self.config.dim;
        if encoded_items.iter().any(|v| v.iter().all(|&x| x == 0.0)) {
            log::warn!("zero-norm encoder output; projecting to a uniform distribution");
        }
        let mut tape = Tape::new(&self.params);
        let flat: Vec<f64> = encoded_items.iter().flatten().copied().collect();
        let enc = tape.constant(encoded_items.len(), d, flat);
        let logits = self.project_logits_on(&mut tape, enc);
        let probs = tape.softmax_rows(logits);
        PositionDistribution {
            n_items: self.n_items,
            positions,
            probs: tape.value(probs).to_vec(),
        }
    }

    /// The consistency function: identity at `t <= epsilon`, otherwise the
    /// network's per-position distributions and their argmax decode.
    pub fn consistency_apply(&self, x: &DiffusionState, user: usize, epsilon: f64) -> Result<(PositionDistribution, Vec<Token>)> {
        self.consistency_apply_with(&self.params, x, user, epsilon)
    }

    /// As [`Denoiser::consistency_apply`], evaluated with another store of the
    /// same layout (the EMA target).
    pub fn consistency_apply_with(
        &self,
        store: &ParamStore,
        x: &DiffusionState,
        user: usize,
        epsilon: f64,
    ) -> Result<(PositionDistribution, Vec<Token>)> {
        self.check_input(&x.tokens, user)?;
        if x.t <= epsilon {
            let (positions, items): (Vec<usize>, Vec<usize>) = x
                .tokens
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.item().map(|v| (i, v)))
                .unzip();
            return Ok((PositionDistribution::one_hot(self.n_items, positions, &items), x.tokens.clone()));
        }
        let mut tape = Tape::new(store);
        let lp = self.log_probs_on(&mut tape, &x.tokens, user, x.t)?;
        let m = self.n_items;
        let all = tape.value(lp);
        let positions: Vec<usize> = (0..x.tokens.len()).filter(|&i| !x.tokens[i].is_pad()).collect();
        let mut probs = Vec::with_capacity(positions.len() * m);
        for &i in &positions {
            probs.extend(all[i * m..(i + 1) * m].iter().map(|&v| libm::exp(v)));
        }
        let dist = PositionDistribution {
            n_items: m,
            positions,
            probs,
        };
        let mut decoded = x.tokens.clone();
        for (k, &i) in dist.positions.iter().enumerate() {
            decoded[i] = Token::Item(dist.argmax(k));
        }
        Ok((dist, decoded))
    }
}
