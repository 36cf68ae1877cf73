//! A small reverse-mode automatic differentiation tape over dense row-major
//! `f64` matrices.
//!
//! Parameters live in a [`ParamStore`] that the tape borrows; leaf nodes
//! refer to them by id, so building a graph never copies a parameter table.
//! [`Tape::backward`] accumulates parameter gradients into a [`Grads`]
//! buffer laid out like the store.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Named parameter matrices, addressed by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data does not match its shape");
        self.params.push(Param {
            name: name.into(),
            rows,
            cols,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols && a.name == b.name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers with the layout of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|&v| v == 0.0))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    GatherRows { src: ParamId, idx: Vec<usize> },
    EmbedTokens { items: ParamId, mask: ParamId, pad: ParamId, tokens: Vec<Token> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddAtRow(Var, usize, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Scale(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    MeanRows(Var),
    WeightedSum(Var, Vec<f64>),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

/// Records a computation over borrowed parameters.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(*id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        self.push(p.rows, p.cols, Vec::new(), Op::Param(id))
    }

    pub fn gather_rows(&mut self, src: ParamId, idx: &[usize]) -> Var {
        let p = self.params.get(src);
        let mut value = Vec::with_capacity(idx.len() * p.cols);
        for &r in idx {
            value.extend_from_slice(p.row(r));
        }
        self.push(idx.len(), p.cols, value, Op::GatherRows { src, idx: idx.to_vec() })
    }

    /// Looks up one embedding row per token: item rows from `items`, and the
    /// single rows of `mask` and `pad` for the two sentinels.
    pub fn embed_tokens(&mut self, items: ParamId, mask: ParamId, pad: ParamId, tokens: &[Token]) -> Var {
        let cols = self.params.get(items).cols;
        let mut value = Vec::with_capacity(tokens.len() * cols);
        for &tok in tokens {
            let row = match tok {
                Token::Item(v) => self.params.get(items).row(v),
                Token::Mask => self.params.get(mask).row(0),
                Token::Pad => self.params.get(pad).row(0),
            };
            value.extend_from_slice(row);
        }
        let op = Op::EmbedTokens {
            items,
            mask,
            pad,
            tokens: tokens.to_vec(),
        };
        self.push(tokens.len(), cols, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; r * c];
        matmul_into(self.value(a), self.value(b), &mut out, r, k, c);
        self.push(r, c, out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (c, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..c {
                out[i * c + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        self.push(r, c, out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    /// Adds the `1 x c` row `v` to every row of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (1, c), "add_row shapes");
        let vv = self.value(v);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            for (o, x) in row.iter_mut().zip(vv) {
                *o += x;
            }
        }
        self.push(r, c, out, Op::AddRow(a, v))
    }

    /// Adds the `1 x c` row `v` to row `row` of `a` only.
    pub fn add_at_row(&mut self, a: Var, row: usize, v: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (1, c), "add_at_row shapes");
        let mut out = self.value(a).to_vec();
        for (o, x) in out[row * c..(row + 1) * c].iter_mut().zip(self.value(v)) {
            *o += x;
        }
        self.push(r, c, out, Op::AddAtRow(a, row, v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            assert_eq!(self.shape(p).1, c, "concat_rows widths");
            r += self.shape(p).0;
            out.extend_from_slice(self.value(p));
        }
        self.push(r, c, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols heights");
            let pv = self.value(p);
            for i in 0..r {
                out[i * c + off..i * c + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        self.push(r, c, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + width <= c, "slice_cols bounds");
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + width]);
        }
        self.push(r, width, out, Op::SliceCols(a, start))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let c = self.shape(a).1;
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, out, Op::SelectRows(a, idx.to_vec()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x))))
            .collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(r, c, out, Op::LogSoftmaxRows(a))
    }

    /// Scales every row to unit Euclidean norm. Rows with (near) zero norm
    /// map to zero rows and pass no gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let n = libm::sqrt(dot(row, row));
            norms.push(n);
            if n > NORM_FLOOR {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        self.push(r, c, out, Op::L2NormalizeRows(a, norms))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for row in av.chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// `sum_ij a_ij * w_ij` with constant weights, as a 1x1 node.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        assert_eq!(self.value(a).len(), weights.len(), "weighted_sum shapes");
        let s = dot(self.value(a), &weights);
        self.push(1, 1, vec![s], Op::WeightedSum(a, weights))
    }

    /// `offset + sum_k coef_k * x_k` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)], offset: f64) -> Var {
        let (r, c) = self.shape(terms[0].0);
        let mut out = vec![offset; r * c];
        for &(v, coef) in terms {
            assert_eq!(self.shape(v), (r, c), "lin_comb shapes");
            for (o, x) in out.iter_mut().zip(self.value(v)) {
                *o += coef * x;
            }
        }
        self.push(r, c, out, Op::LinComb(terms.to_vec()))
    }

    /// Back-propagates from the scalar `root`, adding parameter gradients
    /// into `grads`.
    pub fn backward(&self, root: Var, grads: &mut Grads) {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut gs: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        gs[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            let g = core::mem::take(&mut gs[i]);
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Const => {}
                Op::Param(id) => add_into(&mut grads.data[id.0], &g),
                Op::GatherRows { src, idx } => {
                    let dst = &mut grads.data[src.0];
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(&mut dst[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
                Op::EmbedTokens { items, mask, pad, tokens } => {
                    for (k, tok) in tokens.iter().enumerate() {
                        let gk = &g[k * c..(k + 1) * c];
                        match *tok {
                            Token::Item(v) => add_into(&mut grads.data[items.0][v * c..(v + 1) * c], gk),
                            Token::Mask => add_into(&mut grads.data[mask.0], gk),
                            Token::Pad => add_into(&mut grads.data[pad.0], gk),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = grad_slot(&mut gs, *a, r * k);
                    // dA = G * B^T
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            ga[ii * k + p] += dot(grow, &bv[p * c..(p + 1) * c]);
                        }
                    }
                    let gb = grad_slot(&mut gs, *b, k * c);
                    // dB = A^T * G
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let a_ip = av[ii * k + p];
                            if a_ip != 0.0 {
                                axpy(a_ip, grow, &mut gb[p * c..(p + 1) * c]);
                            }
                        }
                    }
                }
                Op::MatMulNT(a, b) => {
                    let k = self.shape(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = grad_slot(&mut gs, *a, r * k);
                    // dA = G * B
                    for ii in 0..r {
                        for j in 0..c {
                            let gij = g[ii * c + j];
                            if gij != 0.0 {
                                axpy(gij, &bv[j * k..(j + 1) * k], &mut ga[ii * k..(ii + 1) * k]);
                            }
                        }
                    }
                    let gb = grad_slot(&mut gs, *b, c * k);
                    // dB = G^T * A
                    for ii in 0..r {
                        let arow = &av[ii * k..(ii + 1) * k];
                        for j in 0..c {
                            let gij = g[ii * c + j];
                            if gij != 0.0 {
                                axpy(gij, arow, &mut gb[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(grad_slot(&mut gs, *a, r * c), &g);
                    add_into(grad_slot(&mut gs, *b, r * c), &g);
                }
                Op::AddRow(a, v) => {
                    add_into(grad_slot(&mut gs, *a, r * c), &g);
                    let gv = grad_slot(&mut gs, *v, c);
                    for row in g.chunks(c) {
                        add_into(gv, row);
                    }
                }
                Op::AddAtRow(a, row, v) => {
                    add_into(grad_slot(&mut gs, *a, r * c), &g);
                    add_into(grad_slot(&mut gs, *v, c), &g[row * c..(row + 1) * c]);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.shape(p).0 * c;
                        add_into(grad_slot(&mut gs, p, n), &g[off..off + n]);
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let gp = grad_slot(&mut gs, p, r * pc);
                        for ii in 0..r {
                            add_into(&mut gp[ii * pc..(ii + 1) * pc], &g[ii * c + off..ii * c + off + pc]);
                        }
                        off += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ac = self.shape(*a).1;
                    let ga = grad_slot(&mut gs, *a, r * ac);
                    for ii in 0..r {
                        add_into(&mut ga[ii * ac + start..ii * ac + start + c], &g[ii * c..(ii + 1) * c]);
                    }
                }
                Op::SelectRows(a, idx) => {
                    let n = self.shape(*a).0 * c;
                    let ga = grad_slot(&mut gs, *a, n);
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(&mut ga[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
                Op::Scale(a, s) => {
                    axpy(*s, &g, grad_slot(&mut gs, *a, r * c));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain).to_vec();
                    {
                        let gg = grad_slot(&mut gs, *gain, c);
                        for ii in 0..r {
                            for j in 0..c {
                                gg[j] += g[ii * c + j] * xhat[ii * c + j];
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut gs, *bias, c);
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                    let gx = grad_slot(&mut gs, *x, r * c);
                    let n = c as f64;
                    for ii in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = g[ii * c + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[ii * c + j];
                        }
                        for j in 0..c {
                            let d = g[ii * c + j] * gv[j];
                            gx[ii * c + j] += inv_std[ii] / n * (n * d - sum_d - xhat[ii * c + j] * sum_dx);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga = grad_slot(&mut gs, *a, r * c);
                    for (k, &x) in av.iter().enumerate() {
                        let th = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
                        let dudx = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[k] += g[k] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dudx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut gs, *a, r * c);
                    for ii in 0..r {
                        let yr = &y[ii * c..(ii + 1) * c];
                        let gr = &g[ii * c..(ii + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            ga[ii * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut gs, *a, r * c);
                    for ii in 0..r {
                        let gr = &g[ii * c..(ii + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[ii * c + j] += gr[j] - libm::exp(y[ii * c + j]) * s;
                        }
                    }
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut gs, *a, r * c);
                    for ii in 0..r {
                        if norms[ii] <= NORM_FLOOR {
                            continue;
                        }
                        let yr = &y[ii * c..(ii + 1) * c];
                        let gr = &g[ii * c..(ii + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            ga[ii * c + j] += (gr[j] - yr[j] * s) / norms[ii];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let ar = self.shape(*a).0;
                    let ga = grad_slot(&mut gs, *a, ar * c);
                    let inv = 1.0 / ar as f64;
                    for row in ga.chunks_mut(c) {
                        axpy(inv, &g, row);
                    }
                }
                Op::WeightedSum(a, w) => {
                    let n = w.len();
                    axpy(g[0], w, grad_slot(&mut gs, *a, n));
                }
                Op::LinComb(terms) => {
                    for &(v, coef) in terms {
                        axpy(coef, &g, grad_slot(&mut gs, v, r * c));
                    }
                }
            }
        }
    }
}

fn grad_slot(gs: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let slot = &mut gs[v.0];
    if slot.is_empty() {
        *slot = vec![0.0; len];
    }
    slot
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out (r x c) = a (r x k) * b (k x c)`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * c..(p + 1) * c], orow);
            }
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(xs.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v = libm::exp(*v - lse);
    }
}
