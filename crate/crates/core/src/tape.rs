//! Reverse-mode automatic differentiation over small row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Rows are
//! independent samples (vehicle tracks); no op mixes rows except through an
//! explicit attention key set, so results for one row never depend on the
//! values held by another.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored `a_rows x a_cols` before transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    alpha: f64,
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (m, k, rsa, csa) = if trans_a {
        (a_cols, a_rows, 1, a_cols)
    } else {
        (a_rows, a_cols, a_cols, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b_cols, b_rows, 1, b_cols)
    } else {
        (b_rows, b_cols, b_cols, 1)
    };
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    assert_eq!(c.len(), m * n, "matmul output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every pointer/stride pair addresses exactly the asserted
    // extents of its slice; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct AttentionCache {
    query: Var,
    keys: Var,
    values: Var,
    mask: Vec<bool>,
    slots: usize,
    heads: usize,
    scale: f64,
    /// `[row][head][slot]` softmax weights; zero for masked slots.
    weights: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Select(Var, Var, Vec<bool>),
    Attention(Box<AttentionCache>),
    TriMatVec(Var, Var),
    RowNorm(Var),
    KlStdNormal(Var, Var),
    WeightedSum(Var, Vec<f64>),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter `id`. Repeated calls with the same id return the
    /// same node.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if self.param_vars.len() <= id {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(
            1.0, &ta.data, ta.rows, ta.cols, false, &tb.data, tb.rows, tb.cols, false, 0.0,
            &mut out.data,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds the `1 x cols` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tb.rows, 1);
        assert_eq!(tx.cols, tb.cols);
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
                offset += t.cols;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols);
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::Slice(a, start), ng)
    }

    /// Row `r` comes from `on` where `mask[r]`, otherwise from `off`.
    pub fn select_rows(&mut self, on: Var, off: Var, mask: &[bool]) -> Var {
        let (ton, toff) = (self.value(on), self.value(off));
        assert_eq!(ton.shape(), toff.shape());
        assert_eq!(mask.len(), ton.rows);
        let mut out = toff.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(ton.row(r));
            }
        }
        let ng = self.ng(on) || self.ng(off);
        self.push(out, Op::Select(on, off, mask.to_vec()), ng)
    }

    /// Masked multi-head scaled dot-product attention.
    ///
    /// `query` is `n x D`; `keys` and `values` are `(n * slots) x D`, slot
    /// `s` of row `r` at row `r * slots + s`. Each head attends over its
    /// `D / heads` columns with logits scaled by `scale`. Masked slots take no
    /// part in the softmax; a row with every slot masked yields zeros.
    pub fn attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        mask: &[bool],
        slots: usize,
        heads: usize,
        scale: f64,
    ) -> Var {
        let (tq, tk, tv) = (self.value(query), self.value(keys), self.value(values));
        let (n, d) = tq.shape();
        assert_eq!(tk.shape(), (n * slots, d), "attention key shape");
        assert_eq!(tv.shape(), (n * slots, d), "attention value shape");
        assert_eq!(mask.len(), n * slots, "attention mask length");
        assert!(heads > 0 && d % heads == 0, "attention size must divide into heads");
        let hd = d / heads;
        let mut weights = vec![0.0; n * heads * slots];
        let mut out = Tensor::zeros(n, d);
        let mut logits = vec![0.0; slots];
        for r in 0..n {
            let q = tq.row(r);
            let row_mask = &mask[r * slots..(r + 1) * slots];
            if !row_mask.iter().any(|&m| m) {
                continue;
            }
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let mut max = f64::NEG_INFINITY;
                for s in 0..slots {
                    if row_mask[s] {
                        let k = &tk.row(r * slots + s)[cols.clone()];
                        let dot: f64 = q[cols.clone()].iter().zip(k).map(|(a, b)| a * b).sum();
                        logits[s] = dot * scale;
                        max = max.max(logits[s]);
                    }
                }
                let w = &mut weights[(r * heads + h) * slots..(r * heads + h + 1) * slots];
                let mut total = 0.0;
                for s in 0..slots {
                    if row_mask[s] {
                        w[s] = (logits[s] - max).exp();
                        total += w[s];
                    }
                }
                let o = &mut out.data[r * d + h * hd..r * d + (h + 1) * hd];
                for s in 0..slots {
                    if row_mask[s] {
                        w[s] /= total;
                        let v = &tv.row(r * slots + s)[cols.clone()];
                        for (oi, vi) in o.iter_mut().zip(v) {
                            *oi += w[s] * vi;
                        }
                    }
                }
            }
        }
        let ng = self.ng(query) || self.ng(keys) || self.ng(values);
        let cache = AttentionCache {
            query,
            keys,
            values,
            mask: mask.to_vec(),
            slots,
            heads,
            scale,
            weights,
        };
        self.push(out, Op::Attention(Box::new(cache)), ng)
    }

    /// Softmax weights recorded by an attention node, `[row][head][slot]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.weights),
            _ => None,
        }
    }

    /// Row-wise tridiagonal matrix-vector product.
    ///
    /// Row `r` of `raw` holds `3j - 2` entries: the main diagonal, then the
    /// superdiagonal, then the subdiagonal of a `j x j` matrix applied to row
    /// `r` of `x`.
    pub fn tridiagonal_matvec(&mut self, raw: Var, x: Var) -> Var {
        let (tr, tx) = (self.value(raw), self.value(x));
        let j = tx.cols;
        assert_eq!(tr.cols, 3 * j - 2, "tridiagonal entry count");
        assert_eq!(tr.rows, tx.rows);
        let mut out = Tensor::zeros(tx.rows, j);
        for r in 0..tx.rows {
            let (k, v) = (tr.row(r), tx.row(r));
            let (diag, sup, sub) = (&k[..j], &k[j..2 * j - 1], &k[2 * j - 1..]);
            let y = out.row_mut(r);
            for i in 0..j {
                let mut acc = diag[i] * v[i];
                if i + 1 < j {
                    acc += sup[i] * v[i + 1];
                }
                if i > 0 {
                    acc += sub[i - 1] * v[i - 1];
                }
                y[i] = acc;
            }
        }
        let ng = self.ng(raw) || self.ng(x);
        self.push(out, Op::TriMatVec(raw, x), ng)
    }

    /// Euclidean norm of every row, as an `n x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(
            t.rows,
            1,
            (0..t.rows)
                .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        );
        let ng = self.ng(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Per-row KL divergence of `N(mu, sigma^2)` from the standard normal,
    /// summed over columns.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var) -> Var {
        let (tm, ts) = (self.value(mu), self.value(sigma));
        assert_eq!(tm.shape(), ts.shape());
        let out = Tensor::from_vec(
            tm.rows,
            1,
            (0..tm.rows)
                .map(|r| crate::latent::kl_std_normal(tm.row(r), ts.row(r)))
                .collect(),
        );
        let ng = self.ng(mu) || self.ng(sigma);
        self.push(out, Op::KlStdNormal(mu, sigma), ng)
    }

    /// `sum_r weights[r] * sum_c a[r, c]` as a `1 x 1` tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Var {
        let t = self.value(a);
        assert_eq!(weights.len(), t.rows);
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                total += w * t.row(r).iter().sum::<f64>();
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::scalar(total), Op::WeightedSum(a, weights.to_vec()), ng)
    }

    /// Sum of `1 x 1` tensors, left to right.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut total = 0.0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape(), (1, 1));
            total += t.data[0];
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), ng)
    }

    /// Backpropagates from the scalar `root` and returns the gradient of
    /// every parameter touched by this tape, indexed by parameter id.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            // Keep parameter gradients for collection below.
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut out: Vec<Option<Tensor>> = (0..self.param_vars.len()).map(|_| None).collect();
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                out[id] = grads[v.0].take();
            }
        }
        out
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(
                        1.0, &g.data, g.rows, g.cols, false, &tb.data, tb.rows, tb.cols, true, 1.0,
                        &mut ga.data,
                    );
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(
                        1.0, &ta.data, ta.rows, ta.cols, true, &g.data, g.rows, g.cols, false, 1.0,
                        &mut gb.data,
                    );
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (o, v) in gb.data.iter_mut().zip(&g.data) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), bv) in ga.data.iter_mut().zip(&g.data).zip(&tb.data) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, gv), av) in gb.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, gv) in ga.data.iter_mut().zip(&g.data) {
                        *o += k * gv;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gv * yv;
                    }
                }
            }
            Op::Abs(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), xv) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        if *xv > 0.0 {
                            *o += gv;
                        } else if *xv < 0.0 {
                            *o -= gv;
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), xv) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        if *xv >= *lo && *xv <= *hi {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for r in 0..g.rows {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + pc]) {
                                *o += v;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Slice(a, start) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows {
                        for (o, v) in ga.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Select(on, off, mask) => {
                if let Some(gon) = self.grad_slot(grads, *on) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (o, v) in gon.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                if let Some(goff) = self.grad_slot(grads, *off) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            for (o, v) in goff.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Attention(c) => self.backprop_attention(c, g, grads),
            Op::TriMatVec(raw, x) => {
                let (tr, tx) = (self.value(*raw), self.value(*x));
                let j = tx.cols;
                if let Some(graw) = self.grad_slot(grads, *raw) {
                    for r in 0..g.rows {
                        let (gy, v) = (g.row(r), tx.row(r));
                        let gk = graw.row_mut(r);
                        for i in 0..j {
                            gk[i] += gy[i] * v[i];
                        }
                        for i in 0..j - 1 {
                            gk[j + i] += gy[i] * v[i + 1];
                            gk[2 * j - 1 + i] += gy[i + 1] * v[i];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for r in 0..g.rows {
                        let (gy, k) = (g.row(r), tr.row(r));
                        let (diag, sup, sub) = (&k[..j], &k[j..2 * j - 1], &k[2 * j - 1..]);
                        let gv = gx.row_mut(r);
                        for i in 0..j {
                            let mut acc = diag[i] * gy[i];
                            if i > 0 {
                                acc += sup[i - 1] * gy[i - 1];
                            }
                            if i + 1 < j {
                                acc += sub[i] * gy[i + 1];
                            }
                            gv[i] += acc;
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..ta.rows {
                        let norm = y.data[r];
                        if norm > 0.0 {
                            let k = g.data[r] / norm;
                            for (o, v) in ga.row_mut(r).iter_mut().zip(ta.row(r)) {
                                *o += k * v;
                            }
                        }
                    }
                }
            }
            Op::KlStdNormal(mu, sigma) => {
                let (tm, ts) = (self.value(*mu), self.value(*sigma));
                if let Some(gm) = self.grad_slot(grads, *mu) {
                    for r in 0..tm.rows {
                        let k = g.data[r];
                        for (o, m) in gm.row_mut(r).iter_mut().zip(tm.row(r)) {
                            *o += k * m;
                        }
                    }
                }
                if let Some(gs) = self.grad_slot(grads, *sigma) {
                    for r in 0..ts.rows {
                        let k = g.data[r];
                        for (o, s) in gs.row_mut(r).iter_mut().zip(ts.row(r)) {
                            *o += k * (s - 1.0 / s);
                        }
                    }
                }
            }
            Op::WeightedSum(a, weights) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let k = g.data[0];
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            for o in ga.row_mut(r) {
                                *o += k * w;
                            }
                        }
                    }
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if let Some(gp) = self.grad_slot(grads, p) {
                        gp.data[0] += g.data[0];
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tq, tk, tv) = (self.value(c.query), self.value(c.keys), self.value(c.values));
        let (n, d) = tq.shape();
        let (slots, heads) = (c.slots, c.heads);
        let hd = d / heads;
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(n * slots, d);
        let mut gv = Tensor::zeros(n * slots, d);
        let mut gw = vec![0.0; slots];
        for r in 0..n {
            let row_mask = &c.mask[r * slots..(r + 1) * slots];
            if !row_mask.iter().any(|&m| m) {
                continue;
            }
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let w = &c.weights[(r * heads + h) * slots..(r * heads + h + 1) * slots];
                let go = &g.row(r)[cols.clone()];
                let mut dot = 0.0;
                for s in 0..slots {
                    if row_mask[s] {
                        let v = &tv.row(r * slots + s)[cols.clone()];
                        gw[s] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                        dot += w[s] * gw[s];
                        for (o, gov) in gv.row_mut(r * slots + s)[cols.clone()].iter_mut().zip(go) {
                            *o += w[s] * gov;
                        }
                    }
                }
                for s in 0..slots {
                    if row_mask[s] {
                        let glogit = w[s] * (gw[s] - dot) * c.scale;
                        let k = &tk.row(r * slots + s)[cols.clone()];
                        for (o, kv) in gq.row_mut(r)[cols.clone()].iter_mut().zip(k) {
                            *o += glogit * kv;
                        }
                        let q = &tq.row(r)[cols.clone()];
                        for (o, qv) in gk.row_mut(r * slots + s)[cols.clone()].iter_mut().zip(q) {
                            *o += glogit * qv;
                        }
                    }
                }
            }
        }
        for (var, grad) in [(c.query, gq), (c.keys, gk), (c.values, gv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                add_into(slot, &grad);
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (o, v) in dst.data.iter_mut().zip(&src.data) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(param) against central differences, where `build`
    /// records a scalar loss from the given parameter tensors.
    fn check(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |ps: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
            let out = build(&mut tape, &vars);
            (tape.value(out).data[0], tape.backward(out))
        };
        let (_, analytic) = eval(&params);
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let ga = analytic[pi].as_ref().expect("param gradient");
            for e in 0..p.data.len() {
                let mut plus = params.clone();
                plus[pi].data[e] += h;
                let mut minus = params.clone();
                minus[pi].data[e] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = ga.data[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "param {pi} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn reduce(tape: &mut Tape, v: Var) -> Var {
        let (r, c) = tape.value(v).shape();
        let w: Vec<f64> = (0..r).map(|i| 0.3 + i as f64 * 0.1).collect();
        let flat = if c > 1 {
            let sq = tape.mul(v, v);
            let n = tape.row_norm(sq);
            tape.add(n, n)
        } else {
            v
        };
        tape.weighted_sum(flat, &w)
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 5), random(&mut rng, 1, 5)];
        check(params, |t, v| {
            let m = t.matmul(v[0], v[1]);
            let b = t.add_bias(m, v[2]);
            let a = t.tanh(b);
            let s = t.sigmoid(b);
            let e = t.exp(a);
            let p = t.mul(e, s);
            let q = t.sub(p, a);
            let k = t.scale(q, 0.7);
            let ab = t.abs(k);
            let cat = t.concat(&[ab, b]);
            let sl = t.slice_cols(cat, 2, 5);
            reduce(t, sl)
        });
    }

    #[test]
    fn select_clamp_and_kl_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3)];
        check(params, |t, v| {
            let sel = t.select_rows(v[0], v[1], &[true, false, false, true]);
            let cl = t.clamp(sel, -0.5, 0.5);
            let sig = t.exp(v[1]);
            let kl = t.kl_std_normal(cl, sig);
            let norm = t.row_norm(v[0]);
            let a = t.weighted_sum(kl, &[1.0, 0.5, 0.0, 2.0]);
            let b = t.weighted_sum(norm, &[0.1, 0.2, 0.3, 0.4]);
            t.sum_scalars(&[a, b])
        });
    }

    #[test]
    fn tridiagonal_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for j in [1, 2, 4] {
            let params = vec![random(&mut rng, 3, 3 * j - 2), random(&mut rng, 3, j)];
            check(params, |t, v| {
                let y = t.tridiagonal_matvec(v[0], v[1]);
                reduce(t, y)
            });
        }
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, slots, d, heads) = (3, 3, 8, 2);
        let params = vec![
            random(&mut rng, n, d),
            random(&mut rng, n * slots, d),
            random(&mut rng, n * slots, d),
        ];
        let mask = vec![true, true, false, false, false, false, true, false, true];
        check(params, |t, v| {
            let o = t.attention(v[0], v[1], v[2], &mask, slots, heads, 0.5);
            reduce(t, o)
        });
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, slots, d, heads) = (4, 3, 8, 4);
        let mut tape = Tape::new();
        let q = tape.input(random(&mut rng, n, d));
        let k = tape.input(random(&mut rng, n * slots, d));
        let v = tape.input(random(&mut rng, n * slots, d));
        let mask = vec![true, true, true, false, true, true, false, false, true, false, false, false];
        let o = tape.attention(q, k, v, &mask, slots, heads, 1.0);
        let w = tape.attention_weights(o).unwrap();
        for r in 0..n {
            for h in 0..heads {
                let ws = &w[(r * heads + h) * slots..(r * heads + h + 1) * slots];
                let total: f64 = ws.iter().sum();
                if r == 3 {
                    assert_eq!(total, 0.0);
                } else {
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(tape.value(o).row(3).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradients_skip_inputs() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[&[1.0, 2.0]]));
        let w = tape.param(0, &Tensor::from_rows(&[&[1.0], &[1.0]]));
        let y = tape.matmul(x, w);
        let s = tape.weighted_sum(y, &[1.0]);
        let g = tape.backward(s);
        assert_eq!(g[0].as_ref().unwrap().data(), &[1.0, 2.0]);
    }
}
