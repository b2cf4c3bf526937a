//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! Nodes are evaluated eagerly as they are recorded; [`Tape::backward`]
//! walks them in reverse. The op set is exactly what the transformer stacks
//! and the three losses need, with attention fused into a single op.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Block layout for fused multi-head attention over a flattened batch.
///
/// Queries are rows `b * q_len + i`, keys/values rows `b * k_len + j`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * k_len` flags; invalid keys receive zero weight.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    Gather { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>, probs: Vec<Array2<F>> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, scale: F },
    BceWithLogits { logits: Var, labels: Vec<(usize, bool)>, scale: F },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    param: Option<usize>,
}

pub const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Scalar>(x: F) -> F {
    let t = (c::<F>(GELU_C) * (x + c::<F>(GELU_A) * x * x * x)).tanh();
    c::<F>(0.5) * x * (F::one() + t)
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let inner = c::<F>(GELU_C) * (x + c::<F>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = c::<F>(GELU_C) * (F::one() + c::<F>(3.0 * GELU_A) * x * x);
    c::<F>(0.5) * (F::one() + t) + c::<F>(0.5) * x * (F::one() - t * t) * dinner
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Row-wise log-sum-exp.
pub fn logsumexp<F: Scalar>(row: ndarray::ArrayView1<F>) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    let s: F = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax over the last axis in place; rows that are fully `-inf` become zeros.
pub fn softmax_rows_inplace<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        if mx == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// Per-(batch, head) attention probabilities and the concatenated head output.
pub fn attention_forward<F: Scalar>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    layout: &AttentionLayout,
) -> (Array2<F>, Vec<Array2<F>>) {
    let d = q.ncols();
    let dh = d / layout.heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let (tq, tk) = (layout.q_len, layout.k_len);
    let mut out = Array2::zeros((layout.batch * tq, d));
    let mut probs = Vec::with_capacity(layout.batch * layout.heads);
    for b in 0..layout.batch {
        let valid = &layout.key_valid[b * tk..(b + 1) * tk];
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![b * tq..(b + 1) * tq, cols.clone()]);
            let kh = k.slice(s![b * tk..(b + 1) * tk, cols.clone()]);
            let vh = v.slice(s![b * tk..(b + 1) * tk, cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * scale;
            for ((i, j), x) in scores.indexed_iter_mut() {
                if !valid[j] || (layout.causal && j > i) {
                    *x = F::neg_infinity();
                }
            }
            softmax_rows_inplace(&mut scores);
            out.slice_mut(s![b * tq..(b + 1) * tq, cols]).assign(&scores.dot(&vh));
            probs.push(scores);
        }
    }
    (out, probs)
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf tagged with a parameter index so its gradient can be collected.
    pub fn param(&mut self, index: usize, value: &Array2<F>) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a . b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `a + bias` with `bias` of shape `[1, a.ncols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a) + self.value(bias);
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// `x / rms(x) * gain` per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let d = c::<F>(xv.ncols() as f64);
        let inv_rms: Vec<F> = xv
            .rows()
            .into_iter()
            .map(|r| F::one() / (r.iter().map(|&v| v * v).sum::<F>() / d + c::<F>(RMS_EPS)).sqrt())
            .collect();
        let mut out = xv.clone();
        let g = self.value(gain).row(0).to_owned();
        for (mut row, &ir) in out.rows_mut().into_iter().zip(&inv_rms) {
            Zip::from(&mut row).and(&g).for_each(|o, &gi| *o = *o * ir * gi);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>) -> Var {
        let (out, probs) = attention_forward(self.value(q).view(), self.value(k).view(), self.value(v).view(), &layout);
        self.push(out, Op::Attention { q, k, v, layout, probs })
    }

    /// `scale * sum_{(r, t)} -log softmax(logits[r])[t]` as a `[1, 1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>, scale: F) -> Var {
        let lv = self.value(logits);
        let mut total = F::zero();
        for &(r, t) in &targets {
            let row = lv.row(r);
            total = total + (logsumexp(row) - row[t]);
        }
        self.push(Array2::from_elem((1, 1), total * scale), Op::CrossEntropy { logits, targets, scale })
    }

    /// Binary cross-entropy on column-0 logits. A `true` label marks a
    /// replaced token and costs `-log(1 - sigmoid(z))`; `false` costs
    /// `-log sigmoid(z)`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<(usize, bool)>, scale: F) -> Var {
        let lv = self.value(logits);
        let mut total = F::zero();
        for &(r, replaced) in &labels {
            let z = lv[[r, 0]];
            total = total + if replaced { softplus(z) } else { softplus(-z) };
        }
        self.push(Array2::from_elem((1, 1), total * scale), Op::BceWithLogits { logits, labels, scale })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, F)>) -> Var {
        let mut out = Array2::zeros((1, 1));
        for &(v, w) in &terms {
            out = out + self.value(v) * w;
        }
        self.push(out, Op::WeightedSum(terms))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, k) => {
                    acc(&mut grads, *a, g * *k);
                }
                Op::Gelu(a) => {
                    let mut da = g;
                    Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| *d = *d * gelu_grad(x));
                    acc(&mut grads, *a, da);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).row(0).to_owned();
                    let d = c::<F>(xv.ncols() as f64);
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let ir = inv_rms[r];
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        // xhat = x * ir, dxhat = g * gain
                        let mut dot = F::zero();
                        for j in 0..xr.len() {
                            let xhat = xr[j] * ir;
                            let dxhat = gr[j] * gv[j];
                            dgain[[0, j]] = dgain[[0, j]] + gr[j] * xhat;
                            dot = dot + dxhat * xhat;
                        }
                        let mean = dot / d;
                        for j in 0..xr.len() {
                            let xhat = xr[j] * ir;
                            let dxhat = gr[j] * gv[j];
                            dx[[r, j]] = (dxhat - xhat * mean) * ir;
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Array2::zeros(t.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) = self.attention_backward(&g, *q, *k, *v, layout, probs);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, scale } => {
                    let lv = self.value(*logits);
                    let gs = g[[0, 0]] * *scale;
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for &(r, t) in targets {
                        let row = lv.row(r);
                        let lse = logsumexp(row);
                        let mut drow = dl.row_mut(r);
                        Zip::from(&mut drow).and(&row).for_each(|d, &x| *d = *d + gs * (x - lse).exp());
                        drow[t] = drow[t] - gs;
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::BceWithLogits { logits, labels, scale } => {
                    let lv = self.value(*logits);
                    let gs = g[[0, 0]] * *scale;
                    let mut dl = Array2::zeros(lv.raw_dim());
                    for &(r, replaced) in labels {
                        let z = lv[[r, 0]];
                        // d softplus(z) = sigmoid(z); d softplus(-z) = sigmoid(z) - 1
                        let s = sigmoid(z);
                        dl[[r, 0]] = dl[[r, 0]] + gs * if replaced { s } else { s - F::one() };
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, &g * w);
                    }
                }
            }
        }
        Gradients { grads, params: self.nodes.iter().map(|n| n.param).collect() }
    }

    fn attention_backward(
        &self,
        g: &Array2<F>,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[Array2<F>],
    ) -> (Array2<F>, Array2<F>, Array2<F>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / layout.heads;
        let scale = c::<F>(1.0 / (dh as f64).sqrt());
        let (tq, tk) = (layout.q_len, layout.k_len);
        let mut dq = Array2::zeros(qv.raw_dim());
        let mut dk = Array2::zeros(kv.raw_dim());
        let mut dv = Array2::zeros(vv.raw_dim());
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let p = &probs[b * layout.heads + h];
                let qs = s![b * tq..(b + 1) * tq, h * dh..(h + 1) * dh];
                let ks = s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh];
                let go = g.slice(qs);
                let dp = go.dot(&vv.slice(ks).t());
                dv.slice_mut(ks).assign(&p.t().dot(&go));
                let mut dscore = p.clone();
                for ((row_p, mut row_s), row_dp) in p.rows().into_iter().zip(dscore.rows_mut()).zip(dp.rows()) {
                    let dotp: F = row_p.iter().zip(row_dp.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut row_s).and(&row_dp).for_each(|s, &dpv| *s = *s * (dpv - dotp) * scale);
                }
                dq.slice_mut(qs).assign(&dscore.dot(&kv.slice(ks)));
                dk.slice_mut(ks).assign(&dscore.t().dot(&qv.slice(qs)));
            }
        }
        (dq, dk, dv)
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, delta: Array2<F>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
    params: Vec<Option<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter index (shapes given), summed over every leaf
    /// that references it. Parameters that received no gradient are zero.
    pub fn param_grads(&self, shapes: &[(usize, usize)]) -> Vec<Array2<F>> {
        let mut out: Vec<Array2<F>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(p)) = (g, p) {
                out[*p] += g;
            }
        }
        out
    }
}
