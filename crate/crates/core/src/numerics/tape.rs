use std::cell::{Ref, RefCell};
use std::fmt;

use super::{NumericsError, Tensor};
use crate::Scalar;

type Result<T> = std::result::Result<T, NumericsError>;

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in execution order, so every node's inputs have smaller
/// ids than the node itself. [`Tape::backward`] walks the list once in reverse.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    AddRow(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    MulConst(usize, Vec<F>),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Exp(usize),
    Ln { x: usize, eps: F },
    Clamp { x: usize, lo: F, hi: F },
    Sum(usize),
    Mean(usize),
    MeanOverRows(usize),
    RepeatCols(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: F,
        weights: Vec<F>,
        keep: Option<Vec<F>>,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Min(a, b)
            | Max(a, b) | AddRow(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | MulConst(a, _) | Relu(a) | Sigmoid(a)
            | Abs(a) | Exp(a) | Sum(a) | Mean(a) | MeanOverRows(a) | RepeatCols(a)
            | SoftmaxRows(a) | LogSoftmaxRows(a) => vec![*a],
            Ln { x, .. } | Clamp { x, .. } | SliceRows { x, .. } | SliceCols { x, .. } => vec![*x],
            GatherRows { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatRows(parts) => parts.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

/// Allowed-key pattern for attention: `true` means query `i` may attend key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(NumericsError::Shape {
                op: "attention_mask",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Every query may see the first `valid` keys only (key padding).
    pub fn key_prefix(rows: usize, cols: usize, valid: usize) -> Self {
        let allowed = (0..rows * cols).map(|ix| ix % cols < valid).collect();
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Total derivative of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Vec<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(NumericsError::Contract {
            op,
            msg: format!("expected a matrix, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = ra.iter().zip(rb).fold(F::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        total += v;
    }
    total
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf that participates in differentiation.
    pub fn var(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    fn push_raw(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Var<'_, F> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn concat_rows(&self, parts: &[Var<'_, F>]) -> Result<Var<'_, F>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or(NumericsError::Contract {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = nodes[first.id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.cols() != cols || v.shape().len() != 2 {
                return Err(shape_err("concat_rows", nodes[first.id].value.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        drop(nodes);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Multi-head scaled dot-product attention over already-projected inputs.
    ///
    /// `q` is `Lq×D`, `k` and `v` are `Lk×D`, heads split `D` into equal
    /// column blocks. `keep`, when given, holds one multiplier per weight
    /// (`0` or `1/(1-p)`) and implements dropout on the attention weights.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, F>,
        k: Var<'t, F>,
        v: Var<'t, F>,
        heads: usize,
        mask: Option<&AttentionMask>,
        keep: Option<Vec<F>>,
    ) -> Result<Var<'t, F>> {
        let nodes = self.nodes.borrow();
        let (qv, kv, vv) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
        let (lq, dim) = matrix_dims("attention", qv)?;
        let (lk, kdim) = matrix_dims("attention", kv)?;
        if kdim != dim || vv.shape() != kv.shape() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::Contract {
                op: "attention",
                msg: format!("model dim {dim} not divisible by {heads} heads"),
            });
        }
        if let Some(m) = mask {
            if m.shape() != (lq, lk) {
                return Err(shape_err("attention", &[lq, lk], &[m.rows, m.cols]));
            }
            if let Some(i) = (0..lq).find(|&i| (0..lk).all(|j| !m.allows(i, j))) {
                return Err(NumericsError::Contract {
                    op: "attention",
                    msg: format!("query row {i} has every key masked"),
                });
            }
        }
        if let Some(kp) = &keep {
            if kp.len() != heads * lq * lk {
                return Err(shape_err("attention", &[heads, lq, lk], &[kp.len()]));
            }
        }
        let dk = dim / heads;
        let scale = F::one() / F::lit(dk as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut weights = vec![F::zero(); heads * lq * lk];
        let mut out = vec![F::zero(); lq * dim];
        for h in 0..heads {
            let off = h * dk;
            for i in 0..lq {
                let qi = &qd[i * dim + off..i * dim + off + dk];
                let wrow = &mut weights[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut max = F::neg_infinity();
                for (j, w) in wrow.iter_mut().enumerate() {
                    if mask.is_some_and(|m| !m.allows(i, j)) {
                        continue;
                    }
                    let s = scale * dot(qi, &kd[j * dim + off..j * dim + off + dk]);
                    *w = s;
                    max = max.max(s);
                }
                let mut total = F::zero();
                for (j, w) in wrow.iter_mut().enumerate() {
                    if mask.is_some_and(|m| !m.allows(i, j)) {
                        *w = F::zero();
                    } else {
                        *w = (*w - max).exp();
                        total += *w;
                    }
                }
                for w in wrow.iter_mut() {
                    *w /= total;
                }
                let orow = &mut out[i * dim + off..i * dim + off + dk];
                for (j, &w) in wrow.iter().enumerate() {
                    let w = match &keep {
                        Some(kp) => w * kp[(h * lq + i) * lk + j],
                        None => w,
                    };
                    if w != F::zero() {
                        axpy(w, &vd[j * dim + off..j * dim + off + dk], orow);
                    }
                }
            }
        }
        drop(nodes);
        let value = Tensor::new(vec![lq, dim], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                scale,
                weights,
                keep,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(NumericsError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, &mut grads, node, &g);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradient buffer of node `id`, allocated on first touch; `None` for constants.
fn slot<'g, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'g mut [Option<Vec<F>>],
    id: usize,
) -> Option<&'g mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); nodes[id].value.len()]))
}

fn backprop<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], node: &Node<F>, g: &[F]) {
    let val = |i: usize| &nodes[i].value;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        da[i * k + p] += dot(gi, &bd[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip != F::zero() {
                            axpy(aip, gi, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(d) = slot(nodes, grads, id) {
                    axpy(F::one(), g, d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                axpy(F::one(), g, d);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                axpy(-F::one(), g, d);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &bi) in d.iter_mut().zip(g).zip(bd) {
                    *di += gi * bi;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((di, &gi), &ai) in d.iter_mut().zip(g).zip(ad) {
                    *di += gi * ai;
                }
            }
        }
        Op::Div(a, b) => {
            let bd = val(*b).data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &bi) in d.iter_mut().zip(g).zip(bd) {
                    *di += gi / bi;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for (((di, &gi), &bi), &yi) in d.iter_mut().zip(g).zip(bd).zip(out) {
                    *di -= gi * yi / bi;
                }
            }
        }
        Op::Min(a, b) | Op::Max(a, b) => {
            let is_min = matches!(node.op, Op::Min(..));
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let pick_a: Vec<bool> = ad
                .iter()
                .zip(bd)
                .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                .collect();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &p) in d.iter_mut().zip(g).zip(&pick_a) {
                    if p {
                        *di += gi;
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((di, &gi), &p) in d.iter_mut().zip(g).zip(&pick_a) {
                    if !p {
                        *di += gi;
                    }
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(d) = slot(nodes, grads, *a) {
                axpy(F::one(), g, d);
            }
            if let Some(d) = slot(nodes, grads, *row) {
                let c = d.len();
                for gr in g.chunks(c) {
                    axpy(F::one(), gr, d);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                axpy(*c, g, d);
            }
        }
        Op::AddScalar(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                axpy(F::one(), g, d);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &ci) in d.iter_mut().zip(g).zip(c) {
                    *di += gi * ci;
                }
            }
        }
        Op::Relu(a) | Op::Abs(a) => {
            let ad = val(*a).data();
            let relu = matches!(node.op, Op::Relu(_));
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &x) in d.iter_mut().zip(g).zip(ad) {
                    if x > F::zero() {
                        *di += gi;
                    } else if !relu && x < F::zero() {
                        *di -= gi;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &y) in d.iter_mut().zip(g).zip(out) {
                    *di += gi * y * (F::one() - y);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, &gi), &y) in d.iter_mut().zip(g).zip(out) {
                    *di += gi * y;
                }
            }
        }
        Op::Ln { x, eps } => {
            let xd = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((di, &gi), &xi) in d.iter_mut().zip(g).zip(xd) {
                    if xi > *eps {
                        *di += gi / xi;
                    }
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xd = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((di, &gi), &xi) in d.iter_mut().zip(g).zip(xd) {
                    if xi >= *lo && xi <= *hi {
                        *di += gi;
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            let n = val(*a).len();
            let gv = match node.op {
                Op::Sum(_) => g[0],
                _ => g[0] / F::lit(n as f64),
            };
            if let Some(d) = slot(nodes, grads, *a) {
                for di in d.iter_mut() {
                    *di += gv;
                }
            }
        }
        Op::MeanOverRows(a) => {
            let rows = val(*a).rows();
            let inv = F::one() / F::lit(rows as f64);
            if let Some(d) = slot(nodes, grads, *a) {
                let c = g.len();
                for dr in d.chunks_mut(c) {
                    axpy(inv, g, dr);
                }
            }
        }
        Op::RepeatCols(a) => {
            let n = node.value.cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for (di, gr) in d.iter_mut().zip(g.chunks(n)) {
                    *di += gr.iter().copied().sum::<F>();
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let c = node.value.cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let s = dot(gr, yr);
                    for ((di, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *di += yi * (gi - s);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let c = node.value.cols();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let s: F = gr.iter().copied().sum();
                    for ((di, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *di += gi - yi.exp() * s;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let c = val(*logits).cols();
            let total: F = weights.iter().copied().sum();
            if let Some(d) = slot(nodes, grads, *logits) {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let coef = g[0] * w / total;
                    let dr = &mut d[i * c..(i + 1) * c];
                    axpy(coef, &probs[i * c..(i + 1) * c], dr);
                    dr[t] -= coef;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let dim = val(*x).cols();
            let gd = val(*gain).data();
            if let Some(d) = slot(nodes, grads, *gain) {
                for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                    for ((di, &gi), &xh) in d.iter_mut().zip(gr).zip(xr) {
                        *di += gi * xh;
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                for gr in g.chunks(dim) {
                    axpy(F::one(), gr, d);
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                let n = F::lit(dim as f64);
                let mut dxhat = vec![F::zero(); dim];
                for (r, (gr, xr)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                    for ((dh, &gi), &gm) in dxhat.iter_mut().zip(gr).zip(gd) {
                        *dh = gi * gm;
                    }
                    let mean_d: F = dxhat.iter().copied().sum::<F>() / n;
                    let mean_dx: F = dot(&dxhat, xr) / n;
                    let dr = &mut d[r * dim..(r + 1) * dim];
                    for ((di, &dh), &xh) in dr.iter_mut().zip(&dxhat).zip(xr) {
                        *di += inv_std[r] * (dh - mean_d - xh * mean_dx);
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if let Some(d) = slot(nodes, grads, p) {
                    axpy(F::one(), &g[offset..offset + n], d);
                }
                offset += n;
            }
        }
        Op::SliceRows { x, start } => {
            let c = val(*x).cols();
            if let Some(d) = slot(nodes, grads, *x) {
                axpy(F::one(), g, &mut d[start * c..start * c + g.len()]);
            }
        }
        Op::SliceCols { x, start } => {
            let c = val(*x).cols();
            let w = node.value.cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for (r, gr) in g.chunks(w).enumerate() {
                    axpy(F::one(), gr, &mut d[r * c + start..r * c + start + w]);
                }
            }
        }
        Op::GatherRows { x, rows } => {
            let c = val(*x).cols();
            if let Some(d) = slot(nodes, grads, *x) {
                for (gr, &r) in g.chunks(c).zip(rows) {
                    axpy(F::one(), gr, &mut d[r * c..(r + 1) * c]);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            weights,
            keep,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, *scale, weights, keep.as_deref()),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    scale: F,
    weights: &[F],
    keep: Option<&[F]>,
) {
    let (lq, dim) = (nodes[q].value.shape()[0], nodes[q].value.shape()[1]);
    let lk = nodes[k].value.shape()[0];
    let dk = dim / heads;
    let (qd, kd, vd) = (nodes[q].value.data(), nodes[k].value.data(), nodes[v].value.data());
    let mut dq = vec![F::zero(); lq * dim];
    let mut dkey = vec![F::zero(); lk * dim];
    let mut dv = vec![F::zero(); lk * dim];
    let mut dw = vec![F::zero(); lk];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..lq {
            let base = (h * lq + i) * lk;
            let wrow = &weights[base..base + lk];
            let gi = &g[i * dim + off..i * dim + off + dk];
            for j in 0..lk {
                let mult = keep.map_or(F::one(), |kp| kp[base + j]);
                let vj = &vd[j * dim + off..j * dim + off + dk];
                dw[j] = dot(gi, vj) * mult;
                let eff = wrow[j] * mult;
                if eff != F::zero() {
                    axpy(eff, gi, &mut dv[j * dim + off..j * dim + off + dk]);
                }
            }
            let s = dot(&dw, wrow);
            let qi = &qd[i * dim + off..i * dim + off + dk];
            for j in 0..lk {
                let ds = wrow[j] * (dw[j] - s) * scale;
                if ds != F::zero() {
                    axpy(ds, &kd[j * dim + off..j * dim + off + dk], &mut dq[i * dim + off..i * dim + off + dk]);
                    axpy(ds, qi, &mut dkey[j * dim + off..j * dim + off + dk]);
                }
            }
        }
    }
    for (id, buf) in [(q, dq), (k, dkey), (v, dv)] {
        if let Some(d) = slot(nodes, grads, id) {
            axpy(F::one(), &buf, d);
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> F {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Per-head weights `[heads, Lq, Lk]` if this node is an attention core.
    pub fn attention_weights(&self) -> Option<Tensor<F>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        match &node.op {
            Op::Attention { heads, weights, k, .. } => {
                let lq = node.value.shape()[0];
                let lk = nodes[*k].value.shape()[0];
                Tensor::new(vec![*heads, lq, lk], weights.clone()).ok()
            }
            _ => None,
        }
    }

    fn unary(&self, op: Op<F>, f: impl Fn(F) -> F) -> Var<'t, F> {
        let value = self.value().map(f);
        self.tape.push(value, op)
    }

    fn binary(
        &self,
        other: Var<'t, F>,
        name: &'static str,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'t, F>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = matrix_dims("matmul", &a)?;
            let (k2, n) = matrix_dims("matmul", &b)?;
            if k != k2 {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![F::zero(); m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip != F::zero() {
                        axpy(aip, &bd[p * n..(p + 1) * n], orow);
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t, F>> {
        let value = {
            let a = self.value();
            let (r, c) = matrix_dims("transpose", &a)?;
            let mut out = vec![F::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        Ok(self.tape.push(value, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn minimum(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "minimum", Op::Min(self.id, other.id), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "maximum", Op::Max(self.id, other.id), |x, y| if x >= y { x } else { y })
    }

    /// Adds a `[n]` or `1×n` row to every row of this matrix.
    pub fn add_row(&self, row: Var<'t, F>) -> Result<Var<'t, F>> {
        let value = {
            let (a, r) = (self.value(), row.value());
            if r.len() != a.cols() {
                return Err(shape_err("add_row", a.shape(), r.shape()));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(r.len()) {
                axpy(F::one(), r.data(), chunk);
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: F) -> Var<'t, F> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// Elementwise product with a constant buffer (masks, dropout).
    pub fn mul_const(&self, c: Vec<F>) -> Result<Var<'t, F>> {
        let value = {
            let a = self.value();
            if c.len() != a.len() {
                return Err(shape_err("mul_const", a.shape(), &[c.len()]));
            }
            let data = a.data().iter().zip(&c).map(|(&x, &m)| x * m).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, Op::MulConst(self.id, c)))
    }

    pub fn relu(&self) -> Var<'t, F> {
        self.unary(Op::Relu(self.id), |x| x.max(F::zero()))
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        })
    }

    pub fn abs(&self) -> Var<'t, F> {
        self.unary(Op::Abs(self.id), |x| x.abs())
    }

    pub fn exp(&self) -> Var<'t, F> {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    /// `ln(max(x, eps))`; the gradient is zero wherever the clamp is active.
    pub fn ln_clamped(&self, eps: F) -> Var<'t, F> {
        self.unary(Op::Ln { x: self.id, eps }, |x| x.max(eps).ln())
    }

    pub fn clamp(&self, lo: F, hi: F) -> Var<'t, F> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |x| x.max(lo).min(hi))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, F> {
        let s = {
            let v = self.value();
            v.data().iter().copied().sum::<F>() / F::lit(v.len() as f64)
        };
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_over_rows(&self) -> Var<'t, F> {
        let value = {
            let a = self.value();
            let c = a.cols();
            let inv = F::one() / F::lit(a.rows() as f64);
            let mut acc = vec![F::zero(); c];
            for r in a.data().chunks(c) {
                axpy(inv, r, &mut acc);
            }
            Tensor::new(vec![1, c], acc).expect("non-empty")
        };
        self.tape.push(value, Op::MeanOverRows(self.id))
    }

    /// Broadcasts an `m×1` column to `m×n`.
    pub fn repeat_cols(&self, n: usize) -> Result<Var<'t, F>> {
        let value = {
            let a = self.value();
            if a.cols() != 1 || n == 0 {
                return Err(shape_err("repeat_cols", a.shape(), &[n]));
            }
            let data = a.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
            Tensor::new(vec![a.rows(), n], data)?
        };
        Ok(self.tape.push(value, Op::RepeatCols(self.id)))
    }

    pub fn softmax_rows(&self) -> Var<'t, F> {
        let value = {
            let a = self.value();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(a.cols()) {
                softmax_in_place(row);
            }
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        self.tape.push(value, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t, F> {
        let value = {
            let a = self.value();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(a.cols()) {
                let lse = log_sum_exp(row);
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        self.tape.push(value, Op::LogSoftmaxRows(self.id))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, F>> {
        self.weighted_cross_entropy(targets, &vec![F::one(); targets.len()])
    }

    /// `Σ wᵢ·CEᵢ / Σ wᵢ`, computed in log space.
    pub fn weighted_cross_entropy(&self, targets: &[usize], weights: &[F]) -> Result<Var<'t, F>> {
        let (loss, probs) = {
            let a = self.value();
            let (b, c) = matrix_dims("cross_entropy", &a)?;
            if targets.len() != b || weights.len() != b {
                return Err(shape_err("cross_entropy", a.shape(), &[targets.len()]));
            }
            let total: F = weights.iter().copied().sum();
            if total <= F::zero() || weights.iter().any(|&w| w < F::zero()) {
                return Err(NumericsError::Contract {
                    op: "cross_entropy",
                    msg: "weights must be non-negative with a positive sum".into(),
                });
            }
            let mut probs = a.data().to_vec();
            let mut loss = F::zero();
            for (i, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(NumericsError::Index {
                        op: "cross_entropy",
                        index: t,
                        extent: c,
                    });
                }
                let row = &mut probs[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                loss += weights[i] * (lse - row[t]);
                for x in row.iter_mut() {
                    *x = (*x - lse).exp();
                }
            }
            (loss / total, probs)
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length equal to the row width).
    pub fn layernorm(&self, gain: Var<'t, F>, bias: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let (value, xhat, inv_std) = {
            let (a, gv, bv) = (self.value(), gain.value(), bias.value());
            let d = a.cols();
            if gv.len() != d || bv.len() != d {
                return Err(shape_err("layernorm", a.shape(), gv.shape()));
            }
            let n = F::lit(d as f64);
            let mut xhat = Vec::with_capacity(a.len());
            let mut inv_std = Vec::with_capacity(a.rows());
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(d) {
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
                let r = F::one() / (var + eps).sqrt();
                inv_std.push(r);
                for ((&x, &gm), &bs) in row.iter().zip(gv.data()).zip(bv.data()) {
                    let h = (x - mean) * r;
                    xhat.push(h);
                    out.push(h * gm + bs);
                }
            }
            (Tensor::new(a.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t, F>> {
        let value = {
            let a = self.value();
            let (r, c) = matrix_dims("slice_rows", &a)?;
            if len == 0 || start + len > r {
                return Err(NumericsError::Index {
                    op: "slice_rows",
                    index: start + len,
                    extent: r,
                });
            }
            Tensor::new(vec![len, c], a.data()[start * c..(start + len) * c].to_vec())?
        };
        Ok(self.tape.push(value, Op::SliceRows { x: self.id, start }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t, F>> {
        let value = {
            let a = self.value();
            let (r, c) = matrix_dims("slice_cols", &a)?;
            if len == 0 || start + len > c {
                return Err(NumericsError::Index {
                    op: "slice_cols",
                    index: start + len,
                    extent: c,
                });
            }
            let data = a
                .data()
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![r, len], data)?
        };
        Ok(self.tape.push(value, Op::SliceCols { x: self.id, start }))
    }

    /// Selects rows by index; repeated indices accumulate gradient.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t, F>> {
        let value = {
            let a = self.value();
            let (r, c) = matrix_dims("gather_rows", &a)?;
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(NumericsError::Index {
                        op: "gather_rows",
                        index: i,
                        extent: r,
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![rows.len(), c], data)?
        };
        Ok(self.tape.push(
            value,
            Op::GatherRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln()
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
