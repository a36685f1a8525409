use std::ops::Range;

use crate::compute::ops::{self, Activation};
use crate::compute::{ComputeError, SparseMatrix, Tensor};
use crate::Real;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a, T> {
    Leaf,
    Spmm {
        s: &'a SparseMatrix<T>,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Act {
        kind: Activation,
        x: Var,
    },
    MulConst {
        x: Var,
        factor: Tensor<T>,
    },
    ScaleRows {
        x: Var,
        scale: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    NeighborAttention {
        s: Var,
        a: Var,
        pattern: &'a SparseMatrix<T>,
        slope: f64,
        pre: Vec<T>,
        alpha: Vec<T>,
    },
    SegmentSoftmax {
        x: Var,
        groups: Vec<Range<usize>>,
    },
    GroupWeightedSum {
        z: Var,
        w: Var,
        groups: Vec<Range<usize>>,
    },
    SqDist {
        q: Var,
        p: Var,
    },
    SoftmaxNll {
        d: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
}

struct Node<'a, T> {
    value: Tensor<T>,
    op: Op<'a, T>,
    needs_grad: bool,
}

/// Records a forward computation so its gradient can be replayed in
/// reverse. Sparse operands are borrowed and treated as constants.
pub struct Tape<'a, T> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<'a, T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<(), ComputeError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(ComputeError::UnknownVar(v.0))
        }
    }

    pub fn spmm(&mut self, s: &'a SparseMatrix<T>, x: Var) -> Result<Var, ComputeError> {
        self.check(x)?;
        let value = ops::spmm(s, self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Spmm { s, x }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, ng))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, ComputeError> {
        self.check(x)?;
        self.check(b)?;
        let mut value = self.value(x).clone();
        ops::add_row_bias(&mut value, self.value(b))?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias { x, b }, ng))
    }

    /// `x * w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ComputeError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var, ComputeError> {
        self.check(x)?;
        let value = ops::activation(kind, self.value(x));
        let ng = self.needs(x);
        Ok(self.push(value, Op::Act { kind, x }, ng))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var, ComputeError> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.shape() != factor.shape() {
            return Err(ComputeError::ShapeMismatch {
                op: "mul_const",
                left: xv.shape(),
                right: factor.shape(),
            });
        }
        let mut value = xv.clone();
        for (o, &f) in value.as_mut_slice().iter_mut().zip(factor.as_slice()) {
            *o = *o * f;
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::MulConst { x, factor }, ng))
    }

    /// Multiplies row `i` by the constant `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Vec<T>) -> Result<Var, ComputeError> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.rows() != scale.len() {
            return Err(ComputeError::ShapeMismatch {
                op: "scale_rows",
                left: xv.shape(),
                right: (scale.len(), 1),
            });
        }
        let mut value = xv.clone();
        for (r, &s) in scale.iter().enumerate() {
            for v in value.row_mut(r) {
                *v = *v * s;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::ScaleRows { x, scale }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, ComputeError> {
        self.check(x)?;
        let rows = self.value(x).rows();
        if let Some(&index) = idx.iter().find(|&&i| i >= rows) {
            return Err(ComputeError::MaskOutOfRange { index, len: rows });
        }
        let value = self.value(x).select_rows(&idx);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Gather { x, idx }, ng))
    }

    /// Attention-weighted aggregation of a per-node scalar over the stored
    /// pattern of `pattern` (which must contain each row's own index).
    ///
    /// With `u_ij = a[0]·s_i + a[1]·s_j` and `α_i· = softmax_j(leaky(u_i·))`
    /// the output is `out_i = Σ_j α_ij s_j`.
    pub fn neighbor_attention(
        &mut self,
        s: Var,
        a: Var,
        pattern: &'a SparseMatrix<T>,
        slope: f64,
    ) -> Result<Var, ComputeError> {
        self.check(s)?;
        self.check(a)?;
        let (sv, av) = (self.value(s), self.value(a));
        if sv.cols() != 1 || sv.rows() != pattern.n_rows() || pattern.n_cols() != pattern.n_rows() {
            return Err(ComputeError::ShapeMismatch {
                op: "neighbor_attention",
                left: (pattern.n_rows(), pattern.n_cols()),
                right: sv.shape(),
            });
        }
        if av.len() != 2 {
            return Err(ComputeError::ShapeMismatch {
                op: "neighbor_attention",
                left: (2, 1),
                right: av.shape(),
            });
        }
        let (out, pre, alpha) = attention_forward(sv.as_slice(), av.as_slice(), pattern, slope)?;
        let ng = self.needs(s) || self.needs(a);
        Ok(self.push(
            Tensor::column(out),
            Op::NeighborAttention {
                s,
                a,
                pattern,
                slope,
                pre,
                alpha,
            },
            ng,
        ))
    }

    /// Softmax of a column vector within each contiguous group of rows.
    pub fn segment_softmax(
        &mut self,
        x: Var,
        groups: Vec<Range<usize>>,
    ) -> Result<Var, ComputeError> {
        self.check(x)?;
        let xv = self.value(x);
        check_groups("segment_softmax", xv, &groups)?;
        let mut out = vec![T::zero(); xv.rows()];
        for g in &groups {
            let w = ops::softmax(&xv.as_slice()[g.clone()]);
            out[g.clone()].copy_from_slice(&w);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::column(out), Op::SegmentSoftmax { x, groups }, ng))
    }

    /// Row `g` of the output is `Σ_{i in groups[g]} w_i z_i`.
    pub fn group_weighted_sum(
        &mut self,
        z: Var,
        w: Var,
        groups: Vec<Range<usize>>,
    ) -> Result<Var, ComputeError> {
        self.check(z)?;
        self.check(w)?;
        let (zv, wv) = (self.value(z), self.value(w));
        check_groups("group_weighted_sum", wv, &groups)?;
        if zv.rows() != wv.rows() {
            return Err(ComputeError::ShapeMismatch {
                op: "group_weighted_sum",
                left: zv.shape(),
                right: wv.shape(),
            });
        }
        let mut out = Tensor::zeros(groups.len(), zv.cols());
        for (gi, g) in groups.iter().enumerate() {
            for i in g.clone() {
                let wi = wv.as_slice()[i];
                for (o, &x) in out.row_mut(gi).iter_mut().zip(zv.row(i)) {
                    *o = *o + wi * x;
                }
            }
        }
        let ng = self.needs(z) || self.needs(w);
        Ok(self.push(out, Op::GroupWeightedSum { z, w, groups }, ng))
    }

    /// Pairwise squared Euclidean distances between rows of `q` and `p`.
    pub fn sq_dist(&mut self, q: Var, p: Var) -> Result<Var, ComputeError> {
        self.check(q)?;
        self.check(p)?;
        let (qv, pv) = (self.value(q), self.value(p));
        let mut out = Tensor::zeros(qv.rows(), pv.rows());
        for i in 0..qv.rows() {
            let d = ops::sq_euclid(qv.row(i), pv)?;
            out.row_mut(i).copy_from_slice(&d);
        }
        let ng = self.needs(q) || self.needs(p);
        Ok(self.push(out, Op::SqDist { q, p }, ng))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(-d)` per row.
    /// Returns the loss and the class probabilities.
    pub fn softmax_nll(&mut self, d: Var, labels: Vec<usize>) -> Result<Var, ComputeError> {
        self.check(d)?;
        let dv = self.value(d);
        if labels.len() != dv.rows() || dv.rows() == 0 {
            return Err(ComputeError::ShapeMismatch {
                op: "softmax_nll",
                left: dv.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&index) = labels.iter().find(|&&c| c >= dv.cols()) {
            return Err(ComputeError::MaskOutOfRange {
                index,
                len: dv.cols(),
            });
        }
        let mut probs = Tensor::zeros(dv.rows(), dv.cols());
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let neg: Vec<T> = dv.row(i).iter().map(|&x| -x).collect();
            let max = neg.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + neg.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total = total + lse - neg[y];
            for (p, &x) in probs.row_mut(i).iter_mut().zip(&neg) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / T::lit(labels.len() as f64);
        let ng = self.needs(d);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxNll { d, labels, probs },
            ng,
        ))
    }

    /// Probabilities computed by a [`Tape::softmax_nll`] node.
    pub fn nll_probs(&self, loss: Var) -> Option<&Tensor<T>> {
        match &self.nodes.get(loss.0)?.op {
            Op::SoftmaxNll { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, ComputeError> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        Ok(self.push(value, Op::Sum { x }, ng))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var, ComputeError> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).as_slice().iter().map(|&v| v * v).sum());
        let ng = self.needs(x);
        Ok(self.push(value, Op::SumSquares { x }, ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, ComputeError> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(ComputeError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Spmm { s, x } => {
                    if self.needs(*x) {
                        acc(*x, ops::spmm_transpose(s, &g)?);
                    }
                }
                Op::MatMul { a, b } => {
                    if self.needs(*a) {
                        acc(*a, g.matmul_t(self.value(*b))?);
                    }
                    if self.needs(*b) {
                        acc(*b, self.value(*a).t_matmul(&g)?);
                    }
                }
                Op::AddBias { x, b } => {
                    if self.needs(*b) {
                        acc(*b, g.col_sums());
                    }
                    if self.needs(*x) {
                        acc(*x, g);
                    }
                }
                Op::Act { kind, x } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for ((gv, &xi), &yi) in gx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(node.value.as_slice())
                    {
                        *gv = *gv * kind.derivative(xi, yi);
                    }
                    acc(*x, gx);
                }
                Op::MulConst { x, factor } => {
                    let mut gx = g;
                    for (gv, &f) in gx.as_mut_slice().iter_mut().zip(factor.as_slice()) {
                        *gv = *gv * f;
                    }
                    acc(*x, gx);
                }
                Op::ScaleRows { x, scale } => {
                    let mut gx = g;
                    for (r, &s) in scale.iter().enumerate() {
                        for v in gx.row_mut(r) {
                            *v = *v * s;
                        }
                    }
                    acc(*x, gx);
                }
                Op::Gather { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o = *o + v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::NeighborAttention {
                    s,
                    a,
                    pattern,
                    slope,
                    pre,
                    alpha,
                } => {
                    let (gs, ga) = attention_backward(
                        self.value(*s).as_slice(),
                        self.value(*a).as_slice(),
                        node.value.as_slice(),
                        g.as_slice(),
                        pattern,
                        *slope,
                        pre,
                        alpha,
                    );
                    if self.needs(*a) {
                        let shape = self.value(*a).shape();
                        acc(*a, Tensor::from_vec(shape.0, shape.1, ga.to_vec())?);
                    }
                    if self.needs(*s) {
                        acc(*s, Tensor::column(gs));
                    }
                }
                Op::SegmentSoftmax { x, groups } => {
                    let beta = node.value.as_slice();
                    let gv = g.as_slice();
                    let mut gx = vec![T::zero(); beta.len()];
                    for grp in groups {
                        let dot: T = grp.clone().map(|k| beta[k] * gv[k]).sum();
                        for k in grp.clone() {
                            gx[k] = beta[k] * (gv[k] - dot);
                        }
                    }
                    acc(*x, Tensor::column(gx));
                }
                Op::GroupWeightedSum { z, w, groups } => {
                    let (zv, wv) = (self.value(*z), self.value(*w));
                    if self.needs(*z) {
                        let mut gz = Tensor::zeros(zv.rows(), zv.cols());
                        for (gi, grp) in groups.iter().enumerate() {
                            for k in grp.clone() {
                                let wk = wv.as_slice()[k];
                                for (o, &v) in gz.row_mut(k).iter_mut().zip(g.row(gi)) {
                                    *o = *o + wk * v;
                                }
                            }
                        }
                        acc(*z, gz);
                    }
                    if self.needs(*w) {
                        let mut gw = vec![T::zero(); wv.rows()];
                        for (gi, grp) in groups.iter().enumerate() {
                            for k in grp.clone() {
                                gw[k] = zv.row(k).iter().zip(g.row(gi)).map(|(&a, &b)| a * b).sum();
                            }
                        }
                        acc(*w, Tensor::column(gw));
                    }
                }
                Op::SqDist { q, p } => {
                    let (qv, pv) = (self.value(*q), self.value(*p));
                    let two = T::lit(2.0);
                    let mut gq = Tensor::zeros(qv.rows(), qv.cols());
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for i in 0..qv.rows() {
                        for c in 0..pv.rows() {
                            let gic = g.get(i, c) * two;
                            for k in 0..qv.cols() {
                                let diff = gic * (qv.get(i, k) - pv.get(c, k));
                                gq.set(i, k, gq.get(i, k) + diff);
                                gp.set(c, k, gp.get(c, k) - diff);
                            }
                        }
                    }
                    if self.needs(*q) {
                        acc(*q, gq);
                    }
                    if self.needs(*p) {
                        acc(*p, gp);
                    }
                }
                Op::SoftmaxNll { d, labels, probs } => {
                    let scale = g.item() / T::lit(labels.len() as f64);
                    let mut gd = probs.map(|p| -p * scale);
                    for (i, &y) in labels.iter().enumerate() {
                        gd.set(i, y, gd.get(i, y) + scale);
                    }
                    acc(*d, gd);
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    acc(*x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::SumSquares { x } => {
                    let factor = g.item() * T::lit(2.0);
                    acc(*x, self.value(*x).scale(factor));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn check_groups<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    groups: &[Range<usize>],
) -> Result<(), ComputeError> {
    let covered = groups.iter().all(|g| !g.is_empty() && g.end <= x.rows());
    if x.cols() != 1 || !covered {
        return Err(if groups.iter().any(|g| g.is_empty()) {
            ComputeError::EmptyMask
        } else {
            ComputeError::ShapeMismatch {
                op,
                left: x.shape(),
                right: (groups.last().map_or(0, |g| g.end), 1),
            }
        });
    }
    Ok(())
}

type AttentionForward<T> = (Vec<T>, Vec<T>, Vec<T>);

/// Forward pass of [`Tape::neighbor_attention`]: returns the aggregated
/// values, the pre-activation logits and the attention weights, the last
/// two laid out like the pattern's stored entries.
pub fn attention_forward<T: Real>(
    s: &[T],
    a: &[T],
    pattern: &SparseMatrix<T>,
    slope: f64,
) -> Result<AttentionForward<T>, ComputeError> {
    let leaky = Activation::LeakyRelu(slope);
    let mut out = vec![T::zero(); s.len()];
    let mut pre = Vec::with_capacity(pattern.nnz());
    let mut alpha = Vec::with_capacity(pattern.nnz());
    for (i, o) in out.iter_mut().enumerate() {
        let (cols, _) = pattern.row(i);
        if cols.is_empty() {
            return Err(ComputeError::EmptyMask);
        }
        let start = pre.len();
        pre.extend(cols.iter().map(|&j| a[0] * s[i] + a[1] * s[j]));
        let logits: Vec<T> = pre[start..].iter().map(|&u| leaky.apply(u)).collect();
        let w = ops::softmax(&logits);
        *o = cols.iter().zip(&w).map(|(&j, &wj)| wj * s[j]).sum();
        alpha.extend(w);
    }
    Ok((out, pre, alpha))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    s: &[T],
    a: &[T],
    out: &[T],
    g: &[T],
    pattern: &SparseMatrix<T>,
    slope: f64,
    pre: &[T],
    alpha: &[T],
) -> (Vec<T>, [T; 2]) {
    let leaky = Activation::LeakyRelu(slope);
    let mut gs = vec![T::zero(); s.len()];
    let mut ga = [T::zero(); 2];
    for i in 0..s.len() {
        let (cols, _) = pattern.row(i);
        let base = pattern.offsets()[i];
        for (k, &j) in cols.iter().enumerate() {
            let e = base + k;
            // through the convex combination
            gs[j] = gs[j] + g[i] * alpha[e];
            // through the attention weights
            let d_logit = g[i] * alpha[e] * (s[j] - out[i]);
            let d_pre = d_logit * leaky.derivative(pre[e], leaky.apply(pre[e]));
            ga[0] = ga[0] + d_pre * s[i];
            ga[1] = ga[1] + d_pre * s[j];
            gs[i] = gs[i] + d_pre * a[0];
            gs[j] = gs[j] + d_pre * a[1];
        }
    }
    (gs, ga)
}

/// Gradients of a scalar with respect to every recorded variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled to `shape` when the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}
