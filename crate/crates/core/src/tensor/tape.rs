use super::kernels;
use super::{Scalar, Segment, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Gelu(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        a_hat: Vec<T>,
        b_hat: Vec<T>,
        a_norm: Vec<T>,
        b_norm: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse. Inputs are always recorded before the ops that
/// consume them, so reverse record order is a valid topological order.
///
/// A tape created with [`Tape::no_grad`] still computes values but keeps no
/// backward state; it is used for evaluation and rationale generation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `mark`. Handles to dropped nodes
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = self.record && inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], || Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, &[a], || Op::Transpose(a)))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let av = self.value(a);
        let value = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        self.push(value, &[a], || Op::Scale(a, c))
    }

    /// Adds a `[n]` bias to every row of an `[.. x n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        kernels::add_bias(xv.data(), self.value(bias).data(), &mut out);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, &[x, bias], || Op::AddBias(x, bias)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )
        .expect("same shape");
        self.push(value, &[x], || Op::Gelu(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 || xv.shape().is_empty() {
            return Err(contract("log_softmax needs a last dimension of at least 1"));
        }
        let mut out = vec![T::zero(); xv.numel()];
        kernels::log_softmax_rows(xv.data(), n, &mut out);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, &[x], || Op::LogSoftmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.numel()];
        let needs_grad = self.record
            && [x, gain, bias]
                .iter()
                .any(|&v| self.nodes[v.0].requires_grad);
        let (mut xhat, mut rstd) = if needs_grad {
            (vec![T::zero(); xv.numel()], vec![T::zero(); rows])
        } else {
            (Vec::new(), Vec::new())
        };
        kernels::layer_norm(
            xv.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            needs_grad.then_some(xhat.as_mut_slice()),
            needs_grad.then_some(rstd.as_mut_slice()),
        );
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        }))
    }

    /// Looks up rows of a `[vocab x d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("gather_rows", table)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(contract(format!(
                    "row {id} out of range for table of {rows} rows"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ids = ids.to_vec();
        Ok(self.push(value, &[table], || Op::Gather { table, ids }))
    }

    /// Selects rows of an `[n x d]` matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, _) = self.matrix_dims("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(contract(format!("row {bad} out of range for {n} rows")));
        }
        self.gather_rows(x, rows)
    }

    /// `out[i] = x[i, idx[i]]` for an `[n x c]` matrix.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("pick", x)?;
        if idx.len() != n {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![n, c],
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(contract(format!(
                "column {bad} out of range for {c} columns"
            )));
        }
        let xv = self.value(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| xv.data()[i * c + j])
            .collect();
        let value = Tensor::new(vec![n], out)?;
        let idx = idx.to_vec();
        Ok(self.push(value, &[x], || Op::Pick { x, idx }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], || Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(contract("mean of an empty tensor"));
        }
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::of_f64(xv.numel() as f64);
        Ok(self.push(Tensor::scalar(m), &[x], || Op::Mean(x)))
    }

    /// Causal multi-head self-attention over packed sequences. `q`, `k`, `v`
    /// are `[rows x d]`; row `i` of a segment attends to rows `0..=i` of the
    /// same segment only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, d) = self.matrix_dims("causal_attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != rows || segments.iter().any(|s| s.end() > rows) {
            return Err(contract("segments do not tile the attention rows"));
        }
        let needs_grad = self.record && [q, k, v].iter().any(|&x| self.nodes[x.0].requires_grad);
        let mut probs = if needs_grad {
            let n: usize = segments.iter().map(|s| s.len * (s.len + 1) / 2).sum();
            vec![T::zero(); n * heads]
        } else {
            Vec::new()
        };
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); rows * d];
        let mut scratch = Vec::new();
        let mut off = 0;
        for seg in segments {
            let keys = &kd[seg.start * d..seg.end() * d];
            let vals = &vd[seg.start * d..seg.end() * d];
            for i in 0..seg.len {
                let r = seg.start + i;
                let n_keys = i + 1;
                let p = needs_grad.then(|| &mut probs[off..off + heads * n_keys]);
                kernels::attend_row(
                    &qd[r * d..(r + 1) * d],
                    keys,
                    vals,
                    n_keys,
                    heads,
                    &mut out[r * d..(r + 1) * d],
                    &mut scratch,
                    p,
                );
                off += heads * n_keys;
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let segments = segments.to_vec();
        Ok(self.push(value, &[q, k, v], || Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        }))
    }

    /// Pairwise cosine similarity of the rows of `a [B x d]` and `b [B' x d]`.
    /// A zero-norm row has similarity 0 with everything.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.matrix_dims("cosine_similarity_matrix", a)?;
        let (rb, db) = self.matrix_dims("cosine_similarity_matrix", b)?;
        if da != db || da == 0 {
            return Err(Error::Shape {
                op: "cosine_similarity_matrix",
                lhs: vec![ra, da],
                rhs: vec![rb, db],
            });
        }
        let (a_hat, a_norm) = normalize_rows(self.value(a).data(), da);
        let (b_hat, b_norm) = normalize_rows(self.value(b).data(), db);
        let bt = kernels::transpose(&b_hat, rb, db);
        let mut out = vec![T::zero(); ra * rb];
        kernels::matmul(&a_hat, &bt, ra, da, rb, &mut out);
        let value = Tensor::new(vec![ra, rb], out)?;
        Ok(self.push(value, &[a, b], || Op::Cosine {
            a,
            b,
            a_hat,
            b_hat,
            a_norm,
            b_norm,
        }))
    }

    /// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
    /// Calling it again without [`Tape::zero_grad`] adds to the existing
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backprop_op(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_op(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, val(*b), m, k, n, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(val(*a), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                if let Some(ga) = self.slot(grads, *a) {
                    let gt = kernels::transpose(g, c, r);
                    axpy(ga, &gt, T::one());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, T::one());
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *o += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let out = node.value.data();
                    let n = node.value.cols();
                    for ((grow, orow), xrow) in g
                        .chunks_exact(n)
                        .zip(out.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let total: T = grow.iter().copied().sum();
                        for ((o, &gv), &lp) in xrow.iter_mut().zip(grow).zip(orow) {
                            *o += gv - lp.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let nf = T::of_f64(n as f64);
                let gv = val(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += a * b;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for grow in g.chunks_exact(n) {
                        axpy(gb, grow, T::one());
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![T::zero(); n];
                    for (r, ((grow, hrow), xrow)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            xrow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = node.value.cols();
                    for (grow, &id) in g.chunks_exact(d).zip(ids) {
                        axpy(&mut gt[id * d..(id + 1) * d], grow, T::one());
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = self.value(*x).cols();
                    for (i, (&j, &gv)) in idx.iter().zip(g).enumerate() {
                        gx[i * c + j] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let share = g[0] / T::of_f64(gx.len() as f64);
                    for o in gx.iter_mut() {
                        *o += share;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, segments, probs, grads),
            Op::Cosine {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
            } => {
                let d = self.value(*a).cols();
                let (ra, rb) = (a_norm.len(), b_norm.len());
                if self.nodes[a.0].requires_grad {
                    // d a_hat = G . b_hat
                    let mut dhat = vec![T::zero(); ra * d];
                    kernels::matmul(g, b_hat, ra, rb, d, &mut dhat);
                    let ga = self.slot(grads, *a).expect("requires grad");
                    unnormalize_grad(ga, &dhat, a_hat, a_norm, d);
                }
                if self.nodes[b.0].requires_grad {
                    let mut dhat = vec![T::zero(); rb * d];
                    kernels::matmul_tn_acc(g, a_hat, ra, rb, d, &mut dhat);
                    let gb = self.slot(grads, *b).expect("requires grad");
                    unnormalize_grad(gb, &dhat, b_hat, b_norm, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rows = self.value(q).rows();
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = Vec::new();
        let mut off = 0;
        for seg in segments {
            for i in 0..seg.len {
                let r = seg.start + i;
                let n_keys = i + 1;
                for h in 0..heads {
                    let lo = h * dh;
                    let p = &probs[off + h * n_keys..off + (h + 1) * n_keys];
                    let go = &g[r * d + lo..r * d + lo + dh];
                    dp.clear();
                    let mut weighted = T::zero();
                    for (j, &pj) in p.iter().enumerate() {
                        let kr = seg.start + j;
                        let vh = &vd[kr * d + lo..kr * d + lo + dh];
                        let dpj: T = go.iter().zip(vh).map(|(&a, &b)| a * b).sum();
                        dp.push(dpj);
                        weighted += pj * dpj;
                        for (o, &gv) in dv[kr * d + lo..kr * d + lo + dh].iter_mut().zip(go) {
                            *o += pj * gv;
                        }
                    }
                    let qh = &qd[r * d + lo..r * d + lo + dh];
                    for (j, (&pj, &dpj)) in p.iter().zip(&dp).enumerate() {
                        let ds = pj * (dpj - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kr = seg.start + j;
                        for c in 0..dh {
                            dq[r * d + lo + c] += ds * kd[kr * d + lo + c];
                            dk[kr * d + lo + c] += ds * qh[c];
                        }
                    }
                }
                off += heads * n_keys;
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                axpy(slot, &buf, T::one());
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v`
    /// does not require grad.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); node.value.numel()])
                .as_mut_slice(),
        )
    }
}

fn axpy<T: Scalar>(acc: &mut [T], x: &[T], c: T) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += c * b;
    }
}

fn normalize_rows<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mut hat = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / d);
    for (row, out) in x.chunks_exact(d).zip(hat.chunks_exact_mut(d)) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        norms.push(norm);
    }
    (hat, norms)
}

/// Chain rule through `x_hat = x / |x|`.
fn unnormalize_grad<T: Scalar>(gx: &mut [T], dhat: &[T], hat: &[T], norms: &[T], d: usize) {
    for (r, &norm) in norms.iter().enumerate() {
        if norm <= T::zero() {
            continue;
        }
        let h = &hat[r * d..(r + 1) * d];
        let dh = &dhat[r * d..(r + 1) * d];
        let proj: T = h.iter().zip(dh).map(|(&a, &b)| a * b).sum();
        for c in 0..d {
            gx[r * d + c] += (dh[c] - h[c] * proj) / norm;
        }
    }
}
