use crate::tensor::dot;
use crate::{AutogradError, GradStore, MemoryMeter, ParamId, ParamStore, Real, Result, Shape, Tensor};
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Log(Var),
    MeanPool { x: Var, start: usize, end: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    DropoutRows { x: Var, null: Var, mask: Vec<bool> },
    Sum(Var),
    InfoNce { scores: Var, probs: Vec<f64>, tau: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; that order is a valid topological
/// order, so backward is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    meter: Option<MemoryMeter>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> Drop for Tape<T> {
    fn drop(&mut self) {
        if let Some(meter) = &self.meter {
            meter.release(self.nodes.len());
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            meter: None,
        }
    }

    pub fn with_meter(meter: MemoryMeter) -> Self {
        Self {
            nodes: Vec::new(),
            meter: Some(meter),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op, requires_grad: bool) -> Var {
        if let Some(meter) = &self.meter {
            meter.acquire(1);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf bound to a parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_shared(store.shared(id), Op::Param(id), true)
    }

    /// A parameter read without gradient tracking.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_shared(store.shared(id), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "add",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(AutogradError::ShapeMismatch {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "mul",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| T::from_f64(x.as_f64() * c));
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn rowwise_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(AutogradError::EmptyInput("rowwise_softmax"));
        }
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row: Vec<f64> = x.row(i).iter().map(|v| v.as_f64()).collect();
            let probs = softmax(&row);
            for (o, p) in out.row_mut(i).iter_mut().zip(probs) {
                *o = T::from_f64(p);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Elementwise natural logarithm.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Mean of rows `start..end`, as a `1×cols` row.
    pub fn mean_pool(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end {
            return Err(AutogradError::EmptyInput("mean_pool"));
        }
        if end > x.rows() {
            return Err(AutogradError::IndexOutOfRange {
                op: "mean_pool",
                index: end - 1,
                len: x.rows(),
            });
        }
        let n = (end - start) as f64;
        let mut acc = vec![0.0f64; x.cols()];
        for i in start..end {
            for (s, &v) in acc.iter_mut().zip(x.row(i)) {
                *s += v.as_f64();
            }
        }
        let out = Tensor::row_vector(acc.into_iter().map(|s| T::from_f64(s / n)).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanPool { x: a, start, end }, rg))
    }

    /// Scales every row to unit L2 norm; an all-zero row stays zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = dot(x.row(i), x.row(i)).sqrt();
            norms.push(n);
            if n > 0.0 {
                for o in out.row_mut(i) {
                    *o = T::from_f64(o.as_f64() / n);
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::L2Normalize { x: a, norms }, rg)
    }

    /// `softmax(q kᵀ / √d) v` with `q: m×d`, `k: n×d`, `v: n×dv`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.cols != ks.cols {
            return Err(AutogradError::ShapeMismatch {
                op: "scaled_dot_attention(q,k)",
                left: qs,
                right: ks,
            });
        }
        if ks.rows != vs.rows {
            return Err(AutogradError::ShapeMismatch {
                op: "scaled_dot_attention(k,v)",
                left: ks,
                right: vs,
            });
        }
        if ks.rows == 0 {
            return Err(AutogradError::EmptyInput("scaled_dot_attention"));
        }
        let scale = 1.0 / (qs.cols as f64).sqrt();
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut probs = Vec::with_capacity(qs.rows * ks.rows);
        let mut out = Tensor::zeros(qs.rows, vs.cols);
        let mut acc = vec![0.0f64; vs.cols];
        for i in 0..qs.rows {
            let logits: Vec<f64> = (0..ks.rows)
                .map(|j| dot(qt.row(i), kt.row(j)) * scale)
                .collect();
            let p = softmax(&logits);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &pj) in p.iter().enumerate() {
                for (s, &x) in acc.iter_mut().zip(vt.row(j)) {
                    *s += pj * x.as_f64();
                }
            }
            for (o, &s) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = T::from_f64(s);
            }
            probs.extend(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, rg))
    }

    /// Selects rows of `a` in the given order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(index.len() * x.cols());
        for &i in index {
            if i >= x.rows() {
                return Err(AutogradError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: x.rows(),
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::from_vec(index.len(), x.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Token-table lookup: one output row per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(AutogradError::EmptyInput("embedding_lookup"));
        }
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(AutogradError::EmptyInput("concat_rows"))?;
        let cols = self.shape(*first).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(*first),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Replaces every row whose `mask` entry is true with the `1×n` row `null`.
    pub fn dropout_rows(&mut self, a: Var, null: Var, mask: &[bool]) -> Result<Var> {
        let (x, n) = (self.value(a), self.value(null));
        if n.rows() != 1 || n.cols() != x.cols() {
            return Err(AutogradError::ShapeMismatch {
                op: "dropout_rows",
                left: x.shape(),
                right: n.shape(),
            });
        }
        if mask.len() != x.rows() {
            return Err(AutogradError::ShapeMismatch {
                op: "dropout_rows(mask)",
                left: x.shape(),
                right: Shape::new(mask.len(), 1),
            });
        }
        let mut out = x.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(i).copy_from_slice(n.data());
            }
        }
        let rg = self.rg(a) || self.rg(null);
        Ok(self.push(
            out,
            Op::DropoutRows {
                x: a,
                null,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), rg)
    }

    /// Masked softmax cross-entropy with the gold candidate of row `i` at
    /// column `i`.
    ///
    /// `excluded` is row-major over `scores` and marks candidates removed
    /// from the normalizer; the gold column is always kept. Returns the mean
    /// over rows of `logsumexp(kept / tau) - gold / tau`.
    pub fn info_nce(&mut self, scores: Var, excluded: &[bool], tau: f64) -> Result<Var> {
        let s = self.value(scores);
        let (b, c) = (s.rows(), s.cols());
        if b == 0 {
            return Err(AutogradError::EmptyInput("info_nce"));
        }
        if c < b {
            return Err(AutogradError::Invalid(format!(
                "info_nce: {b} rows need at least {b} candidate columns, got {c}"
            )));
        }
        if excluded.len() != b * c {
            return Err(AutogradError::ShapeMismatch {
                op: "info_nce(mask)",
                left: s.shape(),
                right: Shape::new(excluded.len(), 1),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AutogradError::Invalid(format!("info_nce: temperature {tau} must be > 0")));
        }
        if !s.is_finite() {
            return Err(AutogradError::NonFinite("info_nce score"));
        }
        let mut probs = vec![0.0f64; b * c];
        let mut total = 0.0f64;
        for i in 0..b {
            let row = s.row(i);
            let kept = |j: usize| j == i || !excluded[i * c + j];
            let max = (0..c)
                .filter(|&j| kept(j))
                .map(|j| row[j].as_f64() / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c)
                .filter(|&j| kept(j))
                .map(|j| (row[j].as_f64() / tau - max).exp())
                .sum();
            let lse = max + z.ln();
            total += lse - row[i].as_f64() / tau;
            for j in (0..c).filter(|&j| kept(j)) {
                probs[i * c + j] = (row[j].as_f64() / tau - lse).exp();
            }
        }
        let out = Tensor::scalar(T::from_f64(total / b as f64));
        let rg = self.rg(scores);
        Ok(self.push(out, Op::InfoNce { scores, probs, tau }, rg))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != Shape::new(1, 1) {
            return Err(AutogradError::NonScalarLoss(shape));
        }
        self.backward_from(&[(loss, Tensor::scalar(T::one()))])
    }

    /// Backpropagates externally supplied gradients of arbitrary nodes.
    pub fn backward_from(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(AutogradError::ShapeMismatch {
                    op: "backward seed",
                    left: self.shape(*v),
                    right: g.shape(),
                });
            }
            accumulate(&mut grads[v.0], g)?;
        }

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if self.rg(v) {
            accumulate(&mut grads[v.0], &g)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g.matmul_t(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.send(grads, *b, self.value(*a).t_matmul(g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.send(grads, *b, g.t_matmul(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone())?;
                self.send(grads, *b, g.clone())?;
            }
            Op::AddRow(a, r) => {
                self.send(grads, *a, g.clone())?;
                if self.rg(*r) {
                    let mut acc = vec![0.0f64; g.cols()];
                    for i in 0..g.rows() {
                        for (s, &x) in acc.iter_mut().zip(g.row(i)) {
                            *s += x.as_f64();
                        }
                    }
                    self.send(grads, *r, Tensor::row_vector(acc.into_iter().map(T::from_f64).collect()))?;
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    self.send(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d)?)?;
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    self.send(grads, *b, Tensor::from_vec(g.rows(), g.cols(), d)?)?;
                }
            }
            Op::Scale(a, c) => {
                self.send(grads, *a, g.map(|x| T::from_f64(x.as_f64() * c)))?;
            }
            Op::Softmax(a) => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gy) = (out.row(i), g.row(i));
                    let inner = dot(y, gy);
                    for ((o, &yj), &gj) in gx.row_mut(i).iter_mut().zip(y).zip(gy) {
                        *o = T::from_f64(yj.as_f64() * (gj.as_f64() - inner));
                    }
                }
                self.send(grads, *a, gx)?;
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p / q).collect();
                self.send(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d)?)?;
            }
            Op::MeanPool { x, start, end } => {
                let shape = self.shape(*x);
                let mut gx = Tensor::zeros(shape.rows, shape.cols);
                let n = (end - start) as f64;
                for i in *start..*end {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *o = T::from_f64(v.as_f64() / n);
                    }
                }
                self.send(grads, *x, gx)?;
            }
            Op::L2Normalize { x, norms } => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (y, gy) = (out.row(i), g.row(i));
                    let inner = dot(y, gy);
                    for ((o, &yj), &gj) in gx.row_mut(i).iter_mut().zip(y).zip(gy) {
                        *o = T::from_f64((gj.as_f64() - yj.as_f64() * inner) / n);
                    }
                }
                self.send(grads, *x, gx)?;
            }
            Op::Attention { q, k, v, probs } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, n) = (qt.rows(), kt.rows());
                let scale = 1.0 / (qt.cols() as f64).sqrt();
                // dL/dlogits, already multiplied by the 1/sqrt(d) scale
                let mut gs = vec![0.0f64; m * n];
                for i in 0..m {
                    let p = &probs[i * n..(i + 1) * n];
                    let gp: Vec<f64> = (0..n).map(|j| dot(g.row(i), vt.row(j))).collect();
                    let inner: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gs[i * n + j] = p[j] * (gp[j] - inner) * scale;
                    }
                }
                let gs = Tensor::<f64>::from_vec(m, n, gs)?;
                if self.rg(*q) {
                    self.send(grads, *q, gs.matmul(&kt.cast())?.cast())?;
                }
                if self.rg(*k) {
                    self.send(grads, *k, gs.t_matmul(&qt.cast())?.cast())?;
                }
                if self.rg(*v) {
                    let p = Tensor::<f64>::from_vec(m, n, probs.clone())?;
                    self.send(grads, *v, p.t_matmul(&g.cast())?.cast())?;
                }
            }
            Op::GatherRows { x, index } => {
                if self.rg(*x) {
                    // Scatter straight into the source buffer: token tables are
                    // large and a lookup touches only a few rows.
                    let shape = self.shape(*x);
                    let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(shape.rows, shape.cols));
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let len = shape.len();
                    if self.rg(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.send(grads, p, Tensor::from_vec(shape.rows, shape.cols, slice)?)?;
                    }
                    offset += len;
                }
            }
            Op::DropoutRows { x, null, mask } => {
                let mut gx = g.clone();
                let mut acc = vec![0.0f64; g.cols()];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for (s, &v) in acc.iter_mut().zip(g.row(i)) {
                            *s += v.as_f64();
                        }
                        gx.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                self.send(grads, *x, gx)?;
                self.send(grads, *null, Tensor::row_vector(acc.into_iter().map(T::from_f64).collect()))?;
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.send(grads, *a, Tensor::filled(shape.rows, shape.cols, g.data()[0]))?;
            }
            Op::InfoNce { scores, probs, tau } => {
                let shape = self.shape(*scores);
                let (b, c) = (shape.rows, shape.cols);
                let coef = g.data()[0].as_f64() / (tau * b as f64);
                let mut gs = Tensor::zeros(b, c);
                for i in 0..b {
                    for j in 0..c {
                        let target = if i == j { 1.0 } else { 0.0 };
                        gs.set(i, j, T::from_f64(coef * (probs[i * c + j] - target)));
                    }
                }
                self.send(grads, *scores, gs)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; zeros when `v` was not reached.
    pub fn get(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.by_node[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape.rows, shape.cols))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node[v.0].as_ref()
    }

    /// Adds every parameter leaf's gradient into `store`.
    pub fn accumulate_into(&self, store: &mut GradStore<T>) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = &self.by_node[v.0] {
                store.add(id, g)?;
            }
        }
        Ok(())
    }

    pub fn to_store(&self, params: &ParamStore<T>) -> Result<GradStore<T>> {
        let mut store = GradStore::zeros_like(params);
        self.accumulate_into(&mut store)?;
        Ok(store)
    }
}

/// Convenience for tests: the gradient of a leaf on a tape.
impl<T: Real> Tape<T> {
    pub fn grad_of(&self, grads: &Gradients<T>, v: Var) -> Tensor<T> {
        grads.get(v, self.shape(v))
    }
}
