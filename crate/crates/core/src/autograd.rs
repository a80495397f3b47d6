//! Reverse-mode differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation applied to [`Matrix`] values along with
//! the data its backward pass needs. Parameters live in a [`ParamStore`] that
//! the graph borrows immutably, so many graphs can be built against the same
//! weights. [`Graph::backward`] accumulates parameter gradients into a
//! [`GradBuffer`].

use std::collections::HashMap;

use crate::tensor::{dot, Matrix};

pub type ParamId = usize;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }
}

/// Dense gradient accumulators, one per parameter, allocated lazily.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Matrix>>,
}

impl GradBuffer {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        self.grads[id].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.slot(id, g.shape()).add_assign(g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn clear(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

/// Which query/key pairs may attend. `allowed[i * cols + j]` gates key `j` for query `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    /// Every query sees exactly the keys flagged `true`.
    pub fn keys(queries: usize, key_mask: &[bool]) -> Self {
        let cols = key_mask.len();
        let mut allowed = Vec::with_capacity(queries * cols);
        for _ in 0..queries {
            allowed.extend_from_slice(key_mask);
        }
        Self {
            rows: queries,
            cols,
            allowed,
        }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Softmax(Var),
    L2NormRows { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    /// Whether any trainable parameter feeds this node.
    needs: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tape of operations over borrowed parameters.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn op_needs(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::Param(id) | Op::Gather { param: id, .. } => !self.params.is_frozen(*id),
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulScalar(a, b) | Op::MulElem(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::Softmax(a) | Op::MeanRows(a) | Op::Sum(a) => self.needs(*a),
            Op::LayerNorm { x, gain, bias, .. } => self.needs(*x) || self.needs(*gain) || self.needs(*bias),
            Op::L2NormRows { x, .. } | Op::SliceCols { x, .. } => self.needs(*x),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(|&p| self.needs(p)),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs = self.op_needs(&op);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs: !self.params.is_frozen(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of a parameter table (embedding lookup).
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let value = self.params.value(id).select_rows(rows);
        self.push(
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let r = r.row(0).to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects 1x1 scale");
        let k = self.value(s).get(0, 0);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul_elem shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 × n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gg), bb) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Disallowed entries get probability zero; a row with
    /// no allowed entries is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        if let Some(m) = mask {
            assert_eq!(m.shape(), (rows, cols), "mask shape");
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let r = av.row(i);
            let ok = |j: usize| mask.is_none_or(|m| m.allows(i, j));
            let max = (0..cols)
                .filter(|&j| ok(j))
                .map(|j| r[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(i);
            let mut z = 0.0;
            for j in 0..cols {
                if ok(j) {
                    o[j] = (r[j] - max).exp();
                    z += o[j];
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Divides each row by `sqrt(|row|² + eps²)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let r = xv.row(i);
            let n = (dot(r, r) + eps * eps).sqrt();
            for v in out.row_mut(i) {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormRows { x, norms })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for i in 0..rows {
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols range");
        let mut out = Matrix::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / xv.rows() as f64);
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(x))
    }

    /// Summed negative log-likelihood of `targets` (one per row of `logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let r = lv.row(i);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - r[t];
            for (p, v) in probs.row_mut(i).iter_mut().zip(r) {
                *p = (v - log_z).exp();
            }
        }
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the scalar `root`, adding parameter gradients into `out`.
    pub fn backward(&self, root: Var, out: &mut GradBuffer) {
        assert_eq!(self.shape(root), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs).collect();
        let acc = |grads: &mut [Option<Matrix>], v: Var, g: Matrix| {
            if !needs[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let trainable = |v: Var| match self.nodes[v.0].op {
            Op::Param(id) if !self.params.is_frozen(id) => Some(id),
            _ => None,
        };

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if !self.params.is_frozen(*id) {
                        out.slot(*id, dy.shape()).add_assign(&dy);
                    }
                }
                Op::Gather { param, rows } => {
                    if !self.params.is_frozen(*param) {
                        let shape = self.params.value(*param).shape();
                        let g = out.slot(*param, shape);
                        for (k, &r) in rows.iter().enumerate() {
                            for (a, b) in g.row_mut(r).iter_mut().zip(dy.row(k)) {
                                *a += b;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        acc(&mut grads, *a, dy.matmul_t(self.value(*b)));
                    }
                    if let Some(id) = trainable(*b) {
                        let shape = self.params.value(id).shape();
                        self.value(*a).t_matmul_into(&dy, out.slot(id, shape));
                    } else if needs[b.0] {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if needs[a.0] {
                        acc(&mut grads, *a, dy.matmul(self.value(*b)));
                    }
                    if let Some(id) = trainable(*b) {
                        let shape = self.params.value(id).shape();
                        dy.t_matmul_into(self.value(*a), out.slot(id, shape));
                    } else if needs[b.0] {
                        acc(&mut grads, *b, dy.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, dy.cols());
                    for k in 0..dy.rows() {
                        for (o, v) in dr.row_mut(0).iter_mut().zip(dy.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, dy);
                }
                Op::MulScalar(a, s) => {
                    let k = self.value(*s).get(0, 0);
                    let ds = dot(dy.data(), self.value(*a).data());
                    acc(&mut grads, *s, Matrix::from_vec(1, 1, vec![ds]));
                    acc(&mut grads, *a, dy.map(|x| x * k));
                }
                Op::MulElem(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = dy.data().iter().zip(vb.data()).map(|(d, y)| d * y).collect();
                    let db: Vec<f64> = dy.data().iter().zip(va.data()).map(|(d, x)| d * x).collect();
                    let (r, c) = dy.shape();
                    acc(&mut grads, *a, Matrix::from_vec(r, c, da));
                    acc(&mut grads, *b, Matrix::from_vec(r, c, db));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.map(|x| x * s)),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let data = dy
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Matrix::from_vec(dy.rows(), dy.cols(), data));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gain).row(0);
                    let (rows, cols) = dy.shape();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        let mut dxhat = vec![0.0; cols];
                        for j in 0..cols {
                            dgain.row_mut(0)[j] += dyr[j] * xh[j];
                            dbias.row_mut(0)[j] += dyr[j];
                            dxhat[j] = dyr[j] * g[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh[j];
                        }
                        let inv = inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s = dot(dy.row(r), yr);
                        for ((o, d), yy) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(yr) {
                            *o = yy * (d - s);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::L2NormRows { x, norms } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let n = norms[r];
                        let xr = xv.row(r);
                        let proj = dot(xr, dy.row(r)) / (n * n * n);
                        for ((o, d), xx) in dx.row_mut(r).iter_mut().zip(dy.row(r)).zip(xr) {
                            *o = d / n - xx * proj;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let cols = dy.cols();
                        let slice = dy.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(&mut grads, p, Matrix::from_vec(rows, cols, slice));
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut g = Matrix::zeros(dy.rows(), cols);
                        for r in 0..dy.rows() {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        acc(&mut grads, p, g);
                        off += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows();
                    let mut g = Matrix::zeros(rows, dy.cols());
                    for r in 0..rows {
                        for (o, d) in g.row_mut(r).iter_mut().zip(dy.row(0)) {
                            *o = d / rows as f64;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    let d = dy.get(0, 0);
                    acc(&mut grads, *x, Matrix::from_vec(rows, cols, vec![d; rows * cols]));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let d = dy.get(0, 0);
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = g.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= d;
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences over every parameter scalar.
    fn check(params: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let mut buf = GradBuffer::new(params);
        {
            let mut g = Graph::new(params);
            let root = build(&mut g);
            g.backward(root, &mut buf);
        }
        let h = 1e-5;
        for id in 0..params.len() {
            let n = params.value(id).data().len();
            for k in 0..n {
                let orig = params.value(id).data()[k];
                params.value_mut(id).data_mut()[k] = orig + h;
                let plus = {
                    let mut g = Graph::new(params);
                    let r = build(&mut g);
                    g.value(r).get(0, 0)
                };
                params.value_mut(id).data_mut()[k] = orig - h;
                let minus = {
                    let mut g = Graph::new(params);
                    let r = build(&mut g);
                    g.value(r).get(0, 0)
                };
                params.value_mut(id).data_mut()[k] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = buf.get(id).map_or(0.0, |m| m.data()[k]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{} [{k}]: fd {fd} vs analytic {an}",
                    params.name(id)
                );
            }
        }
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]));
        p.insert("b", Matrix::from_vec(3, 3, vec![0.2, 0.1, -0.3, 0.4, -0.5, 0.6, 0.05, 0.9, -0.8]));
        p.insert("g", Matrix::from_vec(1, 3, vec![1.2, 0.8, 1.1]));
        p.insert("bias", Matrix::from_vec(1, 3, vec![0.1, -0.1, 0.2]));
        p.insert("s", Matrix::from_vec(1, 1, vec![1.7]));
        p.insert("table", Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
        p
    }

    #[test]
    fn matmul_layernorm_softmax_gradients() {
        let mut p = store();
        check(&mut p, |g| {
            let a = g.param(0);
            let b = g.param(1);
            let ab = g.matmul(a, b);
            let gain = g.param(2);
            let bias = g.param(3);
            let ln = g.layer_norm(ab, gain, bias);
            let bias2 = g.param(3);
            let shifted = g.add_row(ln, bias2);
            let sm = g.softmax(shifted, Some(&Mask::keys(2, &[true, false, true])));
            let w = g.constant(Matrix::from_vec(2, 3, vec![1.0, 2.0, -3.0, 0.5, -1.0, 2.5]));
            let e = g.mul_elem(sm, w);
            g.sum(e)
        });
    }

    #[test]
    fn normalize_scale_gather_gradients() {
        let mut p = store();
        check(&mut p, |g| {
            let t = g.gather(5, &[2, 0, 2]);
            let n = g.l2_normalize_rows(t, 1e-6);
            let a = g.param(0);
            let an = g.l2_normalize_rows(a, 1e-6);
            let logits = g.matmul_t(an, n);
            let s = g.param(4);
            let scaled = g.mul_scalar(logits, s);
            let r = g.relu(scaled);
            let left = g.slice_cols(r, 1, 2);
            let right = g.slice_cols(scaled, 0, 1);
            let cat = g.concat_cols(&[right, left]);
            let stacked = g.concat_rows(&[cat, t]);
            let m = g.mean_rows(stacked);
            let centered = g.add_row(stacked, m);
            let sm = g.scale(centered, 0.5);
            let table = g.param(5);
            let out = g.matmul_t(sm, table);
            g.cross_entropy(out, &[0, 0, 1, 3, 2])
        });
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let m = Mask {
            rows: 2,
            cols: 2,
            allowed: vec![false, false, true, true],
        };
        let y = g.softmax(x, Some(&m));
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        assert!((g.value(y).row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut p = store();
        p.set_frozen(0, true);
        let mut buf = GradBuffer::new(&p);
        let mut g = Graph::new(&p);
        let a = g.param(0);
        let b = g.param(1);
        let ab = g.matmul(a, b);
        let s = g.sum(ab);
        g.backward(s, &mut buf);
        assert!(buf.get(0).is_none());
        assert!(buf.get(1).is_some());
    }
}
