//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Because a
//! node can only reference nodes that already exist, the tape is always in
//! topological order and the backward pass is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::{NumericsError, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddColVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    Transpose(Var),
    MaxPoolGroups { x: Var, argmax: Vec<usize> },
    MeanPoolGroups { x: Var, group: usize },
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    PairwiseSqDist(Var, Var),
    L2NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }
}

const NORM_EPS: f64 = 1e-12;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(NumericsError::NotMatrix {
            op,
            shape: t.shape().to_vec(),
        })
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store (used for input
    /// gradients in checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    /// `x [n,m] + bias [1,m]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(mismatch("add_bias", tx, tb));
        }
        let m = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % m];
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x [n,m] + col [n,1]`, column broadcast over columns.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var, NumericsError> {
        let (tx, tc) = (self.value(x), self.value(col));
        if tc.cols() != 1 || tc.rows() != tx.rows() {
            return Err(mismatch("add_col", tx, tc));
        }
        let m = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tc.data()[i / m];
        }
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(out, Op::AddColVec(x, col), ng))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        self.push(out, Op::Log(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(mismatch("concat_cols", first, t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_rows", t)?;
            if t.cols() != cols {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Row selection with repetition allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("gather_rows", t)?;
        let cols = t.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= t.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(index.len(), cols, data)?,
            Op::GatherRows(x, index.to_vec()),
            ng,
        ))
    }

    /// Picks flat elements into a `[1, len]` row.
    pub fn gather_elems(&mut self, x: Var, flat: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= t.numel() {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_elems",
                    index: i,
                    len: t.numel(),
                });
            }
            data.push(t.data()[i]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(1, flat.len(), data)?,
            Op::GatherElems(x, flat.to_vec()),
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Max over consecutive groups of `group` rows: `[n*group, d]` → `[n, d]`.
    /// The argmax row of each output element is recorded for backward.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("max_pool_groups", t)?;
        if group == 0 || t.rows() % group != 0 {
            return Err(NumericsError::BadGroup {
                op: "max_pool_groups",
                rows: t.rows(),
                group,
            });
        }
        let (n, d) = (t.rows() / group, t.cols());
        let mut data = vec![f64::NEG_INFINITY; n * d];
        let mut argmax = vec![0usize; n * d];
        for g in 0..n {
            for r in g * group..(g + 1) * group {
                let row = t.row(r);
                for c in 0..d {
                    if row[c] > data[g * d + c] {
                        data[g * d + c] = row[c];
                        argmax[g * d + c] = r;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(n, d, data)?,
            Op::MaxPoolGroups { x, argmax },
            ng,
        ))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("mean_pool_groups", t)?;
        if group == 0 || t.rows() % group != 0 {
            return Err(NumericsError::BadGroup {
                op: "mean_pool_groups",
                rows: t.rows(),
                group,
            });
        }
        let (n, d) = (t.rows() / group, t.cols());
        let mut data = vec![0.0; n * d];
        for r in 0..t.rows() {
            let g = r / group;
            for (c, v) in t.row(r).iter().enumerate() {
                data[g * d + c] += v / group as f64;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(n, d, data)?,
            Op::MeanPoolGroups { x, group },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("softmax_rows", t)?;
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..m {
                let e = (row[c] - mx).exp();
                data[r * m + c] = e;
                z += e;
            }
            for c in 0..m {
                data[r * m + c] /= z;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::SoftmaxRows(x), ng))
    }

    /// Row-wise log-sum-exp: `[n,m]` → `[n,1]`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("log_sum_exp_rows", t)?;
        let data = (0..t.rows()).map(|r| log_sum_exp(t.row(r))).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(t.rows(), 1, data)?, Op::LogSumExpRows(x), ng))
    }

    /// `out[i,j] = ||a_i - b_j||²`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("pairwise_sq_dist", ta)?;
        require_matrix("pairwise_sq_dist", tb)?;
        if ta.cols() != tb.cols() {
            return Err(mismatch("pairwise_sq_dist", ta, tb));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = ta
                    .row(i)
                    .iter()
                    .zip(tb.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::PairwiseSqDist(a, b), ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("l2_normalize_rows", t)?;
        let mut out = t.clone();
        let m = t.cols();
        for r in 0..t.rows() {
            let norm = (t.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            for v in &mut out.data_mut()[r * m..(r + 1) * m] {
                *v /= norm;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::L2NormalizeRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    // Composite helpers.

    /// `x · w + b` for `x [n,in]`, `w [in,out]`, `b [1,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Scaled dot-product attention `softmax(q kᵀ / √d + mask) v`.
    ///
    /// `key_mask[j] == false` excludes key `j`; at least one key must remain.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let d = self.value(q).cols();
        if self.value(k).cols() != d {
            return Err(mismatch("attention", self.value(q), self.value(k)));
        }
        let kt = self.transpose(k);
        let logits = self.matmul(q, kt)?;
        let mut logits = self.scale(logits, 1.0 / (d as f64).sqrt());
        if let Some(mask) = key_mask {
            let (n, m) = (self.value(logits).rows(), self.value(logits).cols());
            if mask.len() != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    left: vec![n, m],
                    right: vec![1, mask.len()],
                });
            }
            let row: Vec<f64> = mask
                .iter()
                .map(|&keep| if keep { 0.0 } else { -1e9 })
                .collect();
            let bias = self.constant(Tensor::row_vector(&row));
            logits = self.add_bias(logits, bias)?;
        }
        let weights = self.softmax_rows(logits)?;
        self.matmul(weights, v)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradient for every parameter in `store`; unreachable ones are zero.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros_like(value));
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let ga = matmul_a_bt(g.data(), tb.data(), n, m, k);
                    acc(*a, Tensor::matrix(n, k, ga).unwrap());
                }
                if self.ng(*b) {
                    let gb = matmul_at_b(ta.data(), g.data(), n, k, m);
                    acc(*b, Tensor::matrix(k, m, gb).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                let m = g.cols();
                let mut gb = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % m] += v;
                }
                acc(*b, Tensor::matrix(1, m, gb).unwrap());
            }
            Op::AddColVec(x, c) => {
                acc(*x, g.clone());
                let (n, m) = (g.rows(), g.cols());
                let mut gc = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    gc[i / m] += v;
                }
                acc(*c, Tensor::matrix(n, 1, gc).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, tb, |x, y| x * y);
                let gb = zip_map(g, ta, |x, y| x * y);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, zip_map(g, tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Exp(x) => acc(*x, zip_map(g, out, |gv, yv| gv * yv)),
            Op::Log(x) => {
                let tx = self.value(*x);
                acc(*x, zip_map(g, tx, |gv, xv| gv / xv));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, Tensor::matrix(rows, w, d).unwrap());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let d = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    acc(p, Tensor::matrix(r, cols, d).unwrap());
                    offset += r;
                }
            }
            Op::GatherRows(x, index) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut gx = Tensor::zeros(tx.rows(), cols);
                for (o, &i) in index.iter().enumerate() {
                    let src = g.row(o);
                    let dst = &mut gx.data_mut()[i * cols..(i + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                acc(*x, gx);
            }
            Op::GatherElems(x, flat) => {
                let mut gx = Tensor::zeros_like(self.value(*x));
                for (o, &i) in flat.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[o];
                }
                acc(*x, gx);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::MaxPoolGroups { x, argmax } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut gx = Tensor::zeros(tx.rows(), d);
                for (o, &r) in argmax.iter().enumerate() {
                    let c = o % d;
                    gx.data_mut()[r * d + c] += g.data()[o];
                }
                acc(*x, gx);
            }
            Op::MeanPoolGroups { x, group } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut gx = Tensor::zeros(tx.rows(), d);
                for r in 0..tx.rows() {
                    let src = g.row(r / group);
                    for c in 0..d {
                        gx.data_mut()[r * d + c] = src[c] / *group as f64;
                    }
                }
                acc(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let (n, m) = (out.rows(), out.cols());
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        gx[r * m + c] = y[c] * (gr[c] - dot);
                    }
                }
                acc(*x, Tensor::matrix(n, m, gx).unwrap());
            }
            Op::LogSumExpRows(x) => {
                let tx = self.value(*x);
                let (n, m) = (tx.rows(), tx.cols());
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    let lse = out.data()[r];
                    for c in 0..m {
                        gx[r * m + c] = g.data()[r] * (tx.get(r, c) - lse).exp();
                    }
                }
                acc(*x, Tensor::matrix(n, m, gx).unwrap());
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
                let mut ga = Tensor::zeros(n, d);
                let mut gb = Tensor::zeros(m, d);
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = 2.0 * gij * (ta.get(i, c) - tb.get(j, c));
                            ga.data_mut()[i * d + c] += diff;
                            gb.data_mut()[j * d + c] -= diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::L2NormalizeRows(x) => {
                let tx = self.value(*x);
                let m = tx.cols();
                let mut gx = Tensor::zeros_like(tx);
                for r in 0..tx.rows() {
                    let norm = (tx.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        gx.data_mut()[r * m + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, self.value(*x).map(|_| gv));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let gv = g.item() / tx.numel().max(1) as f64;
                acc(*x, tx.map(|_| gv));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Numerically stable `ln Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
