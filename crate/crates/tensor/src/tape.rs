//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order of the graph and backward is a single reverse sweep.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    MaxPoolGroups { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    L2NormalizeRows(Var),
    Sum(Var),
    Pick { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for later differentiation.
///
/// A tape is owned by one thread of execution. Parameters are copied in on
/// first use and cached by name, so repeated lookups share a single node and
/// their gradients accumulate.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
    binding_order: Vec<String>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, i-k-j order.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    /// Tape that records gradients for every node derived from a
    /// grad-requiring leaf.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: HashMap::new(),
            binding_order: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape for inference: no node requires grad, backward is a no-op.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf whose gradient is tracked regardless of its `requires_grad` flag.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Binds a named parameter from `store`, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf(t, t.requires_grad);
        self.bindings.insert(name.to_string(), v);
        self.binding_order.push(name.to_string());
        Ok(v)
    }

    /// Makes subsequent `param(name)` lookups resolve to `var`.
    pub fn override_param(&mut self, name: &str, var: Var) {
        if self.bindings.insert(name.to_string(), var).is_none() {
            self.binding_order.push(name.to_string());
        }
    }

    /// Names of parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.binding_order
            .iter()
            .map(move |n| (n.as_str(), self.bindings[n]))
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bindings.contains_key(name)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape node holds a valid tensor")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = transpose2(self.data(a), r, c);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` row vector to every row of `a` (last axis `n`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.data(bias).len() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// Multiplies every element of `a` by the single-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.data(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- normalisation --------------------------------------------------

    fn softmax_parts(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(axis_split(shape, axis))
    }

    /// Softmax along `axis`, stabilised by max subtraction. NaN propagates.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.softmax_parts(x, axis, "softmax")?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.softmax_parts(x, axis, "log_softmax")?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    denom += (src[at(j)] - max).exp();
                }
                let lse = max + denom.ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.data(gain).len() != n || self.data(bias).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(n) {
            let (mean, inv_std) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) * inv_std * g[j] + b[j]),
            );
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm { x, gain, bias, eps },
            &[x, gain, bias],
        ))
    }

    /// Unit L2 norm per row (last axis).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.extend(row.iter().map(|v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::L2NormalizeRows(x), &[x])
    }

    // ---- reductions and indexing -----------------------------------------

    /// Max over consecutive groups of `group` rows: `[g·G, d] -> [G, d]`.
    /// Ties resolve to the first row in the group.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "max_pool_groups")?;
        if group == 0 || rows % group != 0 {
            return Err(invalid(
                "max_pool_groups",
                format!("{rows} rows do not split into groups of {group}"),
            ));
        }
        let groups = rows / group;
        let src = self.data(x);
        let mut out = vec![0.0; groups * d];
        let mut argmax = vec![0; groups * d];
        for g in 0..groups {
            for j in 0..d {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if src[r * d + j] > src[best * d + j] {
                        best = r;
                    }
                }
                out[g * d + j] = src[best * d + j];
                argmax[g * d + j] = best * d + j;
            }
        }
        Ok(self.push(vec![groups, d], out, Op::MaxPoolGroups { x, argmax }, &[x]))
    }

    /// Mean over rows: `[r, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.dims2(x, "mean_rows")?;
        let src = self.data(x);
        let mut out = vec![0.0; d];
        for i in 0..r {
            add_into(&mut out, &src[i * d..(i + 1) * d]);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(vec![1, d], out, Op::MeanRows(x), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(invalid(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.data(x)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], data, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(invalid(
                "slice_cols",
                format!("cols {start}..{} of {d}", start + len),
            ));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        Ok(self.push(vec![r, len], data, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, d2) = self.dims2(p, "concat_rows")?;
            if d2 != d {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(vec![rows, d], data, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.dims2(p, "concat_cols")?;
            if r2 != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![r, total], data, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row lookup `table[ids[i]]`, i.e. an embedding layer.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(invalid("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("gather_rows", format!("id {bad} out of range {v}")));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn pick(&mut self, x: Var, flat_idx: &[usize]) -> Result<Var> {
        let n = self.data(x).len();
        if flat_idx.is_empty() {
            return Err(invalid("pick", "empty index list"));
        }
        if let Some(&bad) = flat_idx.iter().find(|&&i| i >= n) {
            return Err(invalid("pick", format!("index {bad} out of range {n}")));
        }
        let data = flat_idx.iter().map(|&i| self.data(x)[i]).collect();
        Ok(self.push(
            vec![flat_idx.len()],
            data,
            Op::Pick {
                x,
                idx: flat_idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bt = transpose2(self.data(*b), k, n);
                    self.accumulate(grads, *a, |da| gemm_acc(g, &bt, da, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose2(self.data(*a), m, k);
                    self.accumulate(grads, *b, |db| gemm_acc(&at, g, db, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let gt = transpose2(g, c, r);
                self.accumulate(grads, *a, |da| add_into(da, &gt));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |da| add_into(da, g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| {
                    db.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                let n = self.data(*bias).len();
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, s)| *d += s * c)
            }),
            Op::MulScalar(a, s) => {
                let c = self.data(*s)[0];
                let av = self.data(*a);
                self.accumulate(grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c)
                });
                self.accumulate(grads, *s, |ds| {
                    ds[0] += g.iter().zip(av).map(|(gi, x)| gi * x).sum::<f64>()
                });
            }
            Op::Exp(a) => self.accumulate(grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] / x[i];
                    }
                })
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * gelu_grad(x[i]);
                    }
                })
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |da| {
                    for i in 0..da.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += g[i];
                        }
                    }
                })
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => self.accumulate(grads, *x, |dx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => self.accumulate(grads, *x, |dx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let gsum: f64 = (0..*len).map(|j| g[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
            }),
            Op::LayerNorm { x, gain, bias, eps } => {
                let n = self.data(*gain).len();
                let xv = self.data(*x);
                let gv = self.data(*gain);
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx_all = vec![0.0; xv.len()];
                for (r, row) in xv.chunks(n).enumerate() {
                    let (mean, inv_std) = row_stats(row, *eps);
                    let grow = &g[r * n..(r + 1) * n];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dx_all[r * n + j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, |d| add_into(d, &dx_all));
                self.accumulate(grads, *gain, |d| add_into(d, &dgain));
                self.accumulate(grads, *bias, |d| add_into(d, &dbias));
            }
            Op::L2NormalizeRows(x) => {
                let n = *self.shape(*x).last().unwrap();
                let xv = self.data(*x);
                self.accumulate(grads, *x, |dx| {
                    for (r, row) in xv.chunks(n).enumerate() {
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                })
            }
            Op::MaxPoolGroups { x, argmax } => self.accumulate(grads, *x, |dx| {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }),
            Op::MeanRows(x) => {
                let r = self.shape(*x)[0];
                let d = g.len();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..r {
                        for j in 0..d {
                            dx[i * d + j] += g[j] / r as f64;
                        }
                    }
                })
            }
            Op::SliceRows { x, start } => {
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |dx| {
                    add_into(&mut dx[start * d..start * d + g.len()], g)
                })
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let len = node.shape[1];
                self.accumulate(grads, *x, |dx| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut dx[i * d + start..i * d + start + len], grow);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.data(*p).len();
                    self.accumulate(grads, *p, |dp| add_into(dp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut col = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    self.accumulate(grads, *p, |dp| {
                        for (i, grow) in g.chunks(total).enumerate() {
                            add_into(&mut dp[i * c..(i + 1) * c], &grow[col..col + c]);
                        }
                    });
                    col += c;
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::Pick { x, idx } => self.accumulate(grads, *x, |dx| {
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] += g[o];
                }
            }),
            Op::Sum(x) => self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(&mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(&mat(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_row_by_col() {
        let mut t = Tape::new();
        let a = t.constant(&mat(&[vec![1.0, 2.0]]));
        let b = t.constant(&mat(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[1, 1]);
        assert_eq!(t.item(c), 11.0);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(&[2, 3]));
        let b = t.constant(&Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let cases = [
            (vec![0.0, 0.0], vec![0.5, 0.5]),
            (vec![1000.0, 1000.0], vec![0.5, 0.5]),
            (vec![0.0, 3f64.ln()], vec![0.25, 0.75]),
        ];
        for (x, want) in cases {
            let v = t.constant(&Tensor::new(&[2], x).unwrap());
            let s = t.softmax(v, 0).unwrap();
            for (a, b) in t.data(s).iter().zip(&want) {
                assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_nan_propagates() {
        let mut t = Tape::new();
        let v = t.constant(&Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        let s = t.softmax(v, 0).unwrap();
        assert!(t.data(s).iter().all(|x| x.is_nan()));
    }

    #[test]
    fn softmax_middle_axis() {
        let mut t = Tape::new();
        let v = t.constant(&Tensor::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let s = t.softmax(v, 1).unwrap();
        let d = t.data(s);
        // pairs (0,2), (1,3), (4,6), (5,7) each sum to one
        for (a, b) in [(0, 2), (1, 3), (4, 6), (5, 7)] {
            assert!((d[a] + d[b] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(&Tensor::full(&[2], 1.0));
        let b = t.constant(&Tensor::zeros(&[2]));
        let x = t.constant(&mat(&[vec![1.0, 3.0]]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(t.data(y), &[-1.0, 1.0]);
        let c = t.constant(&mat(&[vec![4.0, 4.0]]));
        let y = t.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0]);
    }

    #[test]
    fn max_pool_single_row_groups_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(&mat(&[vec![1.0, -2.0], vec![3.0, 4.0]]));
        let y = t.max_pool_groups(x, 1).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn shared_param_binding_accumulates() {
        let mut store = ParamStore::new();
        store.insert_trainable("w", Tensor::new(&[1], vec![3.0]).unwrap(), false);
        let mut t = Tape::new();
        let a = t.param(&store, "w").unwrap();
        let b = t.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let p = t.mul(a, b).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(a).unwrap(), &[6.0]);
    }

    #[test]
    fn inference_tape_has_no_grads() {
        let mut t = Tape::inference();
        let x = t.variable(&Tensor::scalar(2.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.variable(&Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }
}
