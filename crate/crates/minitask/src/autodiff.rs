//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes in topological order. Forward
//! ops push nodes; [`Graph::backward`] replays them in reverse, accumulating
//! vector-Jacobian products additively across fan-out. Parameter leaves are
//! snapshots of [`Params`] entries; backward adds their gradients into the
//! parameter store, so repeated backward calls accumulate until
//! [`Params::zero_grad`].
//!
//! The primitive set is closed: matmul (plain and transposed-right), add,
//! row-broadcast add, sub, mul, scale, add-scalar, concat (rows/cols), block
//! slice, reshape, abs-diff, GELU, ReLU, sigmoid, softmax, layer_norm,
//! dropout, embedding lookup, mean/sum reductions, square, log. Every
//! primitive carries a finite-difference test; a new op must ship with one.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Log arguments are clamped to at least this value.
pub const LOG_CLAMP: f64 = 1e-12;

const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// out = a * b^T with b stored [n x k].
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// [r x d] + [d], bias broadcast over rows.
    AddRow { a: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Block { x: Var, r0: usize, c0: usize },
    Reshape { x: Var },
    AbsDiff { a: Var, b: Var },
    Gelu { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Mask entries are 0 or 1/(1-p), applied multiplicatively.
    Dropout { x: Var, mask: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    MeanAll { x: Var },
    SumAll { x: Var },
    SumLast { x: Var },
    MeanAxis0 { x: Var },
    Square { x: Var },
    Log { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Named parameter tensors with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Tensor, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Registers a parameter. Registration order is the canonical order for
    /// flattening and optimizer state, so callers must register
    /// deterministically.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value, grad));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].2
    }

    fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].2)
    }

    pub fn zero_grad(&mut self) {
        for (_, _, g) in &mut self.entries {
            g.data_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, v, _)| v.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries.iter().map(|(n, v, g)| (n.as_str(), v, g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|(n, v, g)| (n.as_str(), v, g))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    /// Merges another parameter set in; names must not collide.
    pub fn absorb(&mut self, other: Params) {
        for (name, value, _) in other.entries {
            self.insert(name, value);
        }
    }
}

/// Reverse-mode differentiation graph.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
}

impl Graph {
    /// `training` controls dropout; eval graphs are deterministic.
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<String>) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value from {op:?}"
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        self.grads.push(None);
        Var(id)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// Differentiable leaf that is not a parameter. Its gradient is readable
    /// via [`Graph::grad`] after backward.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Parameter leaf: snapshots the current value; backward adds into the
    /// parameter's gradient accumulator by name.
    pub fn param(&mut self, params: &Params, name: &str) -> Var {
        let value = params.value(name).clone();
        self.push(value, Op::Leaf, true, Some(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Distance from the nearest non-differentiable kink over the whole
    /// graph: the smallest |input| of any ReLU and the smallest |a-b| of any
    /// abs-diff. Finite-difference tests assert this stays well above the
    /// probe step, otherwise central differences straddle a kink and the
    /// comparison is meaningless. Infinity when no kinked op is present.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::AbsDiff { a, b } => {
                    for (&x, &y) in self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                    {
                        margin = margin.min((x - y).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a, b }, rg, None))
    }

    /// a[m x k] * b[n x k]^T -> [m x n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatmulNt { a, b }, rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = zip2(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(sa.to_vec(), data)?,
            Op::Add { a, b },
            rg,
            None,
        ))
    }

    /// [r x d] plus a length-d bias vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let d = sa[1];
        let bv = self.value(bias).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(
            Tensor::new(sa.to_vec(), data)?,
            Op::AddRow { a, bias },
            rg,
            None,
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op: "sub",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = zip2(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(sa.to_vec(), data)?,
            Op::Sub { a, b },
            rg,
            None,
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = zip2(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(sa.to_vec(), data)?,
            Op::Mul { a, b },
            rg,
            None,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = map1(self.value(x), |v| c * v);
        let rg = self.requires(x);
        self.push(t, Op::Scale { x, c }, rg, None)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = map1(self.value(x), |v| v + c);
        let rg = self.requires(x);
        self.push(t, Op::AddScalar { x }, rg, None)
    }

    /// Concatenation along the last axis of 2-D inputs with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let r = self.value(parts[0]).shape()[0];
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[1];
        }
        let mut data = vec![0.0; r * width];
        let mut c0 = 0;
        for &p in parts {
            let s = self.value(p).shape().to_vec();
            let src = self.value(p).data();
            for row in 0..r {
                data[row * width + c0..row * width + c0 + s[1]]
                    .copy_from_slice(&src[row * s[1]..(row + 1) * s[1]]);
            }
            c0 += s[1];
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![r, width], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
            None,
        ))
    }

    /// Concatenation along axis 0 of 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let c = self.value(parts[0]).shape()[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1] != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
            None,
        ))
    }

    /// Contiguous sub-matrix x[r0 .. r0+h, c0 .. c0+w].
    pub fn block(&mut self, x: Var, r0: usize, h: usize, c0: usize, w: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || r0 + h > s[0] || c0 + w > s[1] {
            return Err(Error::Shape {
                op: "block",
                lhs: s.to_vec(),
                rhs: vec![r0 + h, c0 + w],
            });
        }
        let cols = s[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(h * w);
        for row in r0..r0 + h {
            data.extend_from_slice(&src[row * cols + c0..row * cols + c0 + w]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![h, w], data)?,
            Op::Block { x, r0, c0 },
            rg,
            None,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).data().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { x }, rg, None))
    }

    /// Elementwise |a - b|.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op: "abs_diff",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = zip2(self.value(a), self.value(b), |x, y| (x - y).abs());
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(sa.to_vec(), data)?,
            Op::AbsDiff { a, b },
            rg,
            None,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = map1(self.value(x), gelu_fwd);
        let rg = self.requires(x);
        self.push(t, Op::Gelu { x }, rg, None)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = map1(self.value(x), |v| v.max(0.0));
        let rg = self.requires(x);
        self.push(t, Op::Relu { x }, rg, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = map1(self.value(x), sigmoid_fwd);
        let rg = self.requires(x);
        self.push(t, Op::Sigmoid { x }, rg, None)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let d = xt.last_dim();
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), data).expect("shape preserved");
        let rg = self.requires(x);
        self.push(t, Op::Softmax { x }, rg, None)
    }

    /// Per-last-axis normalization (x - mean)/sqrt(var + eps), then affine
    /// gamma * xhat + beta. gamma and beta are length-d vectors.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (sx, sg, sb) = (
            self.value(x).shape().to_vec(),
            self.value(gamma).shape(),
            self.value(beta).shape(),
        );
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || sg != [d] || sb != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: sx,
                rhs: sg.to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = gv[j] * ((*v - mean) * inv) + bv[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(sx, data)?,
            Op::LayerNorm { x, gamma, beta, eps },
            rg,
            None,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability p and survivors are scaled by 1/(1-p); eval mode is the
    /// identity (returns `x` itself, no node).
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, rg, None))
    }

    /// Row lookup: out[i] = table[ids[i]], shape [ids.len() x d].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (s[0], s[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for (row, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Data {
                    row,
                    msg: format!("token id {id} out of range for table of {v}"),
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            None,
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(m), Op::MeanAll { x }, rg, None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg, None)
    }

    /// Reduces the last axis by summation: [.. x d] -> [..].
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let data: Vec<f64> = t.data().chunks(d).map(|c| c.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        let rg = self.requires(x);
        self.push(
            Tensor::new(shape, data).expect("reduced shape"),
            Op::SumLast { x },
            rg,
            None,
        )
    }

    /// Column means of a 2-D input: [r x d] -> [d].
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape {
                op: "mean_axis0",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, d) = (s[0], s[1]);
        let mut data = vec![0.0; d];
        for row in t.data().chunks(d) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![d], data)?, Op::MeanAxis0 { x }, rg, None))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = map1(self.value(x), |v| v * v);
        let rg = self.requires(x);
        self.push(t, Op::Square { x }, rg, None)
    }

    /// Natural log with the argument clamped to at least [`LOG_CLAMP`].
    pub fn log(&mut self, x: Var) -> Var {
        let t = map1(self.value(x), |v| v.max(LOG_CLAMP).ln());
        let rg = self.requires(x);
        self.push(t, Op::Log { x }, rg, None)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of parameter leaves are
    /// added into `params`; gradients of `input` leaves stay readable via
    /// [`Graph::grad`]. Node gradients are cleared at the start of each call,
    /// parameter accumulators are not.
    pub fn backward(&mut self, loss: Var, params: &mut Params) -> Result<()> {
        self.backward_impl(loss, Some(params))
    }

    /// Backward without a parameter store, for input-gradient checks.
    pub fn backward_inputs(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&mut self, loss: Var, mut params: Option<&mut Params>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dout) = self.grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.vjp(id, &op, &dout);
            if let Some(name) = self.nodes[id].param.clone() {
                let p = params
                    .as_deref_mut()
                    .ok_or_else(|| Error::Contract("parameter leaf in a paramless backward".into()))?;
                let acc = p.grad_mut(&name).ok_or_else(|| {
                    Error::Contract(format!("parameter {name} missing from store"))
                })?;
                for (a, d) in acc.data_mut().iter_mut().zip(&dout) {
                    *a += d;
                }
            } else {
                self.grads[id] = Some(dout);
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => self.grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn vjp(&mut self, id: usize, op: &Op, dout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    let da = kernels::matmul_nt(dout, self.value(*b).data(), m, n, k);
                    self.accum(*a, &da);
                }
                if self.requires(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), dout, m, k, n);
                    self.accum(*b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.requires(*a) {
                    // d_a = dout * b : [m x n][n x k]
                    let da = kernels::matmul(dout, self.value(*b).data(), m, n, k);
                    self.accum(*a, &da);
                }
                if self.requires(*b) {
                    // d_b = dout^T * a : [n x m][m x k]
                    let db = kernels::matmul_tn(dout, self.value(*a).data(), m, n, k);
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, dout);
                self.accum(*b, dout);
            }
            Op::AddRow { a, bias } => {
                self.accum(*a, dout);
                if self.requires(*bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![0.0; d];
                    for chunk in dout.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accum(*bias, &db);
                }
            }
            Op::Sub { a, b } => {
                self.accum(*a, dout);
                if self.requires(*b) {
                    let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let da: Vec<f64> = dout
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(d, y)| d * y)
                        .collect();
                    self.accum(*a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = dout
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(d, x)| d * x)
                        .collect();
                    self.accum(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = dout.iter().map(|d| c * d).collect();
                self.accum(*x, &dx);
            }
            Op::AddScalar { x } => {
                self.accum(*x, dout);
            }
            Op::ConcatCols { parts } => {
                let r = self.value(Var(id)).shape()[0];
                let width = self.value(Var(id)).shape()[1];
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.requires(p) {
                        let mut dp = vec![0.0; r * w];
                        for row in 0..r {
                            dp[row * w..(row + 1) * w]
                                .copy_from_slice(&dout[row * width + c0..row * width + c0 + w]);
                        }
                        self.accum(p, &dp);
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires(p) {
                        self.accum(p, &dout[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Block { x, r0, c0 } => {
                if self.requires(*x) {
                    let sx = self.value(*x).shape().to_vec();
                    let so = self.value(Var(id)).shape().to_vec();
                    let (h, w, cols) = (so[0], so[1], sx[1]);
                    let mut dx = vec![0.0; sx[0] * sx[1]];
                    for row in 0..h {
                        dx[(r0 + row) * cols + c0..(r0 + row) * cols + c0 + w]
                            .copy_from_slice(&dout[row * w..(row + 1) * w]);
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::Reshape { x } => {
                self.accum(*x, dout);
            }
            Op::AbsDiff { a, b } => {
                let diffsign: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| {
                        if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.requires(*a) {
                    let da: Vec<f64> = dout.iter().zip(&diffsign).map(|(d, s)| d * s).collect();
                    self.accum(*a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = dout.iter().zip(&diffsign).map(|(d, s)| -d * s).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(d, &v)| d * gelu_grad(v))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.value(Var(id)).data())
                    .map(|(d, &s)| d * s * (1.0 - s))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Softmax { x } => {
                let y = self.value(Var(id));
                let d = y.last_dim();
                let mut dx = vec![0.0; y.numel()];
                for (row, (yrow, drow)) in y.data().chunks(d).zip(dout.chunks(d)).enumerate() {
                    let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[row * d + j] = yrow[j] * (drow[j] - dot);
                    }
                }
                self.accum(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xt = self.value(*x);
                let d = xt.last_dim();
                let rows = xt.rows();
                let gv = self.value(*gamma).data().to_vec();
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut dx = vec![0.0; xt.numel()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xt.data()[r * d..(r + 1) * d];
                    let dr = &dout[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    if need_g || need_b {
                        for j in 0..d {
                            dg[j] += dr[j] * xhat[j];
                            db[j] += dr[j];
                        }
                    }
                    if need_x {
                        // dxhat = dout * gamma; dx = inv * (dxhat - mean(dxhat)
                        //          - xhat * mean(dxhat * xhat))
                        let dxhat: Vec<f64> = dr.iter().zip(&gv).map(|(a, g)| a * g).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if need_x {
                    self.accum(*x, &dx);
                }
                if need_g {
                    self.accum(*gamma, &dg);
                }
                if need_b {
                    self.accum(*beta, &db);
                }
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = dout.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.accum(*x, &dx);
            }
            Op::Embedding { table, ids } => {
                if self.requires(*table) {
                    let d = self.value(*table).last_dim();
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (row, &tok) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[tok * d + j] += dout[row * d + j];
                        }
                    }
                    self.accum(*table, &dt);
                }
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let g = dout[0] / n as f64;
                let dx = vec![g; n];
                self.accum(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![dout[0]; self.value(*x).numel()];
                self.accum(*x, &dx);
            }
            Op::SumLast { x } => {
                let d = self.value(*x).last_dim();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (row, dr) in dout.iter().enumerate() {
                    dx[row * d..(row + 1) * d].fill(*dr);
                }
                self.accum(*x, &dx);
            }
            Op::MeanAxis0 { x } => {
                let s = self.value(*x).shape().to_vec();
                let (r, d) = (s[0], s[1]);
                let mut dx = vec![0.0; r * d];
                for row in 0..r {
                    for j in 0..d {
                        dx[row * d + j] = dout[j] / r as f64;
                    }
                }
                self.accum(*x, &dx);
            }
            Op::Square { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(d, &v)| d * 2.0 * v)
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(d, &v)| if v > LOG_CLAMP { d / v } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
        }
    }
}

fn map1(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn sigmoid_fwd(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// tanh form of GELU (the BERT convention).
fn gelu_fwd(v: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (v + GELU_C * v * v * v);
    0.5 * v * (1.0 + u.tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (v + GELU_C * v * v * v);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_C * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

/// Max relative disagreement between analytic gradients and central finite
/// differences of `f` at `x`. `f` must be deterministic (no training-mode
/// dropout) and must produce a scalar.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be > 0, got {step}")));
    }
    let mut g = Graph::new(false);
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar output, got {:?}",
            g.value(out).shape()
        )));
    }
    g.backward_inputs(out)?;
    let analytic: Vec<f64> = match g.grad(v) {
        Some(gr) => gr.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut eval = |pt: &Tensor| -> Result<f64> {
        let mut g = Graph::new(false);
        let v = g.leaf(pt.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let denom = analytic[i].abs() + numeric.abs() + 1e-12;
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Outcome of a parameter-wide finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Max relative disagreement over the resolvable coordinates.
    pub max_rel: f64,
    /// Coordinates compared against the relative tolerance.
    pub checked: usize,
    /// Coordinates where both gradients sat below the resolution floor.
    pub unresolved: usize,
}

/// Finite-difference check over every coordinate of every parameter.
/// `params` must already hold analytic gradients (one backward, zeroed
/// first); `loss_fn` re-evaluates the loss from perturbed parameters.
///
/// Central differences in f64 cannot resolve gradients below roughly
/// ulp(loss)/(2 step); for an O(1) loss and step 1e-4 that floor is ~1e-12,
/// which the relative-error denominator floor of 1e-12 does not cover.
/// Coordinates where the analytic and numeric gradients BOTH fall below a
/// conservative resolution floor (1e-9 scaled by the loss magnitude) are
/// counted as unresolved instead of compared: a wrong gradient formula
/// surfaces at the scale of true gradients, far above that floor.
pub fn finite_diff_check_params<F>(
    mut loss_fn: F,
    params: &mut Params,
    step: f64,
) -> Result<FdReport>
where
    F: FnMut(&Params) -> Result<f64>,
{
    let base = loss_fn(params)?;
    let floor = 1e-9 * base.abs().max(1.0);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut report = FdReport {
        max_rel: 0.0,
        checked: 0,
        unresolved: 0,
    };
    for name in names {
        for i in 0..params.value(&name).numel() {
            let orig = params.value(&name).data()[i];
            params.value_mut(&name).data_mut()[i] = orig + step;
            let up = loss_fn(params)?;
            params.value_mut(&name).data_mut()[i] = orig - step;
            let down = loss_fn(params)?;
            params.value_mut(&name).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = params.grad(&name).data()[i];
            if analytic.abs() < floor && numeric.abs() < floor {
                report.unresolved += 1;
                continue;
            }
            report.checked += 1;
            let denom = analytic.abs() + numeric.abs() + 1e-12;
            report.max_rel = report.max_rel.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(report)
}
