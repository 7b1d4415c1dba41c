//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! A [`Tape`] records every operation as a node in execution order, so the
//! node list is already topologically sorted. [`Tape::backward`] walks it in
//! reverse once. Gradients are kept for every node that depends on a
//! `requires_grad` leaf, so intermediate values such as the embedding matrix
//! can be inspected after a backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Floor applied inside every logarithm and division on probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for length {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("computation error in {op}: {msg}")]
    Computation { op: &'static str, msg: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and nonnegative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { p: Var, target: usize },
    KlDiv { p: Vec<f64>, q: Var },
    Bce {
        p: Var,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward computation.
///
/// Confined to a single thread. Separate tapes share nothing.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// (rows, cols) view of a 1-D or 2-D shape where the last axis is the row.
fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a graph leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a constant (a leaf that never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Indices of the nodes this node was computed from.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Norm(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { p, .. } => vec![*p],
            Op::KlDiv { q, .. } => vec![*q],
            Op::Bce { p, .. } => vec![*p],
            Op::Leaf => vec![],
        }
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient of a node, zeros if none was accumulated.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects a 2-D tensor, got shape {s:?}"
            )));
        }
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![s[1], s[0]],
                data,
            },
            Op::Transpose(a),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err(name, &va.shape, &vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * factor).collect(),
        };
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix (or to a length-`n` vector).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let (_, cols) = as_rows(&sx);
        if sb.len() != 1 || sb[0] != cols || sx.is_empty() {
            return Err(shape_err("add_bias", &sx, &sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        if cols > 0 {
            for row in value.data.chunks_mut(cols) {
                for (v, bv) in row.iter_mut().zip(&b) {
                    *v += bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    /// Multiplies row `t` of an `m×n` matrix by `s[t]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(shape_err("scale_rows", &sx, &ss));
        }
        let cols = sx[1];
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, factor) in sv.iter().enumerate() {
            for v in &mut value.data[i * cols..(i + 1) * cols] {
                *v *= factor;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(value, Op::ScaleRows(x, s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| f(*x)).collect(),
        };
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|x| !(**x > 0.0)) {
            return Err(TensorError::Computation {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along `axis` (0 for vectors and row-stacking, 1 for columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() || first.len() > 2 {
            return Err(TensorError::Contract(format!(
                "concat axis {axis} invalid for shape {first:?}"
            )));
        }
        for p in &parts[1..] {
            let s = self.shape(*p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
        }
        let mut shape = first.clone();
        shape[axis] = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let data = if axis == 0 {
            parts
                .iter()
                .flat_map(|p| self.value(*p).data.iter().copied())
                .collect()
        } else {
            let rows = first[0];
            let mut out = Vec::with_capacity(shape.iter().product());
            for r in 0..rows {
                for p in parts {
                    let c = self.shape(*p)[1];
                    out.extend_from_slice(&self.value(*p).data[r * c..(r + 1) * c]);
                }
            }
            out
        };
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                len: s.get(1).copied().unwrap_or(0),
            });
        }
        let (rows, cols, w) = (s[0], s[1], end - start);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: vec![rows, w],
                data,
            },
            Op::SliceCols { x, start },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Contract("gather_rows expects a 2-D table".into()));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), cols],
                data,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let m = v.sum() / v.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), ng))
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).l2_norm();
        let ng = self.ng(a);
        self.push(Tensor::scalar(n), Op::L2Norm(a), ng)
    }

    /// Softmax along `axis`, which must be the last axis.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() == 0 || axis != v.ndim() - 1 {
            return Err(TensorError::Contract(format!(
                "softmax supports only the last axis; got axis {axis} for shape {:?}",
                v.shape
            )));
        }
        if v.data.iter().any(|x| x.is_nan()) {
            return Err(TensorError::Computation {
                op: "softmax",
                msg: "NaN input".into(),
            });
        }
        let (_, cols) = as_rows(&v.shape);
        let mut data = v.data.clone();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    total += *e;
                }
                for e in row.iter_mut() {
                    *e /= total;
                }
            }
        }
        let shape = v.shape.clone();
        let ng = self.ng(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x), ng))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (_, cols) = as_rows(&sx);
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(shape_err("layer_norm", &sx, self.shape(p)));
            }
        }
        let g = self.value(gain).data.clone();
        let b = self.value(bias).data.clone();
        let src = &self.value(x).data;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::new();
        if cols > 0 {
            for (r, row) in src.chunks(cols).enumerate() {
                let mu = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for c in 0..cols {
                    let h = (row[c] - mu) * is;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * g[c] + b[c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            Tensor {
                shape: sx,
                data: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    // ---- losses ---------------------------------------------------------

    /// `-ln p[target]` for a 1-D distribution, with the probability floored.
    pub fn cross_entropy(&mut self, p: Var, target: usize) -> Result<Var> {
        let v = self.value(p);
        if v.ndim() != 1 {
            return Err(TensorError::Contract(format!(
                "cross_entropy expects a 1-D distribution, got {:?}",
                v.shape
            )));
        }
        if target >= v.len() {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: target,
                len: v.len(),
            });
        }
        let loss = -v.data[target].max(PROB_FLOOR).ln();
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { p, target }, ng))
    }

    /// `KL(p || q) = Σ p ln(p / q)`. `p` is a constant; gradient flows into `q` only.
    pub fn kl_divergence(&mut self, p: &Tensor, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if p.shape != qv.shape {
            return Err(shape_err("kl_divergence", &p.shape, &qv.shape));
        }
        let mut total = 0.0;
        for (pi, qi) in p.data.iter().zip(&qv.data) {
            if *pi > 0.0 {
                total += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
            }
        }
        let ng = self.ng(q);
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlDiv {
                p: p.data.clone(),
                q,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy over positions where `mask` is set.
    /// Returns 0 when no position is selected.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        let v = self.value(p);
        if v.ndim() != 1 || targets.len() != v.len() || mask.len() != v.len() {
            return Err(shape_err("binary_cross_entropy", &v.shape, &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|m| **m).count();
        let mut total = 0.0;
        for i in 0..v.len() {
            if mask[i] {
                let (pi, y) = (v.data[i], targets[i]);
                total -= y * pi.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - pi).max(PROB_FLOOR).ln();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d node` into every node that depends on a
    /// `requires_grad` leaf. Calling it twice doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let bt = transpose_raw(&val(*b).data, k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.ng(*b) {
                    let at = transpose_raw(&val(*a).data, m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = &out.shape;
                send(*a, transpose_raw(g, s[0], s[1]));
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|x| x * f).collect()),
            Op::AddBias(x, b) => {
                send(*x, g.to_vec());
                let cols = val(*b).len();
                let mut gb = vec![0.0; cols];
                if cols > 0 {
                    for row in g.chunks(cols) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                send(*b, gb);
            }
            Op::ScaleRows(x, s) => {
                let cols = val(*x).shape[1];
                let (vx, vs) = (&val(*x).data, &val(*s).data);
                let mut gx = vec![0.0; g.len()];
                let mut gs = vec![0.0; vs.len()];
                for (r, factor) in vs.iter().enumerate() {
                    for c in 0..cols {
                        let k = r * cols + c;
                        gx[k] = g[k] * factor;
                        gs[r] += g[k] * vx[k];
                    }
                }
                send(*x, gx);
                send(*s, gs);
            }
            Op::Sigmoid(a) => send(
                *a,
                g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect(),
            ),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => send(
                *a,
                g.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Log(a) => send(
                *a,
                g.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(&out.data).map(|(g, y)| g * y).collect()),
            Op::Softmax(a) => {
                let (_, cols) = as_rows(&out.shape);
                let mut gx = vec![0.0; g.len()];
                if cols > 0 {
                    for ((gr, yr), xr) in g
                        .chunks(cols)
                        .zip(out.data.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            xr[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                send(*a, gx);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = val(*p).len();
                        send(*p, g[off..off + len].to_vec());
                        off += len;
                    }
                } else {
                    let rows = out.shape[0];
                    let total = out.shape[1];
                    let mut col = 0;
                    for p in parts {
                        let c = val(*p).shape[1];
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        send(*p, gp);
                        col += c;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let s = &val(*x).shape;
                let (rows, cols) = (s[0], s[1]);
                let w = out.shape[1];
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, gx);
            }
            Op::GatherRows { table, ids } => {
                let s = &val(*table).shape;
                let cols = s[1];
                let mut gt = vec![0.0; s[0] * cols];
                for (r, id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += g[r * cols + c];
                    }
                }
                send(*table, gt);
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::L2Norm(a) => {
                let norm = out.data[0];
                let gx = if norm > 0.0 {
                    val(*a).data.iter().map(|x| g[0] * x / norm).collect()
                } else {
                    vec![0.0; val(*a).len()]
                };
                send(*a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = val(*gain).len();
                let gv = &val(*gain).data;
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                let mut gx = vec![0.0; g.len()];
                if cols > 0 {
                    let n = cols as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let base = r * cols;
                        let mut sum_gh = 0.0;
                        let mut sum_gh_xh = 0.0;
                        for c in 0..cols {
                            let gy = g[base + c];
                            ggain[c] += gy * xhat[base + c];
                            gbias[c] += gy;
                            let gh = gy * gv[c];
                            sum_gh += gh;
                            sum_gh_xh += gh * xhat[base + c];
                        }
                        for c in 0..cols {
                            let gh = g[base + c] * gv[c];
                            gx[base + c] = is / n * (n * gh - sum_gh - xhat[base + c] * sum_gh_xh);
                        }
                    }
                }
                send(*x, gx);
                send(*gain, ggain);
                send(*bias, gbias);
            }
            Op::CrossEntropy { p, target } => {
                let pv = &val(*p).data;
                let mut gp = vec![0.0; pv.len()];
                if pv[*target] > PROB_FLOOR {
                    gp[*target] = -g[0] / pv[*target];
                }
                send(*p, gp);
            }
            Op::KlDiv { p, q } => {
                let qv = &val(*q).data;
                let gq = p
                    .iter()
                    .zip(qv)
                    .map(|(pi, qi)| {
                        if *pi > 0.0 && *qi > PROB_FLOOR {
                            -g[0] * pi / qi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*q, gq);
            }
            Op::Bce {
                p,
                targets,
                mask,
                count,
            } => {
                let pv = &val(*p).data;
                let mut gp = vec![0.0; pv.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for i in 0..pv.len() {
                        if !mask[i] {
                            continue;
                        }
                        let (pi, y) = (pv[i], targets[i]);
                        let mut d = 0.0;
                        if pi > PROB_FLOOR {
                            d -= y / pi;
                        }
                        if 1.0 - pi > PROB_FLOOR {
                            d += (1.0 - y) / (1.0 - pi);
                        }
                        gp[i] = scale * d;
                    }
                }
                send(*p, gp);
            }
        }
    }
}
