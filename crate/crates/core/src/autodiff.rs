//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Values are
//! computed eagerly; [`Tape::backward`] walks the record once in reverse and
//! accumulates exact analytic gradients. Nodes that depend on no
//! gradient-requiring leaf are skipped during the backward pass.
//!
//! Storage and accumulation are both `f64`, which keeps central-difference
//! gradient checks meaningful at a `1e-4` relative tolerance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} cannot hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Leading dimension; 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of trailing dimensions; the length for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Tanh(Var),
    Cos(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
    StraightThrough(Var),
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    L2Normalize { x: Var, norms: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_len: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn out_len(in_len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        (in_len + 2 * pad - kernel) / stride + 1
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Recorded computation. Single-writer; build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if none flowed to it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Forward identity; the result is a fresh constant, so nothing upstream
    /// of `x` receives gradient through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    /// Forward value of `quantized`; the backward pass hands the incoming
    /// gradient unchanged to `continuous` and nothing to `quantized`.
    pub fn straight_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        let (cs, qs) = (self.shape(continuous), self.shape(quantized));
        if cs != qs {
            return Err(shape_err("straight_through", cs, qs));
        }
        let value = self.nodes[quantized.0].value.clone();
        let ng = self.needs_grad(continuous);
        Ok(self.push(value, Op::StraightThrough(continuous), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(shape_err(what, &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: ta.shape.clone(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a[r, :] + row` for every row `r` of the matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let cols = ta.cols();
        if tr.len() != cols {
            return Err(shape_err("add_row", &ta.shape, &tr.shape));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_exact_mut(cols) {
            chunk.iter_mut().zip(&tr.data).for_each(|(x, y)| *x += y);
        }
        let v = Tensor { shape: ta.shape.clone(), data };
        let ng = self.any_grad(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let v = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| x * s).collect() };
        let ng = self.needs_grad(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = kernels::mm(&ta.data, &tb.data, m, k, n);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose needs a matrix, got {:?}", ta.shape)));
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let data = kernels::transpose(&ta.data, r, c);
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), ng))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape.len() != 2 || start + len > tx.shape[1] || len == 0 {
            return Err(Error::ShapeMismatch(format!("slice {start}..{} of {:?}", start + len, tx.shape)));
        }
        let (r, c) = (tx.shape[0], tx.shape[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data[i * c + start..i * c + start + len]);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { x, start }, ng))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows = (start..start + len).collect();
        self.select_rows(x, rows)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let r = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != r {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor { shape: vec![r, total], data }, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let c = self.shape(*first)[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 2 || t.shape[1] != c {
                return Err(shape_err("concat_rows", self.shape(*first), &t.shape));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor { shape: vec![rows, c], data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers rows of `x` (any rank; the leading axis is the row axis).
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let n = tx.rows();
        let c = tx.cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, bound: n });
        }
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("select of zero rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(&tx.data[r * c..(r + 1) * c]);
        }
        let mut shape = tx.shape.clone();
        if shape.len() == 1 {
            shape = vec![rows.len(), c];
        } else {
            shape[0] = rows.len();
        }
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor { shape, data }, Op::SelectRows { x, rows }, ng))
    }

    /// Rows of an embedding table `[K, d]` for the given indices.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.select_rows(table, indices.to_vec())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != tx.len() {
            return Err(shape_err("reshape", &tx.shape, shape));
        }
        let v = Tensor { shape: shape.to_vec(), data: tx.data.clone() };
        let ng = self.needs_grad(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&u| gelu(u)).collect() };
        let ng = self.needs_grad(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&u| libm::tanh(u)).collect() };
        let ng = self.needs_grad(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let v = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&u| libm::cos(u)).collect() };
        let ng = self.needs_grad(x);
        self.push(v, Op::Cos(x), ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let c = tx.cols();
        let (tg, tb) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", &tx.shape, &tg.shape));
        }
        let rows = tx.len() / c;
        let mut xhat = Vec::with_capacity(tx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for r in tx.data.chunks_exact(c) {
            let mu = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd.push(rs);
            for (j, v) in r.iter().enumerate() {
                let h = (v - mu) * rs;
                xhat.push(h);
                out.push(h * tg.data[j] + tb.data[j]);
            }
        }
        let v = Tensor { shape: tx.shape.clone(), data: out };
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for r in tx.data.chunks_exact(c) {
            softmax_row(r, &mut data);
        }
        let v = Tensor { shape: tx.shape.clone(), data };
        let ng = self.needs_grad(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let k = tl.cols();
        let rows = tl.len() / k;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch(format!("{} targets for {rows} rows of logits", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::IndexOutOfRange { index: bad, bound: k });
        }
        let mut probs = Vec::with_capacity(tl.len());
        let mut loss = 0.0;
        for (r, row) in tl.data.chunks_exact(k).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[targets[r]];
            probs.extend(row.iter().map(|&v| libm::exp(v - lse)));
        }
        let v = Tensor::scalar(loss / rows as f64);
        let ng = self.needs_grad(logits);
        Ok(self.push(v, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(shape_err("mse", &ta.shape, &tb.shape));
        }
        let s = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ta.len() as f64;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.len() / c);
        let mut data = Vec::with_capacity(tx.len());
        for r in tx.data.chunks_exact(c) {
            let n = libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()).max(NORM_FLOOR);
            norms.push(n);
            data.extend(r.iter().map(|v| v / n));
        }
        let v = Tensor { shape: tx.shape.clone(), data };
        let ng = self.needs_grad(x);
        self.push(v, Op::L2Normalize { x, norms }, ng)
    }

    /// 1-D convolution. `x: [n, in_ch, len]`, `w: [out_ch, in_ch, k]`,
    /// `b: [out_ch]`; output `[n, out_ch, out_len]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if tx.shape.len() != 3 || tw.shape.len() != 3 || tx.shape[1] != tw.shape[1] || tb.len() != tw.shape[0] {
            return Err(shape_err("conv1d", &tx.shape, &tw.shape));
        }
        if tx.shape[2] + 2 * pad < tw.shape[2] || stride == 0 {
            return Err(shape_err("conv1d kernel", &tx.shape, &tw.shape));
        }
        let geom = ConvGeom {
            batch: tx.shape[0],
            in_ch: tx.shape[1],
            in_len: tx.shape[2],
            out_ch: tw.shape[0],
            kernel: tw.shape[2],
            stride,
            pad,
            out_len: ConvGeom::out_len(tx.shape[2], tw.shape[2], stride, pad),
        };
        let data = kernels::conv1d(&tx.data, &tw.data, &tb.data, &geom);
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![geom.batch, geom.out_ch, geom.out_len], data }, Op::Conv1d { x, w, b, geom }, ng))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let tout = &self.nodes[out.0].value;
        if !tout.is_scalar() {
            return Err(Error::NonScalarOutput(tout.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let vb = &val(*b).data;
                    let ga = acc!(*a);
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * z;
                    }
                }
                if wants(*b) {
                    let va = &val(*a).data;
                    let gb = acc!(*b);
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*row) {
                    let c = val(*row).len();
                    let gr = acc!(*row);
                    for chunk in g.chunks_exact(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(*a) {
                    let d = kernels::mm_nt(g, &tb.data, m, n, k);
                    acc!(*a).iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let d = kernels::mm_tn(&ta.data, g, k, m, n);
                    acc!(*b).iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
            }
            Op::Transpose(a) => {
                let s = &val(*a).shape;
                let d = kernels::transpose(g, s[1], s[0]);
                acc!(*a).iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).shape[1];
                let len = node.value.shape[1];
                let gx = acc!(*x);
                for (i, chunk) in g.chunks_exact(len).enumerate() {
                    gx[i * c + start..i * c + start + len].iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape[1];
                    if wants(p) {
                        let gp = acc!(p);
                        for (i, chunk) in gp.chunks_exact_mut(w).enumerate() {
                            chunk.iter_mut().zip(&g[i * total + offset..i * total + offset + w]).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        acc!(p).iter_mut().zip(&g[offset..offset + n]).for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = val(*x).cols();
                let gx = acc!(*x);
                for (i, &r) in rows.iter().enumerate() {
                    gx[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                acc!(*x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc!(*x).iter_mut().for_each(|a| *a += g0);
            }
            Op::Mean(x) => {
                let g0 = g[0] / val(*x).len() as f64;
                acc!(*x).iter_mut().for_each(|a| *a += g0);
            }
            Op::Gelu(x) => {
                let vx = &val(*x).data;
                let gx = acc!(*x);
                for ((a, b), u) in gx.iter_mut().zip(g).zip(vx) {
                    *a += b * gelu_grad(*u);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value.data;
                let gx = acc!(*x);
                for ((a, b), t) in gx.iter_mut().zip(g).zip(y) {
                    *a += b * (1.0 - t * t);
                }
            }
            Op::Cos(x) => {
                let vx = &val(*x).data;
                let gx = acc!(*x);
                for ((a, b), u) in gx.iter_mut().zip(g).zip(vx) {
                    *a -= b * libm::sin(*u);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = val(*gain).len();
                if wants(*bias) {
                    let gb = acc!(*bias);
                    for chunk in g.chunks_exact(c) {
                        gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(*gain) {
                    let gg = acc!(*gain);
                    for (chunk, h) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += chunk[j] * h[j];
                        }
                    }
                }
                if wants(*x) {
                    let gain_v = &val(*gain).data;
                    let gx = acc!(*x);
                    for (r, (chunk, h)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..c {
                            let gh = chunk[j] * gain_v[j];
                            m1 += gh;
                            m2 += gh * h[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gh = chunk[j] * gain_v[j];
                            gx[r * c + j] += rstd[r] * (gh - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let c = node.value.cols();
                let gx = acc!(*x);
                for (r, (gy, yy)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yy[j] * (gy[j] - dot);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let gl = acc!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                let scale = 2.0 * g[0] / va.len() as f64;
                if wants(*a) {
                    let ga = acc!(*a);
                    for i in 0..va.len() {
                        ga[i] += scale * (va[i] - vb[i]);
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for i in 0..va.len() {
                        gb[i] -= scale * (va[i] - vb[i]);
                    }
                }
            }
            Op::StraightThrough(cont) => {
                acc!(*cont).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Conv1d { x, w, b, geom } => {
                if wants(*b) {
                    let gb = acc!(*b);
                    for n in 0..geom.batch {
                        for o in 0..geom.out_ch {
                            let base = (n * geom.out_ch + o) * geom.out_len;
                            gb[o] += g[base..base + geom.out_len].iter().sum::<f64>();
                        }
                    }
                }
                if wants(*w) {
                    let d = kernels::conv1d_grad_w(&val(*x).data, g, geom);
                    acc!(*w).iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
                if wants(*x) {
                    let d = kernels::conv1d_grad_x(&val(*w).data, g, geom);
                    acc!(*x).iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value.data;
                let c = node.value.cols();
                let gx = acc!(*x);
                for (r, (gy, yy)) in g.chunks_exact(c).zip(y.chunks_exact(c)).enumerate() {
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += (gy[j] - yy[j] * dot) / norms[r];
                    }
                }
            }
        }
    }
}

fn softmax_row(r: &[f64], out: &mut Vec<f64>) {
    let max = r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let start = out.len();
    let mut z = 0.0;
    for &v in r {
        let e = libm::exp(v - max);
        z += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= z);
}

/// Numerically stable softmax of one row, outside any tape.
pub fn softmax(r: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    softmax_row(r, &mut out);
    out
}

/// Compares the tape gradient of a scalar function against central
/// differences. Returns the largest
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)` over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(String::from("finite-difference step must be positive")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get_or_zeros(xv, x.len());

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(probe);
        let o = f(&mut t, v)?;
        let val = t.value(o);
        if !val.is_scalar() {
            return Err(Error::NonScalarOutput(val.shape.clone()));
        }
        Ok(val.item())
    };

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Named trainable tensors, addressed by insertion index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Whether weight decay applies (rank two or more).
    pub fn decays(&self, i: usize) -> bool {
        self.tensors[i].shape.len() >= 2
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// A tape with parameters bound lazily: each parameter enters the tape the
/// first time it is used and is reused afterwards.
#[derive(Debug)]
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// Parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], trainable: true }
    }

    /// Parameters enter as constants; nothing is differentiated.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { trainable: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable { self.tape.param(t) } else { self.tape.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward from `loss`, returning one entry per parameter.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect())
    }
}

/// [`grad_check`] over every scalar of every parameter in `store`.
/// `coords_per_param` caps how many coordinates of each tensor are probed
/// (evenly strided); `None` probes all.
pub fn grad_check_params<F>(f: F, store: &ParamStore, eps: f64, coords_per_param: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    if !g.value(out).is_scalar() {
        return Err(Error::NonScalarOutput(g.value(out).shape.clone()));
    }
    let analytic = g.param_grads(out)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let o = f(&mut g)?;
        Ok(g.value(o).item())
    };
    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for i in 0..store.len() {
        let n = store.tensor(i).len();
        let stride = coords_per_param.map_or(1, |k| (n / k.max(1)).max(1));
        for j in (0..n).step_by(stride) {
            let x0 = store.tensor(i).data[j];
            probe.tensor_mut(i).data[j] = x0 + eps;
            let plus = eval(&probe)?;
            probe.tensor_mut(i).data[j] = x0 - eps;
            let minus = eval(&probe)?;
            probe.tensor_mut(i).data[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// Dense kernels shared by forward and backward passes.
pub mod kernels {
    use alloc::vec;
    use alloc::vec::Vec;

    use super::ConvGeom;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0; 4];
        let chunks = a.len() / 4;
        for i in 0..chunks {
            for l in 0..4 {
                acc[l] += a[4 * i + l] * b[4 * i + l];
            }
        }
        let mut tail = 0.0;
        for i in 4 * chunks..a.len() {
            tail += a[i] * b[i];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    /// `a[m, k] x b[k, n]`.
    pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let bp = &b[p * n..(p + 1) * n];
                for (x, y) in ci.iter_mut().zip(bp) {
                    *x += aip * y;
                }
            }
        }
        c
    }

    /// `a[m, k] x b[n, k]^T`.
    pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] = dot(ai, &b[j * k..(j + 1) * k]);
            }
        }
        c
    }

    /// `a[rows, k]^T x b[rows, n] -> [k, n]`.
    pub fn mm_tn(a: &[f64], b: &[f64], k: usize, rows: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; k * n];
        for r in 0..rows {
            let br = &b[r * n..(r + 1) * n];
            for p in 0..k {
                let arp = a[r * k + p];
                if arp == 0.0 {
                    continue;
                }
                let cp = &mut c[p * n..(p + 1) * n];
                for (x, y) in cp.iter_mut().zip(br) {
                    *x += arp * y;
                }
            }
        }
        c
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    pub fn conv1d(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.batch * g.out_ch * g.out_len];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                let yo = &mut y[(n * g.out_ch + o) * g.out_len..(n * g.out_ch + o + 1) * g.out_len];
                yo.iter_mut().for_each(|v| *v = b[o]);
                for c in 0..g.in_ch {
                    let xc = &x[(n * g.in_ch + c) * g.in_len..(n * g.in_ch + c + 1) * g.in_len];
                    let wk = &w[(o * g.in_ch + c) * g.kernel..(o * g.in_ch + c + 1) * g.kernel];
                    for (t, yv) in yo.iter_mut().enumerate() {
                        let base = (t * g.stride) as isize - g.pad as isize;
                        let mut acc = 0.0;
                        for (j, &wj) in wk.iter().enumerate() {
                            let idx = base + j as isize;
                            if idx >= 0 && (idx as usize) < g.in_len {
                                acc += wj * xc[idx as usize];
                            }
                        }
                        *yv += acc;
                    }
                }
            }
        }
        y
    }

    pub fn conv1d_grad_w(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut gw = vec![0.0; g.out_ch * g.in_ch * g.kernel];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                let go = &gy[(n * g.out_ch + o) * g.out_len..(n * g.out_ch + o + 1) * g.out_len];
                for c in 0..g.in_ch {
                    let xc = &x[(n * g.in_ch + c) * g.in_len..(n * g.in_ch + c + 1) * g.in_len];
                    let gwk = &mut gw[(o * g.in_ch + c) * g.kernel..(o * g.in_ch + c + 1) * g.kernel];
                    for (t, &gv) in go.iter().enumerate() {
                        let base = (t * g.stride) as isize - g.pad as isize;
                        for (j, gwj) in gwk.iter_mut().enumerate() {
                            let idx = base + j as isize;
                            if idx >= 0 && (idx as usize) < g.in_len {
                                *gwj += gv * xc[idx as usize];
                            }
                        }
                    }
                }
            }
        }
        gw
    }

    pub fn conv1d_grad_x(w: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut gx = vec![0.0; g.batch * g.in_ch * g.in_len];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                let go = &gy[(n * g.out_ch + o) * g.out_len..(n * g.out_ch + o + 1) * g.out_len];
                for c in 0..g.in_ch {
                    let gxc = &mut gx[(n * g.in_ch + c) * g.in_len..(n * g.in_ch + c + 1) * g.in_len];
                    let wk = &w[(o * g.in_ch + c) * g.kernel..(o * g.in_ch + c + 1) * g.kernel];
                    for (t, &gv) in go.iter().enumerate() {
                        let base = (t * g.stride) as isize - g.pad as isize;
                        for (j, &wj) in wk.iter().enumerate() {
                            let idx = base + j as isize;
                            if idx >= 0 && (idx as usize) < g.in_len {
                                gxc[idx as usize] += gv * wj;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}
