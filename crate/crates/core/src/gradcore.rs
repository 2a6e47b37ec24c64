//! Dense tensors, a reverse-mode tape, small tanh perceptrons and Adam.
//!
//! The tape records whole-tensor operations (row-major, `rows x cols`) so a
//! batched MLP pass is a handful of nodes. Forward kernels are shared between
//! the taped and untaped paths, which keeps re-scored log-probabilities
//! bitwise identical to the ones recorded at sampling time.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub const CHECKPOINT_FORMAT: &str = "alphagrpo-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a 1x1 tensor, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("non-finite gradient; optimizer step refused")]
    NonFiniteGradient,
    #[error("unknown checkpoint format `{0}`")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        Tensor::new(1, v.len(), v)
    }

    pub fn column(v: Vec<f64>) -> Self {
        Tensor::new(v.len(), 1, v)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "elementwise shape");
        Tensor::new(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(a.rows, b.cols, out)
}

fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    // a^T * b
    assert_eq!(a.rows, b.rows);
    let mut out = vec![0.0; a.cols * b.cols];
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(a.cols, b.cols, out)
}

fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    // a * b^T
    assert_eq!(a.cols, b.cols);
    let mut out = vec![0.0; a.rows * b.rows];
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(a.rows, b.rows, out)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!((bias.rows, bias.cols), (1, x.cols), "bias shape");
    let mut out = x.clone();
    for i in 0..x.rows {
        for (o, &b) in out.data[i * x.cols..(i + 1) * x.cols].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.data.len());
    for i in 0..x.rows {
        out.extend(log_softmax_row(x.row(i)));
    }
    Tensor::new(x.rows, x.cols, out)
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Log-density of `x` under `N(mu, var * I)` in `x.len()` dimensions.
pub fn gaussian_logprob(x: &[f64], mu: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn ppo_clip(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// Whether the clipped branch is the active one (zero gradient).
pub fn ppo_clip_active(ratio: f64, advantage: f64, eps: f64) -> bool {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    clipped < unclipped
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Per-segment shapes of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.segments.push(Segment { name: name.into(), rows, cols });
        self.segments.len() - 1
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.rows * s.cols).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self, seg: usize) -> usize {
        self.segments[..seg].iter().map(|s| s.rows * s.cols).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.len();
        ParamVector { layout, values: vec![0.0; n] }
    }

    pub fn segment(&self, seg: usize) -> &[f64] {
        let off = self.layout.offset(seg);
        let s = &self.layout.segments[seg];
        &self.values[off..off + s.rows * s.cols]
    }

    pub fn segment_mut(&mut self, seg: usize) -> &mut [f64] {
        let off = self.layout.offset(seg);
        let s = &self.layout.segments[seg];
        let n = s.rows * s.cols;
        &mut self.values[off..off + n]
    }

    pub fn segment_tensor(&self, seg: usize) -> Tensor {
        let s = &self.layout.segments[seg];
        Tensor::new(s.rows, s.cols, self.segment(seg).to_vec())
    }

    pub fn unpack(&self) -> Vec<Tensor> {
        (0..self.layout.segments.len()).map(|i| self.segment_tensor(i)).collect()
    }

    pub fn pack(layout: Layout, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.segments.len() {
            return Err(GradError::Shape(format!("{} tensors for {} segments", tensors.len(), layout.segments.len())));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (t, s) in tensors.iter().zip(&layout.segments) {
            if (t.rows, t.cols) != (s.rows, s.cols) {
                return Err(GradError::Shape(format!(
                    "segment {} is {}x{}, got {}x{}",
                    s.name, s.rows, s.cols, t.rows, t.cols
                )));
            }
            values.extend_from_slice(&t.data);
        }
        Ok(ParamVector { layout, values })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    PpoClip(Var, Vec<f64>, f64),
    GaussLogProb { mu: Var, x: Tensor, var: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one reverse pass.
pub struct Tape {
    nodes: Vec<Node>,
    nonfinite: Option<&'static str>,
}

impl Tape {
    fn push(&mut self, value: Tensor, op: Op, tag: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(tag);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = add_bias(self.value(x), self.value(b));
        self.push(v, Op::AddBias(x, b), "add_bias")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), "tanh")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    /// Multiplies row `i` by `c[i]`.
    pub fn scale_rows(&mut self, a: Var, c: Vec<f64>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, c.len(), "scale_rows length");
        let mut v = t.clone();
        for i in 0..t.rows {
            for x in &mut v.data[i * t.cols..(i + 1) * t.cols] {
                *x *= c[i];
            }
        }
        self.push(v, Op::ScaleRows(a, c), "scale_rows")
    }

    /// `c + a` for a constant tensor `c`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = c.zip(self.value(a), |x, y| x + y);
        self.push(v, Op::AddConst(a), "add_const")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column of row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::column((0..t.rows).map(|i| t.row(i).iter().sum()).collect());
        self.push(v, Op::SumRows(a), "sum_rows")
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax(self.value(a));
        self.push(v, Op::LogSoftmax(a), "log_softmax")
    }

    /// Column holding `a[i, idx[i]]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, idx.len(), "gather length");
        let v = Tensor::column(idx.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect());
        self.push(v, Op::Gather(a, idx), "gather")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows, rows, "concat rows");
                data.extend_from_slice(t.row(i));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Elementwise clipped surrogate on a column of ratios.
    pub fn ppo_clip(&mut self, ratio: Var, adv: Vec<f64>, eps: f64) -> Var {
        let t = self.value(ratio);
        assert_eq!((t.rows, t.cols), (adv.len(), 1), "ppo_clip shape");
        let v = Tensor::column(t.data.iter().zip(&adv).map(|(&r, &a)| ppo_clip(r, a, eps)).collect());
        self.push(v, Op::PpoClip(ratio, adv, eps), "ppo_clip")
    }

    /// Column of `log N(x_i; mu_i, var_i I)` for each row.
    pub fn gaussian_logprob(&mut self, mu: Var, x: Tensor, var: Vec<f64>) -> Var {
        let m = self.value(mu);
        assert_eq!((m.rows, m.cols), (x.rows, x.cols), "gaussian_logprob shape");
        let v = Tensor::column((0..x.rows).map(|i| gaussian_logprob(x.row(i), m.row(i), var[i])).collect());
        self.push(v, Op::GaussLogProb { mu, x, var }, "gaussian_logprob")
    }

    fn backward(&self, loss: Var, n_segments: usize) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut param_grads: Vec<Option<Tensor>> = (0..n_segments).map(|_| None).collect();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(seg) => match &mut param_grads[*seg] {
                    Some(e) => e.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    acc(*a, matmul_a_bt(&g, val(*b)));
                    acc(*b, matmul_at_b(val(*a), &g));
                }
                Op::AddBias(x, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                    acc(*x, g);
                }
                Op::Tanh(x) => {
                    let gx = node.value.zip(&g, |y, gy| gy * (1.0 - y * y));
                    acc(*x, gx);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(val(*b), |x, y| x * y));
                    acc(*b, g.zip(val(*a), |x, y| x * y));
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::ScaleRows(a, c) => {
                    let mut gx = g;
                    let cols = gx.cols;
                    for (i, ci) in c.iter().enumerate() {
                        for x in &mut gx.data[i * cols..(i + 1) * cols] {
                            *x *= ci;
                        }
                    }
                    acc(*a, gx);
                }
                Op::AddConst(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, node.value.zip(&g, |y, gy| y * gy)),
                Op::Log(a) => acc(*a, val(*a).zip(&g, |x, gy| gy / x)),
                Op::Square(a) => acc(*a, val(*a).zip(&g, |x, gy| 2.0 * x * gy)),
                Op::Sum(a) => {
                    let t = val(*a);
                    acc(*a, Tensor::new(t.rows, t.cols, vec![g.data[0]; t.data.len()]));
                }
                Op::SumRows(a) => {
                    let t = val(*a);
                    let mut gx = Tensor::zeros(t.rows, t.cols);
                    for i in 0..t.rows {
                        gx.data[i * t.cols..(i + 1) * t.cols].iter_mut().for_each(|x| *x = g.data[i]);
                    }
                    acc(*a, gx);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * sum(g)
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let gs: f64 = g.row(i).iter().sum();
                        for j in 0..y.cols {
                            gx.data[i * y.cols + j] = g.get(i, j) - y.get(i, j).exp() * gs;
                        }
                    }
                    acc(*a, gx);
                }
                Op::Gather(a, idx) => {
                    let t = val(*a);
                    let mut gx = Tensor::zeros(t.rows, t.cols);
                    for (i, &j) in idx.iter().enumerate() {
                        gx.data[i * t.cols + j] = g.data[i];
                    }
                    acc(*a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let t = val(*p);
                        let mut gx = Tensor::zeros(t.rows, t.cols);
                        for i in 0..t.rows {
                            gx.data[i * t.cols..(i + 1) * t.cols]
                                .copy_from_slice(&g.row(i)[start..start + t.cols]);
                        }
                        start += t.cols;
                        acc(*p, gx);
                    }
                }
                Op::PpoClip(r, adv, eps) => {
                    let t = val(*r);
                    let gx = Tensor::column(
                        t.data
                            .iter()
                            .zip(adv)
                            .zip(&g.data)
                            .map(|((&ratio, &a), &gy)| if ppo_clip_active(ratio, a, *eps) { 0.0 } else { a * gy })
                            .collect(),
                    );
                    acc(*r, gx);
                }
                Op::GaussLogProb { mu, x, var } => {
                    let m = val(*mu);
                    let mut gx = Tensor::zeros(m.rows, m.cols);
                    for i in 0..m.rows {
                        for j in 0..m.cols {
                            gx.data[i * m.cols + j] = g.data[i] * (x.get(i, j) - m.get(i, j)) / var[i];
                        }
                    }
                    acc(*mu, gx);
                }
            }
        }
        param_grads
    }
}

/// Evaluates `loss_fn` on a fresh tape whose parameter leaves mirror the
/// segments of `params`, and returns the loss with its gradient.
pub fn value_and_grad<F>(params: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape { nodes: Vec::new(), nonfinite: None };
    let vars: Vec<Var> = (0..params.layout.segments.len())
        .map(|i| tape.push(params.segment_tensor(i), Op::Param(i), "param"))
        .collect();
    let loss = loss_fn(&mut tape, &vars);
    if let Some(op) = tape.nonfinite {
        return Err(GradError::NonFinite { op });
    }
    let lv = tape.value(loss);
    if (lv.rows, lv.cols) != (1, 1) {
        return Err(GradError::NotScalar(lv.rows, lv.cols));
    }
    let value = lv.data[0];
    let seg_grads = tape.backward(loss, params.layout.segments.len());
    let mut grad = ParamVector::zeros(params.layout.clone());
    for (i, g) in seg_grads.into_iter().enumerate() {
        if let Some(g) = g {
            grad.segment_mut(i).copy_from_slice(&g.data);
        }
    }
    if !grad.is_finite() {
        return Err(GradError::NonFinite { op: "backward" });
    }
    Ok((value, grad))
}

/// A tanh perceptron stored as consecutive `w{i}` (in x out) and `b{i}`
/// (1 x out) segments of a parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub first_segment: usize,
}

impl Mlp {
    /// Appends the segments for an MLP with the given layer widths.
    pub fn register(layout: &mut Layout, prefix: &str, widths: &[usize]) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let first_segment = layout.segments.len();
        for (i, w) in widths.windows(2).enumerate() {
            layout.push(format!("{prefix}.w{i}"), w[0], w[1]);
            layout.push(format!("{prefix}.b{i}"), 1, w[1]);
        }
        Mlp { widths: widths.to_vec(), first_segment }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weight_segment(&self, layer: usize) -> usize {
        self.first_segment + 2 * layer
    }

    /// Scaled-uniform initialization of weights; biases zero.
    pub fn init(&self, params: &mut ParamVector, rng: &mut Rng) {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params.segment_mut(self.weight_segment(l)) {
                *w = rng.random_range(-bound..bound);
            }
            params.segment_mut(self.weight_segment(l) + 1).iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Batched forward pass; rows of `input` are independent examples.
    pub fn forward(&self, params: &ParamVector, input: &Tensor) -> Result<Tensor> {
        if input.cols != self.input_width() {
            return Err(GradError::Shape(format!("input width {} != {}", input.cols, self.input_width())));
        }
        let mut h = input.clone();
        for l in 0..self.n_layers() {
            let w = params.segment_tensor(self.weight_segment(l));
            let b = params.segment_tensor(self.weight_segment(l) + 1);
            h = add_bias(&matmul(&h, &w), &b);
            if l + 1 < self.n_layers() {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Taped forward pass over parameter leaves `vars`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Var {
        let mut h = input;
        for l in 0..self.n_layers() {
            let w = vars[self.weight_segment(l)];
            let b = vars[self.weight_segment(l) + 1];
            let z = tape.matmul(h, w);
            h = tape.add_bias(z, b);
            if l + 1 < self.n_layers() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Single-example convenience wrapper over [`Mlp::forward`].
pub fn mlp_forward(params: &ParamVector, input: &[f64], mlp: &Mlp) -> Result<Vec<f64>> {
    Ok(mlp.forward(params, &Tensor::row_vector(input.to_vec()))?.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Per-coordinate learning-rate multipliers; empty means all ones.
    #[serde(default)]
    pub lr_scale: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        OptimizerState { config, m: vec![0.0; n], v: vec![0.0; n], step: 0, lr_scale: Vec::new() }
    }

    /// Like [`OptimizerState::new`], with a learning-rate multiplier per
    /// layout segment chosen from the segment name.
    pub fn with_segment_scale(config: AdamConfig, layout: &Layout, scale: impl Fn(&str) -> f64) -> Self {
        let mut st = Self::new(config, layout.len());
        st.lr_scale = layout
            .segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(scale(&s.name), s.rows * s.cols))
            .collect();
        st
    }
}

/// Bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched.
pub fn adam_step(params: &mut ParamVector, state: &mut OptimizerState, grads: &ParamVector) -> Result<()> {
    if grads.values.len() != params.values.len()
        || state.m.len() != params.values.len()
        || !(state.lr_scale.is_empty() || state.lr_scale.len() == params.values.len())
    {
        return Err(GradError::Shape("optimizer state, gradient and parameters disagree".into()));
    }
    if !grads.is_finite() {
        return Err(GradError::NonFiniteGradient);
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (((p, g), m), v)) in
        params.values.iter_mut().zip(&grads.values).zip(&mut state.m).zip(&mut state.v).enumerate()
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        let rate = state.lr_scale.get(i).map_or(lr, |s| lr * s);
        *p -= rate * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Versioned parameter + optimizer snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format: String,
    pub model: M,
    pub params: ParamVector,
    pub optimizer: Option<OptimizerState>,
}

impl<M: Serialize + for<'de> Deserialize<'de>> Checkpoint<M> {
    pub fn new(model: M, params: ParamVector, optimizer: Option<OptimizerState>) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), model, params, optimizer }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let ck: Self = serde_json::from_reader(r)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(GradError::Format(ck.format));
        }
        Ok(ck)
    }
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_difference(params: &ParamVector, h: f64, mut f: impl FnMut(&ParamVector) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.values.len())
        .map(|i| {
            let orig = p.values[i];
            p.values[i] = orig + h;
            let up = f(&p);
            p.values[i] = orig - h;
            let down = f(&p);
            p.values[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradients, with an absolute floor on
/// the denominator so that near-zero components are compared absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
