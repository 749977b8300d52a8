use crate::error::{Error, Result};

use super::conv::{Conv2dGeometry, Pool2dGeometry};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum NormMode<T> {
    /// Normalize with the statistics of the current batch.
    Train { eps: T },
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

/// Per-channel statistics of a training-mode batch norm, for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: Conv2dGeometry,
        cols: Option<Vec<T>>,
    },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var, spatial: usize },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::ScaleRows(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::L2NormalizeRows { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool2d { input, .. }
            | Op::GlobalMaxPool { input, .. }
            | Op::GlobalAvgPool { input, .. } => vec![*input],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications; values are computed eagerly.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and [`Tape::backward`] can walk the list in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[var.0].clone(),
            data: data.clone(),
        })
    }

    /// Takes ownership of a gradient buffer, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        let data = self.grads.get_mut(var.0)?.take()?;
        Some(Tensor {
            shape: self.shapes[var.0].clone(),
            data,
        })
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn row_max<T: Scalar>(row: &[T]) -> T {
    row.iter().copied().fold(T::neg_infinity(), T::max)
}

/// `(m, k, n)` for `op(a)·op(b)` with 2-D operands.
fn matmul_dims(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<(usize, usize, usize)> {
    let (&[ar, ac], &[br, bc]) = (a, b) else {
        return Err(Error::Dimension(format!(
            "matmul needs 2-D operands, got {a:?} and {b:?}"
        )));
    };
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {a:?}{} · {b:?}{}",
            if trans_a { "ᵀ" } else { "" },
            if trans_b { "ᵀ" } else { "" }
        )));
    }
    Ok((m, k, n))
}

/// Strides of a row-major `rows × cols` buffer, optionally read transposed.
fn strides(cols_stored: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols_stored as isize)
    } else {
        (cols_stored as isize, 1)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// `x[..., C] + bias[C]`, broadcasting over the leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = &self.value(bias).data;
        let vx = self.value(x);
        let data = vx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push(value, Op::AddBias(x, bias))
    }

    /// `x[N, D] * s[N, 1]`, scaling every row by its own factor.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::Dimension(format!("scale_rows needs 2-D input, got {shape:?}")));
        };
        if self.shape(s) != [rows, 1] {
            return Err(Error::Dimension(format!(
                "scale_rows: factors {:?} do not match {shape:?}",
                self.shape(s)
            )));
        }
        let f = &self.value(s).data;
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * f[i / cols])
            .collect();
        self.push(Tensor { shape, data }, Op::ScaleRows(x, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b), trans_a, trans_b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &va.data,
            strides(va.shape[1], trans_a),
            &vb.data,
            strides(vb.shape[1], trans_b),
            T::zero(),
            &mut out,
        );
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let one = T::one();
        self.unary(
            x,
            |v| {
                if v >= T::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data.iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(x, T::ln, Op::Log(x))
    }

    fn softmax_rows(value: &Tensor<T>, log: bool) -> Tensor<T> {
        let (_, cols) = value.rows_cols();
        let mut data = Vec::with_capacity(value.data.len());
        for row in value.data.chunks(cols) {
            let max = row_max(row);
            let shifted = row.iter().map(|&v| v - max);
            if log {
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                data.extend(shifted.map(|v| v - lse));
            } else {
                let exps: Vec<T> = shifted.map(T::exp).collect();
                let z: T = exps.iter().copied().sum();
                data.extend(exps.into_iter().map(|e| e / z));
            }
        }
        Tensor {
            shape: value.shape.clone(),
            data,
        }
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = Self::softmax_rows(self.value(x), false);
        self.push(value, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let value = Self::softmax_rows(self.value(x), true);
        self.push(value, Op::LogSoftmax(x))
    }

    /// Divides each row (last axis) by its l2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, cols) = vx.rows_cols();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(vx.data.len());
        for (r, row) in vx.data.chunks(cols).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(Error::Normalization(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push(value, Op::L2NormalizeRows { x, norms })
    }

    /// l2-normalizes a 2-D tensor along `axis` (0: columns, 1: rows).
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        match (self.shape(x).len(), axis) {
            (2, 1) => self.l2_normalize_rows(x),
            (2, 0) => {
                let xt = self.transpose(x)?;
                let nt = self.l2_normalize_rows(xt)?;
                self.transpose(nt)
            }
            (rank, _) => Err(Error::Dimension(format!(
                "l2_normalize: axis {axis} invalid for rank {rank}"
            ))),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let [r, c] = vx.shape[..] else {
            return Err(Error::Dimension(format!(
                "transpose needs 2-D input, got {:?}",
                vx.shape
            )));
        };
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data[i * c + j];
            }
        }
        let value = Tensor {
            shape: vec![c, r],
            data,
        };
        self.push(value, Op::Transpose(x))
    }

    /// Concatenates along the last (channel) axis; leading axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Dimension("concat of nothing".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat: {s:?} incompatible with leading extents {lead:?}"
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor { shape, data }, Op::Concat(xs.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = T::from_usize(vx.data.len()).unwrap();
        let s = vx.data.iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums the last axis, keeping it as extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, cols) = vx.rows_cols();
        let data = vx.data.chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let mut shape = vx.shape.clone();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        self.push(Tensor { shape, data }, Op::SumLast(x))
    }

    /// Zero-padded NHWC convolution with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = Conv2dGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let x = &self.value(input).data;
        let w = &self.value(kernel).data;
        let (rows, len) = (geom.patches(), geom.patch_len());
        let mut out = vec![T::zero(); rows * geom.out_c];
        let cols = if geom.is_pointwise() {
            T::gemm(rows, len, geom.out_c, x, (len as isize, 1), w, (geom.out_c as isize, 1), T::zero(), &mut out);
            None
        } else {
            let cols = geom.im2col(x);
            T::gemm(rows, len, geom.out_c, &cols, (len as isize, 1), w, (geom.out_c as isize, 1), T::zero(), &mut out);
            Some(cols)
        };
        let keep_cols = self.requires_grad(kernel);
        let value = Tensor {
            shape: geom.out_shape().to_vec(),
            data: out,
        };
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: cols.filter(|_| keep_cols),
            },
        )
    }

    /// Windowed max-pool over NHWC maps.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = Pool2dGeometry::new(self.shape(input), kernel, stride, padding)?;
        let (out, argmax) = geom.forward(&self.value(input).data);
        let value = Tensor {
            shape: geom.out_shape().to_vec(),
            data: out,
        };
        self.push(value, Op::MaxPool2d { input, argmax })
    }

    fn spatial_dims(&self, input: Var, op: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(input) {
            [n, h, w, c] if h * w >= 1 => Ok((n, h * w, c)),
            ref s => Err(Error::Dimension(format!("{op} needs N×H×W×C input, got {s:?}"))),
        }
    }

    /// `N×H×W×C → N×C`: per-channel maximum; ties resolve to the first
    /// position in row-major order.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (n, hw, c) = self.spatial_dims(input, "global_max_pool")?;
        let x = &self.value(input).data;
        let mut out = vec![T::zero(); n * c];
        let mut argmax = vec![0; n * c];
        for b in 0..n {
            for ch in 0..c {
                let mut best = b * hw * c + ch;
                for p in 1..hw {
                    let idx = (b * hw + p) * c + ch;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[b * c + ch] = x[best];
                argmax[b * c + ch] = best;
            }
        }
        let value = Tensor {
            shape: vec![n, c],
            data: out,
        };
        self.push(value, Op::GlobalMaxPool { input, argmax })
    }

    /// `N×H×W×C → N×C`: per-channel spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, hw, c) = self.spatial_dims(input, "global_avg_pool")?;
        let x = &self.value(input).data;
        let denom = T::from_usize(hw).unwrap();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..hw {
                let row = &x[(b * hw + p) * c..(b * hw + p + 1) * c];
                for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
        }
        for o in &mut out {
            *o = *o / denom;
        }
        let value = Tensor {
            shape: vec![n, c],
            data: out,
        };
        self.push(value, Op::GlobalAvgPool { input, spatial: hw })
    }

    /// Per-channel normalization over every axis but the last, followed by
    /// `gamma · x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let vx = self.value(input);
        let (rows, c) = vx.rows_cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm: affine parameters must have shape [{c}]"
            )));
        }
        let x = &vx.data;
        let (mean, inv_std, stats, train) = match mode {
            NormMode::Train { eps } => {
                if rows < 2 {
                    return Err(Error::Dimension(
                        "batch_norm in training mode needs at least two values per channel".into(),
                    ));
                }
                let m = T::from_usize(rows).unwrap();
                let mut mean = vec![T::zero(); c];
                for row in x.chunks(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                mean.iter_mut().for_each(|a| *a = *a / m);
                let mut var = vec![T::zero(); c];
                for row in x.chunks(c) {
                    for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a = *a + (v - mu) * (v - mu);
                    }
                }
                let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / m + eps).sqrt()).collect();
                let unbiased = var.iter().map(|&s| s / (m - T::one())).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, inv_std, Some(stats), true)
            }
            NormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "batch_norm: running statistics must have {c} channels"
                    )));
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std, None, false)
            }
        };
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let ch = i % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data: out,
        };
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((var, stats))
    }

    /// Reverse sweep from a scalar `loss`; fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value.data;
        let mut send = |v: Var, delta: Vec<T>| {
            if self.wants(v) {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.iter().zip(self.data(*b)).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    send(*b, g.iter().zip(self.data(*a)).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|&d| d * *f).collect()),
            Op::AddBias(x, bias) => {
                send(*x, g.to_vec());
                if self.wants(*bias) {
                    let c = self.data(*bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (a, &d) in db.iter_mut().zip(row) {
                            *a = *a + d;
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::ScaleRows(x, s) => {
                let cols = node.value.shape[1];
                let f = self.data(*s);
                if self.wants(*x) {
                    send(*x, g.iter().enumerate().map(|(i, &d)| d * f[i / cols]).collect());
                }
                if self.wants(*s) {
                    let xs = self.data(*x);
                    let ds = g
                        .chunks(cols)
                        .zip(xs.chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&d, &v)| d * v).sum())
                        .collect();
                    send(*s, ds);
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.data(*a), self.data(*b));
                let a_cols = self.nodes[a.0].value.shape[1];
                let b_cols = self.nodes[b.0].value.shape[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if *trans_a {
                        // dA = op(B)·dCᵀ, k×m
                        T::gemm(k, n, m, vb, strides(b_cols, *trans_b), g, (1, n as isize), T::zero(), &mut da);
                    } else {
                        // dA = dC·op(B)ᵀ, m×k
                        T::gemm(m, n, k, g, (n as isize, 1), vb, strides(b_cols, !*trans_b), T::zero(), &mut da);
                    }
                    send(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // dB = dCᵀ·op(A), n×k
                        T::gemm(n, m, k, g, (1, n as isize), va, strides(a_cols, *trans_a), T::zero(), &mut db);
                    } else {
                        // dB = op(A)ᵀ·dC, k×n
                        T::gemm(k, m, n, va, strides(a_cols, !*trans_a), g, (n as isize, 1), T::zero(), &mut db);
                    }
                    send(*b, db);
                }
            }
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
            ),
            Op::Exp(x) => send(*x, g.iter().zip(out).map(|(&d, &y)| d * y).collect()),
            Op::Log(x) => send(*x, g.iter().zip(self.data(*x)).map(|(&d, &v)| d / v).collect()),
            Op::Softmax(x) => {
                let (_, cols) = node.value.rows_cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&d, &y)| y * (d - dot)));
                }
                send(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let (_, cols) = node.value.rows_cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.chunks(cols)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(gr.iter().zip(yr).map(|(&d, &y)| d - y.exp() * total));
                }
                send(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, cols) = node.value.rows_cols();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &nrm) in g.chunks(cols).zip(out.chunks(cols)).zip(norms) {
                    let dot: T = gr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&d, &y)| (d - y * dot) / nrm));
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Transpose(x) => {
                let [r, c] = self.nodes[x.0].value.shape[..] else {
                    unreachable!("transpose input is 2-D")
                };
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                send(*x, dx);
            }
            Op::Concat(xs) => {
                let total = *node.value.shape.last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &x in xs {
                    let w = *self.nodes[x.0].value.shape.last().unwrap();
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(x, dx);
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.data(*x).len()]),
            Op::Mean(x) => {
                let n = self.data(*x).len();
                send(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::SumLast(x) => {
                let (_, cols) = self.nodes[x.0].value.rows_cols();
                send(*x, g.iter().flat_map(|&d| std::iter::repeat_n(d, cols)).collect());
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (rows, len, oc) = (geom.patches(), geom.patch_len(), geom.out_c);
                if self.wants(*kernel) {
                    let patches: &[T] = match cols {
                        Some(c) => c,
                        None => self.data(*input),
                    };
                    let mut dk = vec![T::zero(); len * oc];
                    T::gemm(len, rows, oc, patches, (1, len as isize), g, (oc as isize, 1), T::zero(), &mut dk);
                    send(*kernel, dk);
                }
                if self.wants(*input) {
                    let w = self.data(*kernel);
                    let mut dcols = vec![T::zero(); rows * len];
                    T::gemm(rows, oc, len, g, (oc as isize, 1), w, (1, oc as isize), T::zero(), &mut dcols);
                    if geom.is_pointwise() {
                        send(*input, dcols);
                    } else {
                        let mut dx = vec![T::zero(); self.data(*input).len()];
                        geom.col2im_add(&dcols, &mut dx);
                        send(*input, dx);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.data(*input).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + d;
                }
                send(*input, dx);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let c = node.value.shape[1];
                let denom = T::from_usize(*spatial).unwrap();
                let n = self.data(*input).len();
                let dx = (0..n)
                    .map(|i| {
                        let b = i / (spatial * c);
                        g[b * c + i % c] / denom
                    })
                    .collect();
                send(*input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &d) in g.iter().enumerate() {
                    dgamma[i % c] = dgamma[i % c] + d * xhat[i];
                    dbeta[i % c] = dbeta[i % c] + d;
                }
                if self.wants(*input) {
                    let gm = self.data(*gamma);
                    let dx = if *train {
                        let m = T::from_usize(rows).unwrap();
                        // dxhat = g·γ; dx = inv_std/m · (m·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                        g.iter()
                            .enumerate()
                            .map(|(i, &d)| {
                                let ch = i % c;
                                let dxh = d * gm[ch];
                                let sum_dxh = dbeta[ch] * gm[ch];
                                let sum_dxh_xh = dgamma[ch] * gm[ch];
                                inv_std[ch] / m * (m * dxh - sum_dxh - xhat[i] * sum_dxh_xh)
                            })
                            .collect()
                    } else {
                        g.iter()
                            .enumerate()
                            .map(|(i, &d)| d * gm[i % c] * inv_std[i % c])
                            .collect()
                    };
                    send(*input, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
        }
    }
}
