//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`] and returns a [`Var`]
//! handle. Values are computed eagerly; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into leaves created with
//! `requires_grad = true`. Reductions run sequentially in row-major order so
//! results are bit-reproducible.

use super::tensor::Tensor;
use crate::error::{input_err, shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddCol(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        x: Var,
        cols: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} produced a non-finite value")))
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Range of output positions `t` for which `t * stride + k - padding` lies
/// inside `[0, len)`.
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if len + padding > k {
        ((len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Adds an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        self.push_checked(name, value, op, &[a, b])
    }

    fn map(&mut self, name: &str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts_unchecked(vx.shape().to_vec(), data);
        self.push_checked(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.map("neg", x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    /// `x[i, j] + col[i]` for `x: [n, m]`, `col: [n]`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xs, cs) = (self.shape(x), self.shape(col));
        if xs.len() != 2 || cs != [xs[0]] {
            return Err(shape_err!("add_col: cannot broadcast {cs:?} over rows of {xs:?}"));
        }
        let m = xs[1];
        let c = self.value(col).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| v + c[idx / m])
            .collect();
        let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        self.push_checked("add_col", value, Op::AddCol(x, col), &[x, col])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("log of a negative value".into()));
        }
        self.map("log", x, Op::Log(x), f64::ln)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(input_err!("clamp bounds {lo} > {hi}"));
        }
        self.map("clamp", x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(vx.last_dim()) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts_unchecked(vx.shape().to_vec(), data);
        self.push_checked("softmax", value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learnable `gain` and
    /// `bias` (both shaped `[last_dim]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err!(
                "layer_norm: gain {:?} / bias {:?} must be [{n}]",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(vx.numel() / n);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std.push(rstd);
            for (i, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * rstd;
                normalized.push(xhat);
                out.push(xhat * g[i] + b[i]);
            }
        }
        let value = Tensor::from_parts_unchecked(vx.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push_checked("layer_norm", value, op, &[x, gain, bias])
    }

    /// Divides each last-axis row by `sqrt(sum(x^2) + eps)`. A zero row maps
    /// to a zero row.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let mut norms = Vec::with_capacity(vx.numel() / vx.last_dim());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::from_parts_unchecked(vx.shape().to_vec(), out);
        self.push_checked("l2_normalize", value, Op::L2Normalize { x, norms }, &[x])
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::from_parts_unchecked(vec![n, m], out);
        self.push_checked("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err!("transpose needs a matrix, got {s:?}"));
        }
        let (n, m) = (s[0], s[1]);
        let out = transpose(self.value(x).data(), n, m);
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.push_checked("transpose", value, Op::Transpose(x), &[x])
    }

    /// `x W^T + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err!("linear: input {sx:?} vs weight {sw:?}"));
        }
        let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(shape_err!("linear: bias {:?} must be [{d_out}]", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let xr = &xv[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                let wr = &wv[o * d_in..(o + 1) * d_in];
                out[i * d_out + o] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (y, bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![n, d_out], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_checked("linear", value, Op::Linear { x, w, b }, &parents)
    }

    /// 1-D convolution (cross-correlation) of `x: [batch, c_in, len]` with
    /// `w: [c_out, c_in, kernel]`, zero padding on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err!("conv1d: input {sx:?} vs weight {sw:?}"));
        }
        let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let out_len = conv_out_len(len, kernel, stride, padding).ok_or_else(|| {
            shape_err!("conv1d: length {len} too short for kernel {kernel} (stride {stride}, padding {padding})")
        })?;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err!("conv1d: bias {:?} must be [{c_out}]", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * c_out * out_len];
        for bi in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(bi * c_out + o) * out_len..(bi * c_out + o + 1) * out_len];
                if let Some(bv) = bv {
                    orow.fill(bv[o]);
                }
                for c in 0..c_in {
                    let xrow = &xv[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                    for k in 0..kernel {
                        let wk = wv[(o * c_in + c) * kernel + k];
                        let (lo, hi) = valid_range(len, out_len, k, stride, padding);
                        if stride == 1 {
                            let src = &xrow[lo + k - padding..hi + k - padding];
                            for (y, xx) in orow[lo..hi].iter_mut().zip(src) {
                                *y += wk * xx;
                            }
                        } else {
                            for t in lo..hi {
                                orow[t] += wk * xrow[t * stride + k - padding];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![batch, c_out, out_len], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let op = Op::Conv1d {
            x,
            w,
            b,
            stride,
            padding,
        };
        self.push_checked("conv1d", value, op, &parents)
    }

    /// Non-overlapping max pooling over the last axis of `[batch, ch, len]`
    /// with window and stride `kernel`; a trailing partial window is dropped.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || kernel == 0 || sx[2] < kernel {
            return Err(shape_err!("max_pool1d: input {sx:?} with kernel {kernel}"));
        }
        let (rows, len) = (sx[0] * sx[1], sx[2]);
        let out_len = len / kernel;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for t in 0..out_len {
                let start = r * len + t * kernel;
                let mut best = start;
                for i in start + 1..start + kernel {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::from_parts_unchecked(vec![sx[0], sx[1], out_len], out);
        self.push_checked("max_pool1d", value, Op::MaxPool1d { x, argmax }, &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err!("axis {axis} out of range for {sx:?}"));
        }
        let (outer, dim, inner) = axis_extents(&sx, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (y, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *y += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= dim as f64);
        }
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::from_parts_unchecked(shape, out);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        self.push_checked(if mean { "mean_axis" } else { "sum_axis" }, value, op, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push_checked("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.data().iter().sum::<f64>() / vx.numel() as f64;
        self.push_checked("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Picks rows (first-axis slices) in the given order; repeats allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || rows.is_empty() {
            return Err(shape_err!("select_rows: need a non-scalar input and at least one row"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= sx[0]) {
            return Err(shape_err!("select_rows: row {r} out of range for {sx:?}"));
        }
        let stride: usize = sx[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&xv[r * stride..(r + 1) * stride]);
        }
        let mut shape = sx;
        shape[0] = rows.len();
        let value = Tensor::from_parts_unchecked(shape, out);
        let op = Op::SelectRows { x, rows: rows.to_vec() };
        self.push_checked("select_rows", value, op, &[x])
    }

    /// `out[i] = x[i, cols[i]]` for `x: [n, m]`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || cols.len() != sx[0] || cols.iter().any(|&c| c >= sx[1]) {
            return Err(shape_err!("gather: {} indices into {sx:?}", cols.len()));
        }
        let m = sx[1];
        let xv = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &c)| xv[i * m + c]).collect();
        let value = Tensor::from_parts_unchecked(vec![cols.len()], out);
        let op = Op::Gather { x, cols: cols.to_vec() };
        self.push_checked("gather", value, op, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let value = Tensor::new(shape, data)?;
        self.push_checked("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reverse-mode pass from a one-element root. Gradients accumulate into
    /// leaves across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(input_err!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            check_finite("backward", &g)?;
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = node.value.data();
        let val = |v: Var| nodes[v.0].value.data();
        // Hands out the (zero-initialized) gradient buffer of `v`, or `None`
        // if it does not need one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    for ((d, s), w) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * w;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((d, s), w) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * w;
                    }
                }
            }
            Op::Neg(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::AddCol(x, col) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                let m = node.value.last_dim();
                if let Some(gc) = slot!(*col) {
                    for (idx, s) in g.iter().enumerate() {
                        gc[idx / m] += s;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, s), e) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * e;
                    }
                }
            }
            Op::Log(x) => {
                let vx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += s / v;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, s), p) in gx.iter_mut().zip(g).zip(y) {
                        *d += s * p * (1.0 - p);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                if let Some(gx) = slot!(*x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        if *v >= *lo && *v <= *hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = slot!(*x) {
                    for ((dr, sr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let inner = dot(sr, yr);
                        for ((d, s), p) in dr.iter_mut().zip(sr).zip(yr) {
                            *d += p * (s - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gv = val(*gain);
                if let Some(gg) = slot!(*gain) {
                    for (sr, xr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for ((d, s), xh) in gg.iter_mut().zip(sr).zip(xr) {
                            *d += s * xh;
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for sr in g.chunks(n) {
                        add_into(gb, sr);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, ((dr, sr), xr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(normalized.chunks(n)).enumerate() {
                        for ((dh, s), gn) in dxhat.iter_mut().zip(sr).zip(gv) {
                            *dh = s * gn;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xr) / n as f64;
                        for ((d, dh), xh) in dr.iter_mut().zip(&dxhat).zip(xr) {
                            *d += inv_std[r] * (dh - mean_d - xh * mean_dx);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = node.value.last_dim();
                if let Some(gx) = slot!(*x) {
                    for (r, ((dr, sr), yr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                        let inner = dot(sr, yr);
                        for ((d, s), yy) in dr.iter_mut().zip(sr).zip(yr) {
                            *d += (s - yy * inner) / norms[r];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot!(*a) {
                    // dA = G B^T
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for c in 0..k {
                            ga[r * k + c] += dot(gr, &vb[c * m..(c + 1) * m]);
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    // dB = A^T G
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for c in 0..k {
                            let av = va[r * k + c];
                            for (d, s) in gb[c * m..(c + 1) * m].iter_mut().zip(gr) {
                                *d += av * s;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                if let Some(gx) = slot!(*x) {
                    // node is [m, n]; g transposed back is [n, m]
                    add_into(gx, &transpose(g, s[0], s[1]));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
                let (vx, vw) = (val(*x), val(*w));
                if let Some(gx) = slot!(*x) {
                    for i in 0..n {
                        let dr = &mut gx[i * d_in..(i + 1) * d_in];
                        for o in 0..d_out {
                            let s = g[i * d_out + o];
                            for (d, ww) in dr.iter_mut().zip(&vw[o * d_in..(o + 1) * d_in]) {
                                *d += s * ww;
                            }
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for i in 0..n {
                        let xr = &vx[i * d_in..(i + 1) * d_in];
                        for o in 0..d_out {
                            let s = g[i * d_out + o];
                            for (d, xx) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                                *d += s * xx;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for sr in g.chunks(d_out) {
                            add_into(gb, sr);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (stride, padding) = (*stride, *padding);
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
                let (c_out, kernel) = (sw[0], sw[2]);
                let out_len = node.value.shape()[2];
                let (vx, vw) = (val(*x), val(*w));
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for (idx, row) in g.chunks(out_len).enumerate() {
                            gb[idx % c_out] += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for bi in 0..batch {
                        for o in 0..c_out {
                            let grow = &g[(bi * c_out + o) * out_len..(bi * c_out + o + 1) * out_len];
                            for c in 0..c_in {
                                let xrow = &vx[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                                for k in 0..kernel {
                                    let (lo, hi) = valid_range(len, out_len, k, stride, padding);
                                    let acc = if stride == 1 {
                                        dot(&grow[lo..hi], &xrow[lo + k - padding..hi + k - padding])
                                    } else {
                                        (lo..hi).map(|t| grow[t] * xrow[t * stride + k - padding]).sum()
                                    };
                                    gw[(o * c_in + c) * kernel + k] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    for bi in 0..batch {
                        for o in 0..c_out {
                            let grow = &g[(bi * c_out + o) * out_len..(bi * c_out + o + 1) * out_len];
                            for c in 0..c_in {
                                let xrow = &mut gx[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                                for k in 0..kernel {
                                    let wk = vw[(o * c_in + c) * kernel + k];
                                    let (lo, hi) = valid_range(len, out_len, k, stride, padding);
                                    if stride == 1 {
                                        let dst = &mut xrow[lo + k - padding..hi + k - padding];
                                        for (d, s) in dst.iter_mut().zip(&grow[lo..hi]) {
                                            *d += wk * s;
                                        }
                                    } else {
                                        for t in lo..hi {
                                            xrow[t * stride + k - padding] += wk * grow[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if let Some(gx) = slot!(*x) {
                    for (s, &src) in g.iter().zip(argmax) {
                        gx[src] += s;
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = axis_extents(nodes[x.0].value.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let dst = &mut gx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (dd, s) in dst.iter_mut().zip(src) {
                                *dd += s * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.numel() as f64;
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SelectRows { x, rows } => {
                let stride = node.value.numel() / rows.len();
                if let Some(gx) = slot!(*x) {
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * stride..(r + 1) * stride], &g[j * stride..(j + 1) * stride]);
                    }
                }
            }
            Op::Gather { x, cols } => {
                let m = nodes[x.0].value.last_dim();
                if let Some(gx) = slot!(*x) {
                    for (i, (&c, s)) in cols.iter().zip(g).enumerate() {
                        gx[i * m + c] += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let av = a[r * k + c];
            for (o, bv) in orow.iter_mut().zip(&b[c * m..(c + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Transposes an `[n, m]` row-major matrix.
fn transpose(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            out[c * n + r] = x[r * m + c];
        }
    }
    out
}
