//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a node's parents always have
//! smaller indices than the node itself. The reverse pass walks indices from
//! the root down to zero, which is a reverse topological order in which every
//! node is visited once. Gradient contributions are accumulated into each
//! parent in that fixed order, so results are bitwise reproducible.

use super::{AutodiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Inner(Var, Var),
    ConcatLast(Var, Var),
    SelectRows { x: Var, indices: Vec<usize> },
    SoftmaxLast(Var),
    Reshape(Var),
    TimeWeightedSum { h: Var, w: Var },
    DepthwiseConv1d { x: Var, kernel: Var, bias: Var },
    Conv1d { x: Var, weight: Var, bias: Option<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Grl { x: Var, gamma: f64 },
    AamMargin { cos: Var, targets: Vec<usize>, scale: f64, margin: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::AddBias(..) => "add_bias",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::Inner(..) => "inner",
            Op::ConcatLast(..) => "concat",
            Op::SelectRows { .. } => "select_rows",
            Op::SoftmaxLast(..) => "softmax",
            Op::Reshape(..) => "reshape",
            Op::TimeWeightedSum { .. } => "time_weighted_sum",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Conv1d { .. } => "conv1d",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Grl { .. } => "grl",
            Op::AamMargin { .. } => "aam_margin",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A computation graph built by calling op methods in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn shape_err(op: &str, msg: String) -> AutodiffError {
    AutodiffError::Shape(format!("{op}: {msg}"))
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().unwrap_or(&1);
    (t.numel() / last, last)
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of the named op (scales its gradient by 1.5).
    /// Used to check that the finite-difference harness catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
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
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Domain("sqrt of a non-positive entry".into()));
        }
        let out = self.value(x).map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(x)))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let out = self.value(x).map(|v| v.max(lo));
        self.push(out, Op::ClampMin(x, lo))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = ad[i * k + p];
                for j in 0..n {
                    out[i * n + j] += a_ip * bd[p * n + j];
                }
            }
        }
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `[M,K] x [N,K]ᵀ -> [M,N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new([m, n], out)?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// Adds a 1-D bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = rows_of(xv);
        if bv.ndim() != 1 || bv.numel() != cols || xv.ndim() == 0 {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(shape_err(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push(out, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Inner product along the last axis; the result drops that axis.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        same_shape("inner", self.value(a), self.value(b))?;
        let av = self.value(a);
        if av.ndim() == 0 {
            return Err(shape_err("inner", "scalar operands".into()));
        }
        let (_, cols) = rows_of(av);
        let out: Vec<f64> = av
            .data()
            .chunks(cols)
            .zip(self.value(b).data().chunks(cols))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let shape = av.shape()[..av.ndim() - 1].to_vec();
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Inner(a, b)))
    }

    /// Concatenates two 2-D tensors along their last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err(
                "concat",
                format!("{:?} ++ {:?}", av.shape(), bv.shape()),
            ));
        }
        let (rows, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::new([rows, ca + cb], out)?;
        Ok(self.push(out, Op::ConcatLast(a, b)))
    }

    /// Gathers entries along axis 0.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.ndim() == 0 || indices.is_empty() {
            return Err(shape_err("select_rows", "empty selection or scalar input".into()));
        }
        let rows = xv.shape()[0];
        let stride = xv.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(shape_err("select_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, cols) = rows_of(xv);
        let data = softmax_rows(xv.data(), cols);
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::SoftmaxLast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `h: [B,C,T]`, `w: [B,T]` -> `[B,C]` with `out[b,c] = Σ_t w[b,t]·h[b,c,t]`.
    pub fn time_weighted_sum(&mut self, h: Var, w: Var) -> Result<Var, AutodiffError> {
        let (hv, wv) = (self.value(h), self.value(w));
        if hv.ndim() != 3
            || wv.ndim() != 2
            || wv.shape()[0] != hv.shape()[0]
            || wv.shape()[1] != hv.shape()[2]
        {
            return Err(shape_err(
                "time_weighted_sum",
                format!("{:?} with weights {:?}", hv.shape(), wv.shape()),
            ));
        }
        let (b, c, t) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        let (hd, wd) = (hv.data(), wv.data());
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let wr = &wd[bi * t..(bi + 1) * t];
            for ci in 0..c {
                let hr = &hd[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                out[bi * c + ci] = hr.iter().zip(wr).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new([b, c], out)?;
        Ok(self.push(out, Op::TimeWeightedSum { h, w }))
    }

    /// Per-channel temporal convolution with "same" zero padding.
    ///
    /// `x: [B,C,T]`, `kernel: [C,K]` (K odd), `bias: [C]`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
    ) -> Result<Var, AutodiffError> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if xv.ndim() != 3 || kv.ndim() != 2 || bv.ndim() != 1 {
            return Err(shape_err(
                "depthwise_conv1d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    xv.shape(),
                    kv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = kv.shape()[1];
        if kv.shape()[0] != c || bv.numel() != c {
            return Err(AutodiffError::ChannelMismatch {
                expected: c,
                found: if kv.shape()[0] != c {
                    kv.shape()[0]
                } else {
                    bv.numel()
                },
            });
        }
        if k % 2 == 0 {
            return Err(AutodiffError::EvenKernel(k));
        }
        let pad = (k - 1) / 2;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let row = &xd[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let taps = &kd[ci * k..(ci + 1) * k];
                let dst = &mut out[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                for (ti, d) in dst.iter_mut().enumerate() {
                    let mut acc = bd[ci];
                    for (ki, w) in taps.iter().enumerate() {
                        let src = ti + ki;
                        if src >= pad && src - pad < t {
                            acc += w * row[src - pad];
                        }
                    }
                    *d = acc;
                }
            }
        }
        let out = Tensor::new([b, c, t], out)?;
        Ok(self.push(out, Op::DepthwiseConv1d { x, kernel, bias }))
    }

    /// Dense temporal convolution with "same" zero padding.
    ///
    /// `x: [B,Ci,T]`, `weight: [Co,Ci,K]` (K odd), optional `bias: [Co]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(weight));
        if xv.ndim() != 3 || wv.ndim() != 3 {
            return Err(shape_err(
                "conv1d",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (b, ci, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, wci, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if wci != ci {
            return Err(AutodiffError::ChannelMismatch {
                expected: ci,
                found: wci,
            });
        }
        if k % 2 == 0 {
            return Err(AutodiffError::EvenKernel(k));
        }
        let bias_data = match bias {
            Some(bv) => {
                let bv = self.value(bv);
                if bv.ndim() != 1 || bv.numel() != co {
                    return Err(AutodiffError::ChannelMismatch {
                        expected: co,
                        found: bv.numel(),
                    });
                }
                bv.data().to_vec()
            }
            None => vec![0.0; co],
        };
        let pad = (k - 1) / 2;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; b * co * t];
        for bi in 0..b {
            for o in 0..co {
                let dst = &mut out[(bi * co + o) * t..(bi * co + o + 1) * t];
                dst.fill(bias_data[o]);
                for i in 0..ci {
                    let row = &xd[(bi * ci + i) * t..(bi * ci + i + 1) * t];
                    let taps = &wd[(o * ci + i) * k..(o * ci + i + 1) * k];
                    for (ki, w) in taps.iter().enumerate() {
                        // dst[ti] += w * row[ti + ki - pad]
                        let lo = pad.saturating_sub(ki);
                        let hi = (t + pad).saturating_sub(ki).min(t);
                        for ti in lo..hi {
                            dst[ti] += w * row[ti + ki - pad];
                        }
                    }
                }
            }
        }
        let out = Tensor::new([b, co, t], out)?;
        Ok(self.push(out, Op::Conv1d { x, weight, bias }))
    }

    /// Per-sample cross-entropy `−log softmax(logits)[target]`, shape `[B]`.
    pub fn cross_entropy_per_sample(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let k = lv.shape()[1];
        let mut out = Vec::with_capacity(targets.len());
        for (row, &y) in lv.data().chunks(k).zip(targets) {
            if y >= k {
                return Err(AutodiffError::TargetOutOfRange {
                    target: y,
                    classes: k,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            // total >= 1 because the max entry contributes exp(0).
            out.push(total.ln() - (row[y] - max));
        }
        let out = Tensor::new([targets.len()], out)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Batch mean of the per-sample cross-entropy.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, AutodiffError> {
        let per = self.cross_entropy_per_sample(logits, targets)?;
        Ok(self.mean_all(per))
    }

    /// Divides each last-axis row by its L2 norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(shape_err("l2_normalize", "scalar input".into()));
        }
        let (_, cols) = rows_of(xv);
        let mut norms = Vec::with_capacity(xv.numel() / cols);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > eps) {
                return Err(AutodiffError::DegenerateNorm { norm: n, eps });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Gradient reversal: identity forward, `−gamma ·` upstream backward.
    pub fn grl(&mut self, x: Var, gamma: f64) -> Result<Var, AutodiffError> {
        if !(gamma >= 0.0) {
            return Err(AutodiffError::Domain(format!(
                "gradient reversal strength must be >= 0, got {gamma}"
            )));
        }
        let out = self.value(x).clone();
        Ok(self.push(out, Op::Grl { x, gamma }))
    }

    /// Additive angular margin on cosine logits.
    ///
    /// `cos: [B,N]` holds cosines in [−1, 1]. Non-target entries become
    /// `scale·cos θ`, target entries `scale·cos(θ + margin)`.
    pub fn aam_margin(
        &mut self,
        cos: Var,
        targets: &[usize],
        scale: f64,
        margin: f64,
    ) -> Result<Var, AutodiffError> {
        let cv = self.value(cos);
        if cv.ndim() != 2 || cv.shape()[0] != targets.len() {
            return Err(shape_err(
                "aam_margin",
                format!("cosines {:?} with {} targets", cv.shape(), targets.len()),
            ));
        }
        let n = cv.shape()[1];
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let mut out = Vec::with_capacity(cv.numel());
        for (row, &y) in cv.data().chunks(n).zip(targets) {
            if y >= n {
                return Err(AutodiffError::TargetOutOfRange {
                    target: y,
                    classes: n,
                });
            }
            for (j, &c) in row.iter().enumerate() {
                let c = c.clamp(-1.0, 1.0);
                if j == y {
                    let sin_t = (1.0 - c * c).max(0.0).sqrt();
                    out.push(scale * (c * cos_m - sin_t * sin_m));
                } else {
                    out.push(scale * c);
                }
            }
        }
        let out = Tensor::new(cv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::AamMargin {
                cos,
                targets: targets.to_vec(),
                scale,
                margin,
            },
        ))
    }

    /// Reverse pass from a scalar root with unit seed.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::full(self.shape(root).to_vec(), 1.0);
        self.backward_with(root, seed)
    }

    /// Reverse pass from `root` with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.shape(root),
            "seed shape must match root shape"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            let factor = match &self.fault {
                Some(name) if name == node.op.name() => 1.5,
                _ => 1.0,
            };
            let mut acc = |v: Var, mut contrib: Tensor| {
                if factor != 1.0 {
                    contrib.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
                match &mut lower[v.0] {
                    Some(t) => t.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            self.backward_node(node, g, &mut acc);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        shapes.truncate(self.nodes.len());
        Gradients { grads, shapes }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, acc: &mut dyn FnMut(Var, Tensor)) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| c * v)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Relu(x) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Sqrt(x) => acc(*x, g.zip_map(y, |gv, yv| gv / (2.0 * yv))),
            Op::ClampMin(x, lo) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv > *lo { gv } else { 0.0 }),
            ),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gd[i * n + j] * bd[p * n + j];
                            db[p * n + j] += ad[i * k + p] * gd[i * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                acc(*a, Tensor::new([m, k], da).unwrap());
                acc(*b, Tensor::new([k, n], db).unwrap());
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gd[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * bd[j * k + p];
                            db[j * k + p] += gij * ad[i * k + p];
                        }
                    }
                }
                acc(*a, Tensor::new([m, k], da).unwrap());
                acc(*b, Tensor::new([n, k], db).unwrap());
            }
            Op::AddBias(x, bias) => {
                let cols = self.value(*bias).numel();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, g.clone());
                acc(*bias, Tensor::new([cols], db).unwrap());
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let gd = g.data();
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        dx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), dx).unwrap());
            }
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x).to_vec(), g.item())),
            Op::Inner(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (_, cols) = rows_of(av);
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(av.numel());
                for ((ar, br), gv) in av
                    .data()
                    .chunks(cols)
                    .zip(bv.data().chunks(cols))
                    .zip(g.data())
                {
                    da.extend(br.iter().map(|v| gv * v));
                    db.extend(ar.iter().map(|v| gv * v));
                }
                acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = self.shape(*a)[0];
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::new([rows, ca], da).unwrap());
                acc(*b, Tensor::new([rows, cb], db).unwrap());
            }
            Op::SelectRows { x, indices } => {
                let xv = self.value(*x);
                let stride = xv.numel() / xv.shape()[0];
                let mut dx = vec![0.0; xv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, v) in dx[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&g.data()[r * stride..(r + 1) * stride])
                    {
                        *d += v;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::SoftmaxLast(x) => {
                let (_, cols) = rows_of(y);
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Reshape(x) => acc(
                *x,
                g.clone().reshaped(self.shape(*x).to_vec()).unwrap(),
            ),
            Op::TimeWeightedSum { h, w } => {
                let (hv, wv) = (self.value(*h), self.value(*w));
                let (b, c, t) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
                let (hd, wd, gd) = (hv.data(), wv.data(), g.data());
                let mut dh = vec![0.0; b * c * t];
                let mut dw = vec![0.0; b * t];
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = gd[bi * c + ci];
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            dh[base + ti] = gv * wd[bi * t + ti];
                            dw[bi * t + ti] += gv * hd[base + ti];
                        }
                    }
                }
                acc(*h, Tensor::new([b, c, t], dh).unwrap());
                acc(*w, Tensor::new([b, t], dw).unwrap());
            }
            Op::DepthwiseConv1d { x, kernel, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (b, c, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = kv.shape()[1];
                let pad = (k - 1) / 2;
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                let mut dx = vec![0.0; b * c * t];
                let mut dk = vec![0.0; c * k];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in 0..t {
                            let gv = gd[base + ti];
                            db[ci] += gv;
                            for ki in 0..k {
                                let src = ti + ki;
                                if src >= pad && src - pad < t {
                                    dx[base + src - pad] += gv * kd[ci * k + ki];
                                    dk[ci * k + ki] += gv * xd[base + src - pad];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new([b, c, t], dx).unwrap());
                acc(*kernel, Tensor::new([c, k], dk).unwrap());
                acc(*bias, Tensor::new([c], db).unwrap());
            }
            Op::Conv1d { x, weight, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let (b, ci, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let pad = (k - 1) / 2;
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut dx = vec![0.0; b * ci * t];
                let mut dw = vec![0.0; co * ci * k];
                let mut db = vec![0.0; co];
                for bi in 0..b {
                    for o in 0..co {
                        let gr = &gd[(bi * co + o) * t..(bi * co + o + 1) * t];
                        db[o] += gr.iter().sum::<f64>();
                        for i in 0..ci {
                            let xbase = (bi * ci + i) * t;
                            for ki in 0..k {
                                let w = wd[(o * ci + i) * k + ki];
                                let lo = pad.saturating_sub(ki);
                                let hi = (t + pad).saturating_sub(ki).min(t);
                                let mut sw = 0.0;
                                for ti in lo..hi {
                                    let src = xbase + ti + ki - pad;
                                    dx[src] += gr[ti] * w;
                                    sw += gr[ti] * xd[src];
                                }
                                dw[(o * ci + i) * k + ki] += sw;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new([b, ci, t], dx).unwrap());
                acc(*weight, Tensor::new([co, ci, k], dw).unwrap());
                if let Some(bias) = bias {
                    acc(*bias, Tensor::new([co], db).unwrap());
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let mut dz = softmax_rows(lv.data(), k);
                for ((row, &yi), gv) in dz.chunks_mut(k).zip(targets).zip(g.data()) {
                    row[yi] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), dz).unwrap());
            }
            Op::L2Normalize { x, norms } => {
                let (_, cols) = rows_of(y);
                let mut dx = Vec::with_capacity(y.numel());
                for ((yr, gr), n) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Grl { x, gamma } => acc(*x, g.map(|v| -gamma * v)),
            Op::AamMargin {
                cos,
                targets,
                scale,
                margin,
            } => {
                let cv = self.value(*cos);
                let n = cv.shape()[1];
                let (cos_m, sin_m) = (margin.cos(), margin.sin());
                let mut dc = Vec::with_capacity(cv.numel());
                for ((row, gr), &yi) in cv.data().chunks(n).zip(g.data().chunks(n)).zip(targets) {
                    for (j, (&c, &gv)) in row.iter().zip(gr).enumerate() {
                        if j == yi {
                            let c = c.clamp(-1.0, 1.0);
                            let sin_t = (1.0 - c * c).max(1e-24).sqrt();
                            dc.push(gv * scale * (cos_m + c * sin_m / sin_t));
                        } else {
                            dc.push(gv * scale);
                        }
                    }
                }
                acc(*cos, Tensor::new(cv.shape().to_vec(), dc).unwrap());
            }
        }
    }
}
