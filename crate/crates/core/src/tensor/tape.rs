//! Operation tape for reverse-mode differentiation.
//!
//! Every traced tensor lives in one [`Tape`] and is addressed by an opaque
//! [`Var`] handle. Recording an op validates shapes eagerly and stores the
//! forward value; [`Tape::backward`] then walks the recorded ops in reverse,
//! accumulating gradients into per-node buffers. A tape is a single-threaded
//! unit of work: build, run backward, read gradients, drop.

use super::Tensor;
use crate::error::Error;
use crate::Result;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, bias: Var },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    CrossEntropy { logits: Var, label: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// Row-major matmul kernels. The loop orders keep the innermost accesses
// contiguous so the compiler can vectorize them.

/// c[m,n] = a[m,k] * b[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// c[m,n] = a[m,k] * b[n,k]^T  (dot products of rows)
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// c[m,n] = a[k,m]^T * b[k,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
    c
}

/// Stable log(sum(exp(x))) over a slice.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact Gaussian CDF; the gelu nonlinearity is x * phi(x).
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Iterate a rank-<=2 tensor as lanes along `axis`: yields (lane_start,
/// stride, lane_len) triples covering the whole buffer.
fn lanes(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match shape.len() {
        1 => vec![(0, 1, shape[0])],
        2 => {
            let (rows, cols) = (shape[0], shape[1]);
            if axis == 0 {
                (0..cols).map(|c| (c, cols, rows)).collect()
            } else {
                (0..rows).map(|r| (r * cols, 1, cols)).collect()
            }
        }
        _ => unreachable!("lanes only supports rank 1/2"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf tensor. Only leaves with `requires_grad` (and values
    /// computed from them) receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad matches shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise_pair(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Broadcast-add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for (d, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "rank 2 required".into(),
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} elements", t.numel()),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Contiguous sub-range `start..start+len` along `axis` of a rank-2
    /// tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || axis > 1 {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: format!("rank 2 required, axis {axis}"),
            });
        }
        if start + len > t.shape()[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: format!("range {start}..{} out of bounds", start + len),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let (out_rows, out_cols) = if axis == 0 { (len, cols) } else { (rows, len) };
        let mut data = Vec::with_capacity(out_rows * out_cols);
        if axis == 0 {
            data.extend_from_slice(&t.data()[start * cols..(start + len) * cols]);
        } else {
            for r in 0..rows {
                data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
            }
        }
        let value = Tensor::new(vec![out_rows, out_cols], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, needs))
    }

    /// Concatenate rank-2 tensors along `axis`; the other axis must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: format!("{} parts, axis {axis}", parts.len()),
            });
        }
        let other = 1 - axis;
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut along = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s[other] != first[other] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            along += s[axis];
        }
        let mut shape = first;
        shape[axis] = along;
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
        } else {
            for r in 0..shape[0] {
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Mean over one axis of a rank-2 tensor, producing a rank-1 tensor.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || axis > 1 {
            return Err(Error::InvalidShape {
                op: "mean_axis",
                shape: t.shape().to_vec(),
                reason: format!("rank 2 required, axis {axis}"),
            });
        }
        let inv = 1.0 / t.shape()[axis] as f64;
        let out_len = t.shape()[1 - axis];
        let mut data = vec![0.0; out_len];
        for (o, (start, stride, len)) in lanes(t.shape(), axis).into_iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..len {
                acc += t.data()[start + i * stride];
            }
            data[o] = acc * inv;
        }
        let value = Tensor::new(vec![out_len], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MeanAxis { x, axis }, needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor::scalar(t.data().iter().sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Numerically stable softmax along `axis` (rank 1 or 2). Rejects
    /// non-finite input because the max-subtraction trick cannot fix it.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() > 2 || axis >= t.rank() {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: t.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        if !t.is_all_finite() {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
            });
        }
        let mut data = t.data().to_vec();
        for (start, stride, len) in lanes(t.shape(), axis) {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(data[start + i * stride]);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (data[start + i * stride] - max).exp();
                data[start + i * stride] = e;
                total += e;
            }
            for i in 0..len {
                data[start + i * stride] /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, axis }, needs))
    }

    /// Per-row layer normalization with affine gain and bias. `x` may be
    /// rank 1 (one row) or rank 2 (normalized along the last axis).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (tg, tb) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let cols = *t.shape().last().unwrap_or(&0);
        if t.rank() == 0 || t.rank() > 2 {
            return Err(Error::InvalidShape {
                op: "layernorm",
                shape: t.shape().to_vec(),
                reason: "rank 1 or 2 required".into(),
            });
        }
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = t.numel() / cols;
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_sd = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv_sd;
                data[r * cols + c] = tg.data()[c] * xhat + tb.data()[c];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }, needs))
    }

    /// Gaussian error linear unit, exact CDF form: x * Phi(x).
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| v * gauss_cdf(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Gelu(x), needs)
    }

    /// Negative log-likelihood of `label` under softmax(logits). Accepts a
    /// rank-1 logit vector or a single-row rank-2 tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let ok_shape = t.rank() == 1 || (t.rank() == 2 && t.shape()[0] == 1);
        if !ok_shape {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: t.shape().to_vec(),
                reason: "logit vector required".into(),
            });
        }
        if label >= t.numel() {
            return Err(Error::LabelOutOfRange {
                label,
                limit: t.numel(),
            });
        }
        if !t.is_all_finite() {
            return Err(Error::NonFinite {
                context: "cross_entropy logits".into(),
            });
        }
        let loss = log_sum_exp(t.data()) - t.data()[label];
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, needs))
    }

    /// Backpropagate from a scalar loss. Gradients from any previous call
    /// are discarded; read them back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_t = &self.nodes[loss.0].value;
        if loss_t.numel() != 1 {
            return Err(Error::NotScalar {
                shape: loss_t.shape().to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn apply_backward(&mut self, idx: usize, g: &[f64]) {
        // Clone the op descriptor up front; the arms below need `&mut self`
        // to accumulate into input slots.
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.accumulate(x, &dx);
            }
            Op::AddRow { x, bias } => {
                self.accumulate(x, g);
                let cols = self.nodes[bias.0].value.numel();
                let mut db = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    for (d, &v) in db.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(bias, &db);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = g * B^T, dB = A^T * g
                let da = matmul_nt(g, tb.data(), m, n, k);
                let db = matmul_tn(ta.data(), g, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(x) => {
                let t = &self.nodes[idx].value;
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = g[i * n + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => self.accumulate(x, g),
            Op::Slice { x, axis, start } => {
                let tx = &self.nodes[x.0].value;
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let out = self.nodes[idx].value.shape().to_vec();
                let mut dx = vec![0.0; rows * cols];
                if axis == 0 {
                    dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                } else {
                    let len = out[1];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Concat { parts, axis } => {
                let total_cols = self.nodes[idx].value.shape()[1];
                if axis == 0 {
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.nodes[p.0].value.numel();
                        let dp = g[offset..offset + n].to_vec();
                        self.accumulate(p, &dp);
                        offset += n;
                    }
                } else {
                    let rows = self.nodes[idx].value.shape()[0];
                    let mut col_offset = 0;
                    for &p in &parts {
                        let c = self.nodes[p.0].value.shape()[1];
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total_cols + col_offset;
                            dp.extend_from_slice(&g[base..base + c]);
                        }
                        self.accumulate(p, &dp);
                        col_offset += c;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let inv = 1.0 / shape[axis] as f64;
                let mut dx = vec![0.0; shape[0] * shape[1]];
                for (o, (start, stride, len)) in lanes(&shape, axis).into_iter().enumerate() {
                    for i in 0..len {
                        dx[start + i * stride] = g[o] * inv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x.0].value.numel()];
                self.accumulate(x, &dx);
            }
            Op::Softmax { x, axis } => {
                // ds = s .* (g - sum(g .* s)) per lane, using the stored
                // softmax output s.
                let s = self.nodes[idx].value.data().to_vec();
                let shape = self.nodes[idx].value.shape().to_vec();
                let mut dx = vec![0.0; s.len()];
                for (start, stride, len) in lanes(&shape, axis) {
                    let mut dot = 0.0;
                    for i in 0..len {
                        let k = start + i * stride;
                        dot += g[k] * s[k];
                    }
                    for i in 0..len {
                        let k = start + i * stride;
                        dx[k] = s[k] * (g[k] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gain.0].value;
                let cols = *tx.shape().last().unwrap();
                let rows = tx.numel() / cols;
                let mut dx = vec![0.0; tx.numel()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &tx.data()[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_sd = 1.0 / (var + eps).sqrt();
                    // dxhat, and the two lane means the gradient needs
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * inv_sd;
                        dxhat[c] = grow[c] * tg.data()[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat[c];
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                    }
                    let n = cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] =
                            (dxhat[c] - sum_dxhat / n - xhat[c] * sum_dxhat_xhat / n) * inv_sd;
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            Op::Gelu(x) => {
                let tx = &self.nodes[x.0].value;
                let dx: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * (gauss_cdf(v) + v * gauss_pdf(v)))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, label } => {
                let t = &self.nodes[logits.0].value;
                let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = t.data().iter().map(|&v| (v - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut dl: Vec<f64> = exps.iter().map(|&e| g[0] * e / total).collect();
                dl[label] -= g[0];
                self.accumulate(logits, &dl);
            }
        }
    }
}
