//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values live on the
//! tape; [`Var`] is a cheap handle into it. Calling [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on a
//! leaf created with `requires_grad`.

use super::array::Tensor;
use super::kernels::{self, ConvGeom, Layout};
use crate::error::{dim_err, Error, Result};

/// Variance guard shared by batch and layer normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel statistics of the batch seen by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (used for running-statistic updates).
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    TransposeLast2(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var, axis: usize },
    Relu(Var),
    SoftmaxLast(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, indices: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    // ----- linear algebra -------------------------------------------------

    /// Matrix product. Accepts `[m,k]·[k,n]`, batched `[B,m,k]·[B,k,n]`, and
    /// `[B,m,k]·[k,n]` (shared right operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with the same rank rules as [`Graph::matmul`], where `b` is
    /// given untransposed as `[n,k]` or `[B,n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatMulPlan::new(&sa, &sb, trans_b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        plan.forward(av, bv, &mut out);
        let value = Tensor::from_parts(plan.out_shape(&sa), out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err!("transpose needs rank >= 2, got {s:?}"));
        }
        let value = transpose_last2(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::TransposeLast2(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Adds a vector along `axis`, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if axis >= s.len() || bs.len() != 1 || bs[0] != s[axis] {
            return Err(dim_err!("bias {bs:?} does not match axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for c in 0..len {
                let base = (o * len + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[c];
                }
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(s, out), Op::AddBias { x, bias, axis }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Softmax over the last axis, stabilized by per-row max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let value = softmax_last(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxLast(x), rg))
    }

    // ----- convolutional layers -------------------------------------------

    /// 2-d cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!("conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"));
        }
        if xs[1] != ws[1] {
            return Err(dim_err!("conv2d channel mismatch: input {xs:?}, weight {ws:?}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        let (ph, pw) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        let (kh, kw) = (ws[2], ws[3]);
        if kh > ph || kw > pw {
            return Err(dim_err!("kernel {kh}x{kw} does not fit padded input {ph}x{pw}"));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(dim_err!(
                "non-integral conv output size for input {ph}x{pw}, kernel {kh}x{kw}, stride {stride}"
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], out);
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Max pooling over the last two axes of `[N,C,H,W]`; output size floors.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < k || s[3] < k || k == 0 || stride == 0 {
            return Err(dim_err!("max_pool2d window {k} does not fit input {s:?}"));
        }
        let (out, argmax, ho, wo) =
            kernels::max_pool_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], k, stride);
        let value = Tensor::from_parts(vec![s[0], s[1], ho, wo], out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Batch normalization over axis 1 of `[N,C]` or `[N,C,H,W]`.
    ///
    /// In training mode the returned [`BatchStats`] carry what the caller
    /// needs to update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err!("batch_norm needs [N,C,...], got {s:?}"));
        }
        let c = s[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(dim_err!("batch_norm affine shape {:?} vs channels {c}", self.shape(p)));
            }
        }
        let n = s[0];
        let inner: usize = s[2..].iter().product();
        let count = n * inner;
        if count == 0 {
            return Err(Error::Precondition("batch_norm on an empty batch".into()));
        }
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += xv[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xv[(b * c + ch) * inner..][..inner]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(dim_err!("running statistics do not match {c} channels"));
                }
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| dim_err!("layer_norm on rank-0 tensor"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(dim_err!("layer_norm affine shape {:?} vs width {c}", self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - m) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ----- structural -----------------------------------------------------

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(dim_err!("concat axis {axis} out of range for {s0:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat shape mismatch {s:?} vs {s0:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err!("slice [{start}, {}) out of range for axis {axis} of {s:?}", start + len));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Gathers entries along axis 0; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if indices.is_empty() {
            return Err(dim_err!("index_select with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(dim_err!("index {bad} out of range for leading axis {}", s[0]));
        }
        let inner: usize = s[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over `axis`, which is removed from the shape (rank-1 input gives `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(dim_err!("mean axis {axis} out of range for {s:?}"));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..][..inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, rg))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `logits: [B,N]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!("cross_entropy logits {s:?} vs {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(dim_err!("label {bad} out of range for {} classes", s[1]));
        }
        let probs = softmax_last(self.value(logits))?.into_data();
        let n = s[1];
        let loss = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| -log_softmax_at(&self.value(logits).data()[b * n..(b + 1) * n], y))
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- reverse pass ---------------------------------------------------

    /// Back-propagates from a single-element `loss`. Gradients of earlier
    /// calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            for (v, g) in self.vjp(i, &gout) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, i: usize, gout: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let g = gout.data();
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, trans_b } => {
                let sa = shape_of(*a);
                let sb = shape_of(*b);
                let plan = MatMulPlan::new(&sa, &sb, *trans_b).expect("validated in forward");
                let (da, db) = plan.backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    self.requires_grad(*a),
                    self.requires_grad(*b),
                );
                let mut out = vec![];
                if let Some(da) = da {
                    out.push((*a, Tensor::from_parts(sa, da)));
                }
                if let Some(db) = db {
                    out.push((*b, Tensor::from_parts(sb, db)));
                }
                out
            }
            Op::TransposeLast2(x) => vec![(*x, transpose_last2(gout))],
            Op::Reshape(x) => vec![(*x, Tensor::from_parts(shape_of(*x), g.to_vec()))],
            Op::Add(a, b) => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::Sub(a, b) => vec![(*a, gout.clone()), (*b, gout.map(|v| -v))],
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                vec![
                    (*a, gout.zip_map(vb, |x, y| x * y).unwrap()),
                    (*b, gout.zip_map(va, |x, y| x * y).unwrap()),
                ]
            }
            Op::Scale(x, s) => vec![(*x, gout.map(|v| v * s))],
            Op::AddBias { x, bias, axis } => {
                let s = gout.shape();
                let (outer, len, inner) = split_axis(s, *axis);
                let mut db = vec![0.0; len];
                for o in 0..outer {
                    for (c, acc) in db.iter_mut().enumerate() {
                        *acc += g[(o * len + c) * inner..][..inner].iter().sum::<f64>();
                    }
                }
                vec![(*x, gout.clone()), (*bias, Tensor::from_parts(vec![len], db))]
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_parts(gout.shape().to_vec(), d))]
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let n = *gout.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::from_parts(gout.shape().to_vec(), d))]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.requires_grad(*x),
                );
                let mut out = vec![(*w, Tensor::from_parts(shape_of(*w), dw))];
                if let Some(dx) = dx {
                    out.push((*x, Tensor::from_parts(shape_of(*x), dx)));
                }
                out
            }
            Op::MaxPool2d { x, argmax } => {
                let xs = shape_of(*x);
                let mut d = vec![0.0; xs.iter().product()];
                for (&ix, &gv) in argmax.iter().zip(g) {
                    d[ix] += gv;
                }
                vec![(*x, Tensor::from_parts(xs, d))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = gout.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (n * inner) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dx[i] = if *train {
                                // dxhat = g·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
                                gm[ch] * inv_std[ch] / m
                                    * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                g[i] * gm[ch] * inv_std[ch]
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(s.to_vec(), dx)),
                    (*gamma, Tensor::from_parts(vec![c], dgamma)),
                    (*beta, Tensor::from_parts(vec![c], dbeta)),
                ]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = *gout.shape().last().unwrap();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                let cf = c as f64;
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..c {
                        let dh = gr[j] * gm[j];
                        dx[r * c + j] = is / cf * (cf * dh - s1 - hr[j] * s2);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(gout.shape().to_vec(), dx)),
                    (*gamma, Tensor::from_parts(vec![c], dgamma)),
                    (*beta, Tensor::from_parts(vec![c], dbeta)),
                ]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(gout.shape(), *axis);
                let mut offset = 0;
                let mut out = vec![];
                for p in parts {
                    let ps = shape_of(*p);
                    let len = ps[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((*p, Tensor::from_parts(ps, d)));
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let xs = shape_of(*x);
                let (outer, alen, inner) = split_axis(&xs, *axis);
                let len = gout.shape()[*axis];
                let mut d = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, Tensor::from_parts(xs, d))]
            }
            Op::IndexSelect { x, indices } => {
                let xs = shape_of(*x);
                let inner: usize = xs[1..].iter().product();
                let mut d = vec![0.0; xs.iter().product()];
                for (k, &i) in indices.iter().enumerate() {
                    for (acc, v) in d[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                    {
                        *acc += v;
                    }
                }
                vec![(*x, Tensor::from_parts(xs, d))]
            }
            Op::MeanAxis { x, axis } => {
                let xs = shape_of(*x);
                let (outer, len, inner) = split_axis(&xs, *axis);
                let inv = 1.0 / len as f64;
                let mut d = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    for k in 0..len {
                        for j in 0..inner {
                            d[(o * len + k) * inner + j] = g[o * inner + j] * inv;
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs, d))]
            }
            Op::Sum(x) => {
                let xs = shape_of(*x);
                vec![(*x, Tensor::full(&xs, g[0]))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let xs = shape_of(*logits);
                let n = xs[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &y) in labels.iter().enumerate() {
                    d[b * n + y] -= scale;
                }
                vec![(*logits, Tensor::from_parts(xs, d))]
            }
        }
    }
}

/// Shape bookkeeping for the three supported matmul rank combinations.
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand is shared across the batch.
    shared_b: bool,
    trans_b: bool,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        if sb.len() < 2 {
            return Err(dim_err!("unsupported matmul ranks {sa:?} · {sb:?}"));
        }
        let r = sb.len();
        let (bk, bn) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        let plan = match (sa.len(), sb.len()) {
            (2, 2) => MatMulPlan {
                batch: 1,
                m: sa[0],
                k: sa[1],
                n: bn,
                shared_b: true,
                trans_b,
            },
            (3, 2) => MatMulPlan {
                batch: 1,
                m: sa[0] * sa[1],
                k: sa[2],
                n: bn,
                shared_b: true,
                trans_b,
            },
            (3, 3) => {
                if sa[0] != sb[0] {
                    return Err(dim_err!("batched matmul batch mismatch {sa:?} vs {sb:?}"));
                }
                MatMulPlan {
                    batch: sa[0],
                    m: sa[1],
                    k: sa[2],
                    n: bn,
                    shared_b: false,
                    trans_b,
                }
            }
            _ => return Err(dim_err!("unsupported matmul ranks {sa:?} · {sb:?}")),
        };
        if plan.k != bk {
            return Err(dim_err!(
                "matmul inner dimension mismatch: {sa:?} · {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        Ok(plan)
    }

    fn out_shape(&self, sa: &[usize]) -> Vec<usize> {
        match sa.len() {
            2 => vec![self.m, self.n],
            _ if self.shared_b => vec![sa[0], sa[1], self.n],
            _ => vec![self.batch, self.m, self.n],
        }
    }

    fn b_layout(&self) -> Layout {
        if self.trans_b {
            Layout::transposed(self.k)
        } else {
            Layout::row_major(self.n)
        }
    }

    fn b_block(&self) -> usize {
        if self.shared_b {
            0
        } else {
            self.k * self.n
        }
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            kernels::gemm(
                m,
                k,
                n,
                &a[i * m * k..],
                Layout::row_major(k),
                &b[i * self.b_block()..],
                self.b_layout(),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }

    fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        g: &[f64],
        need_a: bool,
        need_b: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = need_a.then(|| {
            let mut da = vec![0.0; self.batch * m * k];
            for i in 0..self.batch {
                // dA = G · Bᵀ; Bᵀ as stored is either (k×n)ᵀ or the raw n×k.
                let lb = if self.trans_b {
                    Layout::row_major(k)
                } else {
                    Layout::transposed(n)
                };
                kernels::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..],
                    Layout::row_major(n),
                    &b[i * self.b_block()..],
                    lb,
                    &mut da[i * m * k..(i + 1) * m * k],
                    false,
                );
            }
            da
        });
        let db = need_b.then(|| {
            let blocks = if self.shared_b { 1 } else { self.batch };
            let mut db = vec![0.0; blocks * k * n];
            for i in 0..self.batch {
                let dst = if self.shared_b { 0 } else { i * k * n };
                let acc = self.shared_b && i > 0;
                if self.trans_b {
                    // B is stored n×k: dB = Gᵀ · A
                    kernels::gemm(
                        n,
                        m,
                        k,
                        &g[i * m * n..],
                        Layout::transposed(n),
                        &a[i * m * k..],
                        Layout::row_major(k),
                        &mut db[dst..dst + k * n],
                        acc,
                    );
                } else {
                    // dB = Aᵀ · G
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..],
                        Layout::transposed(k),
                        &g[i * m * n..],
                        Layout::row_major(n),
                        &mut db[dst..dst + k * n],
                        acc,
                    );
                }
            }
            db
        });
        (da, db)
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = t.numel() / (rows * cols);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = d[base + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

/// Softmax over the last axis of a plain tensor.
pub fn softmax_last(t: &Tensor) -> Result<Tensor> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let n = *t.shape().last().unwrap();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let out = Tensor::from_parts(t.shape().to_vec(), out);
    if !out.all_finite() {
        return Err(Error::Numeric("non-finite softmax output".into()));
    }
    Ok(out)
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row[y] - lse
}
