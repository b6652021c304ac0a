//! Define-by-run computation graph. Forward values are computed eagerly as
//! nodes are appended; `backward` walks the arena in reverse insertion order,
//! which is already a topological order.
//!
//! Every forward op validates shapes, then checks the freshly produced buffer
//! for non-finite values and aborts the step naming the op, so a NaN anywhere
//! surfaces at its source rather than three modules later.

use super::{elem, matmul_kernel, Element, Result, Tensor, TensorError};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    /// y = x·Wᵀ + b with x: m×d, w: o×d, b: o.
    Linear { x: Var, w: Var, b: Var },
    /// Same-padded cross-correlation; x: c_in×l, w: c_out×c_in×k, b: c_out.
    Conv1d { x: Var, w: Var, b: Var },
    /// B = K·Cᵀ = Σᵢ kᵢcᵢᵀ over columns of two d×m stacks.
    OuterAccumulate(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    /// Normalization axis is always the last one for the supported
    /// rank-1/rank-2 inputs, so only the operand is recorded.
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Mean cross-entropy over rows of 2-D logits (or a single 1-D row).
    CrossEntropy { logits: Var, labels: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    SliceCols { x: Var, start: usize, len: usize },
    Concat { inputs: Vec<Var>, axis: usize },
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Arena of forward records; rebuilt from scratch each training step.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Only leaves with `requires_grad` receive
    /// gradients after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a node, populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.op_requires_grad(&op);
        Ok(self.push(value, op, requires_grad))
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        let dep = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::OuterAccumulate(a, b) => {
                dep(a) || dep(b)
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::GatherRows(a, _)
            | Op::RepeatRows(a) => dep(a),
            Op::Softmax(x) | Op::SliceCols { x, .. } | Op::CrossEntropy { logits: x, .. } => dep(x),
            Op::Linear { x, w, b } | Op::Conv1d { x, w, b } => dep(x) || dep(w) || dep(b),
            Op::LayerNorm { x, gamma, beta, .. } => dep(x) || dep(gamma) || dep(beta),
            Op::Concat { inputs, .. } => inputs.iter().any(dep),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push_checked("add", value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push_checked("sub", value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push_checked("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push_checked("scale", value, Op::Scale(a, c))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data).unwrap();
        self.push_checked("matmul", value, Op::Matmul(a, b))
    }

    /// y = x·Wᵀ + b. `x`: m×d, `w`: o×d, `b`: o → m×o.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        if sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch { op: "linear_bias", lhs: sb.to_vec(), rhs: vec![sw[0]] });
        }
        let (m, d, o) = (sx[0], sx[1], sw[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * o];
        for i in 0..m {
            let xrow = &xd[i * d..(i + 1) * d];
            for j in 0..o {
                let wrow = &wd[j * d..(j + 1) * d];
                let mut s = bd[j];
                for p in 0..d {
                    s = s + xrow[p] * wrow[p];
                }
                out[i * o + j] = s;
            }
        }
        let value = Tensor::new(vec![m, o], out).unwrap();
        self.push_checked("linear", value, Op::Linear { x, w, b })
    }

    /// Same-padded 1-D cross-correlation. `x`: c_in×l, `w`: c_out×c_in×k
    /// (k odd), `b`: c_out → c_out×l.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch { op: "conv1d", lhs: sx, rhs: sw });
        }
        let (c_in, l) = (sx[0], sx[1]);
        let (c_out, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(TensorError::Invalid { op: "conv1d", msg: format!("kernel width {} must be odd", k) });
        }
        if sb != [c_out] {
            return Err(TensorError::ShapeMismatch { op: "conv1d_bias", lhs: sb, rhs: vec![c_out] });
        }
        let pad = k / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); c_out * l];
        for o in 0..c_out {
            let orow = &mut out[o * l..(o + 1) * l];
            orow.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..c_in {
                let xrow = &xd[c * l..(c + 1) * l];
                let wrow = &wd[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (j, &wj) in wrow.iter().enumerate() {
                    if wj == T::zero() {
                        continue;
                    }
                    // output position t reads input position t + j - pad
                    let lo = pad.saturating_sub(j);
                    let hi = (l + pad - j).min(l);
                    for t in lo..hi {
                        orow[t] = orow[t] + wj * xrow[t + j - pad];
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, l], out).unwrap();
        self.push_checked("conv1d", value, Op::Conv1d { x, w, b })
    }

    /// Sum of per-column outer products: K, C both d×m → K·Cᵀ of d×d.
    /// The output shape depends only on d, never on the column count.
    pub fn outer_accumulate(&mut self, k: Var, c: Var) -> Result<Var> {
        self.same_shape("outer_accumulate", k, c)?;
        let s = self.shape(k);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "outer_accumulate",
                msg: format!("expected rank-2 stacks, got {:?}", s),
            });
        }
        let (d, m) = (s[0], s[1]);
        let (kd, cd) = (self.value(k).data(), self.value(c).data());
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = T::zero();
                for t in 0..m {
                    acc = acc + kd[i * m + t] * cd[j * m + t];
                }
                out[i * d + j] = acc;
            }
        }
        let value = Tensor::new(vec![d, d], out).unwrap();
        self.push_checked("outer_accumulate", value, Op::OuterAccumulate(k, c))
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "transpose", msg: format!("rank-2 only, got {:?}", s) });
        }
        let (m, n) = (s[0], s[1]);
        let ad = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out).unwrap();
        self.push_checked("transpose", value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape });
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec()).unwrap();
        self.push_checked("reshape", value, Op::Reshape(a))
    }

    /// Select rows of a 2-D tensor; an index may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "gather_rows", msg: format!("rank-2 only, got {:?}", s) });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {} out of range ({} rows)", bad, rows),
            });
        }
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(&ad[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], out).unwrap();
        self.push_checked("gather_rows", value, Op::GatherRows(a, idx))
    }

    /// Tile a 1×d row n times into n×d.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != 1 {
            return Err(TensorError::Invalid { op: "repeat_rows", msg: format!("expected 1×d, got {:?}", s) });
        }
        let cols = s[1];
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(n * cols);
        for _ in 0..n {
            out.extend_from_slice(ad);
        }
        let value = Tensor::new(vec![n, cols], out).unwrap();
        self.push_checked("repeat_rows", value, Op::RepeatRows(a))
    }

    /// Contiguous column range of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {}..{} out of {:?}", start, start + len, s),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&ad[i * cols + start..i * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out).unwrap();
        self.push_checked("slice_cols", value, Op::SliceCols { x: a, start, len })
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(TensorError::Invalid { op: "concat", msg: "needs inputs and axis in {0,1}".into() });
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 2 {
            return Err(TensorError::Invalid { op: "concat", msg: format!("rank-2 only, got {:?}", first) });
        }
        let keep = 1 - axis;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[keep] != first[keep] {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
        }
        let total: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        if axis == 0 {
            for &v in inputs {
                out.extend_from_slice(self.value(v).data());
            }
        } else {
            for r in 0..shape[0] {
                for &v in inputs {
                    let c = self.shape(v)[1];
                    out.extend_from_slice(&self.value(v).data()[r * c..(r + 1) * c]);
                }
            }
        }
        let value = Tensor::new(shape, out).unwrap();
        self.push_checked("concat", value, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    // ── activations ─────────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push_checked("relu", value, Op::Relu(a))
    }

    /// Tanh-approximate GELU; the backward differentiates the same
    /// approximation so gradient checks are exact against it.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_fwd);
        self.push_checked("gelu", value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push_checked("sigmoid", value, Op::Sigmoid(a))
    }

    /// Stabilized softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let value = match (s.len(), axis) {
            (1, 0) => Tensor::new(s.clone(), super::softmax_slice(self.value(a).data())).unwrap(),
            (2, 1) => {
                let (m, n) = (s[0], s[1]);
                let ad = self.value(a).data();
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    out.extend(super::softmax_slice(&ad[i * n..(i + 1) * n]));
                }
                Tensor::new(s.clone(), out).unwrap()
            }
            _ => {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("unsupported axis {} for shape {:?}", axis, s),
                })
            }
        };
        self.push_checked("softmax", value, Op::Softmax(a))
    }

    /// Row-wise layer normalization over the last axis with affine params.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid { op: "layer_norm", msg: format!("rank-2 only, got {:?}", s) });
        }
        let (m, n) = (s[0], s[1]);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![n],
            });
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let epst = elem::<T>(eps);
        let nt = elem::<T>(n as f64);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / nt;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / nt;
            let inv = (var + epst).sqrt().recip();
            for j in 0..n {
                out[i * n + j] = gd[j] * (row[j] - mean) * inv + bd[j];
            }
        }
        let value = Tensor::new(s, out).unwrap();
        self.push_checked("layer_norm", value, Op::LayerNorm { x, gamma, beta, eps })
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push_checked("sum_all", Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = elem::<T>(self.value(a).numel() as f64);
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        self.push_checked("mean_all", Tensor::scalar(s), Op::MeanAll(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis, false)?;
        self.push_checked("sum_axis", value, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis, true)?;
        self.push_checked("mean_axis", value, Op::MeanAxis(a, axis))
    }

    /// Mean over the length axis of a channels×length map.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.mean_axis(a, 1)
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> Result<Tensor<T>> {
        let s = self.shape(a);
        if s.len() != 2 || axis > 1 {
            return Err(TensorError::Invalid {
                op: "reduce_axis",
                msg: format!("rank-2 only (axis 0/1), got {:?} axis {}", s, axis),
            });
        }
        let (m, n) = (s[0], s[1]);
        let ad = self.value(a).data();
        let (out_len, red) = if axis == 0 { (n, m) } else { (m, n) };
        let mut out = vec![T::zero(); out_len];
        for i in 0..m {
            for j in 0..n {
                let o = if axis == 0 { j } else { i };
                out[o] = out[o] + ad[i * n + j];
            }
        }
        if mean {
            let r = elem::<T>(red as f64);
            out.iter_mut().for_each(|v| *v = *v / r);
        }
        Ok(Tensor::new(vec![out_len], out).unwrap())
    }

    // ── losses ──────────────────────────────────────────────────────

    /// −log softmax(logits)\[label\], stabilized via max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.cross_entropy_mean(logits, &[label])
    }

    /// Mean cross-entropy: 1-D logits with one label, or m×n logits with m
    /// labels averaged over rows.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, n_class) = match s.len() {
            1 => (1usize, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("logits must be rank 1 or 2, got {:?}", s),
                })
            }
        };
        if labels.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for {} logit rows", labels.len(), rows),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_class) {
            return Err(TensorError::LabelOutOfRange { label: bad, n_class });
        }
        let ld = self.value(logits).data();
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * n_class..(i + 1) * n_class];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |a, &x| a + (x - max).exp()).ln() + max;
            total = total + lse - row[label];
        }
        let loss = total / elem::<T>(rows as f64);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf (zeros if unreachable). A second call on the
    /// same graph is an error; rebuild the graph instead.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Invalid { op: "backward", msg: "loss is not a node of this graph".into() });
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()]).unwrap());

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.propagate(i, &grad)?;
        }

        // Unreachable requires_grad leaves still get a (zero) gradient.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, grad: &Tensor<T>) -> Result<()> {
        // Ops match on a cloned lightweight view of the record; values are
        // borrowed per-branch to keep the borrow checker happy.
        enum Work<T: Element> {
            One(Var, Tensor<T>),
            Two((Var, Tensor<T>), (Var, Tensor<T>)),
            Three((Var, Tensor<T>), (Var, Tensor<T>), (Var, Tensor<T>)),
            Many(Vec<(Var, Tensor<T>)>),
        }
        let work: Work<T> = match &self.nodes[i].op {
            Op::Leaf => return Ok(()),
            Op::Add(a, b) => Work::Two((*a, grad.clone()), (*b, grad.clone())),
            Op::Sub(a, b) => Work::Two((*a, grad.clone()), (*b, grad.map(|x| -x))),
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = mul_elem(grad, self.nodes[b.0].value.data());
                let db = mul_elem(grad, self.nodes[a.0].value.data());
                Work::Two((a, da), (b, db))
            }
            Op::Scale(a, c) => {
                let c = *c;
                Work::One(*a, grad.map(|x| x * c))
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let bt = transpose_raw(self.nodes[b.0].value.data(), k, n);
                let da = matmul_kernel(grad.data(), &bt, m, n, k);
                let at = transpose_raw(self.nodes[a.0].value.data(), m, k);
                let db = matmul_kernel(&at, grad.data(), k, m, n);
                Work::Two(
                    (a, Tensor::new(vec![m, k], da).unwrap()),
                    (b, Tensor::new(vec![k, n], db).unwrap()),
                )
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (m, d) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[0];
                // dx = dY·W ; dW = dYᵀ·X ; db = column sums of dY
                let dx = matmul_kernel(grad.data(), self.nodes[w.0].value.data(), m, o, d);
                let gt = transpose_raw(grad.data(), m, o);
                let dw = matmul_kernel(&gt, self.nodes[x.0].value.data(), o, m, d);
                let mut db = vec![T::zero(); o];
                for r in 0..m {
                    let grow = &grad.data()[r * o..(r + 1) * o];
                    for (acc, &g) in db.iter_mut().zip(grow) {
                        *acc = *acc + g;
                    }
                }
                Work::Three(
                    (x, Tensor::new(vec![m, d], dx).unwrap()),
                    (w, Tensor::new(vec![o, d], dw).unwrap()),
                    (b, Tensor::new(vec![o], db).unwrap()),
                )
            }
            Op::Conv1d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (c_in, l) = (self.shape(x)[0], self.shape(x)[1]);
                let (c_out, k) = (self.shape(w)[0], self.shape(w)[2]);
                let pad = k / 2;
                let xd = self.nodes[x.0].value.data();
                let wd = self.nodes[w.0].value.data();
                let gd = grad.data();
                let mut dx = vec![T::zero(); c_in * l];
                let mut dw = vec![T::zero(); c_out * c_in * k];
                let mut db = vec![T::zero(); c_out];
                for o in 0..c_out {
                    let grow = &gd[o * l..(o + 1) * l];
                    db[o] = grow.iter().fold(db[o], |acc, &g| acc + g);
                    for c in 0..c_in {
                        let xrow = &xd[c * l..(c + 1) * l];
                        let wrow = &wd[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                        let dxrow = &mut dx[c * l..(c + 1) * l];
                        // reduction and scatter kept in separate loops so
                        // each vectorizes on its own
                        for j in 0..k {
                            let lo = pad.saturating_sub(j);
                            let hi = (l + pad - j).min(l);
                            let off = j.wrapping_sub(pad);
                            let mut dwj = T::zero();
                            for t in lo..hi {
                                dwj = dwj + grow[t] * xrow[t.wrapping_add(off)];
                            }
                            dw[(o * c_in + c) * k + j] = dw[(o * c_in + c) * k + j] + dwj;
                            let wj = wrow[j];
                            if wj != T::zero() {
                                // dxrow is written through a shifted index,
                                // so zipping the two slices doesn't apply
                                #[allow(clippy::needless_range_loop)]
                                for t in lo..hi {
                                    let xi = t.wrapping_add(off);
                                    dxrow[xi] = dxrow[xi] + grow[t] * wj;
                                }
                            }
                        }
                    }
                }
                Work::Three(
                    (x, Tensor::new(vec![c_in, l], dx).unwrap()),
                    (w, Tensor::new(vec![c_out, c_in, k], dw).unwrap()),
                    (b, Tensor::new(vec![c_out], db).unwrap()),
                )
            }
            Op::OuterAccumulate(kv, cv) => {
                let (kv, cv) = (*kv, *cv);
                let (d, m) = (self.shape(kv)[0], self.shape(kv)[1]);
                // B = K·Cᵀ → dK = dB·C, dC = dBᵀ·K
                let dk = matmul_kernel(grad.data(), self.nodes[cv.0].value.data(), d, d, m);
                let gt = transpose_raw(grad.data(), d, d);
                let dc = matmul_kernel(&gt, self.nodes[kv.0].value.data(), d, d, m);
                Work::Two(
                    (kv, Tensor::new(vec![d, m], dk).unwrap()),
                    (cv, Tensor::new(vec![d, m], dc).unwrap()),
                )
            }
            Op::Transpose(a) => {
                let a = *a;
                let (n, m) = (self.shape(Var(i))[0], self.shape(Var(i))[1]);
                let dt = transpose_raw(grad.data(), n, m);
                Work::One(a, Tensor::new(vec![m, n], dt).unwrap())
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.shape(a).to_vec();
                Work::One(a, Tensor::new(shape, grad.data().to_vec()).unwrap())
            }
            Op::Relu(a) => {
                let a = *a;
                let mask: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                Work::One(a, Tensor::new(grad.shape().to_vec(), mask).unwrap())
            }
            Op::Gelu(a) => {
                let a = *a;
                let dx: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| g * gelu_bwd(x))
                    .collect();
                Work::One(a, Tensor::new(grad.shape().to_vec(), dx).unwrap())
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let dx: Vec<T> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                Work::One(a, Tensor::new(grad.shape().to_vec(), dx).unwrap())
            }
            Op::Softmax(x) => {
                let x = *x;
                let y = &self.nodes[i].value;
                let s = y.shape().to_vec();
                let (m, n) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let yrow = &y.data()[r * n..(r + 1) * n];
                    let grow = &grad.data()[r * n..(r + 1) * n];
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..n {
                        dx[r * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                Work::One(x, Tensor::new(s, dx).unwrap())
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let s = self.shape(x).to_vec();
                let (m, n) = (s[0], s[1]);
                let xd = self.nodes[x.0].value.data();
                let gd = self.nodes[gamma.0].value.data();
                let epst = elem::<T>(eps);
                let nt = elem::<T>(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let grow = &grad.data()[r * n..(r + 1) * n];
                    let mean = row.iter().fold(T::zero(), |a, &b| a + b) / nt;
                    let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / nt;
                    let inv = (var + epst).sqrt().recip();
                    // xhat, dyhat and the two row means the formula needs
                    let mut sum_dyh = T::zero();
                    let mut sum_dyh_xh = T::zero();
                    let mut xhat = vec![T::zero(); n];
                    let mut dyh = vec![T::zero(); n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        dyh[j] = grow[j] * gd[j];
                        sum_dyh = sum_dyh + dyh[j];
                        sum_dyh_xh = sum_dyh_xh + dyh[j] * xhat[j];
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    let mean_dyh = sum_dyh / nt;
                    let mean_dyh_xh = sum_dyh_xh / nt;
                    for j in 0..n {
                        dx[r * n + j] = inv * (dyh[j] - mean_dyh - xhat[j] * mean_dyh_xh);
                    }
                }
                Work::Three(
                    (x, Tensor::new(s, dx).unwrap()),
                    (gamma, Tensor::new(vec![n], dgamma).unwrap()),
                    (beta, Tensor::new(vec![n], dbeta).unwrap()),
                )
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let s = self.shape(logits).to_vec();
                let (rows, n) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let g = grad.item();
                let scale = g / elem::<T>(rows as f64);
                let ld = self.nodes[logits.0].value.data();
                let mut dx = vec![T::zero(); rows * n];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &ld[r * n..(r + 1) * n];
                    let sm = super::softmax_slice(row);
                    for j in 0..n {
                        let delta = if j == label { T::one() } else { T::zero() };
                        dx[r * n + j] = (sm[j] - delta) * scale;
                    }
                }
                Work::One(logits, Tensor::new(s, dx).unwrap())
            }
            Op::SumAll(a) => {
                let a = *a;
                let g = grad.item();
                let shape = self.shape(a).to_vec();
                let n = self.nodes[a.0].value.numel();
                Work::One(a, Tensor::new(shape, vec![g; n]).unwrap())
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.numel();
                let g = grad.item() / elem::<T>(n as f64);
                let shape = self.shape(a).to_vec();
                Work::One(a, Tensor::new(shape, vec![g; n]).unwrap())
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (a, axis) = (*a, *axis);
                let mean = matches!(self.nodes[i].op, Op::MeanAxis(..));
                let s = self.shape(a).to_vec();
                let (m, n) = (s[0], s[1]);
                let red = if axis == 0 { m } else { n };
                let scale = if mean { elem::<T>(red as f64).recip() } else { T::one() };
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    for j in 0..n {
                        let o = if axis == 0 { j } else { r };
                        dx[r * n + j] = grad.data()[o] * scale;
                    }
                }
                Work::One(a, Tensor::new(s, dx).unwrap())
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let s = self.shape(a).to_vec();
                let cols = s[1];
                let mut dx = vec![T::zero(); s[0] * cols];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[src * cols + j] = dx[src * cols + j] + grad.data()[r * cols + j];
                    }
                }
                Work::One(a, Tensor::new(s, dx).unwrap())
            }
            Op::RepeatRows(a) => {
                let a = *a;
                let cols = self.shape(a)[1];
                let reps = grad.shape()[0];
                let mut dx = vec![T::zero(); cols];
                for r in 0..reps {
                    let grow = &grad.data()[r * cols..(r + 1) * cols];
                    for (acc, &g) in dx.iter_mut().zip(grow) {
                        *acc = *acc + g;
                    }
                }
                Work::One(a, Tensor::new(vec![1, cols], dx).unwrap())
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let s = self.shape(x).to_vec();
                let (rows, cols) = (s[0], s[1]);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for j in 0..len {
                        dx[r * cols + start + j] = grad.data()[r * len + j];
                    }
                }
                Work::One(x, Tensor::new(s, dx).unwrap())
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let mut parts = Vec::with_capacity(inputs.len());
                if axis == 0 {
                    let mut offset = 0;
                    for &v in &inputs {
                        let s = self.shape(v).to_vec();
                        let n = s[0] * s[1];
                        let part = grad.data()[offset..offset + n].to_vec();
                        offset += n;
                        parts.push((v, Tensor::new(s, part).unwrap()));
                    }
                } else {
                    let rows = self.shape(inputs[0])[0];
                    let total: usize = inputs.iter().map(|&v| self.shape(v)[1]).sum();
                    let mut col = 0;
                    for &v in &inputs {
                        let c = self.shape(v)[1];
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&grad.data()[r * total + col..r * total + col + c]);
                        }
                        col += c;
                        parts.push((v, Tensor::new(vec![rows, c], part).unwrap()));
                    }
                }
                Work::Many(parts)
            }
        };

        match work {
            Work::One(a, da) => self.accumulate(a, da),
            Work::Two((a, da), (b, db)) => {
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Work::Three((a, da), (b, db), (c, dc)) => {
                self.accumulate(a, da);
                self.accumulate(b, db);
                self.accumulate(c, dc);
            }
            Work::Many(parts) => {
                for (v, dv) in parts {
                    self.accumulate(v, dv);
                }
            }
        }
        Ok(())
    }
}

fn mul_elem<T: Element>(grad: &Tensor<T>, other: &[T]) -> Tensor<T> {
    let data = grad.data().iter().zip(other).map(|(&g, &o)| g * o).collect();
    Tensor::new(grad.shape().to_vec(), data).unwrap()
}

fn transpose_raw<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Element>(x: T) -> T {
    let c = elem::<T>(GELU_C);
    let a = elem::<T>(GELU_A);
    let half = elem::<T>(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_bwd<T: Element>(x: T) -> T {
    let c = elem::<T>(GELU_C);
    let a = elem::<T>(GELU_A);
    let half = elem::<T>(0.5);
    let three = elem::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * sech2 * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf2(g: &mut Graph<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(vec![rows, cols], data).unwrap(), false)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = leaf2(&mut g, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf2(&mut g, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, 1, 2, vec![1.0, 2.0]);
        let b = leaf2(&mut g, 2, 1, vec![3.0, 4.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = leaf2(&mut g, 2, 3, vec![0.0; 6]);
        let b = leaf2(&mut g, 2, 2, vec![0.0; 4]);
        match g.matmul(a, b).unwrap_err() {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            e => panic!("wrong error {e}"),
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = leaf2(&mut g, 1, 3, vec![1.0, 2.0, 3.0]);
        let w = g.leaf(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(), false);
        let b = g.leaf(Tensor::from_vec(vec![0.0]), false);
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_box_kernel_zero_padded() {
        // hand convolution of [1,2,3] with [1,1,1], zero-padded ends
        let mut g = Graph::new();
        let x = leaf2(&mut g, 1, 3, vec![1.0, 2.0, 3.0]);
        let w = g.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap(), false);
        let b = g.leaf(Tensor::from_vec(vec![0.0]), false);
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel_and_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = leaf2(&mut g, 2, 4, vec![0.0; 8]);
        let w_even = g.leaf(Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap(), false);
        let b = g.leaf(Tensor::from_vec(vec![0.0]), false);
        assert!(g.conv1d(x, w_even, b).is_err());
        let w_badch = g.leaf(Tensor::new(vec![1, 3, 3], vec![0.0; 9]).unwrap(), false);
        assert!(matches!(g.conv1d(x, w_badch, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn outer_accumulate_single_column() {
        let mut g = Graph::new();
        let k = leaf2(&mut g, 2, 1, vec![1.0, 0.0]);
        let c = leaf2(&mut g, 2, 1, vec![0.0, 1.0]);
        let b = g.outer_accumulate(k, c).unwrap();
        assert_eq!(g.value(b).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn outer_accumulate_shape_is_column_count_free() {
        for m in 1..=8 {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..4 * m).map(|i| i as f64 * 0.1).collect();
            let k = leaf2(&mut g, 4, m, data.clone());
            let c = leaf2(&mut g, 4, m, data);
            let b = g.outer_accumulate(k, c).unwrap();
            assert_eq!(g.shape(b), &[4, 4]);
        }
    }

    #[test]
    fn outer_accumulate_column_permutation_invariant() {
        let kd = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let cd = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.5];
        let perm = [2usize, 0, 1];
        let permute = |d: &[f64]| {
            let mut out = vec![0.0; 6];
            for (new_c, &old_c) in perm.iter().enumerate() {
                for r in 0..2 {
                    out[r * 3 + new_c] = d[r * 3 + old_c];
                }
            }
            out
        };
        let mut g1 = Graph::new();
        let b1 = {
            let k = leaf2(&mut g1, 2, 3, kd.clone());
            let c = leaf2(&mut g1, 2, 3, cd.clone());
            g1.outer_accumulate(k, c).unwrap()
        };
        let mut g2 = Graph::new();
        let b2 = {
            let k = leaf2(&mut g2, 2, 3, permute(&kd));
            let c = leaf2(&mut g2, 2, 3, permute(&cd));
            g2.outer_accumulate(k, c).unwrap()
        };
        for (a, b) in g1.value(b1).data().iter().zip(g2.value(b2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(vec![0.0, 0.0]), false);
        let loss = g.cross_entropy(logits, 0).unwrap();
        assert!((g.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_no_overflow_on_large_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(vec![100.0, 0.0]), false);
        let loss = g.cross_entropy(logits, 0).unwrap();
        let v: f64 = g.value(loss).item();
        assert!(v.is_finite());
        assert!(v < 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(vec![0.0, 0.0]), false);
        assert!(matches!(g.cross_entropy(logits, 2), Err(TensorError::LabelOutOfRange { .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.0]), true);
        let loss = g.cross_entropy(logits, 1).unwrap();
        g.backward(loss).unwrap();
        let sm = crate::tensor::softmax_slice(&[0.3f64, -1.2, 2.0]);
        let grad = g.grad(logits).unwrap();
        for (j, (&got, &s)) in grad.data().iter().zip(&sm).enumerate() {
            let expect = s - if j == 1 { 1.0 } else { 0.0 };
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap(), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_norm_squared_gives_x() {
        let mut g = Graph::new();
        let data = vec![0.3f64, -1.5, 2.0, 0.0];
        let x = g.leaf(Tensor::from_vec(data.clone()), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        for (gv, xv) in g.grad(x).unwrap().data().iter().zip(&data) {
            assert!((gv - xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0]), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardAlreadyRun)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn nan_in_forward_names_the_op() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1e308, 1e308]), false);
        let err = g.mul(x, x).unwrap_err();
        match err {
            TensorError::NonFinite { op } => assert_eq!(op, "mul"),
            e => panic!("wrong error {e}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = leaf2(&mut g, 2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]);
        let y = g.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_axis1_roundtrip_through_slice() {
        let mut g = Graph::new();
        let a = leaf2(&mut g, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf2(&mut g, 2, 1, vec![9.0, 8.0]);
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = g.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let y = g.gather_rows(x, vec![2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        // row 2 picked twice, row 1 never
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn unused_param_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0]), true);
        let unused = g.leaf(Tensor::from_vec(vec![5.0, 5.0]), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }
}
