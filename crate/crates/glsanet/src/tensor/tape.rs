//! Eager reverse-mode autodiff tape.
//!
//! Every operation computes its forward value immediately and appends a
//! record holding the node ids and whatever is needed for the
//! vector–Jacobian product. `backward` replays the records in reverse,
//! accumulating gradients over fan-out. Multiply–accumulate counts are
//! recorded at forward time on the tape-local [`MulAddCounter`].

use super::counter::MulAddCounter;
use super::raw;
use super::{check_concat, check_crop, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Node<T> {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone)]
enum OpKind<T> {
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: T },
    AddScalar { x: TensorId },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Softmax { x: TensorId, rows: usize, cols: usize },
    Linear { x: TensorId, w: TensorId, bias: Option<TensorId>, batch: usize, d_in: usize, d_out: usize },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    MatmulNT { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Conv2d { x: TensorId, w: TensorId, bias: Option<TensorId>, geom: ConvGeom },
    Depthwise { x: TensorId, w: TensorId, bias: Option<TensorId>, geom: ConvGeom },
    MeanAxes { x: TensorId, axes: Vec<usize> },
    SumAll { x: TensorId },
    Concat { parts: Vec<TensorId>, spans: Vec<usize>, axis: usize },
    Crop { x: TensorId, offsets: Vec<usize>, sizes: Vec<usize> },
    Reshape { x: TensorId },
    Bce { pred: TensorId, target: TensorId },
    CrossEntropy { logits: TensorId, class: usize },
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

struct Record<T> {
    out: TensorId,
    kind: OpKind<T>,
}

/// Forward/backward graph over one computation. Single-threaded by contract;
/// independent tapes may run concurrently.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    records: Vec<Record<T>>,
    counter: MulAddCounter,
    ran_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new(), counter: MulAddCounter::new(), ran_backward: false }
    }

    // ------------------------------------------------------------ nodes

    /// Register a tensor; it participates in backward iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> TensorId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Register a tensor that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> TensorId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(self.push_node(shape, data, requires_grad))
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { shape, data, needs_grad, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<T>, kind: OpKind<T>, inputs: &[TensorId]) -> TensorId {
        let needs = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        let out = self.push_node(shape, data, needs);
        self.records.push(Record { out, kind });
        out
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].numel()
    }

    /// Gradient accumulated by `backward`, if any reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy a node out as a standalone tensor (gradient attached when present).
    pub fn to_tensor(&self, id: TensorId) -> Tensor<T> {
        let node = &self.nodes[id.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone()).expect("node is consistent");
        t.requires_grad = node.needs_grad;
        t.grad = node.grad.clone();
        t
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn counter(&self) -> &MulAddCounter {
        &self.counter
    }

    // ------------------------------------------------------- elementwise

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), data, OpKind::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<T> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), data, OpKind::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        self.push_op(self.shape(x).to_vec(), data, OpKind::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: TensorId, c: T) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| v + c).collect();
        self.push_op(self.shape(x).to_vec(), data, OpKind::AddScalar { x }, &[x])
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        self.push_op(self.shape(x).to_vec(), data, OpKind::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<T> = self.data(x).iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        self.push_op(self.shape(x).to_vec(), data, OpKind::Sigmoid { x }, &[x])
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let cols = shape.last().copied().unwrap_or(1);
        let rows = self.numel(x) / cols;
        let mut data = vec![T::zero(); self.numel(x)];
        raw::softmax_rows(self.data(x), rows, cols, &mut data);
        self.push_op(shape, data, OpKind::Softmax { x, rows, cols }, &[x])
    }

    // ----------------------------------------------------------- linear

    /// Affine map over the last axis: `x[..., d_in] @ w[d_out, d_in]^T + bias`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let xshape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        if wshape.len() != 2 {
            return Err(Error::Dimension(format!("linear weight must be rank 2, got {wshape:?}")));
        }
        let (d_out, d_in) = (wshape[0], wshape[1]);
        if xshape.last().copied().unwrap_or(0) != d_in {
            return Err(Error::Dimension(format!(
                "linear input {xshape:?} does not end in d_in {d_in} (weight {wshape:?})"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::Dimension(format!(
                    "linear bias {:?} does not match d_out {}",
                    self.shape(b),
                    d_out
                )));
            }
        }
        let batch = self.numel(x) / d_in;
        let mut out_shape = xshape[..xshape.len() - 1].to_vec();
        out_shape.push(d_out);
        let mut data = vec![T::zero(); batch * d_out];
        raw::linear_fwd(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            batch,
            d_in,
            d_out,
            &mut data,
        );
        self.counter.record("linear", (batch * d_out * d_in) as u64);
        let inputs: Vec<TensorId> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push_op(out_shape, data, OpKind::Linear { x, w, bias, batch, d_in, d_out }, &inputs))
    }

    /// `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rank2(a, "matmul lhs")?;
        let (k2, n) = self.rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = vec![T::zero(); m * n];
        raw::matmul_acc(self.data(a), self.data(b), m, k, n, &mut data);
        self.counter.record("matmul", (m * k * n) as u64);
        Ok(self.push_op(vec![m, n], data, OpKind::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// `a[m,k] @ b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rank2(a, "matmul_nt lhs")?;
        let (n, k2) = self.rank2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = vec![T::zero(); m * n];
        raw::matmul_nt_acc(self.data(a), self.data(b), m, k, n, &mut data);
        self.counter.record("matmul", (m * k * n) as u64);
        Ok(self.push_op(vec![m, n], data, OpKind::MatmulNT { a, b, m, k, n }, &[a, b]))
    }

    fn rank2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} must be rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ------------------------------------------------------ convolutions

    /// Cross-correlation of `x[c_in,h,w]` with `w[c_out,c_in,kh,kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let geom = self.conv_geometry(x, w, bias, stride, pad, false)?;
        let mut data = vec![T::zero(); geom.c_out * geom.ho * geom.wo];
        raw::conv2d_fwd(
            self.data(x),
            geom.c_in,
            geom.h,
            geom.w,
            self.data(w),
            geom.c_out,
            geom.kh,
            geom.kw,
            bias.map(|b| self.data(b)),
            stride,
            pad,
            &mut data,
            geom.ho,
            geom.wo,
        );
        self.counter.record(
            "conv2d",
            (geom.c_out * geom.c_in * geom.kh * geom.kw * geom.ho * geom.wo) as u64,
        );
        let inputs: Vec<TensorId> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push_op(
            vec![geom.c_out, geom.ho, geom.wo],
            data,
            OpKind::Conv2d { x, w, bias, geom },
            &inputs,
        ))
    }

    /// Per-channel convolution: `x[c,h,w]` with `w[c,kh,kw]`; channels never mix.
    pub fn depthwise_conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let geom = self.conv_geometry(x, w, bias, stride, pad, true)?;
        let mut data = vec![T::zero(); geom.c_out * geom.ho * geom.wo];
        raw::depthwise_fwd(
            self.data(x),
            geom.c_in,
            geom.h,
            geom.w,
            self.data(w),
            geom.kh,
            geom.kw,
            bias.map(|b| self.data(b)),
            stride,
            pad,
            &mut data,
            geom.ho,
            geom.wo,
        );
        self.counter.record(
            "depthwise_conv2d",
            (geom.c_in * geom.kh * geom.kw * geom.ho * geom.wo) as u64,
        );
        let inputs: Vec<TensorId> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push_op(
            vec![geom.c_out, geom.ho, geom.wo],
            data,
            OpKind::Depthwise { x, w, bias, geom },
            &inputs,
        ))
    }

    fn conv_geometry(
        &self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<ConvGeom> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("conv input must be [C,H,W], got {xs:?}")));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = if depthwise {
            if ws.len() != 3 {
                return Err(Error::Dimension(format!(
                    "depthwise kernel must be [C,Kh,Kw], got {ws:?}"
                )));
            }
            if ws[0] != c_in {
                return Err(Error::Dimension(format!(
                    "depthwise kernel channels {:?} do not match input {:?}",
                    ws, xs
                )));
            }
            (c_in, ws[1], ws[2])
        } else {
            if ws.len() != 4 {
                return Err(Error::Dimension(format!(
                    "conv kernel must be [Cout,Cin,Kh,Kw], got {ws:?}"
                )));
            }
            if ws[1] != c_in {
                return Err(Error::Dimension(format!(
                    "kernel input channels {:?} do not match input {:?}",
                    ws, xs
                )));
            }
            (ws[0], ws[2], ws[3])
        };
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::Dimension(format!(
                    "conv bias {:?} does not match output channels {}",
                    self.shape(b),
                    c_out
                )));
            }
        }
        Ok(ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            ho: raw::conv_out_dim(h, pad, kh, stride),
            wo: raw::conv_out_dim(wd, pad, kw, stride),
            stride,
            pad,
        })
    }

    // ------------------------------------------------------- reductions

    /// Mean over the given axes; the output drops those axes.
    pub fn mean_axes(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() {
            return Err(Error::Config("mean_axes requires at least one axis".into()));
        }
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::Dimension(format!(
                "mean axis {bad} out of rank {} (shape {shape:?})",
                shape.len()
            )));
        }
        let (out_shape, out_stride_per_axis, count) = mean_layout(&shape, &axes);
        let mut data = vec![T::zero(); out_shape.iter().product::<usize>().max(1)];
        let inv = T::from_f64(1.0 / count as f64);
        for (flat, &v) in self.data(x).iter().enumerate() {
            data[map_reduced_index(flat, &shape, &out_stride_per_axis)] += v;
        }
        for v in &mut data {
            *v *= inv;
        }
        Ok(self.push_op(out_shape, data, OpKind::MeanAxes { x, axes }, &[x]))
    }

    /// Mean over the spatial axes of `[C,H,W]`, yielding `[C]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        if self.shape(x).len() != 3 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects [C,H,W], got {:?}",
                self.shape(x)
            )));
        }
        self.mean_axes(x, &[1, 2])
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v;
        }
        self.push_op(vec![], vec![acc], OpKind::SumAll { x }, &[x])
    }

    // ---------------------------------------------------------- shaping

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let (shape, spans) = check_concat(&shapes, axis)?;
        let mut data = vec![T::zero(); shape.iter().product()];
        {
            let slices: Vec<&[T]> = parts.iter().map(|&p| self.data(p)).collect();
            raw::concat_copy(&slices, &spans, axis, &shape, &mut data);
        }
        Ok(self.push_op(
            shape,
            data,
            OpKind::Concat { parts: parts.to_vec(), spans, axis },
            parts,
        ))
    }

    pub fn crop(&mut self, x: TensorId, offsets: &[usize], sizes: &[usize]) -> Result<TensorId> {
        check_crop(self.shape(x), offsets, sizes)?;
        let shape = self.shape(x).to_vec();
        let mut data = vec![T::zero(); sizes.iter().product()];
        raw::crop_copy(self.data(x), &shape, offsets, sizes, &mut data);
        Ok(self.push_op(
            sizes.to_vec(),
            data,
            OpKind::Crop { x, offsets: offsets.to_vec(), sizes: sizes.to_vec() },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), data, OpKind::Reshape { x }, &[x]))
    }

    // ------------------------------------------------------------ losses

    /// Mean binary cross entropy. Predictions are clamped to
    /// [1e-7, 1 - 1e-7] before the logs; targets receive no gradient.
    pub fn bce(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.check_same_shape(pred, target, "bce")?;
        let eps = T::from_f64(BCE_EPS);
        let n = T::from_f64(self.numel(pred) as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.data(pred).iter().zip(self.data(target)) {
            let p = clamp(p, eps, T::one() - eps);
            acc -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
        }
        let loss = acc / n;
        Ok(self.push_op(vec![], vec![loss], OpKind::Bce { pred, target }, &[pred, target]))
    }

    /// Cross entropy of a logit vector `[K]` against one class index
    /// (log-sum-exp folded in for stability).
    pub fn cross_entropy(&mut self, logits: TensorId, class: usize) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(Error::Dimension(format!("cross_entropy expects rank-1 logits, got {s:?}")));
        }
        let k = s[0];
        if class >= k {
            return Err(Error::Range(format!("class index {class} >= number of classes {k}")));
        }
        let x = self.data(logits);
        let mut maxv = x[0];
        for &v in &x[1..] {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for &v in x {
            sum += (v - maxv).exp();
        }
        let loss = maxv + sum.ln() - x[class];
        Ok(self.push_op(vec![], vec![loss], OpKind::CrossEntropy { logits, class }, &[logits]))
    }

    // ---------------------------------------------------------- backward

    /// Reverse pass from a single-element loss node. Populates `grad` on
    /// every requires-grad ancestor, summing over fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.ran_backward = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..self.records.len()).rev() {
            let out = self.records[i].out;
            if self.nodes[out.0].grad.is_none() {
                continue;
            }
            let kind = self.records[i].kind.clone();
            self.backward_op(out, kind);
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, delta: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backward_op(&mut self, out: TensorId, kind: OpKind<T>) {
        let d_out = self.nodes[out.0].grad.clone().expect("checked by caller");
        match kind {
            OpKind::Add { a, b } => {
                self.accum(a, d_out.clone());
                self.accum(b, d_out);
            }
            OpKind::Mul { a, b } => {
                if self.needs(a) {
                    let d: Vec<T> = d_out.iter().zip(self.data(b)).map(|(&g, &v)| g * v).collect();
                    self.accum(a, d);
                }
                if self.needs(b) {
                    let d: Vec<T> = d_out.iter().zip(self.data(a)).map(|(&g, &v)| g * v).collect();
                    self.accum(b, d);
                }
            }
            OpKind::Scale { x, c } => {
                let d: Vec<T> = d_out.iter().map(|&g| g * c).collect();
                self.accum(x, d);
            }
            OpKind::AddScalar { x } => {
                self.accum(x, d_out);
            }
            OpKind::Relu { x } => {
                let d: Vec<T> = d_out
                    .iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accum(x, d);
            }
            OpKind::Sigmoid { x } => {
                let d: Vec<T> = d_out
                    .iter()
                    .zip(self.data(out))
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accum(x, d);
            }
            OpKind::Softmax { x, rows, cols } => {
                let s = self.data(out);
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let grow = &d_out[r * cols..(r + 1) * cols];
                    let mut dotv = T::zero();
                    for (&g, &sv) in grow.iter().zip(srow) {
                        dotv += g * sv;
                    }
                    for (c, dv) in d[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        *dv = srow[c] * (grow[c] - dotv);
                    }
                }
                self.accum(x, d);
            }
            OpKind::Linear { x, w, bias, batch, d_in, d_out: dout } => {
                if self.needs(x) {
                    let mut dx = vec![T::zero(); batch * d_in];
                    raw::matmul_acc(&d_out, self.data(w), batch, dout, d_in, &mut dx);
                    self.accum(x, dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); dout * d_in];
                    // dw[o,i] = sum_b d_out[b,o] * x[b,i]
                    let xv = self.data(x);
                    for b in 0..batch {
                        let xrow = &xv[b * d_in..(b + 1) * d_in];
                        for o in 0..dout {
                            let g = d_out[b * dout + o];
                            for (dwv, &x1) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xrow) {
                                *dwv += g * x1;
                            }
                        }
                    }
                    self.accum(w, dw);
                }
                if let Some(bid) = bias {
                    if self.needs(bid) {
                        let mut db = vec![T::zero(); dout];
                        for b in 0..batch {
                            for (dbv, &g) in db.iter_mut().zip(&d_out[b * dout..(b + 1) * dout]) {
                                *dbv += g;
                            }
                        }
                        self.accum(bid, db);
                    }
                }
            }
            OpKind::Matmul { a, b, m, k, n } => {
                if self.needs(a) {
                    // dA = dOut @ B^T
                    let mut da = vec![T::zero(); m * k];
                    raw::matmul_nt_acc(&d_out, self.data(b), m, n, k, &mut da);
                    self.accum(a, da);
                }
                if self.needs(b) {
                    // dB = A^T @ dOut
                    let mut db = vec![T::zero(); k * n];
                    raw::matmul_tn_acc(self.data(a), &d_out, m, k, n, &mut db);
                    self.accum(b, db);
                }
            }
            OpKind::MatmulNT { a, b, m, k, n } => {
                if self.needs(a) {
                    // dA = dOut @ B
                    let mut da = vec![T::zero(); m * k];
                    raw::matmul_acc(&d_out, self.data(b), m, n, k, &mut da);
                    self.accum(a, da);
                }
                if self.needs(b) {
                    // dB = dOut^T @ A
                    let mut db = vec![T::zero(); n * k];
                    raw::matmul_tn_acc(&d_out, self.data(a), m, n, k, &mut db);
                    self.accum(b, db);
                }
            }
            OpKind::Conv2d { x, w, bias, geom } => {
                let g = geom;
                if self.needs(x) {
                    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
                    raw::conv2d_bwd_input(
                        &d_out,
                        self.data(w),
                        g.c_in,
                        g.h,
                        g.w,
                        g.c_out,
                        g.kh,
                        g.kw,
                        g.stride,
                        g.pad,
                        g.ho,
                        g.wo,
                        &mut dx,
                    );
                    self.accum(x, dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); g.c_out * g.c_in * g.kh * g.kw];
                    raw::conv2d_bwd_kernel(
                        self.data(x),
                        &d_out,
                        g.c_in,
                        g.h,
                        g.w,
                        g.c_out,
                        g.kh,
                        g.kw,
                        g.stride,
                        g.pad,
                        g.ho,
                        g.wo,
                        &mut dw,
                    );
                    self.accum(w, dw);
                }
                if let Some(bid) = bias {
                    if self.needs(bid) {
                        let mut db = vec![T::zero(); g.c_out];
                        raw::conv2d_bwd_bias(&d_out, g.c_out, g.ho * g.wo, &mut db);
                        self.accum(bid, db);
                    }
                }
            }
            OpKind::Depthwise { x, w, bias, geom } => {
                let g = geom;
                let needs_x = self.needs(x);
                let needs_w = self.needs(w);
                if needs_x || needs_w {
                    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
                    let mut dw = vec![T::zero(); g.c_in * g.kh * g.kw];
                    raw::depthwise_bwd(
                        self.data(x),
                        &d_out,
                        self.data(w),
                        g.c_in,
                        g.h,
                        g.w,
                        g.kh,
                        g.kw,
                        g.stride,
                        g.pad,
                        g.ho,
                        g.wo,
                        needs_x.then_some(&mut dx[..]),
                        needs_w.then_some(&mut dw[..]),
                    );
                    if needs_x {
                        self.accum(x, dx);
                    }
                    if needs_w {
                        self.accum(w, dw);
                    }
                }
                if let Some(bid) = bias {
                    if self.needs(bid) {
                        let mut db = vec![T::zero(); g.c_in];
                        raw::conv2d_bwd_bias(&d_out, g.c_in, g.ho * g.wo, &mut db);
                        self.accum(bid, db);
                    }
                }
            }
            OpKind::MeanAxes { x, axes } => {
                let shape = self.shape(x).to_vec();
                let (_, out_stride_per_axis, count) = mean_layout(&shape, &axes);
                let inv = T::from_f64(1.0 / count as f64);
                let mut d = vec![T::zero(); self.numel(x)];
                for (flat, dv) in d.iter_mut().enumerate() {
                    *dv = d_out[map_reduced_index(flat, &shape, &out_stride_per_axis)] * inv;
                }
                self.accum(x, d);
            }
            OpKind::SumAll { x } => {
                let g = d_out[0];
                self.accum(x, vec![g; self.numel(x)]);
            }
            OpKind::Concat { parts, spans, axis } => {
                let shape = self.shape(out).to_vec();
                let mut d_parts: Vec<Vec<T>> =
                    parts.iter().map(|&p| vec![T::zero(); self.numel(p)]).collect();
                raw::concat_split(&d_out, &spans, axis, &shape, &mut d_parts);
                for (&p, d) in parts.iter().zip(d_parts) {
                    self.accum(p, d);
                }
            }
            OpKind::Crop { x, offsets, sizes } => {
                let shape = self.shape(x).to_vec();
                let mut d = vec![T::zero(); self.numel(x)];
                raw::crop_scatter_add(&d_out, &shape, &offsets, &sizes, &mut d);
                self.accum(x, d);
            }
            OpKind::Reshape { x } => {
                self.accum(x, d_out);
            }
            OpKind::Bce { pred, target } => {
                // d/dp mean(-(t ln p + (1-t) ln(1-p))) = (p - t) / (p (1-p) n),
                // evaluated at the clamped prediction (pass-through at the clamp).
                if self.needs(pred) {
                    let eps = T::from_f64(BCE_EPS);
                    let n = T::from_f64(self.numel(pred) as f64);
                    let g = d_out[0];
                    let d: Vec<T> = self
                        .data(pred)
                        .iter()
                        .zip(self.data(target))
                        .map(|(&p, &t)| {
                            let p = clamp(p, eps, T::one() - eps);
                            g * (p - t) / (p * (T::one() - p) * n)
                        })
                        .collect();
                    self.accum(pred, d);
                }
            }
            OpKind::CrossEntropy { logits, class } => {
                if self.needs(logits) {
                    let x = self.data(logits);
                    let k = x.len();
                    let mut maxv = x[0];
                    for &v in &x[1..] {
                        if v > maxv {
                            maxv = v;
                        }
                    }
                    let mut sum = T::zero();
                    let mut d = vec![T::zero(); k];
                    for (dv, &v) in d.iter_mut().zip(x) {
                        let e = (v - maxv).exp();
                        *dv = e;
                        sum += e;
                    }
                    let g = d_out[0];
                    for (i, dv) in d.iter_mut().enumerate() {
                        let softmax = *dv / sum;
                        let onehot = if i == class { T::one() } else { T::zero() };
                        *dv = g * (softmax - onehot);
                    }
                    self.accum(logits, d);
                }
            }
        }
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-7;

fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Layout of a mean over `axes`: output shape, per-input-axis output stride
/// (0 on reduced axes), and the number of elements folded into each output.
fn mean_layout(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let reduced = |ax: usize| axes.contains(&ax);
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(ax, _)| !reduced(*ax)).map(|(_, &d)| d).collect();
    let mut out_stride = vec![0usize; shape.len()];
    let mut stride = 1usize;
    for ax in (0..shape.len()).rev() {
        if !reduced(ax) {
            out_stride[ax] = stride;
            stride *= shape[ax];
        }
    }
    let count: usize = axes.iter().map(|&ax| shape[ax]).product();
    (out_shape, out_stride, count)
}

/// Map a flat input index to its flat output index given per-axis strides.
#[inline]
fn map_reduced_index(flat: usize, shape: &[usize], out_stride: &[usize]) -> usize {
    let mut rem = flat;
    let mut out = 0usize;
    for ax in (0..shape.len()).rev() {
        let coord = rem % shape[ax];
        rem /= shape[ax];
        out += coord * out_stride[ax];
    }
    out
}
