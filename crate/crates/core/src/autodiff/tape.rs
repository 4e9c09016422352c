use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Relu(Var),
    MatMul(Var, Var, [usize; 3]),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample(Var, usize),
    Reshape(Var),
    Narrow {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Transpose(Var),
    Gather(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward operations so gradients can be propagated in reverse.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order; [`Tape::backward`] walks them back to front.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, moved out; `None` if the loss does not depend on it.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn softmax_slices(x: &Tensor) -> Tensor {
    let k = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for slice in out.chunks_mut(k) {
        let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in slice.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in slice.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_slices(x: &Tensor) -> Tensor {
    let k = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for slice in out.chunks_mut(k) {
        let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + slice.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in slice.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape")
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        self.push("add_scalar", v, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::abs);
        self.push("abs", v, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let v = Tensor::from_vec(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul(a, b, [m, k, n]))
    }

    /// Softmax over the last axis, stabilized by subtracting each slice's max.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = softmax_slices(self.value(x));
        self.push("softmax", v, Op::Softmax(x))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = log_softmax_slices(self.value(x));
        self.push("log_softmax", v, Op::LogSoftmax(x))
    }

    /// 2-D convolution of `x: [Cin, H, W]` with `kernel: [Cout, Cin, K, K]`,
    /// zero padding `pad` on every side and an optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != sk[3] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, kernel {sk:?}, stride {stride}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sk[0]),
                ));
            }
        }
        let k = sk[2];
        if sx[1] + 2 * pad < k || sx[2] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            in_ch: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            out_ch: sk[0],
            out_h: (sx[1] + 2 * pad - k) / stride + 1,
            out_w: (sx[2] + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        };
        let mut out = vec![0.0; geom.out_ch * geom.out_h * geom.out_w];
        conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            &mut out,
            &geom,
        );
        if let Some(b) = bias {
            let plane = geom.out_h * geom.out_w;
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                for o in &mut out[co * plane..(co + 1) * plane] {
                    *o += bv;
                }
            }
        }
        let v = Tensor::from_vec(vec![geom.out_ch, geom.out_h, geom.out_w], out)?;
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("{s:?} by {factor}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let srow = &src[(ch * h + oy / factor) * w..][..w];
                let orow = &mut out[(ch * oh + oy) * ow..][..ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    *o = srow[ox / factor];
                }
            }
        }
        let v = Tensor::from_vec(vec![c, oh, ow], out)?;
        self.push("upsample_nearest", v, Op::Upsample(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::from_vec(shape, out)?;
        self.push(
            "narrow",
            v,
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let v = transpose2(self.value(x).data(), s[0], s[1]);
        let v = Tensor::from_vec(vec![s[1], s[0]], v)?;
        self.push("transpose", v, Op::Transpose(x))
    }

    /// Picks `x[..., indices[n]]` for every slice `n` along the last axis.
    /// The result drops the last axis.
    pub fn gather_lastdim(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s
            .last()
            .ok_or_else(|| Error::shape("gather_lastdim", "rank 0"))?;
        let slices = self.value(x).len() / k.max(1);
        if indices.len() != slices || indices.iter().any(|&i| i >= k) {
            return Err(Error::shape(
                "gather_lastdim",
                format!("{} indices (< {k}) for {slices} slices", indices.len()),
            ));
        }
        let src = self.value(x).data();
        let out = indices
            .iter()
            .enumerate()
            .map(|(n, &i)| src[n * k + i])
            .collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::from_vec(shape, out)?;
        self.push("gather_lastdim", v, Op::Gather(x, indices.to_vec()))
    }

    /// Elementwise binary cross entropy between `sigmoid(x)` and `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        if self.value(x).len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", self.value(x).len(), targets.len()),
            ));
        }
        let xs = self.value(x);
        let data = xs
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let v = Tensor::from_vec(xs.shape().to_vec(), data)?;
        self.push("bce_with_logits", v, Op::BceWithLogits(x, targets.to_vec()))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self.shape(*a), |d| add_into(d, g.data()));
                accumulate(grads, *b, self.shape(*b), |d| add_into(d, g.data()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.shape(*a), |d| add_into(d, g.data()));
                accumulate(grads, *b, self.shape(*b), |d| {
                    for (d, &gv) in d.iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, self.shape(*a), |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g.data()).zip(vb) {
                        *d += gv * y;
                    }
                });
                accumulate(grads, *b, self.shape(*b), |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g.data()).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(x, c) => accumulate(grads, *x, self.shape(*x), |d| {
                for (d, &gv) in d.iter_mut().zip(g.data()) {
                    *d += c * gv;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(grads, *x, self.shape(*x), |d| add_into(d, g.data()))
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, self.shape(*x), |d| {
                    d.iter_mut().for_each(|d| *d += gv)
                })
            }
            Op::Mean(x) => {
                let gv = g.item() / self.value(*x).len() as f64;
                accumulate(grads, *x, self.shape(*x), |d| {
                    d.iter_mut().for_each(|d| *d += gv)
                })
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, self.shape(*x), |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g.data()).zip(vx) {
                        // subgradient at the kink is 0
                        if v > 0.0 {
                            *d += gv;
                        } else if v < 0.0 {
                            *d -= gv;
                        }
                    }
                })
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, self.shape(*x), |d| {
                    for ((d, &gv), &v) in d.iter_mut().zip(g.data()).zip(vx) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                })
            }
            Op::MatMul(a, b, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G * B^T
                let bt = transpose2(vb, k, n);
                accumulate(grads, *a, self.shape(*a), |d| {
                    matmul_into(g.data(), &bt, d, m, n, k)
                });
                // dB = A^T * G
                let at = transpose2(va, m, k);
                accumulate(grads, *b, self.shape(*b), |d| {
                    matmul_into(&at, g.data(), d, k, m, n)
                });
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().expect("rank >= 1");
                accumulate(grads, *x, self.shape(*x), |d| {
                    for ((d, y), gs) in d
                        .chunks_mut(k)
                        .zip(out.data().chunks(k))
                        .zip(g.data().chunks(k))
                    {
                        let dot: f64 = y.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in d.iter_mut().zip(y).zip(gs) {
                            *d += yv * (gv - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let k = *out.shape().last().expect("rank >= 1");
                accumulate(grads, *x, self.shape(*x), |d| {
                    for ((d, ls), gs) in d
                        .chunks_mut(k)
                        .zip(out.data().chunks(k))
                        .zip(g.data().chunks(k))
                    {
                        let total: f64 = gs.iter().sum();
                        for ((d, &l), &gv) in d.iter_mut().zip(ls).zip(gs) {
                            *d += gv - l.exp() * total;
                        }
                    }
                })
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (vx, vk) = (self.value(*x).data(), self.value(*kernel).data());
                accumulate(grads, *x, self.shape(*x), |d| {
                    conv_backward_input(g.data(), vk, d, geom)
                });
                accumulate(grads, *kernel, self.shape(*kernel), |d| {
                    conv_backward_kernel(g.data(), vx, d, geom)
                });
                if let Some(b) = bias {
                    let plane = geom.out_h * geom.out_w;
                    accumulate(grads, *b, self.shape(*b), |d| {
                        for (co, d) in d.iter_mut().enumerate() {
                            *d += g.data()[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Upsample(x, f) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * f, w * f);
                accumulate(grads, *x, s, |d| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            let grow = &g.data()[(ch * oh + oy) * ow..][..ow];
                            let drow = &mut d[(ch * h + oy / f) * w..][..w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                drow[ox / f] += gv;
                            }
                        }
                    }
                })
            }
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => accumulate(grads, *x, self.shape(*x), |d| {
                for o in 0..*outer {
                    let base = (o * axis_len + start) * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    add_into(&mut d[base..base + len * inner], src);
                }
            }),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                accumulate(grads, *x, s, |d| add_into(d, &transpose2(g.data(), c, r)))
            }
            Op::Gather(x, indices) => {
                let k = *self.shape(*x).last().expect("rank >= 1");
                accumulate(grads, *x, self.shape(*x), |d| {
                    for (n, (&i, &gv)) in indices.iter().zip(g.data()).enumerate() {
                        d[n * k + i] += gv;
                    }
                })
            }
            Op::BceWithLogits(x, targets) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, self.shape(*x), |d| {
                    for (((d, &gv), &z), &t) in d.iter_mut().zip(g.data()).zip(vx).zip(targets) {
                        *d += gv * (sigmoid(z) - t);
                    }
                })
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[var.0];
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose2(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Valid output index range `lo..hi` for kernel offset `kk` along one axis.
fn out_range(
    kk: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    // input coordinate = o * stride + kk - pad must lie in [0, in_len)
    let lo = if kk >= pad {
        0
    } else {
        (pad - kk).div_ceil(stride)
    };
    let hi = if in_len + pad > kk {
        ((in_len + pad - kk - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], kernel: &[f64], out: &mut [f64], g: &ConvGeom) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.out_ch {
        let o = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.in_ch {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (y0, y1) = out_range(ky, g.pad, g.stride, g.in_h, g.out_h);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.in_ch + ci) * g.k + ky) * g.k + kx];
                    let (x0, x1) = out_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &xin[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in x0..x1 {
                            orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(gout: &[f64], kernel: &[f64], dx: &mut [f64], g: &ConvGeom) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.out_ch {
        let go = &gout[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.in_ch {
            let dxi = &mut dx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (y0, y1) = out_range(ky, g.pad, g.stride, g.in_h, g.out_h);
                for kx in 0..g.k {
                    let wv = kernel[((co * g.in_ch + ci) * g.k + ky) * g.k + kx];
                    let (x0, x1) = out_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        let drow = &mut dxi[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in x0..x1 {
                            drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(gout: &[f64], x: &[f64], dk: &mut [f64], g: &ConvGeom) {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    for co in 0..g.out_ch {
        let go = &gout[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.in_ch {
            let xin = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (y0, y1) = out_range(ky, g.pad, g.stride, g.in_h, g.out_h);
                for kx in 0..g.k {
                    let (x0, x1) = out_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &xin[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in x0..x1 {
                            acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                    dk[((co * g.in_ch + ci) * g.k + ky) * g.k + kx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]))
            .unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn softmax_nll_gradient_identity() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let target = 2;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &logits)).unwrap();
        let ls = tape.log_softmax_lastdim(x).unwrap();
        let picked = tape.gather_lastdim(ls, &[target]).unwrap();
        let nll = tape.scale(picked, -1.0).unwrap();
        let loss = tape.sum(nll).unwrap();
        let g = tape.backward(loss).unwrap();

        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for (k, &gv) in g.get(x).unwrap().data().iter().enumerate() {
            let p = (logits[k] - max).exp() / z;
            let expected = p - if k == target { 1.0 } else { 0.0 };
            assert!((gv - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[1000.0, 1001.0, 999.0])).unwrap();
        let s = tape.softmax_lastdim(x).unwrap();
        let sum: f64 = tape.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, b).is_ok());
        assert!(tape.narrow(a, 1, 2, 2).is_err());
        assert!(tape.gather_lastdim(a, &[0]).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
        let x = tape.leaf(Tensor::scalar(1e308)).unwrap();
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 input channel 4x5, 2 output channels, stride 2, pad 1
        let xs: Vec<f64> = (0..20).map(|v| (v as f64 * 0.37).sin()).collect();
        let ks: Vec<f64> = (0..18).map(|v| (v as f64 * 0.61).cos()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4, 5], &xs)).unwrap();
        let k = tape.leaf(t(&[2, 1, 3, 3], &ks)).unwrap();
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 3]);
        for co in 0..2 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                acc += ks[co * 9 + ky * 3 + kx] * xs[iy as usize * 5 + ix as usize];
                            }
                        }
                    }
                    let got = tape.value(y).data()[(co * 2 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_repeats_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[1.0, 2.0])).unwrap();
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let a = tape.abs(x).unwrap();
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let y = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
    }

    #[test]
    fn bce_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.7, -2.0])).unwrap();
        let l = tape.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        let v = tape.value(l).data();
        let p0 = 1.0 / (1.0 + (-0.7f64).exp());
        let p1 = 1.0 / (1.0 + 2f64.exp());
        assert!((v[0] + p0.ln()).abs() < 1e-12);
        assert!((v[1] + (1.0 - p1).ln()).abs() < 1e-12);
    }
}
