//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node
//! holding its output value and the [`Var`]s it read; [`Graph::backward`]
//! walks the tape in reverse and sums contributions over every use of a
//! node, which is what makes shared weights receive the total gradient of
//! all their applications.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::par::Exec;
use crate::tensor::Tensor;

/// Handle to a node of the [`Graph`] that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        in_channels: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Clamp(Var, f32, f32),
    Concat { parts: Vec<Var>, axis: usize },
    Upsample2x(Var),
    MeanAxis { x: Var, axis: usize },
    Mean(Var),
    Sum(Var),
    L1Loss(Var, Var),
    L2Loss(Var, Var),
    SpatialGradient(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it does not require grad or does
    /// not reach the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    /// A graph whose batched kernels run sequentially.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            exec: Exec::Sequential,
        }
    }

    /// A graph whose convolutions fan out over the batch axis per `exec`.
    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.clear_grad();
        self.push(t, Op::Leaf, requires_grad)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ------------------------------------------------------------------
    // Convolutions
    // ------------------------------------------------------------------

    /// 2-D convolution: `x` is `B×Cin×H×W`, `kernel` is `Cout×Cin×kh×kw`,
    /// `bias` has `Cout` entries. Zero padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return dim_err(OP, format!("expected 4-D input and kernel, got {xs:?} and {ks:?}"));
        }
        self.conv_nd(
            OP,
            x,
            kernel,
            bias,
            [xs[0], xs[1], 1, xs[2], xs[3]],
            [ks[0], ks[1], 1, ks[2], ks[3]],
            [1, stride, stride],
            [0, padding, padding],
            4,
        )
    }

    /// 3-D convolution: `x` is `B×Cin×D×H×W`, `kernel` is `Cout×Cin×kd×kh×kw`.
    /// Stride and padding are given per axis (depth, height, width).
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        const OP: &str = "conv3d";
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 5 || ks.len() != 5 {
            return dim_err(OP, format!("expected 5-D input and kernel, got {xs:?} and {ks:?}"));
        }
        self.conv_nd(
            OP,
            x,
            kernel,
            bias,
            [xs[0], xs[1], xs[2], xs[3], xs[4]],
            [ks[0], ks[1], ks[2], ks[3], ks[4]],
            stride,
            padding,
            5,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_nd(
        &mut self,
        op: &'static str,
        x: Var,
        kernel: Var,
        bias: Var,
        xs: [usize; 5],
        ks: [usize; 5],
        stride: [usize; 3],
        padding: [usize; 3],
        out_rank: usize,
    ) -> Result<Var> {
        let [batch, cin, d, h, w] = xs;
        let [cout, kcin, kd, kh, kw] = ks;
        if kcin != cin {
            return dim_err(op, format!("input has {cin} channels but kernel expects {kcin}"));
        }
        if self.shape(bias) != [cout] {
            return dim_err(op, format!("bias shape {:?} != [{cout}]", self.shape(bias)));
        }
        let geom = ConvGeom::new(cin, [d, h, w], [kd, kh, kw], stride, padding).ok_or_else(|| {
            TensorError::Dimension {
                op,
                detail: format!(
                    "kernel {:?} with stride {stride:?} and padding {padding:?} yields an empty output for input {:?}",
                    [kd, kh, kw],
                    [d, h, w]
                ),
            }
        })?;
        let out = kernels::conv_forward(
            self.exec,
            self.data(x),
            batch,
            &geom,
            self.data(kernel),
            self.data(bias),
        );
        let [od, oh, ow] = geom.out_dims;
        let shape = if out_rank == 4 {
            vec![batch, cout, oh, ow]
        } else {
            vec![batch, cout, od, oh, ow]
        };
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv {
                x,
                w: kernel,
                b: bias,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// Transposed 2-D convolution (no padding): `x` is `B×Cin×H×W`, `kernel`
    /// is `Cin×Cout×kh×kw`; output is `B×Cout×((H−1)·stride+kh)×((W−1)·stride+kw)`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return dim_err(OP, format!("expected 4-D input and kernel, got {xs:?} and {ks:?}"));
        }
        if stride == 0 {
            return dim_err(OP, "stride must be at least 1");
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kcin, cout, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return dim_err(OP, format!("input has {cin} channels but kernel expects {kcin}"));
        }
        if self.shape(bias) != [cout] {
            return dim_err(OP, format!("bias shape {:?} != [{cout}]", self.shape(bias)));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let geom = ConvGeom::new(cout, [1, oh, ow], [1, kh, kw], [1, stride, stride], [0, 0, 0])
            .expect("transposed output always fits its kernel");
        debug_assert_eq!(geom.out_dims, [1, h, w]);
        let out = kernels::conv_transpose_forward(
            self.exec,
            self.data(x),
            batch,
            cin,
            &geom,
            self.data(kernel),
            self.data(bias),
        );
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, oh, ow], out),
            Op::ConvTranspose {
                x,
                w: kernel,
                b: bias,
                geom,
                batch,
                in_channels: cin,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, node: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return dim_err(op, format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()));
        }
        let out = ta.zip_map(tb, f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(OP, format!("axis {axis} out of range for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(OP, format!("{s:?} incompatible with {base:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return dim_err("upsample2x", format!("rank {} < 2", s.len()));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let src = self.data(x);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dp[y * 2 * w + x] = sp[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Upsample2x(x), rg))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return dim_err("mean_axis", format!("axis {axis} invalid for shape {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= n as f32);
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, rg))
    }

    // ------------------------------------------------------------------
    // Reductions and losses
    // ------------------------------------------------------------------

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `mean(|a − b|)`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape("l1_loss", tb)?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs() as f64)
            .sum();
        let v = (s / ta.len() as f64) as f32;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::L1Loss(a, b), rg))
    }

    /// `mean((a − b)²)`.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape("l2_loss", tb)?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let v = (s / ta.len() as f64) as f32;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::L2Loss(a, b), rg))
    }

    /// Per-plane gradient magnitude `√(dx² + dy²)` over the last two axes,
    /// using forward differences with the last row/column replicated (so the
    /// difference across the border is zero).
    pub fn spatial_gradient(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return dim_err("spatial_gradient", format!("needs H, W >= 2, got {s:?}"));
        }
        let out = spatial_gradient_forward(self.value(x));
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SpatialGradient(x), rg))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients are summed over every
    /// use of each node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got {n} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, batch } => {
                let cout = self.shape(*b)[0];
                let r = kernels::conv_backward(
                    self.exec,
                    self.data(*x),
                    *batch,
                    geom,
                    self.data(*w),
                    cout,
                    g,
                    rg(*x),
                );
                if let Some(dx) = r.dx {
                    accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    accumulate(grads, *w, r.dw);
                }
                if rg(*b) {
                    accumulate(grads, *b, r.db);
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                batch,
                in_channels,
            } => {
                let r = kernels::conv_transpose_backward(
                    self.exec,
                    self.data(*x),
                    *batch,
                    *in_channels,
                    geom,
                    self.data(*w),
                    g,
                    rg(*x),
                );
                if let Some(dx) = r.dx {
                    accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    accumulate(grads, *w, r.dw);
                }
                if rg(*b) {
                    accumulate(grads, *b, r.db);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::LeakyRelu(x, slope) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if rg(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += chunk;
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*x).len() / (h * w);
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dp[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::MeanAxis { x, axis } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let n = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = vec![0.0; outer * n * inner];
                let inv = 1.0 / n as f32;
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        let dst = &mut d[(o * n + k) * inner..(o * n + k + 1) * inner];
                        dst.iter_mut().zip(go).for_each(|(d, &v)| *d = v * inv);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::L1Loss(a, b) => {
                let n = self.value(*a).len() as f32;
                let d: Vec<f32> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| g[0] * sign(x - y) / n)
                    .collect();
                if rg(*b) {
                    accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                if rg(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::L2Loss(a, b) => {
                let n = self.value(*a).len() as f32;
                let d: Vec<f32> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| g[0] * 2.0 * (x - y) / n)
                    .collect();
                if rg(*b) {
                    accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                if rg(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::SpatialGradient(x) => {
                let d = spatial_gradient_backward(self.value(*x), &node.value, g);
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn plane_dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (t.len() / (h * w), h, w)
}

fn forward_diffs(p: &[f32], h: usize, w: usize, y: usize, x: usize) -> (f32, f32) {
    let v = p[y * w + x];
    let dx = if x + 1 < w { p[y * w + x + 1] - v } else { 0.0 };
    let dy = if y + 1 < h { p[(y + 1) * w + x] - v } else { 0.0 };
    (dx, dy)
}

pub(crate) fn spatial_gradient_forward(t: &Tensor) -> Tensor {
    let (planes, h, w) = plane_dims(t);
    let mut out = vec![0.0; t.len()];
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = forward_diffs(src, h, w, y, x);
                dst[y * w + x] = (dx * dx + dy * dy).sqrt();
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// The magnitude is not differentiable where both differences vanish; the
/// subgradient zero is used there.
fn spatial_gradient_backward(input: &Tensor, mag: &Tensor, g: &[f32]) -> Vec<f32> {
    let (planes, h, w) = plane_dims(input);
    let mut d = vec![0.0; input.len()];
    for p in 0..planes {
        let off = p * h * w;
        let src = &input.data()[off..off + h * w];
        for y in 0..h {
            for x in 0..w {
                let m = mag.data()[off + y * w + x];
                if m <= 0.0 {
                    continue;
                }
                let (dx, dy) = forward_diffs(src, h, w, y, x);
                let gm = g[off + y * w + x] / m;
                let i = off + y * w + x;
                if x + 1 < w {
                    d[i + 1] += gm * dx;
                    d[i] -= gm * dx;
                }
                if y + 1 < h {
                    d[i + w] += gm * dy;
                    d[i] -= gm * dy;
                }
            }
        }
    }
    d
}
