//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value and the
//! handles it needs for the adjoint. `backward` sweeps the nodes in reverse
//! creation order, which is a reverse topological order by construction.

use crate::autodiff::kernels as k;
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

const NORM_FLOPS: u64 = 5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sin(Var),
    Ln(Var),
    Abs(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Pool { x: Var, ph: usize, pw: usize },
    Bilinear { x: Var, oh: usize, ow: usize },
    Depthwise { x: Var, kernel: Var },
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize, oh: usize, ow: usize },
    /// Scalar-valued fused ops keep d(out)/d(input) from the forward pass.
    LocalGrad { x: Var, dx: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: Option<FlopCounter>,
    scope: Vec<String>,
    label: String,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also tallies FLOPs per scope label.
    pub fn with_flop_counter() -> Self {
        Tape { flops: Some(FlopCounter::new()), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> Option<&FlopCounter> {
        self.flops.as_ref()
    }

    pub fn take_flops(&mut self) -> Option<FlopCounter> {
        self.flops.take()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
        self.label = self.scope.join(".");
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
        self.label = self.scope.join(".");
    }

    pub fn current_scope(&self) -> &str {
        &self.label
    }

    fn count(&mut self, flops: u64) {
        if let Some(c) = self.flops.as_mut() {
            c.add(&self.label, flops);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} at scope '{}'", self.label)));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            other => op_inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Input whose gradient is populated by `backward`.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
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

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, format!("expected rank-2 input, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::shape(op, format!("expected [H, W, C] input, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("[{m},{ka}] x [{kb},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        k::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n, false);
        self.count(2 * (m * ka * n) as u64);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let t = self.value(a).transpose2();
        self.push(t, Op::Transpose(a), "transpose")
    }

    /// `x · W + b` for `x: [L, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let n = self.value(a).numel() as u64;
        self.count(n);
        Tensor::new(self.shape(a), data)
    }

    fn unary(&mut self, a: Var, flops: u64, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let n = self.value(a).numel() as u64;
        self.count(flops * n);
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), "div")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "maximum", f64::max)?;
        self.push(t, Op::Maximum(a, b), "maximum")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "minimum", f64::min)?;
        self.push(t, Op::Minimum(a, b), "minimum")
    }

    /// Adds `b: [n]` to every row of `x: [.., n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        self.count(data.len() as u64);
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::AddRow(x, b), "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.unary(x, 1, |v| v * c)?;
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.unary(x, 1, |v| v + c)?;
        self.push(t, Op::AddScalar(x), "add_scalar")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, NORM_FLOPS, k::gelu)?;
        self.push(t, Op::Gelu(x), "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, NORM_FLOPS, k::sigmoid)?;
        self.push(t, Op::Sigmoid(x), "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, 1, f64::exp)?;
        self.push(t, Op::Exp(x), "exp")
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, 1, f64::sin)?;
        self.push(t, Op::Sin(x), "sin")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, 1, f64::ln)?;
        self.push(t, Op::Ln(x), "ln")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.unary(x, 1, f64::abs)?;
        self.push(t, Op::Abs(x), "abs")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let n = self.value(x).numel() as u64;
        self.count(n);
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.value(x).sum() / n as f64;
        self.count(n as u64);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        self.count(NORM_FLOPS * src.len() as u64);
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Softmax { x, outer, len, inner }, "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", format!("channels {c}, gamma {:?}", self.shape(gamma))));
        }
        if eps <= 0.0 {
            return Err(Error::Invalid("layer_norm eps must be positive".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        self.count(NORM_FLOPS * src.len() as u64);
        let t = Tensor::new(self.shape(x), out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Stacks rank-2 inputs along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (m, nx) = self.dims2(x, "concat_rows")?;
            if nx != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} vs {nx}")));
            }
            data.extend_from_slice(self.value(x).data());
            rows += m;
        }
        let t = Tensor::new(&[rows, n], data)?;
        self.push(t, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Joins rank-2 inputs side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, n) = self.dims2(x, "concat_cols")?;
            if mx != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {mx}")));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&x, &n) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for r in 0..m {
                data[r * total + off..r * total + off + n].copy_from_slice(&src[r * n..(r + 1) * n]);
            }
            off += n;
        }
        let t = Tensor::new(&[m, total], data)?;
        self.push(t, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::new(&[end - start, n], data)?;
        self.push(t, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let t = Tensor::new(&[m, w], data)?;
        self.push(t, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("select_rows", format!("indices {rows:?} for {m} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(&[rows.len(), n], data)?;
        self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, "select_rows")
    }

    // ---------------------------------------------------------------- spatial

    /// Adaptive average pooling of `[H, W, C]` to `[ph, pw, C]`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let (h, w, c) = self.dims3(x, "adaptive_avg_pool2d")?;
        if ph == 0 || pw == 0 {
            return Err(Error::shape("adaptive_avg_pool2d", "zero output size"));
        }
        let out = k::adaptive_avg_pool(self.value(x).data(), h, w, c, ph, pw);
        let summed: u64 = (0..ph)
            .flat_map(|i| (0..pw).map(move |j| (i, j)))
            .map(|(i, j)| {
                let (y0, y1) = k::pool_bin(i, h, ph);
                let (x0, x1) = k::pool_bin(j, w, pw);
                ((y1 - y0) * (x1 - x0) * c) as u64
            })
            .sum();
        self.count(summed);
        let t = Tensor::new(&[ph, pw, c], out)?;
        self.push(t, Op::Pool { x, ph, pw }, "adaptive_avg_pool2d")
    }

    /// Bilinear resize of `[H, W, C]` with the half-pixel convention.
    pub fn interpolate_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (h, w, c) = self.dims3(x, "interpolate_bilinear")?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("interpolate_bilinear", "zero output size"));
        }
        let out = k::bilinear(self.value(x).data(), h, w, c, oh, ow);
        self.count(8 * (oh * ow * c) as u64);
        let t = Tensor::new(&[oh, ow, c], out)?;
        self.push(t, Op::Bilinear { x, oh, ow }, "interpolate_bilinear")
    }

    /// Depthwise 3×3 correlation, zero padding 1, stride 1; kernel `[3, 3, C]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (h, w, c) = self.dims3(x, "depthwise_conv3x3")?;
        if self.shape(kernel) != [3, 3, c] {
            return Err(Error::shape(
                "depthwise_conv3x3",
                format!("kernel {:?} for {c} channels", self.shape(kernel)),
            ));
        }
        let out = k::depthwise3x3(self.value(x).data(), self.value(kernel).data(), h, w, c);
        self.count(18 * (h * w * c) as u64);
        let t = Tensor::new(&[h, w, c], out)?;
        self.push(t, Op::Depthwise { x, kernel }, "depthwise_conv3x3")
    }

    /// Patch extraction `[H, W, C] -> [OH·OW, k·k·C]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<(Var, usize, usize)> {
        let (h, w, c) = self.dims3(x, "im2col")?;
        let (oh, ow) = match (k::conv_out(h, kernel, stride, pad), k::conv_out(w, kernel, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {h}x{w} smaller than kernel {kernel} with padding {pad}"),
                ))
            }
        };
        let cols = k::im2col(self.value(x).data(), h, w, c, kernel, stride, pad, oh, ow);
        let t = Tensor::new(&[oh * ow, kernel * kernel * c], cols)?;
        let v = self.push(t, Op::Im2Col { x, kernel, stride, pad, oh, ow }, "im2col")?;
        Ok((v, oh, ow))
    }

    /// Dense 2-D convolution. `weight: [k·k·Cin, Cout]` (patch-major), `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (cols, oh, ow) = self.im2col(x, kernel, stride, pad)?;
        let y = self.linear(cols, weight, bias)?;
        let cout = self.shape(y)[1];
        self.reshape(y, &[oh, ow, cout])
    }

    // ---------------------------------------------------------------- fused losses

    /// `Σ −α·|t−p|^γ·[t ln p + (1−t) ln(1−p)]` with `p = clamp(σ(z), ε, 1−ε)`.
    pub fn sigmoid_focal_sum(&mut self, logits: Var, targets: &Tensor, gamma: f64, alpha: f64, eps: f64) -> Result<Var> {
        if targets.shape() != self.shape(logits) {
            return Err(Error::shape("sigmoid_focal", format!("{:?} vs {:?}", targets.shape(), self.shape(logits))));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        let mut dx = vec![0.0; z.len()];
        for (i, (&zi, &t)) in z.iter().zip(targets.data()).enumerate() {
            let (l, d) = focal_point(zi, t, gamma, alpha, eps);
            total += l;
            dx[i] = d;
        }
        self.count(NORM_FLOPS * z.len() as u64);
        self.push(Tensor::scalar(total), Op::LocalGrad { x: logits, dx }, "sigmoid_focal")
    }

    /// `Σ BCE(σ(z), t)` evaluated in the numerically stable logit form.
    pub fn bce_logits_sum(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if targets.shape() != self.shape(logits) {
            return Err(Error::shape("bce_logits", format!("{:?} vs {:?}", targets.shape(), self.shape(logits))));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        let mut dx = vec![0.0; z.len()];
        for (i, (&zi, &t)) in z.iter().zip(targets.data()).enumerate() {
            total += zi.max(0.0) - zi * t + (-zi.abs()).exp().ln_1p();
            dx[i] = k::sigmoid(zi) - t;
        }
        self.count(NORM_FLOPS * z.len() as u64);
        self.push(Tensor::scalar(total), Op::LocalGrad { x: logits, dx }, "bce_logits")
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` with respect to every leaf
    /// created with [`Tape::variable`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {i} ({:?})", op_name(&node.op))));
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of leaf {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, kk) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                acc(*a, &mut |ga| k::matmul_grad_a(g, val(*b), ga, m, kk, n));
                acc(*b, &mut |gb| k::matmul_grad_b(val(*a), g, gb, m, kk, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(nodes[i].op, Op::Maximum(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a = |j: usize| if is_max { av[j] >= bv[j] } else { av[j] <= bv[j] };
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if pick_a(j) {
                            ga[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        if !pick_a(j) {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = nodes[b.0].value.numel();
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |t: usize| (o * len + t) * inner + ii;
                            let dot: f64 = (0..len).map(|t| g[idx(t)] * out[idx(t)]).sum();
                            for t in 0..len {
                                gx[idx(t)] += out[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma);
                let c = gam.len();
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_gy = 0.0;
                        let mut mean_gyx = 0.0;
                        for j in 0..c {
                            let gy = go[j] * gam[j];
                            mean_gy += gy;
                            mean_gyx += gy * xh[j];
                        }
                        mean_gy /= c as f64;
                        mean_gyx /= c as f64;
                        for j in 0..c {
                            let gy = go[j] * gam[j];
                            gx[r * c + j] += rs * (gy - mean_gy - xh[j] * mean_gyx);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (go, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for go in g.chunks(c) {
                        add_into(gb, go);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * k::gelu_grad(xv[j]);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * out[j];
                }
            }),
            Op::Sin(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * xv[j].cos();
                    }
                });
            }
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * if xv[j] > 0.0 { 1.0 } else if xv[j] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = nodes[x.0].value.numel();
                    acc(*x, &mut |gx| add_into(gx, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let m = nodes[i].value.shape()[0];
                let total = nodes[i].value.shape()[1];
                let mut off = 0;
                for x in xs {
                    let n = nodes[x.0].value.shape()[1];
                    acc(*x, &mut |gx| {
                        for r in 0..m {
                            add_into(&mut gx[r * n..(r + 1) * n], &g[r * total + off..r * total + off + n]);
                        }
                    });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.shape()[1];
                let w = nodes[i].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + w], row);
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let n = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[j * n..(j + 1) * n]);
                    }
                });
            }
            Op::Pool { x, ph, pw } => {
                let s = nodes[x.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| k::adaptive_avg_pool_backward(g, gx, h, w, c, *ph, *pw));
            }
            Op::Bilinear { x, oh, ow } => {
                let s = nodes[x.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| k::bilinear_backward(g, gx, h, w, c, *oh, *ow));
            }
            Op::Depthwise { x, kernel } => {
                let s = nodes[x.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let (xv, kv) = (val(*x), val(*kernel));
                acc(*x, &mut |gx| k::depthwise3x3_backward(g, xv, kv, Some(gx), None, h, w, c));
                acc(*kernel, &mut |gk| k::depthwise3x3_backward(g, xv, kv, None, Some(gk), h, w, c));
            }
            Op::Im2Col { x, kernel, stride, pad, oh, ow } => {
                let s = nodes[x.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| k::im2col_backward(g, gx, h, w, c, *kernel, *stride, *pad, *oh, *ow));
            }
            Op::LocalGrad { x, dx } => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[0] * dx[j];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Maximum(a, b)
        | Op::Minimum(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Gelu(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Sin(x)
        | Op::Ln(x)
        | Op::Abs(x)
        | Op::Reshape(x) => vec![*x],
        Op::Softmax { x, .. }
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SelectRows { x, .. }
        | Op::Pool { x, .. }
        | Op::Bilinear { x, .. }
        | Op::Im2Col { x, .. }
        | Op::LocalGrad { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Depthwise { x, kernel } => vec![*x, *kernel],
        Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Maximum(..) => "maximum",
        Op::Minimum(..) => "minimum",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Sin(..) => "sin",
        Op::Ln(..) => "ln",
        Op::Abs(..) => "abs",
        Op::Reshape(..) => "reshape",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SelectRows { .. } => "select_rows",
        Op::Pool { .. } => "adaptive_avg_pool2d",
        Op::Bilinear { .. } => "interpolate_bilinear",
        Op::Depthwise { .. } => "depthwise_conv3x3",
        Op::Im2Col { .. } => "im2col",
        Op::LocalGrad { .. } => "fused_loss",
    }
}

/// Soft-target focal term and its derivative with respect to the logit.
pub(crate) fn focal_point(z: f64, t: f64, gamma: f64, alpha: f64, eps: f64) -> (f64, f64) {
    let raw = k::sigmoid(z);
    let p = raw.clamp(eps, 1.0 - eps);
    let clamped = raw < eps || raw > 1.0 - eps;
    let ce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    let d = (t - p).abs();
    let modulator = d.powf(gamma);
    let loss = alpha * modulator * ce;
    if clamped {
        return (loss, 0.0);
    }
    // d|t-p|^γ/dp = γ|t-p|^(γ-1)·sign(p-t)
    let dmod = if d == 0.0 { 0.0 } else { gamma * d.powf(gamma - 1.0) * (p - t).signum() };
    let dce = -(t / p - (1.0 - t) / (1.0 - p));
    let dloss_dp = alpha * (dmod * ce + modulator * dce);
    (loss, dloss_dp * raw * (1.0 - raw))
}
