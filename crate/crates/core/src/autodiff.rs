//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] replays the nodes
//! in reverse and accumulates (`+=`) into the gradient buffer of every input
//! that requires a gradient. Leaf gradients persist across `backward` calls
//! until [`Tape::zero_grad`]; intermediate gradients are rebuilt per call.

use crate::tensor::{matmul, Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Stride, zero-padding and dilation of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent for input extent `size` and kernel size `k`.
    pub fn output_extent(&self, size: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = size + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// How a per-sample loss reduces over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Probability clamp applied before the logarithms of cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    SquaredError {
        input: Var,
        target: Vec<f64>,
    },
    BinaryCrossEntropy {
        input: Var,
        truth: Tensor<T>,
        reduction: Reduction,
    },
}

/// Recording of one forward computation.
pub struct Tape<T: Element = f32> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op<T>>,
    checked: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A tape in checked mode: every op output is verified finite.
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
            checked: true,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.values.clear();
        self.grads.clear();
        self.requires_grad.clear();
        self.ops.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.values[var.0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.requires_grad[var.0]
    }

    /// Accumulated gradient, if any contribution reached `var`.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.values[var.0].shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.requires_grad[v.0]);
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    // ------------------------------------------------------------------
    // Forward ops
    // ------------------------------------------------------------------

    /// 2-D cross-correlation with square kernels and zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        const OP: &str = "conv2d";
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(TensorError::invalid(OP, "stride and dilation must be >= 1"));
        }
        let x = &self.values[input.0];
        let w = &self.values[weight.0];
        let b = &self.values[bias.0];
        let [n, cin, h, wd] = x.dims4(OP)?;
        let [cout, wcin, kh, kw] = w.dims4(OP)?;
        if kh != kw || kh == 0 {
            return Err(TensorError::invalid(OP, format!("kernel must be square and non-empty, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(TensorError::shape(OP, format!("weight Cin {cin}"), wcin));
        }
        if b.shape() != [cout] {
            return Err(TensorError::shape(OP, [cout], b.shape()));
        }
        let k = kh;
        let (Some(ho), Some(wo)) = (geom.output_extent(h, k), geom.output_extent(wd, k)) else {
            return Err(TensorError::EmptyOutput { op: OP });
        };
        let kdim = cin * k * k;
        let plane_out = ho * wo;
        let mut out = vec![T::zero(); n * cout * plane_out];
        let mut col = Vec::new();
        for s in 0..n {
            let xs = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let cols: &[T] = if geom.is_pointwise(k) {
                xs
            } else {
                im2col(xs, cin, h, wd, k, geom, ho, wo, &mut col);
                &col
            };
            let os = &mut out[s * cout * plane_out..(s + 1) * cout * plane_out];
            matmul(false, false, cout, plane_out, kdim, w.data(), cols, T::zero(), os);
            for (co, row) in os.chunks_exact_mut(plane_out).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new([n, cout, ho, wo], out)?;
        self.push(OP, value, &[input, weight, bias], Op::Conv2d { input, weight, bias, geom })
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "max_pool2";
        let x = &self.values[input.0];
        let [n, c, h, w] = x.dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(TensorError::invalid(OP, format!("spatial extent {h}x{w} must be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let data = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // Strict comparison keeps the first cell in scan order on ties.
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.push(OP, value, &[input], Op::MaxPool2 { input, argmax })
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let x = &self.values[input.0];
        let [n, c, h, w] = x.dims4(OP)?;
        if h == 0 || w == 0 {
            return Err(TensorError::EmptyOutput { op: OP });
        }
        let plane = h * w;
        let out = x
            .data()
            .chunks_exact(plane)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let value = Tensor::new([n, c], out)?;
        self.push(OP, value, &[input], Op::GlobalAvgPool { input })
    }

    /// Affine map `x W^T + b` for `x: [N, F]`, `W: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let x = &self.values[input.0];
        let w = &self.values[weight.0];
        let b = &self.values[bias.0];
        let (n, f) = match x.shape() {
            &[n, f] => (n, f),
            s => return Err(TensorError::shape(OP, "[N, F]", s)),
        };
        let o = match w.shape() {
            &[o, wf] if wf == f => o,
            s => return Err(TensorError::shape(OP, format!("[O, {f}]"), s)),
        };
        if b.shape() != [o] {
            return Err(TensorError::shape(OP, [o], b.shape()));
        }
        let mut out = vec![T::zero(); n * o];
        for row in 0..n {
            let xr = &x.data()[row * f..(row + 1) * f];
            for j in 0..o {
                let wr = &w.data()[j * f..(j + 1) * f];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                out[row * o + j] = T::from_f64(dot + b.data()[j].as_f64());
            }
        }
        let value = Tensor::new([n, o], out)?;
        self.push(OP, value, &[input, weight, bias], Op::Linear { input, weight, bias })
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.values[input.0];
        let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), out)?;
        self.push("relu", value, &[input], Op::Relu { input })
    }

    /// Logistic sigmoid; outputs are kept strictly inside `(0, 1)` at the
    /// storage precision.
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = &self.values[input.0];
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::from_f64(2.0);
        let out = x
            .data()
            .iter()
            .map(|&v| {
                let s = T::from_f64(1.0 / (1.0 + (-v.as_f64()).exp()));
                s.max(lo).min(hi)
            })
            .collect();
        let value = Tensor::new(x.shape(), out)?;
        self.push("sigmoid", value, &[input], Op::Sigmoid { input })
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres and
    /// edge clamping.
    pub fn bilinear_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        const OP: &str = "bilinear_upsample";
        if factor == 0 {
            return Err(TensorError::invalid(OP, "factor must be >= 1"));
        }
        let x = &self.values[input.0];
        let [n, c, h, w] = x.dims4(OP)?;
        let (ho, wo) = (h * factor, w * factor);
        let rows = interp_taps(h, factor);
        let cols = interp_taps(w, factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in x.data().chunks_exact(h * w) {
            for &(r0, r1, fy) in &rows {
                for &(c0, c1, fx) in &cols {
                    let top = plane[r0 * w + c0].as_f64() * (1.0 - fx) + plane[r0 * w + c1].as_f64() * fx;
                    let bot = plane[r1 * w + c0].as_f64() * (1.0 - fx) + plane[r1 * w + c1].as_f64() * fx;
                    out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        self.push(OP, value, &[input], Op::Upsample { input, factor })
    }

    /// Channel-axis concatenation of two `[N, C, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let xa = &self.values[a.0];
        let xb = &self.values[b.0];
        let [n, ca, h, w] = xa.dims4(OP)?;
        let [nb, cb, hb, wb] = xb.dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::shape(OP, [n, h, w], [nb, hb, wb]));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&xa.data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&xb.data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        self.push(OP, value, &[a, b], Op::Concat { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let xa = &self.values[a.0];
        let xb = &self.values[b.0];
        if xa.shape() != xb.shape() {
            return Err(TensorError::shape("add", xa.shape(), xb.shape()));
        }
        let out = xa.data().iter().zip(xb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(xa.shape(), out)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = &self.values[input.0];
        let out = x.data().iter().map(|v| T::from_f64(v.as_f64() * factor)).collect();
        let value = Tensor::new(x.shape(), out)?;
        self.push("scale", value, &[input], Op::Scale { input, factor })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.values[input.0].sum_f64();
        self.push("sum", Tensor::scalar(T::from_f64(total)), &[input], Op::Sum { input })
    }

    /// `sum_i weights[i] * x[i]` as a scalar, over all elements of `x`.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let x = &self.values[input.0];
        if weights.len() != x.numel() {
            return Err(TensorError::shape("weighted_sum", x.numel(), weights.len()));
        }
        let total: f64 = x.data().iter().zip(&weights).map(|(v, w)| v.as_f64() * w).sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(T::from_f64(total)),
            &[input],
            Op::WeightedSum { input, weights },
        )
    }

    /// Per-sample `(target - x)^2` for predictions shaped `[N]` or `[N, 1]`;
    /// output is `[N]`.
    pub fn squared_error(&mut self, input: Var, target: Vec<f64>) -> Result<Var> {
        const OP: &str = "squared_error";
        let x = &self.values[input.0];
        let n = match x.shape() {
            &[n] | &[n, 1] => n,
            s => return Err(TensorError::shape(OP, "[N] or [N, 1]", s)),
        };
        if target.len() != n {
            return Err(TensorError::shape(OP, n, target.len()));
        }
        let out = x
            .data()
            .iter()
            .zip(&target)
            .map(|(p, t)| T::from_f64((t - p.as_f64()).powi(2)))
            .collect();
        let value = Tensor::new([n], out)?;
        self.push(OP, value, &[input], Op::SquaredError { input, target })
    }

    /// Per-sample binary cross-entropy between probabilities `[N, 1, H, W]`
    /// and a same-shape binary truth; output is `[N]`.
    ///
    /// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
    /// logarithms; the clamp's derivative (zero outside the range) is used.
    pub fn binary_cross_entropy(&mut self, input: Var, truth: Tensor<T>, reduction: Reduction) -> Result<Var> {
        const OP: &str = "binary_cross_entropy";
        let p = &self.values[input.0];
        let [n, _, _, _] = p.dims4(OP)?;
        if truth.shape() != p.shape() {
            return Err(TensorError::shape(OP, p.shape(), truth.shape()));
        }
        if truth.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(TensorError::invalid(OP, "truth must be binary"));
        }
        let per = p.numel() / n.max(1);
        let out = p
            .data()
            .chunks_exact(per.max(1))
            .zip(truth.data().chunks_exact(per.max(1)))
            .map(|(ps, xs)| {
                let total: f64 = ps
                    .iter()
                    .zip(xs)
                    .map(|(&q, &x)| {
                        let q = q.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        if x == T::one() {
                            -q.ln()
                        } else {
                            -(1.0 - q).ln()
                        }
                    })
                    .sum();
                T::from_f64(match reduction {
                    Reduction::Mean => total / per as f64,
                    Reduction::Sum => total,
                })
            })
            .collect();
        let value = Tensor::new([n], out)?;
        self.push(OP, value, &[input], Op::BinaryCrossEntropy { input, truth, reduction })
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.values[loss.0].shape().to_vec();
        if !self.values[loss.0].is_scalar() {
            return Err(TensorError::NonScalar(shape));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if !matches!(op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        let seed = Tensor::full(shape, T::one());
        match &mut self.grads[loss.0] {
            Some(g) => g.add_assign(&seed),
            slot @ None => *slot = Some(seed),
        }

        let Tape {
            values,
            grads,
            requires_grad,
            ops,
            ..
        } = self;
        for i in (0..=loss.0).rev() {
            if !requires_grad[i] || matches!(ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let values: &[Tensor<T>] = values;
            backward_op(&ops[i], &g, &values[i], values, grads, requires_grad);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Gradient buffer of `var`, created as zeros on first use.
fn slot<'a, T: Element>(grads: &'a mut [Option<Tensor<T>>], values: &[Tensor<T>], var: Var) -> &'a mut Tensor<T> {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(values[var.0].shape()))
}

fn backward_op<T: Element>(
    op: &Op<T>,
    g: &Tensor<T>,
    out: &Tensor<T>,
    values: &[Tensor<T>],
    grads: &mut [Option<Tensor<T>>],
    requires_grad: &[bool],
) {
    let needs = |v: &Var| requires_grad[v.0];
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => conv2d_backward(*input, *weight, *bias, *geom, g, values, grads, requires_grad),
        Op::MaxPool2 { input, argmax } => {
            if needs(input) {
                let gi = slot(grads, values, *input).data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    gi[idx as usize] = gi[idx as usize] + gv;
                }
            }
        }
        Op::GlobalAvgPool { input } => {
            if needs(input) {
                let [_, _, h, w] = values[input.0].dims4("global_avg_pool").expect("rank checked in forward");
                let plane = h * w;
                let inv = T::from_f64(1.0 / plane as f64);
                let gi = slot(grads, values, *input).data_mut();
                for (chunk, &gv) in gi.chunks_exact_mut(plane).zip(g.data()) {
                    let share = gv * inv;
                    chunk.iter_mut().for_each(|v| *v = *v + share);
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let x = &values[input.0];
            let w = &values[weight.0];
            let (n, f) = (x.shape()[0], x.shape()[1]);
            let o = w.shape()[0];
            if needs(input) {
                let wd = w.data();
                let gi = slot(grads, values, *input).data_mut();
                for row in 0..n {
                    for col in 0..f {
                        let acc: f64 = (0..o).map(|j| g.data()[row * o + j].as_f64() * wd[j * f + col].as_f64()).sum();
                        gi[row * f + col] = gi[row * f + col] + T::from_f64(acc);
                    }
                }
            }
            if needs(weight) {
                let xd = x.data();
                let gw = slot(grads, values, *weight).data_mut();
                for j in 0..o {
                    for col in 0..f {
                        let acc: f64 = (0..n).map(|row| g.data()[row * o + j].as_f64() * xd[row * f + col].as_f64()).sum();
                        gw[j * f + col] = gw[j * f + col] + T::from_f64(acc);
                    }
                }
            }
            if needs(bias) {
                let gb = slot(grads, values, *bias).data_mut();
                for j in 0..o {
                    let acc: f64 = (0..n).map(|row| g.data()[row * o + j].as_f64()).sum();
                    gb[j] = gb[j] + T::from_f64(acc);
                }
            }
        }
        Op::Relu { input } => {
            if needs(input) {
                let x = values[input.0].data();
                let gi = slot(grads, values, *input).data_mut();
                for ((acc, &xv), &gv) in gi.iter_mut().zip(x).zip(g.data()) {
                    if xv > T::zero() {
                        *acc = *acc + gv;
                    }
                }
            }
        }
        Op::Sigmoid { input } => {
            if needs(input) {
                let gi = slot(grads, values, *input).data_mut();
                for ((acc, &s), &gv) in gi.iter_mut().zip(out.data()).zip(g.data()) {
                    *acc = *acc + gv * s * (T::one() - s);
                }
            }
        }
        Op::Upsample { input, factor } => {
            if needs(input) {
                let [_, _, h, w] = values[input.0].dims4("bilinear_upsample").expect("rank checked in forward");
                let rows = interp_taps(h, *factor);
                let cols = interp_taps(w, *factor);
                let wo = w * factor;
                let plane_out = h * factor * wo;
                let gi = slot(grads, values, *input).data_mut();
                for (gin, gout) in gi.chunks_exact_mut(h * w).zip(g.data().chunks_exact(plane_out)) {
                    let mut acc = vec![0.0f64; h * w];
                    for (oy, &(r0, r1, fy)) in rows.iter().enumerate() {
                        for (ox, &(c0, c1, fx)) in cols.iter().enumerate() {
                            let gv = gout[oy * wo + ox].as_f64();
                            acc[r0 * w + c0] += gv * (1.0 - fy) * (1.0 - fx);
                            acc[r0 * w + c1] += gv * (1.0 - fy) * fx;
                            acc[r1 * w + c0] += gv * fy * (1.0 - fx);
                            acc[r1 * w + c1] += gv * fy * fx;
                        }
                    }
                    for (dst, a) in gin.iter_mut().zip(acc) {
                        *dst = *dst + T::from_f64(a);
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let [n, ca, h, w] = values[a.0].dims4("concat_channels").expect("rank checked in forward");
            let cb = values[b.0].shape()[1];
            let plane = h * w;
            let stride = (ca + cb) * plane;
            for (var, offset, width) in [(*a, 0, ca * plane), (*b, ca * plane, cb * plane)] {
                if !needs(&var) {
                    continue;
                }
                let gv = slot(grads, values, var).data_mut();
                for s in 0..n {
                    let src = &g.data()[s * stride + offset..s * stride + offset + width];
                    for (dst, &v) in gv[s * width..(s + 1) * width].iter_mut().zip(src) {
                        *dst = *dst + v;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for var in [a, b] {
                if needs(var) {
                    slot(grads, values, *var).add_assign(g);
                }
            }
        }
        Op::Scale { input, factor } => {
            if needs(input) {
                let gi = slot(grads, values, *input).data_mut();
                for (acc, &gv) in gi.iter_mut().zip(g.data()) {
                    *acc = *acc + T::from_f64(gv.as_f64() * factor);
                }
            }
        }
        Op::Sum { input } => {
            if needs(input) {
                let gv = g.data()[0];
                slot(grads, values, *input).data_mut().iter_mut().for_each(|v| *v = *v + gv);
            }
        }
        Op::WeightedSum { input, weights } => {
            if needs(input) {
                let gv = g.data()[0].as_f64();
                let gi = slot(grads, values, *input).data_mut();
                for (acc, &w) in gi.iter_mut().zip(weights) {
                    *acc = *acc + T::from_f64(gv * w);
                }
            }
        }
        Op::SquaredError { input, target } => {
            if needs(input) {
                let x = values[input.0].data();
                let gi = slot(grads, values, *input).data_mut();
                for (((acc, &p), &t), &gv) in gi.iter_mut().zip(x).zip(target).zip(g.data()) {
                    *acc = *acc + T::from_f64(gv.as_f64() * -2.0 * (t - p.as_f64()));
                }
            }
        }
        Op::BinaryCrossEntropy {
            input,
            truth,
            reduction,
        } => {
            if needs(input) {
                let probs = values[input.0].data();
                let n = g.numel();
                let per = probs.len() / n.max(1);
                let norm = match reduction {
                    Reduction::Mean => 1.0 / per as f64,
                    Reduction::Sum => 1.0,
                };
                let gi = slot(grads, values, *input).data_mut();
                for s in 0..n {
                    let gs = g.data()[s].as_f64();
                    // Gated samples carry an exactly-zero upstream gradient.
                    if gs == 0.0 {
                        continue;
                    }
                    for idx in s * per..(s + 1) * per {
                        let q = probs[idx].as_f64();
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
                            continue;
                        }
                        let d = if truth.data()[idx] == T::one() { -1.0 / q } else { 1.0 / (1.0 - q) };
                        gi[idx] = gi[idx] + T::from_f64(gs * d * norm);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Element>(
    input: Var,
    weight: Var,
    bias: Var,
    geom: ConvGeom,
    g: &Tensor<T>,
    values: &[Tensor<T>],
    grads: &mut [Option<Tensor<T>>],
    requires_grad: &[bool],
) {
    let x = &values[input.0];
    let w = &values[weight.0];
    let [n, cin, h, wd] = x.dims4("conv2d").expect("rank checked in forward");
    let [cout, _, k, _] = w.dims4("conv2d").expect("rank checked in forward");
    let [_, _, ho, wo] = g.dims4("conv2d").expect("rank checked in forward");
    let kdim = cin * k * k;
    let plane_out = ho * wo;
    let plane_in = cin * h * wd;
    let pointwise = geom.is_pointwise(k);

    if requires_grad[bias.0] {
        let gb = slot(grads, values, bias).data_mut();
        for (co, acc) in gb.iter_mut().enumerate() {
            let total: f64 = (0..n)
                .flat_map(|s| {
                    let base = (s * cout + co) * plane_out;
                    g.data()[base..base + plane_out].iter()
                })
                .map(|v| v.as_f64())
                .sum();
            *acc = *acc + T::from_f64(total);
        }
    }

    let mut col = Vec::new();
    if requires_grad[weight.0] {
        let mut gw = vec![T::zero(); cout * kdim];
        for s in 0..n {
            let xs = &x.data()[s * plane_in..(s + 1) * plane_in];
            let cols: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, cin, h, wd, k, geom, ho, wo, &mut col);
                &col
            };
            let gs = &g.data()[s * cout * plane_out..(s + 1) * cout * plane_out];
            matmul(false, true, cout, kdim, plane_out, gs, cols, T::one(), &mut gw);
        }
        let dst = slot(grads, values, weight).data_mut();
        for (acc, v) in dst.iter_mut().zip(gw) {
            *acc = *acc + v;
        }
    }

    if requires_grad[input.0] {
        let wdata = w.data();
        let gi = slot(grads, values, input).data_mut();
        let mut dcol = vec![T::zero(); kdim * plane_out];
        for s in 0..n {
            let gs = &g.data()[s * cout * plane_out..(s + 1) * cout * plane_out];
            let dst = &mut gi[s * plane_in..(s + 1) * plane_in];
            if pointwise {
                matmul(true, false, kdim, plane_out, cout, wdata, gs, T::one(), dst);
            } else {
                matmul(true, false, kdim, plane_out, cout, wdata, gs, T::zero(), &mut dcol);
                col2im(&dcol, cin, h, wd, k, geom, ho, wo, dst);
            }
        }
    }
}

/// Unfolds receptive fields into a `[Cin*k*k, Ho*Wo]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut Vec<T>,
) {
    col.clear();
    col.resize(cin * k * k * ho * wo, T::zero());
    let pad = geom.padding as isize;
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj * geom.dilation) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *v = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    dst: &mut [T],
) {
    let pad = geom.padding as isize;
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj * geom.dilation) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per output index: the two source indices and the weight of the second.
fn interp_taps(size: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..size * factor)
        .map(|i| {
            let pos = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, w, b, ConvGeom::new(1, 0, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_output_shape_formula() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([2, 3, 64, 64]));
        let w = tape.constant(Tensor::zeros([8, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([8]));
        let y = tape.conv2d(x, w, b, ConvGeom::new(2, 1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 32, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(matches!(
            tape.conv2d(x, w, b, ConvGeom::new(1, 1, 1)),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let w = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, b, ConvGeom::new(1, 0, 3)),
            Err(TensorError::EmptyOutput { .. })
        ));
    }

    #[test]
    fn max_pool_forward_and_argmax_routing() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_cell() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 5.0), true);
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 3, 2]));
        assert!(tape.max_pool2(x).is_err());
    }

    #[test]
    fn global_avg_pool_values_and_grad() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]), true);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[3.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let eye = tape.constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero_b = tape.constant(Tensor::zeros([3]));
        let y = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let zw = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(t(&[2], vec![0.5, -1.5]));
        let y = tape.linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[3], vec![0.0, -3.0, 3.0]), true);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);

        let total = tape.weighted_sum(s, vec![1.0, 0.0, 0.0]).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[0], 0.25);

        tape.zero_grad();
        let total = tape.sum(r).unwrap();
        tape.backward(total).unwrap();
        // relu'(0) is 0.
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_stays_inside_open_interval() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2], vec![-200.0, 200.0]));
        let s = tape.sigmoid(x).unwrap();
        let v = tape.value(s).data();
        assert!(v[0] > 0.0 && v[1] < 1.0);
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 2, 3, 3], 0.7));
        let y = tape.bilinear_upsample(x, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-7));

        let x = tape.constant(t(&[1, 1, 1, 1], vec![2.5]));
        let y = tape.bilinear_upsample(x, 4).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn upsample_ramp_matches_hand_weights() {
        // Row [0, 1, 2, 3] at factor 2 samples positions -0.25, 0.25, 0.75, ...
        // which clamp at the borders: [0, .25, .75, 1.25, 1.75, 2.25, 2.75, 3].
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]));
        let y = tape.bilinear_upsample(x, 2).unwrap();
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        let got = tape.value(y).data();
        assert_eq!(&got[..8], &want);
        assert_eq!(&got[8..], &want);
    }

    #[test]
    fn concat_shapes_slices_and_grad() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn([1, 2, 4, 4], |i| i as f32), true);
        let b = tape.leaf(Tensor::from_fn([1, 3, 4, 4], |i| -(i as f32)), true);
        let c = tape.concat_channels(a, b).unwrap();
        let cv = tape.value(c).clone();
        assert_eq!(cv.shape(), &[1, 5, 4, 4]);
        assert_eq!(&cv.narrow_channels(0, 2).unwrap(), tape.value(a));
        assert_eq!(&cv.narrow_channels(2, 3).unwrap(), tape.value(b));
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(tape.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros([1, 2, 4, 2]));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn backward_of_scaled_sum_and_unused_param() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn([3], |i| i as f32), true);
        let unused = tape.leaf(Tensor::full([2], 1.0), true);
        let y = tape.scale(x, 2.0).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 3]);
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0; 2]);
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_grad_clears() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([2], 1.0), true);
        let y = tape.scale(x, 3.0).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([2], 1.5), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1], vec![f32::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
        tape.set_checked(false);
        assert!(tape.scale(x, 10.0).is_ok());
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let truth = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = tape.binary_cross_entropy(p, truth, Reduction::Mean).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
