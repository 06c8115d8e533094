//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append nodes in creation order, so the node list is already a
//! topological order of the computation DAG; [`Tape::backward`] walks it in
//! exact reverse and sums gradient contributions from every consumer of a
//! node.
//!
//! The op set is deliberately small: the layers an encoder-decoder
//! segmentation network needs plus a hook ([`CustomOp`]) for losses that
//! carry their own gradient.

mod conv;
mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::LabelMap;
use crate::tensor::Tensor;

use conv::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves H×W (odd kernels only).
    Same,
    /// Valid cross-correlation.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const LOG_CLAMP: f64 = 1e-12;

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// An operation defined outside this module that supplies its own
/// vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the output.
    /// `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    UpConv { input: Var, kernel: Var, bias: Var },
    Relu { input: Var },
    Softmax { input: Var },
    Concat { a: Var, b: Var },
    Dropout { input: Var, mask: Vec<f64> },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { probs: Var, targets: Vec<usize> },
    Sum { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    AddScaled { a: Var, b: Var, factor: f64 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus the dropout RNG stream that belongs to it.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Input node. Gradients are retained for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    // ---- layers ---------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let ks = self.value(kernel).shape().to_vec();
        let &[c_out, kc_in, kh, kw] = ks.as_slice() else {
            return Err(Error::shape("conv2d", format!("kernel must be [C_out,C_in,kh,kw], got {ks:?}")));
        };
        if kc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has C_in={c_in} channels but kernel expects C_in={kc_in}"),
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match C_out={c_out}", self.value(bias).shape()),
            ));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape("conv2d", format!("same padding needs odd kernel, got {kh}x{kw}")));
                }
                (kh / 2, kw / 2)
            }
            Padding::None => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input H={h}, W={w}"),
                    ));
                }
                (0, 0)
            }
        };
        let geom = ConvGeometry { c_in, h, w, c_out, kh, kw, pad_h, pad_w };
        let out = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(vec![c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push_op(t, Op::Conv2d { input, kernel, bias, geom }, &[input, kernel, bias]))
    }

    /// 2×2 max pooling, stride 2. Ties go to the first element in row-major order.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool_2x2", format!("H={h} and W={w} must both be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let i0 = base + 2 * y * w + 2 * xo;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push_op(t, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Stride-2 transposed convolution with kernel `[C_in, C_out, 2, 2]`.
    pub fn upconv2x2(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let ks = self.value(kernel).shape().to_vec();
        let &[kc_in, c_out, 2, 2] = ks.as_slice() else {
            return Err(Error::shape("upconv_2x2", format!("kernel must be [C_in,C_out,2,2], got {ks:?}")));
        };
        if kc_in != c_in {
            return Err(Error::shape(
                "upconv_2x2",
                format!("input has C_in={c_in} channels but kernel expects C_in={kc_in}"),
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(
                "upconv_2x2",
                format!("bias shape {:?} does not match C_out={c_out}", self.value(bias).shape()),
            ));
        }
        let out = conv::upconv2x2_forward(
            c_in,
            h,
            w,
            c_out,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let t = Tensor::new(vec![c_out, 2 * h, 2 * w], out)?;
        Ok(self.push_op(t, Op::UpConv { input, kernel, bias }, &[input, kernel, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Relu { input }, &[input])
    }

    /// Softmax over the channel axis of a `[K, H, W]` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let (k, h, w) = self.value(input).chw()?;
        if k < 2 {
            return Err(Error::shape("softmax_channels", format!("needs K >= 2 channels, got {k}")));
        }
        let n = h * w;
        let z = self.value(input).data();
        let mut out = vec![0.0; k * n];
        for i in 0..n {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(z[c * n + i]);
            }
            let mut s = 0.0;
            for c in 0..k {
                let e = (z[c * n + i] - m).exp();
                out[c * n + i] = e;
                s += e;
            }
            for c in 0..k {
                out[c * n + i] /= s;
            }
        }
        let t = Tensor::new(vec![k, h, w], out)?;
        Ok(self.push_op(t, Op::Softmax { input }, &[input]))
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial sizes differ: {ha}x{wa} vs {hb}x{wb}"),
            ));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(vec![ca + cb, ha, wa], data)?;
        Ok(self.push_op(t, Op::Concat { a, b }, &[a, b]))
    }

    /// Inverted dropout drawing its mask from the tape's RNG stream.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate must be in [0,1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(input).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep_scale }).collect();
        let src = self.value(input);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::Dropout { input, mask }, &[input]))
    }

    /// Per-channel batch normalization over spatial positions of `[C, H, W]`.
    ///
    /// In train mode the batch statistics normalize the input and are folded
    /// into `running` (`running = m * running + (1 - m) * batch`). In eval mode
    /// `running` is used as is.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} shape {:?} does not match C={c}", self.value(v).shape()),
                ));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batchnorm", format!("running stats sized for {} channels, input has {c}", running.mean.len())));
        }
        let m = h * w;
        if mode == Mode::Train && m < 2 {
            return Err(Error::invalid("batchnorm", "train mode needs at least 2 spatial elements per channel"));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; c * m];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            let xs = &x[ch * m..(ch + 1) * m];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = xs.iter().sum::<f64>() / m as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    running.mean[ch] = BATCHNORM_MOMENTUM * running.mean[ch] + (1.0 - BATCHNORM_MOMENTUM) * mean;
                    running.var[ch] = BATCHNORM_MOMENTUM * running.var[ch] + (1.0 - BATCHNORM_MOMENTUM) * var;
                    (mean, var)
                }
                Mode::Eval => (running.mean[ch], running.var[ch]),
            };
            let is = 1.0 / (var + BATCHNORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..m {
                let xh = (xs[i] - mean) * is;
                xhat[ch * m + i] = xh;
                out[ch * m + i] = g[ch] * xh + b[ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        let op = match mode {
            Mode::Train => Op::BatchNormTrain { input, gamma, beta, xhat, inv_std },
            Mode::Eval => Op::BatchNormEval { input, gamma, beta, xhat, inv_std },
        };
        Ok(self.push_op(t, op, &[input, gamma, beta]))
    }

    /// Mean negative log-likelihood of `targets` under `probs` (`[K, H, W]`).
    /// Probabilities are clamped at [`LOG_CLAMP`] before the log.
    pub fn cross_entropy_mean(&mut self, probs: Var, targets: &LabelMap) -> Result<Var> {
        let (k, h, w) = self.value(probs).chw()?;
        if (targets.height, targets.width) != (h, w) {
            return Err(Error::shape(
                "cross_entropy_mean",
                format!("probs are {h}x{w}, targets are {}x{}", targets.height, targets.width),
            ));
        }
        let n = h * w;
        let p = self.value(probs).data();
        let mut idx = Vec::with_capacity(n);
        let mut total = 0.0;
        for (i, &t) in targets.data.iter().enumerate() {
            let t = t as usize;
            if t >= k {
                return Err(Error::invalid("cross_entropy_mean", format!("target class {t} >= K={k}")));
            }
            let j = t * n + i;
            total -= p[j].max(LOG_CLAMP).ln();
            idx.push(j);
        }
        let t = Tensor::scalar(total / n as f64);
        Ok(self.push_op(t, Op::CrossEntropy { probs, targets: idx }, &[probs]))
    }

    // ---- elementwise / reductions --------------------------------------

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let src = self.value(input);
        let data = src.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push_op(t, Op::Scale { input, factor }, &[input])
    }

    /// `a + factor * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, factor: f64) -> Result<Var> {
        self.same_shape("add_scaled", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + factor * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_op(t, Op::AddScaled { a, b, factor }, &[a, b]))
    }

    /// Records an externally defined op whose forward value is `output`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push_op(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            let contributions = self.node_vjp(idx, &g);
            self.grads[idx] = Some(g);
            for (var, grad) in contributions {
                self.accumulate(var, grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn node_vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v);
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, geom } => {
                let (gi, gk, gb) = conv::conv2d_backward(geom, val(*input).data(), val(*kernel).data(), g);
                vec![(*input, gi), (*kernel, gk), (*bias, gb)]
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                vec![(*input, gi)]
            }
            Op::UpConv { input, kernel, bias } => {
                let (c_in, h, w) = val(*input).chw().expect("checked in forward");
                let c_out = val(*bias).len();
                let (gi, gk, gb) =
                    conv::upconv2x2_backward(c_in, h, w, c_out, val(*input).data(), val(*kernel).data(), g);
                vec![(*input, gi), (*kernel, gk), (*bias, gb)]
            }
            Op::Relu { input } => {
                let gi = val(*input).data().iter().zip(g).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect();
                vec![(*input, gi)]
            }
            Op::Softmax { input } => {
                let (k, h, w) = node.value.chw().expect("rank 3");
                let n = h * w;
                let s = node.value.data();
                let mut gi = vec![0.0; k * n];
                for i in 0..n {
                    let mut dot = 0.0;
                    for c in 0..k {
                        dot += g[c * n + i] * s[c * n + i];
                    }
                    for c in 0..k {
                        gi[c * n + i] = s[c * n + i] * (g[c * n + i] - dot);
                    }
                }
                vec![(*input, gi)]
            }
            Op::Concat { a, b } => {
                let na = val(*a).len();
                vec![(*a, g[..na].to_vec()), (*b, g[na..].to_vec())]
            }
            Op::Dropout { input, mask } => {
                vec![(*input, g.iter().zip(mask).map(|(a, b)| a * b).collect())]
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let gam = val(*gamma).data();
                let mut gi = vec![0.0; c * m];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let gs = &g[ch * m..(ch + 1) * m];
                    let xs = &xhat[ch * m..(ch + 1) * m];
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    gg[ch] = sum_gx;
                    gb[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch] / m as f64;
                    for i in 0..m {
                        gi[ch * m + i] = k * (m as f64 * gs[i] - sum_g - xs[i] * sum_gx);
                    }
                }
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let gam = val(*gamma).data();
                let mut gi = vec![0.0; c * m];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    for i in 0..m {
                        let gv = g[ch * m + i];
                        gi[ch * m + i] = gv * gam[ch] * inv_std[ch];
                        gg[ch] += gv * xhat[ch * m + i];
                        gb[ch] += gv;
                    }
                }
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::CrossEntropy { probs, targets } => {
                let p = val(*probs).data();
                let n = targets.len() as f64;
                let mut gi = vec![0.0; p.len()];
                for &j in targets {
                    if p[j] > LOG_CLAMP {
                        gi[j] -= g[0] / (n * p[j]);
                    }
                }
                vec![(*probs, gi)]
            }
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).len()])],
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let mut out = Vec::with_capacity(2);
                if rg(*a) {
                    out.push((*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect()));
                }
                out
            }
            Op::Scale { input, factor } => vec![(*input, g.iter().map(|v| v * factor).collect())],
            Op::AddScaled { a, b, factor } => {
                vec![(*a, g.to_vec()), (*b, g.iter().map(|v| v * factor).collect())]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                op.backward(&vals, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gr, &v)| gr.map(|gr| (v, gr)))
                    .collect()
            }
        }
    }
}
