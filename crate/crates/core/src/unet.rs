//! Encoder-decoder segmentation network.
//!
//! Parameter order (also the checkpoint order):
//!
//! ```text
//! for level in 1..=depth                      encoder, channels c_l = base * 2^(l-1)
//!     enc{l}.conv{1,2}.weight  [c_l, c_in, 3, 3]
//!     enc{l}.conv{1,2}.bias    [c_l]
//!     enc{l}.bn{1,2}.{gamma,beta,running_mean,running_var}  [c_l]   (if batchnorm)
//! for level in (1..depth).rev()               decoder
//!     dec{l}.up.weight         [c_{l+1}, c_l, 2, 2]
//!     dec{l}.up.bias           [c_l]
//!     dec{l}.conv{1,2}.weight  [c_l, 2c_l | c_l, 3, 3]
//!     dec{l}.conv{1,2}.bias    [c_l]
//!     dec{l}.bn{1,2}.*         [c_l]                                (if batchnorm)
//! head.weight                  [K, base, 1, 1]
//! head.bias                    [K]
//! ```
//!
//! Each conv block is conv -> batchnorm -> ReLU -> dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Padding, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, ProbabilityMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub use_batchnorm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            num_classes: 2,
            dropout_rate: 0.25,
            use_batchnorm: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("unet config", d));
        if self.depth < 1 {
            return bad(format!("depth must be >= 1, got {}", self.depth));
        }
        if self.base_channels < 1 {
            return bad(format!("base_channels must be >= 1, got {}", self.base_channels));
        }
        if self.in_channels < 1 {
            return bad(format!("in_channels must be >= 1, got {}", self.in_channels));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.size_divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::IndivisibleInput { height, width, divisor: d, depth: self.depth });
        }
        Ok(())
    }

    /// Ordered `(name, shape, kind)` layout of every parameter.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        let block = |out: &mut Vec<_>, prefix: &str, idx: usize, c_in: usize, c_out: usize| {
            out.push((format!("{prefix}.conv{idx}.weight"), vec![c_out, c_in, 3, 3], ParamKind::ConvWeight));
            out.push((format!("{prefix}.conv{idx}.bias"), vec![c_out], ParamKind::Bias));
            if self.use_batchnorm {
                out.push((format!("{prefix}.bn{idx}.gamma"), vec![c_out], ParamKind::Gamma));
                out.push((format!("{prefix}.bn{idx}.beta"), vec![c_out], ParamKind::Beta));
                out.push((format!("{prefix}.bn{idx}.running_mean"), vec![c_out], ParamKind::RunningMean));
                out.push((format!("{prefix}.bn{idx}.running_var"), vec![c_out], ParamKind::RunningVar));
            }
        };
        for level in 1..=self.depth {
            let c = self.channels(level);
            let c_prev = if level == 1 { self.in_channels } else { self.channels(level - 1) };
            let prefix = format!("enc{level}");
            block(&mut out, &prefix, 1, c_prev, c);
            block(&mut out, &prefix, 2, c, c);
        }
        for level in (1..self.depth).rev() {
            let c = self.channels(level);
            let prefix = format!("dec{level}");
            out.push((format!("{prefix}.up.weight"), vec![self.channels(level + 1), c, 2, 2], ParamKind::UpWeight));
            out.push((format!("{prefix}.up.bias"), vec![c], ParamKind::Bias));
            block(&mut out, &prefix, 1, 2 * c, c);
            block(&mut out, &prefix, 2, c, c);
        }
        out.push(("head.weight".into(), vec![self.num_classes, self.base_channels, 1, 1], ParamKind::ConvWeight));
        out.push(("head.bias".into(), vec![self.num_classes], ParamKind::Bias));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    UpWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: UNetConfig,
    pub params: Vec<Param>,
}

/// He-normal kernels (std `sqrt(2 / fan_in)`), zero biases, unit gamma.
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .layout()
        .into_iter()
        .map(|(name, shape, kind)| {
            let n: usize = shape.iter().product();
            let data = match kind {
                ParamKind::ConvWeight | ParamKind::UpWeight => {
                    let fan_in = match kind {
                        ParamKind::ConvWeight => shape[1] * shape[2] * shape[3],
                        _ => shape[0] * 4,
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => vec![0.0; n],
                ParamKind::Gamma | ParamKind::RunningVar => vec![1.0; n],
            };
            Param { name, kind, value: Tensor::new(shape, data).expect("layout shape") }
        })
        .collect();
    Ok(ModelParams { config: *config, params })
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind.trainable()).map(|p| p.value.len()).sum()
    }

    /// Pushes every parameter onto `tape`; trainable ones require gradients
    /// when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), track && p.kind.trainable()))
            .collect();
        BoundParams { vars }
    }

    /// Gradients of the trainable parameters, in parameter order, as
    /// `(index, grad)`. Parameters the loss does not reach get zeros.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Vec<(usize, Vec<f64>)> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(i, p)| {
                let g = tape.grad(bound.vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]);
                (i, g)
            })
            .collect()
    }

    /// Writes batchnorm running statistics produced by a train-mode forward.
    pub fn apply_running_stats(&mut self, updates: &[(usize, RunningStats)]) {
        for (mean_idx, stats) in updates {
            self.params[*mean_idx].value.data_mut().copy_from_slice(&stats.mean);
            self.params[*mean_idx + 1].value.data_mut().copy_from_slice(&stats.var);
        }
    }
}

pub struct BoundParams {
    pub vars: Vec<Var>,
}

pub struct ForwardOutput {
    /// `[K, H, W]` softmax probabilities.
    pub probs: Var,
    /// `(index of running_mean param, updated stats)` for each batchnorm in train mode.
    pub running_updates: Vec<(usize, RunningStats)>,
}

struct Cursor<'a> {
    params: &'a ModelParams,
    bound: &'a BoundParams,
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> (usize, Var) {
        let i = self.next;
        self.next += 1;
        (i, self.bound.vars[i])
    }
}

fn conv_block(
    tape: &mut Tape,
    cur: &mut Cursor<'_>,
    x: Var,
    mode: Mode,
    updates: &mut Vec<(usize, RunningStats)>,
) -> Result<Var> {
    let cfg = cur.params.config;
    let (_, w) = cur.take();
    let (_, b) = cur.take();
    let mut y = tape.conv2d(x, w, b, Padding::Same)?;
    if cfg.use_batchnorm {
        let (_, gamma) = cur.take();
        let (_, beta) = cur.take();
        let (mean_idx, _) = cur.take();
        cur.take();
        let mut stats = RunningStats {
            mean: cur.params.params[mean_idx].value.data().to_vec(),
            var: cur.params.params[mean_idx + 1].value.data().to_vec(),
        };
        y = tape.batchnorm(y, gamma, beta, &mut stats, mode)?;
        if mode == Mode::Train {
            updates.push((mean_idx, stats));
        }
    }
    let y = tape.relu(y);
    tape.dropout(y, cfg.dropout_rate, mode)
}

/// Full forward pass from a `[C_in, H, W]` image tensor to class probabilities.
pub fn forward(params: &ModelParams, bound: &BoundParams, input: Var, mode: Mode, tape: &mut Tape) -> Result<ForwardOutput> {
    let cfg = params.config;
    let (c, h, w) = tape.value(input).chw()?;
    if c != cfg.in_channels {
        return Err(Error::shape("forward", format!("model expects {} input channels, got {c}", cfg.in_channels)));
    }
    cfg.check_input(h, w)?;
    let mut cur = Cursor { params, bound, next: 0 };
    let mut updates = Vec::new();
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for level in 1..=cfg.depth {
        x = conv_block(tape, &mut cur, x, mode, &mut updates)?;
        x = conv_block(tape, &mut cur, x, mode, &mut updates)?;
        if level < cfg.depth {
            skips.push(x);
            x = tape.maxpool2x2(x)?;
        }
    }
    for _level in (1..cfg.depth).rev() {
        let (_, uw) = cur.take();
        let (_, ub) = cur.take();
        let up = tape.upconv2x2(x, uw, ub)?;
        let skip = skips.pop().expect("one skip per pooled level");
        x = tape.concat_channels(skip, up)?;
        x = conv_block(tape, &mut cur, x, mode, &mut updates)?;
        x = conv_block(tape, &mut cur, x, mode, &mut updates)?;
    }
    let (_, hw) = cur.take();
    let (_, hb) = cur.take();
    let logits = tape.conv2d(x, hw, hb, Padding::Same)?;
    debug_assert_eq!(cur.next, params.params.len());
    let probs = tape.softmax_channels(logits)?;
    Ok(ForwardOutput { probs, running_updates: updates })
}

/// Eval-mode prediction: per-pixel argmax (ties to the lower class id) and probabilities.
pub fn predict(params: &ModelParams, image: &Image) -> Result<(LabelMap, ProbabilityMap)> {
    let mut tape = Tape::new(0);
    let bound = params.bind(&mut tape, false);
    let input = tape.constant(image.to_tensor());
    let out = forward(params, &bound, input, Mode::Eval, &mut tape)?;
    let probs = ProbabilityMap::from_tensor(tape.value(out.probs))?;
    Ok((probs.argmax(), probs))
}
