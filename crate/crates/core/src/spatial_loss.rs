//! Spatially consistent training loss: mean cross entropy plus a local,
//! intensity-weighted pairwise term over each pixel's 8-neighbourhood.
//!
//! For pixel `i` and in-image neighbour `j` the signed weight is
//!
//! ```text
//! mu_ij = -exp(-(I_i - I_j)^2 / (2 sigma^2))   if labels agree
//!         +exp(-(I_i - I_j)^2 / (2 sigma^2))   otherwise
//! ```
//!
//! and the per-pixel cost is `psi_i = sum_j mu_ij P_i P_j / sum_j |mu_ij|`,
//! where `P` is the probability of each pixel's predicted class (or, with
//! [`Confidence::Foreground`], of class 1). Labels and weights are held
//! constant within a step; the gradient reaches the network only through `P`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{argmax_channels, Image, LabelMap};
use crate::tensor::Tensor;

/// Neighbour offsets `(dy, dx)`; `NEIGHBORS[7 - k]` is the opposite of `NEIGHBORS[k]`.
pub const NEIGHBORS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Which probability plays the role of the confidence `P` in the pairwise cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    /// Probability of the pixel's predicted (argmax) class.
    #[default]
    Predicted,
    /// Probability of class 1 (binary models only).
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialLossConfig {
    pub sigma: f64,
    pub lambda: f64,
    pub pairwise_reduction: Reduction,
    pub confidence: Confidence,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        SpatialLossConfig { sigma: 0.5, lambda: 1.0, pairwise_reduction: Reduction::Sum, confidence: Confidence::Predicted }
    }
}

impl SpatialLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("spatial loss", format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("spatial loss", format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Signed neighbour weights, one slot per entry of [`NEIGHBORS`]; slots
/// pointing outside the image hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseWeights {
    pub height: usize,
    pub width: usize,
    pub mu: Vec<[f64; 8]>,
}

impl PairwiseWeights {
    pub fn abs_sum(&self, i: usize) -> f64 {
        self.mu[i].iter().map(|m| m.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseField {
    pub weights: PairwiseWeights,
    pub psi: Vec<f64>,
}

/// Probability of each pixel's predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ConfidenceMap {
    /// Selects `probs[labels_i, i]` from a `[K, H, W]` probability tensor.
    pub fn select(probs: &Tensor, labels: &LabelMap) -> Result<Self> {
        let (_, h, w) = probs.chw()?;
        if (labels.height, labels.width) != (h, w) {
            return Err(Error::shape("confidence", format!("probs {h}x{w}, labels {}x{}", labels.height, labels.width)));
        }
        let n = h * w;
        let data = labels.data.iter().enumerate().map(|(i, &c)| probs.data()[c as usize * n + i]).collect();
        Ok(ConfidenceMap { height: h, width: w, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub unary: f64,
    pub pairwise: f64,
    pub total: f64,
}

#[inline]
fn neighbor(y: usize, x: usize, k: usize, h: usize, w: usize) -> Option<usize> {
    let (dy, dx) = NEIGHBORS[k];
    let ny = y as isize + dy;
    let nx = x as isize + dx;
    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
        None
    } else {
        Some(ny as usize * w + nx as usize)
    }
}

pub fn neighbor_weights(image: &Image, labels: &LabelMap, config: &SpatialLossConfig) -> Result<PairwiseWeights> {
    if (image.height, image.width) != (labels.height, labels.width) {
        return Err(Error::shape(
            "neighbor_weights",
            format!("image {}x{}, labels {}x{}", image.height, image.width, labels.height, labels.width),
        ));
    }
    let (h, w) = (image.height, image.width);
    let denom = 2.0 * config.sigma * config.sigma;
    let mut mu = vec![[0.0; 8]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (k, slot) in mu[i].iter_mut().enumerate() {
                if let Some(j) = neighbor(y, x, k, h, w) {
                    let d = image.data[i] - image.data[j];
                    let e = (-d * d / denom).exp();
                    *slot = if labels.data[i] == labels.data[j] { -e } else { e };
                }
            }
        }
    }
    Ok(PairwiseWeights { height: h, width: w, mu })
}

/// Per-pixel normalized costs `psi`.
pub fn pairwise_cost(weights: &PairwiseWeights, confidence: &ConfidenceMap) -> Result<Vec<f64>> {
    let (h, w) = (weights.height, weights.width);
    if (confidence.height, confidence.width) != (h, w) {
        return Err(Error::shape(
            "pairwise_cost",
            format!("weights {h}x{w}, confidence {}x{}", confidence.height, confidence.width),
        ));
    }
    let p = &confidence.data;
    let mut psi = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = weights.abs_sum(i);
            if z == 0.0 {
                return Err(Error::invalid("pairwise_cost", format!("pixel ({y},{x}) has no weighted neighbours")));
            }
            let mut acc = 0.0;
            for k in 0..8 {
                if let Some(j) = neighbor(y, x, k, h, w) {
                    acc += weights.mu[i][k] * p[j];
                }
            }
            psi[i] = acc * p[i] / z;
        }
    }
    Ok(psi)
}

pub fn reduce(psi: &[f64], reduction: Reduction) -> f64 {
    let s: f64 = psi.iter().sum();
    match reduction {
        Reduction::Sum => s,
        Reduction::Mean => s / psi.len() as f64,
    }
}

/// Class whose probability is read as each pixel's confidence.
fn confidence_classes(labels: &LabelMap, k: usize, config: &SpatialLossConfig) -> Result<LabelMap> {
    match config.confidence {
        Confidence::Predicted => Ok(labels.clone()),
        Confidence::Foreground if k == 2 => Ok(LabelMap::new(labels.height, labels.width, vec![1; labels.len()])?),
        Confidence::Foreground => Err(Error::invalid("spatial loss", format!("foreground confidence needs K=2, got K={k}"))),
    }
}

/// Pairwise field for a probability tensor: labels are its argmax, confidence
/// is chosen by `config.confidence`.
pub fn pairwise_field(probs: &Tensor, image: &Image, config: &SpatialLossConfig) -> Result<(LabelMap, PairwiseField)> {
    let (k, h, w) = probs.chw()?;
    let labels = argmax_channels(probs.data(), k, h, w);
    let weights = neighbor_weights(image, &labels, config)?;
    let conf = ConfidenceMap::select(probs, &confidence_classes(&labels, k, config)?)?;
    let psi = pairwise_cost(&weights, &conf)?;
    Ok((labels, PairwiseField { weights, psi }))
}

struct PairwiseOp {
    weights: PairwiseWeights,
    /// Flat index into the probability tensor of each pixel's predicted class.
    selected: Vec<usize>,
    scale: f64,
}

impl CustomOp for PairwiseOp {
    fn name(&self) -> &'static str {
        "pairwise_cost"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let probs = inputs[0].data();
        let (h, w) = (self.weights.height, self.weights.width);
        let p: Vec<f64> = self.selected.iter().map(|&j| probs[j]).collect();
        let inv_z: Vec<f64> = (0..h * w).map(|i| 1.0 / self.weights.abs_sum(i)).collect();
        let mut grad = vec![0.0; probs.len()];
        let g = grad_out[0] * self.scale;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // psi_i depends on P_i directly and on P_i through each psi_j of its neighbours.
                let mut d = 0.0;
                for k in 0..8 {
                    if let Some(j) = neighbor(y, x, k, h, w) {
                        d += self.weights.mu[i][k] * p[j] * inv_z[i] + self.weights.mu[j][7 - k] * p[j] * inv_z[j];
                    }
                }
                grad[self.selected[i]] += g * d;
            }
        }
        vec![Some(grad)]
    }
}

/// Records the reduced pairwise cost of `probs` on the tape.
pub fn pairwise_on_tape(
    tape: &mut Tape,
    probs: Var,
    image: &Image,
    config: &SpatialLossConfig,
) -> Result<(Var, PairwiseField)> {
    let pt = tape.value(probs);
    let (k, h, w) = pt.chw()?;
    let (labels, field) = pairwise_field(pt, image, config)?;
    let n = h * w;
    let classes = confidence_classes(&labels, k, config)?;
    let selected = classes.data.iter().enumerate().map(|(i, &c)| c as usize * n + i).collect();
    let value = reduce(&field.psi, config.pairwise_reduction);
    let scale = match config.pairwise_reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let op = PairwiseOp { weights: field.weights.clone(), selected, scale };
    let v = tape.custom(&[probs], Tensor::scalar(value), Box::new(op));
    Ok((v, field))
}

pub struct LossVars {
    pub unary: Var,
    pub pairwise: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `total = CE(probs, target) + lambda * pairwise(probs, image)`.
pub fn total_loss(
    tape: &mut Tape,
    probs: Var,
    target: &LabelMap,
    image: &Image,
    config: &SpatialLossConfig,
) -> Result<LossVars> {
    config.validate()?;
    let unary = tape.cross_entropy_mean(probs, target)?;
    let (pairwise, _) = pairwise_on_tape(tape, probs, image, config)?;
    let total = tape.add_scaled(unary, pairwise, config.lambda)?;
    let breakdown = LossBreakdown {
        unary: tape.value(unary).item(),
        pairwise: tape.value(pairwise).item(),
        total: tape.value(total).item(),
    };
    Ok(LossVars { unary, pairwise, total, breakdown })
}

/// Reduced pairwise cost computed pixel pair by pixel pair with no shared
/// code path: for every ordered pair `(i, j)`, `j != i`, membership in the
/// 8-neighbourhood is tested from coordinates.
pub fn brute_force_pairwise(
    image: &Image,
    labels: &LabelMap,
    confidence: &[f64],
    config: &SpatialLossConfig,
) -> Result<f64> {
    let (h, w) = (image.height, image.width);
    if labels.data.len() != h * w || confidence.len() != h * w {
        return Err(Error::shape("brute_force_pairwise", "image, labels and confidence sizes differ"));
    }
    let mut total = 0.0;
    for iy in 0..h {
        for ix in 0..w {
            let mut num = 0.0;
            let mut den = 0.0;
            for jy in 0..h {
                for jx in 0..w {
                    if (iy, ix) == (jy, jx) {
                        continue;
                    }
                    let in_r = iy.abs_diff(jy) <= 1 && ix.abs_diff(jx) <= 1;
                    if !in_r {
                        continue;
                    }
                    let ii = image.data[iy * w + ix];
                    let ij = image.data[jy * w + jx];
                    let kernel = (-(ii - ij).powi(2) / (2.0 * config.sigma.powi(2))).exp();
                    let mu = if labels.data[iy * w + ix] == labels.data[jy * w + jx] { -kernel } else { kernel };
                    num += mu * confidence[iy * w + ix] * confidence[jy * w + jx];
                    den += mu.abs();
                }
            }
            total += num / den;
        }
    }
    Ok(match config.pairwise_reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / (h * w) as f64,
    })
}
