//! Synthetic nerve-fiber images with exact full-width masks and deliberately
//! inaccurate single-pixel training labels.
//!
//! Each sample is a procedural background plus a handful of blurred
//! polynomial strokes. The truth mask is the union of the un-blurred
//! strokes; the pseudo label is each stroke's centerline after a rigid
//! per-curve integer shift.

mod background;
mod curves;
mod dataset;

pub use background::gen_background;
pub use curves::{gen_curves, rasterize_fiber, CurveSpec, Raster};
pub use dataset::{
    generate_dataset, list_ids, load_dataset, LoadedSample, Manifest, SampleRecord, IMAGES_DIR, LABELS_DIR, MANIFEST, TRUTH_DIR,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::seed::{derive_seed, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: u32,
    pub max: u32,
}

impl IntRange {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloatRange {
    pub min: f64,
    pub max: f64,
}

impl FloatRange {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    /// Mean intensity in `[0, 1]`.
    pub mean: f64,
    /// Amplitude of the low-frequency field around the mean.
    pub contrast: f64,
    /// Standard deviation of the multiplicative speckle factor.
    pub speckle: f64,
    /// Spacing of the coarse noise grid in pixels.
    pub grid_spacing: usize,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig { mean: 0.25, contrast: 0.08, speckle: 0.15, grid_spacing: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub curves_per_image: IntRange,
    /// Stroke width `w`; strokes are disks of radius `floor(w / 2)`.
    pub fiber_width: IntRange,
    pub poly_degree: u32,
    /// Half length of each curve's parameter interval, as a fraction of min(H, W).
    pub extent: FloatRange,
    /// Peak fiber intensity added to the background.
    pub amplitude: FloatRange,
    pub blur_sigma: f64,
    pub shift_radius: u32,
    pub background: BackgroundConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 128,
            curves_per_image: IntRange { min: 3, max: 8 },
            fiber_width: IntRange { min: 2, max: 6 },
            poly_degree: 3,
            extent: FloatRange { min: 0.25, max: 0.6 },
            amplitude: FloatRange { min: 0.35, max: 0.6 },
            blur_sigma: 1.0,
            shift_radius: 3,
            background: BackgroundConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("synth config", d));
        if self.width == 0 || self.height == 0 {
            return bad(format!("canvas {}x{} is empty", self.width, self.height));
        }
        for (name, r) in [("curves_per_image", self.curves_per_image), ("fiber_width", self.fiber_width)] {
            if r.min > r.max {
                return bad(format!("{name} range {}..{} is empty", r.min, r.max));
            }
        }
        if self.fiber_width.min == 0 {
            return bad("fiber_width must be >= 1".into());
        }
        for (name, r) in [("extent", self.extent), ("amplitude", self.amplitude)] {
            if !(r.min <= r.max) {
                return bad(format!("{name} range {}..{} is empty", r.min, r.max));
            }
        }
        if self.poly_degree > 3 {
            return bad(format!("poly_degree must be <= 3, got {}", self.poly_degree));
        }
        if !(self.blur_sigma > 0.0) {
            return bad(format!("blur_sigma must be > 0, got {}", self.blur_sigma));
        }
        if self.background.grid_spacing == 0 {
            return bad("background.grid_spacing must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub truth: LabelMap,
    pub pseudo: LabelMap,
    pub curves: Vec<CurveSpec>,
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur that conserves total mass: near the border each
/// source pixel spreads its value over the in-bounds taps only, renormalized.
pub fn blur_conservative(field: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], len: usize, lines: usize, stride: usize, step: usize| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for line in 0..lines {
            let base = line * stride;
            for i in 0..len {
                let v = src[base + i * step];
                if v == 0.0 {
                    continue;
                }
                let lo = (i as isize - r).max(0);
                let hi = (i as isize + r).min(len as isize - 1);
                let norm: f64 = (lo..=hi).map(|j| k[(j - i as isize + r) as usize]).sum();
                for j in lo..=hi {
                    dst[base + j as usize * step] += v * k[(j - i as isize + r) as usize] / norm;
                }
            }
        }
        dst
    };
    let rows = pass(field, width, height, width, 1);
    pass(&rows, height, width, 1, width)
}

/// Adds the blurred fiber field to the background. Returns the image and
/// the truth mask (union of the un-blurred strokes).
pub fn compose_image(background: &Image, rasters: &[Raster], curves: &[CurveSpec], blur_sigma: f64) -> (Image, LabelMap) {
    let (h, w) = (background.height, background.width);
    let mut field = vec![0.0; h * w];
    let mut truth = LabelMap::zeros(h, w);
    for (r, c) in rasters.iter().zip(curves) {
        for (i, &s) in r.stencil.data.iter().enumerate() {
            if s != 0 {
                field[i] += c.amplitude;
            }
        }
        truth.union_with(&r.stencil);
    }
    let blurred = blur_conservative(&field, h, w, blur_sigma);
    let mut image = background.clone();
    for (v, b) in image.data.iter_mut().zip(&blurred) {
        *v += b;
    }
    image.clamp_unit();
    (image, truth)
}

/// Integer shifts `(dx, dy)` with `dx^2 + dy^2 <= r^2`.
fn shift_candidates(radius: u32) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Union of per-curve shifted centerlines (in-canvas pixels only, clipped
/// again after the shift), with any 2x2 all-foreground block broken by
/// removing its bottom-right pixel.
pub fn make_pseudo_label<R: Rng>(rasters: &[Raster], height: usize, width: usize, shift_radius: u32, rng: &mut R) -> LabelMap {
    let candidates = shift_candidates(shift_radius);
    let mut out = LabelMap::zeros(height, width);
    for r in rasters {
        let (dx, dy) = candidates[rng.random_range(0..candidates.len())];
        let inside = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
        for &(x, y) in r.path.iter().filter(|&&(x, y)| inside(x, y)) {
            let (sx, sy) = (x + dx, y + dy);
            if inside(sx, sy) {
                out.set(sy as usize, sx as usize, 1);
            }
        }
    }
    thin_blocks(&mut out);
    out
}

fn thin_blocks(m: &mut LabelMap) {
    if m.height < 2 || m.width < 2 {
        return;
    }
    for y in 0..m.height - 1 {
        for x in 0..m.width - 1 {
            if m.get(y, x) != 0 && m.get(y, x + 1) != 0 && m.get(y + 1, x) != 0 && m.get(y + 1, x + 1) != 0 {
                m.set(y + 1, x + 1, 0);
            }
        }
    }
}

/// One complete sample from its own seed.
pub fn generate_sample(config: &SynthConfig, sample_seed: u64, background: Option<&Image>) -> Result<SyntheticSample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let bg = match background {
        Some(img) => img.resize_bilinear(h, w),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, streams::BACKGROUND, 0));
            gen_background(config, &mut rng)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, streams::CURVES, 0));
    let curves = gen_curves(config, &mut rng);
    let rasters: Vec<Raster> = curves.iter().map(|c| rasterize_fiber(c, h, w)).collect();
    let (image, truth) = compose_image(&bg, &rasters, &curves, config.blur_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, streams::SHIFT, 0));
    let pseudo = make_pseudo_label(&rasters, h, w, config.shift_radius, &mut rng);
    Ok(SyntheticSample { image, truth, pseudo, curves })
}
