use std::collections::HashSet;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::LabelMap;

use super::SynthConfig;

/// A polynomial stroke `v = sum_k coeffs[k] * u^k`, `u in [-half_extent, half_extent]`,
/// in a frame rotated by `angle` and centred at `center` (x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub coeffs: [f64; 4],
    pub angle: f64,
    pub center: (f64, f64),
    pub half_extent: f64,
    pub width: u32,
    pub amplitude: f64,
}

impl CurveSpec {
    fn local(&self, u: f64) -> (f64, f64) {
        let c = &self.coeffs;
        (c[0] + u * (c[1] + u * (c[2] + u * c[3])), c[1] + u * (2.0 * c[2] + 3.0 * u * c[3]))
    }

    /// Image-space point `(x, y)` and speed `|d(x,y)/du|` at parameter `u`.
    pub fn point(&self, u: f64) -> ((f64, f64), f64) {
        let (v, dv) = self.local(u);
        let (s, c) = self.angle.sin_cos();
        let x = self.center.0 + c * u - s * v;
        let y = self.center.1 + s * u + c * v;
        ((x, y), (1.0 + dv * dv).sqrt())
    }
}

pub fn gen_curves<R: Rng>(config: &SynthConfig, rng: &mut R) -> Vec<CurveSpec> {
    let n = config.curves_per_image.sample(rng);
    let size = config.width.min(config.height) as f64;
    (0..n)
        .map(|_| {
            let degree = if config.poly_degree == 0 { 0 } else { rng.random_range(1..=config.poly_degree) };
            let half_extent = config.extent.sample(rng) * size;
            let mut coeffs = [0.0; 4];
            // bend bounded so the stroke deviates at most ~0.6 * half_extent from its chord
            for (k, c) in coeffs.iter_mut().enumerate().skip(2) {
                if k as u32 <= degree {
                    *c = rng.random_range(-0.6..0.6) / half_extent.powi(k as i32 - 1);
                }
            }
            let angle = rng.random_range(0.0..PI);
            let center = (rng.random_range(0.0..config.width as f64), rng.random_range(0.0..config.height as f64));
            let width = config.fiber_width.sample(rng);
            let amplitude = config.amplitude.sample(rng);
            CurveSpec { coeffs, angle, center, half_extent, width, amplitude }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    /// Full-width stroke, clipped to the canvas.
    pub stencil: LabelMap,
    /// Single-pixel centerline, clipped to the canvas.
    pub centerline: LabelMap,
    /// Unclipped centerline pixels `(x, y)` in traversal order.
    pub path: Vec<(isize, isize)>,
}

/// Offsets of a disk with radius `floor(w / 2)`.
pub fn disk_offsets(width: u32) -> Vec<(isize, isize)> {
    let r = (width / 2) as isize;
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

/// Samples the curve densely enough that consecutive samples move at most a
/// quarter pixel, rounds to pixels and drops repeats. Consecutive distinct
/// pixels are therefore 8-adjacent.
pub fn rasterize_fiber(curve: &CurveSpec, height: usize, width: usize) -> Raster {
    let mut path = Vec::new();
    let mut seen = HashSet::new();
    let mut u = -curve.half_extent;
    loop {
        let ((x, y), speed) = curve.point(u);
        let p = (x.round() as isize, y.round() as isize);
        if seen.insert(p) {
            path.push(p);
        }
        if u >= curve.half_extent {
            break;
        }
        u = (u + 0.25 / speed).min(curve.half_extent);
    }
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
    let mut centerline = LabelMap::zeros(height, width);
    let mut stencil = LabelMap::zeros(height, width);
    let disk = disk_offsets(curve.width);
    for &(x, y) in &path {
        if inside(x, y) {
            centerline.set(y as usize, x as usize, 1);
        }
        for &(dx, dy) in &disk {
            if inside(x + dx, y + dy) {
                stencil.set((y + dy) as usize, (x + dx) as usize, 1);
            }
        }
    }
    Raster { stencil, centerline, path }
}
