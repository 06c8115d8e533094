use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::Image;

use super::SynthConfig;

/// Bilinearly interpolated coarse noise around `mean`, times `1 + speckle * N(0,1)`,
/// clamped to `[0, 1]`.
pub fn gen_background<R: Rng>(config: &SynthConfig, rng: &mut R) -> Image {
    let bg = &config.background;
    let (h, w) = (config.height, config.width);
    let s = bg.grid_spacing as f64;
    let gh = (h as f64 / s).ceil() as usize + 2;
    let gw = (w as f64 / s).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / s;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / s;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            let low = top * (1.0 - ty) + bottom * ty;
            let noise: f64 = StandardNormal.sample(rng);
            let v = (bg.mean + bg.contrast * low) * (1.0 + bg.speckle * noise);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image { height: h, width: w, data }
}
