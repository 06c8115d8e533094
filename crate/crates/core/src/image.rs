//! Grayscale images and label maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H×W grayscale intensities, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[1, H, W]` tensor for network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        Image { height, width, data }
    }
}

/// H×W class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "label map",
                format!("{height}x{width} needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap { height, width, data: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Pixelwise union of two binary masks (nonzero = foreground).
    pub fn union_with(&mut self, other: &LabelMap) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            if b != 0 {
                *a = 1;
            }
        }
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * self.height) / height).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * self.width) / width).min(self.width - 1);
                data.push(self.get(sy, sx));
            }
        }
        LabelMap { height, width, data }
    }
}

/// K×H×W per-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, h, w) = t.chw()?;
        Ok(ProbabilityMap { classes: k, height: h, width: w, data: t.data().to_vec() })
    }

    #[inline]
    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax over classes; ties resolve to the lower class id.
    pub fn argmax(&self) -> LabelMap {
        argmax_channels(&self.data, self.classes, self.height, self.width)
    }
}

pub(crate) fn argmax_channels(data: &[f64], k: usize, h: usize, w: usize) -> LabelMap {
    let n = h * w;
    let mut labels = vec![0u8; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = data[i];
        for c in 1..k {
            let v = data[c * n + i];
            if v > best {
                best = v;
                *label = c as u8;
            }
        }
    }
    LabelMap { height: h, width: w, data: labels }
}
