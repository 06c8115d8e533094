//! Scoring predictions against truth masks and comparing two methods.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::metrics::{aggregate, confusion, metrics, Aggregate, ImageScores, MetricsReport};
use crate::pgm;
use crate::synth::LoadedSample;
use crate::unet::{self, ModelParams};
use crate::wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};

/// Rayon pool honoring `SPATSEG_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SPATSEG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::invalid("SPATSEG_THREADS", format!("expected a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::invalid("thread pool", e.to_string()))
}

/// Predicted foreground mask at the image's own size. With `resize`, the
/// network sees a resized copy and the mask is resized back.
pub fn predict_mask(params: &ModelParams, image: &Image, resize: Option<[usize; 2]>) -> Result<(LabelMap, Vec<f64>)> {
    let input = match resize {
        Some([h, w]) => image.resize_bilinear(h, w),
        None => image.clone(),
    };
    let (labels, probs) = unet::predict(params, &input)?;
    let fg: Vec<f64> = (0..input.height * input.width).map(|i| probs.data[input.height * input.width + i]).collect();
    if resize.is_some() {
        let back = labels.resize_nearest(image.height, image.width);
        let fg_img = Image::new(input.height, input.width, fg)?.resize_bilinear(image.height, image.width);
        return Ok((back, fg_img.data));
    }
    Ok((labels, fg))
}

fn score(id: &str, pred: &LabelMap, truth: &LabelMap) -> Result<ImageScores> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "eval",
            format!("prediction {id} is {}x{}, truth is {}x{}", pred.height, pred.width, truth.height, truth.width),
        ));
    }
    let s = metrics(&confusion(pred, truth, 1)?);
    Ok(ImageScores { id: id.to_string(), dice: s.dice, precision: s.precision, recall: s.recall })
}

fn truth_of(s: &LoadedSample) -> Result<&LabelMap> {
    s.truth.as_ref().ok_or_else(|| Error::Dataset(format!("sample {} has no truth mask", s.id)))
}

/// Scores a model on every sample of a dataset.
pub fn evaluate_model(params: &ModelParams, samples: &[LoadedSample], resize: Option<[usize; 2]>) -> Result<Vec<ImageScores>> {
    let pool = thread_pool()?;
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let (pred, _) = predict_mask(params, &s.image, resize)?;
                score(&s.id, &pred, truth_of(s)?)
            })
            .collect()
    })
}

/// Scores precomputed masks `<pred_dir>/<id>.pgm` (nonzero = foreground).
pub fn evaluate_masks(pred_dir: &Path, samples: &[LoadedSample]) -> Result<Vec<ImageScores>> {
    samples
        .iter()
        .map(|s| {
            let pred = pgm::read_mask(&pred_dir.join(format!("{}.pgm", s.id)))?;
            score(&s.id, &pred, truth_of(s)?)
        })
        .collect()
}

/// Per-image scores for the pseudo labels themselves.
pub fn evaluate_labels(samples: &[LoadedSample]) -> Result<Vec<ImageScores>> {
    samples
        .iter()
        .map(|s| {
            let labels = s.labels.as_ref().ok_or_else(|| Error::Dataset(format!("sample {} has no label", s.id)))?;
            score(&s.id, labels, truth_of(s)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub n: usize,
    pub a: Aggregate,
    pub b: Aggregate,
    /// Mean of per-image `dice_a - dice_b`.
    pub mean_dice_difference: f64,
    pub dice_test: WilcoxonResult,
}

/// Pairs two reports by image id and tests the dice difference.
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<Comparison> {
    let index = |r: &MetricsReport| -> Result<BTreeMap<String, ImageScores>> {
        let mut m = BTreeMap::new();
        for s in &r.per_image {
            if m.insert(s.id.clone(), s.clone()).is_some() {
                return Err(Error::Stats(format!("duplicate id {} in report {}", s.id, r.method)));
            }
        }
        Ok(m)
    };
    let (ma, mb) = (index(a)?, index(b)?);
    let only_a: Vec<&String> = ma.keys().filter(|k| !mb.contains_key(*k)).collect();
    let only_b: Vec<&String> = mb.keys().filter(|k| !ma.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::Stats(format!(
            "image ids differ: only in {}: {only_a:?}; only in {}: {only_b:?}",
            a.method, b.method
        )));
    }
    let pa: Vec<ImageScores> = ma.into_values().collect();
    let pb: Vec<ImageScores> = mb.into_values().collect();
    let da: Vec<f64> = pa.iter().map(|s| s.dice).collect();
    let db: Vec<f64> = pb.iter().map(|s| s.dice).collect();
    let dice_test = wilcoxon_signed_rank(&da, &db)?;
    let n = da.len();
    let mean_dice_difference = da.iter().zip(&db).map(|(x, y)| x - y).sum::<f64>() / n as f64;
    Ok(Comparison {
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        n,
        a: aggregate(&pa)?,
        b: aggregate(&pb)?,
        mean_dice_difference,
        dice_test,
    })
}
