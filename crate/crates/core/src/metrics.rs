//! Overlap metrics for binary masks and their aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, positive_class: u8) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "confusion",
            format!("prediction {}x{}, truth {}x{}", pred.height, pred.width, truth.height, truth.width),
        ));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p == positive_class, t == positive_class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Dice, precision and recall. Both masks empty scores 1 on all three;
/// exactly one mask empty scores 0 on all three.
pub fn metrics(c: &ConfusionCounts) -> Scores {
    let pred = c.tp + c.fp;
    let truth = c.tp + c.fn_;
    match (pred == 0, truth == 0) {
        (true, true) => Scores { dice: 1.0, precision: 1.0, recall: 1.0 },
        (true, false) | (false, true) => Scores { dice: 0.0, precision: 0.0, recall: 0.0 },
        (false, false) => {
            let tp = c.tp as f64;
            Scores {
                dice: 2.0 * tp / (2.0 * tp + c.fp as f64 + c.fn_ as f64),
                precision: tp / pred as f64,
                recall: tp / truth as f64,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub per_image: Vec<ImageScores>,
    pub aggregate: Aggregate,
}

/// Mean and population (N-divisor) standard deviation.
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Stats("mean of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

pub fn aggregate(per_image: &[ImageScores]) -> Result<Aggregate> {
    if per_image.is_empty() {
        return Err(Error::Stats("cannot aggregate an empty report".into()));
    }
    let col = |f: fn(&ImageScores) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    Ok(Aggregate {
        dice: mean_std(&col(|s| s.dice))?,
        precision: mean_std(&col(|s| s.precision))?,
        recall: mean_std(&col(|s| s.recall))?,
    })
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, dataset: impl Into<String>, per_image: Vec<ImageScores>) -> Result<Self> {
        let aggregate = aggregate(&per_image)?;
        Ok(MetricsReport { method: method.into(), dataset: dataset.into(), per_image, aggregate })
    }
}
