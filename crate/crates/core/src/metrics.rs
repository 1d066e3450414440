//! Voxel overlap scores between predicted and ground-truth reconstructions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{rasterize_mask, Mask};
use crate::swc::SwcForest;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("mask dims differ: prediction {pred:?}, ground truth {gt:?}")]
pub struct DimsMismatch {
    pub pred: [usize; 3],
    pub gt: [usize; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub jaccard: f64,
}

/// Scores plus the counts they came from; serializes as the flat report
/// `{"precision", "recall", "fscore", "jaccard", "tp", "fp", "fn"}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub scores: Scores,
    #[serde(flatten)]
    pub counts: Confusion,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion, DimsMismatch> {
    if pred.dims() != gt.dims() {
        return Err(DimsMismatch {
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `num / den`, with `0 / 0` taken as 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn scores(c: &Confusion) -> Scores {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Scores {
        precision,
        recall,
        fscore: ratio(2.0 * precision * recall, precision + recall),
        jaccard: ratio(tp, tp + fp + fn_),
    }
}

/// Rasterizes both forests into `dims` and compares the masks.
pub fn evaluate(pred: &SwcForest, gt: &SwcForest, dims: [usize; 3]) -> Report {
    let counts = confusion(&rasterize_mask(pred, dims), &rasterize_mask(gt, dims)).expect("same dims");
    Report {
        scores: scores(&counts),
        counts,
    }
}
