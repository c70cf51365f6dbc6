//! Overlap metrics with lesion as the positive class.

use serde::Serialize;

use crate::error::{ensure, Result};
use crate::raster::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<Confusion> {
    ensure!(pred.same_shape(truth), Input, "prediction and truth differ in shape");
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Ratios whose denominator was zero; each such ratio is reported as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Undefined {
    pub dice: bool,
    pub jaccard: bool,
    pub precision: bool,
    pub recall: bool,
}

impl Undefined {
    pub fn any(&self) -> bool {
        self.dice || self.jaccard || self.precision || self.recall
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub undefined: Undefined,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Dice `2TP/(2TP+FP+FN)`, Jaccard `TP/(TP+FP+FN)`, precision `TP/(TP+FP)`,
/// recall `TP/(TP+FN)`. A `0/0` ratio is 1 and flagged in `undefined`.
pub fn metric_report(c: &Confusion) -> MetricReport {
    let (dice, ud) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let (jaccard, uj) = ratio(c.tp, c.tp + c.fp + c.fn_);
    let (precision, up) = ratio(c.tp, c.tp + c.fp);
    let (recall, ur) = ratio(c.tp, c.tp + c.fn_);
    MetricReport {
        dice,
        jaccard,
        precision,
        recall,
        undefined: Undefined {
            dice: ud,
            jaccard: uj,
            precision: up,
            recall: ur,
        },
    }
}

pub fn evaluate(pred: &BinaryMask, truth: &BinaryMask) -> Result<MetricReport> {
    Ok(metric_report(&confusion(pred, truth)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub count: usize,
    /// Images with at least one undefined ratio.
    pub flagged: usize,
}

/// Unweighted mean over images.
pub fn corpus_mean(reports: &[MetricReport]) -> MeanMetrics {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MeanMetrics {
        dice: avg(|r| r.dice),
        jaccard: avg(|r| r.jaccard),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        count: reports.len(),
        flagged: reports.iter().filter(|r| r.undefined.any()).count(),
    }
}
