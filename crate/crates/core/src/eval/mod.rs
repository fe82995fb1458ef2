//! Pixel and instance level scoring.

mod instances;
mod report;

pub use instances::{
    connected_components, evaluate_instances, match_instances, size_bin, size_bins, Components,
    Connectivity, InstanceConfig, InstanceReport, Matching, SizeBins, SIZE_BIN_EDGES_M2,
};
pub use report::{
    aggregate_sites, evaluate_site, evaluate_sites, read_site_csv, strip_plot_svg, write_site_csv,
    write_summary_csv, MeanStat, SiteInput, SiteReport, Summary, SITE_CSV_COLUMNS,
};

use serde::Serialize;

use crate::raster::Raster;
use crate::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Counts predicted/actual building pixels. Any nonzero value is a building;
/// pixels where `mask` is zero are skipped.
pub fn confusion(pred: &Raster<u8>, gt: &Raster<u8>, mask: Option<&Raster<u8>>) -> Result<ConfusionCounts> {
    pred.ensure_same_dims(gt, "prediction vs ground truth")?;
    if let Some(m) = mask {
        pred.ensure_same_dims(m, "prediction vs validity mask")?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0) {
            continue;
        }
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Metrics are `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PixelMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn pixel_metrics(c: &ConfusionCounts) -> PixelMetrics {
    PixelMetrics {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f_score: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

/// F-score and IoU from a precision/recall pair, as when checking published tables.
pub fn f_and_iou_from_pr(precision: f64, recall: f64) -> (f64, f64) {
    let f = 2.0 * precision * recall / (precision + recall);
    let iou = precision * recall / (precision + recall - precision * recall);
    (f, iou)
}
