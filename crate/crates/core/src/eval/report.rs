use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::{confusion, evaluate_instances, pixel_metrics, ConfusionCounts, InstanceConfig, InstanceReport, PixelMetrics};
use crate::raster::Raster;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteReport {
    pub site: String,
    pub counts: ConfusionCounts,
    pub pixel: PixelMetrics,
    pub instances: InstanceReport,
    /// Precision over recall; `None` when recall is zero or either is undefined.
    pub precision_to_recall: Option<f64>,
}

impl SiteReport {
    pub fn new(site: impl Into<String>, counts: ConfusionCounts, instances: InstanceReport) -> Self {
        let pixel = pixel_metrics(&counts);
        let precision_to_recall = match (pixel.precision, pixel.recall) {
            (Some(p), Some(r)) if r > 0.0 => Some(p / r),
            _ => None,
        };
        Self {
            site: site.into(),
            counts,
            pixel,
            instances,
            precision_to_recall,
        }
    }
}

pub struct SiteInput {
    pub site: String,
    pub pred: Raster<u8>,
    /// Ground-truth building ids, 0 for background.
    pub gt_instances: Raster<i32>,
    pub valid: Option<Raster<u8>>,
}

pub fn evaluate_site(input: &SiteInput, cfg: &InstanceConfig) -> Result<SiteReport> {
    let gt_mask = input.gt_instances.map(|v| (v > 0) as u8);
    let counts = confusion(&input.pred, &gt_mask, input.valid.as_ref())?;
    let instances = evaluate_instances(&input.pred, &input.gt_instances, cfg)?;
    Ok(SiteReport::new(input.site.clone(), counts, instances))
}

/// Evaluates sites in parallel; output order follows input order.
pub fn evaluate_sites(inputs: &[SiteInput], cfg: &InstanceConfig) -> Result<Vec<SiteReport>> {
    inputs.par_iter().map(|s| evaluate_site(s, cfg)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MeanStat {
    pub mean: Option<f64>,
    /// Sites left out because the metric was undefined there.
    pub excluded: usize,
}

impl MeanStat {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
        for v in values {
            match v {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => excluded += 1,
            }
        }
        Self {
            mean: (n > 0).then(|| sum / n as f64),
            excluded,
        }
    }
}

/// Per-site means (macro average) plus pooled totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub sites: usize,
    pub precision: MeanStat,
    pub recall: MeanStat,
    pub f_score: MeanStat,
    pub iou: MeanStat,
    pub accuracy: MeanStat,
    pub detection_rate: MeanStat,
    pub precision_to_recall: MeanStat,
    pub pooled_counts: ConfusionCounts,
    pub gt_buildings: usize,
    pub detected: usize,
}

pub fn aggregate_sites(reports: &[SiteReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::argument("no site reports to aggregate"));
    }
    let stat = |f: fn(&SiteReport) -> Option<f64>| MeanStat::of(reports.iter().map(f));
    Ok(Summary {
        sites: reports.len(),
        precision: stat(|r| r.pixel.precision),
        recall: stat(|r| r.pixel.recall),
        f_score: stat(|r| r.pixel.f_score),
        iou: stat(|r| r.pixel.iou),
        accuracy: stat(|r| r.pixel.accuracy),
        detection_rate: stat(|r| r.instances.detection_rate),
        precision_to_recall: stat(|r| r.precision_to_recall),
        pooled_counts: reports.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts),
        gt_buildings: reports.iter().map(|r| r.instances.gt_building_count).sum(),
        detected: reports.iter().map(|r| r.instances.detected_count).sum(),
    })
}

pub const SITE_CSV_COLUMNS: [&str; 25] = [
    "site", "tp", "fp", "tn", "fn", "precision", "recall", "f_score", "iou", "accuracy",
    "gt_buildings", "predicted", "detected", "detection_rate", "precision_to_recall",
    "bin1_gt", "bin1_detected", "bin2_gt", "bin2_detected", "bin3_gt", "bin3_detected",
    "bin4_gt", "bin4_detected", "bin5_gt", "bin5_detected",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// One row per site, columns as in [`SITE_CSV_COLUMNS`]; undefined values are `NA`.
pub fn write_site_csv(reports: &[SiteReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SITE_CSV_COLUMNS)?;
    for r in reports {
        let c = &r.counts;
        let p = &r.pixel;
        let i = &r.instances;
        let mut row = vec![
            r.site.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            opt(p.precision),
            opt(p.recall),
            opt(p.f_score),
            opt(p.iou),
            opt(p.accuracy),
            i.gt_building_count.to_string(),
            i.predicted_count.to_string(),
            i.detected_count.to_string(),
            opt(i.detection_rate),
            opt(r.precision_to_recall),
        ];
        for b in 0..5 {
            row.push(i.bins.gt[b].to_string());
            row.push(i.bins.detected[b].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_opt(v: &str) -> Result<Option<f64>> {
    if v == "NA" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| Error::format(format!("bad metric value {v:?}")))
}

/// Reads rows written by [`write_site_csv`]. Metrics are recomputed from the
/// counts; the stored values are only checked for presence.
pub fn read_site_csv(input: impl std::io::Read) -> Result<Vec<SiteReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != SITE_CSV_COLUMNS {
        return Err(Error::format("site CSV header does not match the expected columns"));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let int = |i: usize| -> Result<u64> {
            rec[i].parse().map_err(|_| Error::format(format!("bad count {:?} in column {}", &rec[i], SITE_CSV_COLUMNS[i])))
        };
        let counts = ConfusionCounts { tp: int(1)?, fp: int(2)?, tn: int(3)?, fn_: int(4)? };
        let mut bins = super::SizeBins::default();
        for b in 0..5 {
            bins.gt[b] = int(15 + 2 * b)? as usize;
            bins.detected[b] = int(16 + 2 * b)? as usize;
        }
        let instances = InstanceReport {
            gt_building_count: int(10)? as usize,
            predicted_count: int(11)? as usize,
            detected_count: int(12)? as usize,
            detection_rate: parse_opt(&rec[13])?,
            bins,
        };
        out.push(SiteReport::new(&rec[0], counts, instances));
    }
    Ok(out)
}

/// Columns `metric,mean,excluded`, followed by pooled counts.
pub fn write_summary_csv(summary: &Summary, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "mean", "excluded"])?;
    for (name, s) in [
        ("precision", summary.precision),
        ("recall", summary.recall),
        ("f_score", summary.f_score),
        ("iou", summary.iou),
        ("accuracy", summary.accuracy),
        ("detection_rate", summary.detection_rate),
        ("precision_to_recall", summary.precision_to_recall),
    ] {
        w.write_record([name.to_string(), opt(s.mean), s.excluded.to_string()])?;
    }
    w.write_record(["sites".to_string(), summary.sites.to_string(), "0".into()])?;
    w.write_record(["gt_buildings".to_string(), summary.gt_buildings.to_string(), "0".into()])?;
    w.write_record(["detected".to_string(), summary.detected.to_string(), "0".into()])?;
    w.flush()?;
    Ok(())
}

/// Strip plot of per-site precision, recall, F-score and IoU on a [0, 1] axis.
pub fn strip_plot_svg(reports: &[SiteReport]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 40.0;
    let metrics: [(&str, fn(&SiteReport) -> Option<f64>); 4] = [
        ("precision", |r| r.pixel.precision),
        ("recall", |r| r.pixel.recall),
        ("F-score", |r| r.pixel.f_score),
        ("IoU", |r| r.pixel.iou),
    ];
    let col = (W - 2.0 * M) / metrics.len() as f64;
    let y_of = |v: f64| H - M - v * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(s, r##"<line x1="{M}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, W - M);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{v:.2}</text>"#, M - 4.0, y + 3.0);
    }
    for (k, (name, f)) in metrics.iter().enumerate() {
        let cx = M + col * (k as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" font-size="11" text-anchor="middle">{name}</text>"#, H - M / 2.0);
        let values: Vec<f64> = reports.iter().filter_map(f).collect();
        for (i, v) in values.iter().enumerate() {
            // Deterministic horizontal spread.
            let jitter = ((i as f64 * 0.618_033_988_75).fract() - 0.5) * col * 0.5;
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#3366aa" fill-opacity="0.6"/>"##,
                cx + jitter,
                y_of(*v)
            );
        }
        if !values.is_empty() {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let y = y_of(mean);
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#cc3333" stroke-width="2"/>"##,
                cx - col * 0.35,
                cx + col * 0.35
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::SizeBins;

    fn report(site: &str, tp: u64, fp: u64, fn_: u64) -> SiteReport {
        let instances = InstanceReport {
            gt_building_count: 2,
            predicted_count: 2,
            detected_count: 1,
            detection_rate: Some(0.5),
            bins: SizeBins::default(),
        };
        SiteReport::new(site, ConfusionCounts { tp, fp, tn: 10, fn_ }, instances)
    }

    #[test]
    fn macro_average() {
        let a = report("a", 7, 3, 0);
        let b = report("b", 8, 2, 0);
        let s = aggregate_sites(&[a.clone(), b]).unwrap();
        assert!((s.precision.mean.unwrap() - 0.75).abs() < 1e-12);
        let single = aggregate_sites(&[a.clone()]).unwrap();
        assert_eq!(single.precision.mean, a.pixel.precision);
        assert!(aggregate_sites(&[]).is_err());
    }

    #[test]
    fn undefined_values_are_excluded() {
        let s = aggregate_sites(&[report("a", 0, 0, 0), report("b", 1, 1, 1)]).unwrap();
        assert_eq!(s.precision.excluded, 1);
        assert_eq!(s.precision.mean, Some(0.5));
        assert_eq!(s.precision_to_recall.excluded, 1);
    }

    #[test]
    fn csv_and_svg() {
        let reports = vec![report("a", 3, 1, 1), report("b", 0, 0, 0)];
        let mut buf = Vec::new();
        write_site_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), SITE_CSV_COLUMNS.len());
        assert!(lines[1].starts_with("a,3,1,10,1,0.750000"));
        assert!(lines[2].contains("NA"));
        assert_eq!(read_site_csv(text.as_bytes()).unwrap(), reports);
        let svg = strip_plot_svg(&reports);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 4);
    }
}
