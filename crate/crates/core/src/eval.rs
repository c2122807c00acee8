//! Image-quality and segmentation metrics.
//!
//! Segmentation metrics are computed at a fixed operating threshold of 0.5.
//! Precision of an empty prediction is 1 when the ground truth is also
//! empty and 0 otherwise. AP is the area under the precision/recall curve
//! traced by 101 evenly spaced thresholds in `[0, 1]`: thresholds that
//! produce an empty prediction contribute no point, the curve is extended
//! flat from its lowest-recall point down to recall 0, and the area is
//! integrated with the trapezoid rule.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::losses::ssim;
use crate::query::RelevancyMap;
use crate::real::Real;

pub const OPERATING_THRESHOLD: f64 = 0.5;
pub const AP_THRESHOLDS: usize = 101;
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at 100 dB.
pub fn psnr<T: Real>(render: &Image<T>, gt: &Image<T>) -> Result<f64> {
    render.same_shape(gt)?;
    let n = render.data.len().max(1) as f64;
    let mse = render
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse > 0.0 { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) } else { PSNR_CAP })
}

/// `(psnr, ssim)` of a render against ground truth.
pub fn image_metrics<T: Real>(render: &Image<T>, gt: &Image<T>) -> Result<(f64, f64)> {
    let p = psnr(render, gt)?;
    let s = ssim(&render.cast::<f64>(), &gt.cast::<f64>())?;
    Ok((p, s))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

impl Confusion {
    fn of(pred: impl Iterator<Item = bool>, gt: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (p, &g) in pred.zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    fn pixel_accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }

    fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            p => self.tp as f64 / p as f64,
        }
    }

    fn recall(&self) -> Option<f64> {
        let g = self.tp + self.fn_;
        (g > 0).then(|| self.tp as f64 / g as f64)
    }
}

/// Metrics of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub iou: f64,
    pub pixel_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
}

/// Metrics of a score array against a ground-truth mask.
pub fn query_metrics(query: &str, scores: &[f32], gt: &[bool]) -> Result<QueryMetrics> {
    if scores.len() != gt.len() {
        return Err(Error::DimensionMismatch { what: "scores vs ground-truth mask", expected: gt.len(), found: scores.len() });
    }
    let at = |t: f64| Confusion::of(scores.iter().map(move |&s| f64::from(s) > t), gt);
    let c = at(OPERATING_THRESHOLD);
    Ok(QueryMetrics {
        query: query.to_string(),
        iou: c.iou(),
        pixel_accuracy: c.pixel_accuracy(),
        precision: c.precision(),
        recall: c.recall().unwrap_or(1.0),
        ap: average_precision(scores, gt),
    })
}

/// Area under the threshold-swept precision/recall curve.
pub fn average_precision(scores: &[f32], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|&&g| g).count();
    let mut points: Vec<(f64, f64)> = (0..AP_THRESHOLDS)
        .filter_map(|k| {
            let t = k as f64 / (AP_THRESHOLDS - 1) as f64;
            let c = Confusion::of(scores.iter().map(|&s| f64::from(s) > t), gt);
            (c.tp + c.fp > 0).then(|| (c.recall().unwrap_or(0.0), c.precision()))
        })
        .collect();
    if points.is_empty() || positives == 0 {
        // Nothing predicted at any threshold, or nothing to find.
        return if points.is_empty() && positives == 0 { 1.0 } else { 0.0 };
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut prev = (0.0, points[0].1);
    for &(r, p) in &points {
        area += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    area
}

/// Per-query metrics and their unweighted means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub queries: Vec<QueryMetrics>,
    pub miou: f64,
    pub mpa: f64,
    pub mp: f64,
    pub map: f64,
}

impl SegmentationReport {
    pub fn from_queries(queries: Vec<QueryMetrics>) -> Self {
        let n = queries.len().max(1) as f64;
        let mean = |f: fn(&QueryMetrics) -> f64| queries.iter().map(f).sum::<f64>() / n;
        Self {
            miou: mean(|q| q.iou),
            mpa: mean(|q| q.pixel_accuracy),
            mp: mean(|q| q.precision),
            map: mean(|q| q.ap),
            queries,
        }
    }

    /// One row per query followed by a `mean` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let fmt = |e: csv::Error| Error::Format { format: "csv", reason: e.to_string() };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["query", "pa", "precision", "iou", "ap"]).map_err(fmt)?;
        for q in &self.queries {
            w.write_record([q.query.clone(), f(q.pixel_accuracy), f(q.precision), f(q.iou), f(q.ap)]).map_err(fmt)?;
        }
        w.write_record(["mean".to_string(), f(self.mpa), f(self.mp), f(self.miou), f(self.map)]).map_err(fmt)?;
        w.flush().map_err(|e| Error::Format { format: "csv", reason: e.to_string() })
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// Relevancy maps of one query over several views.
pub struct QueryMaps<'a> {
    pub query: &'a str,
    pub maps: &'a [RelevancyMap],
}

/// Scores every query against the label maps of the same views, pooling
/// pixels across views. `mapping` names the ground-truth label of each query.
pub fn segmentation_metrics(
    queries: &[QueryMaps<'_>],
    gt: &[LabelMap],
    mapping: &BTreeMap<String, u16>,
) -> Result<SegmentationReport> {
    let per_query: Vec<Result<QueryMetrics>> = queries
        .par_iter()
        .map(|q| {
            let &label = mapping.get(q.query).ok_or_else(|| Error::MissingMapping(q.query.to_string()))?;
            if q.maps.len() != gt.len() {
                return Err(Error::DimensionMismatch { what: "relevancy maps vs label maps", expected: gt.len(), found: q.maps.len() });
            }
            let mut scores = Vec::new();
            let mut truth = Vec::new();
            for (m, l) in q.maps.iter().zip(gt) {
                if m.width != l.width || m.height != l.height {
                    return Err(Error::DimensionMismatch {
                        what: "relevancy map vs label map pixels",
                        expected: l.width * l.height,
                        found: m.width * m.height,
                    });
                }
                scores.extend_from_slice(&m.scores);
                truth.extend(l.labels.iter().map(|&v| v == label));
            }
            query_metrics(q.query, &scores, &truth)
        })
        .collect();
    Ok(SegmentationReport::from_queries(per_query.into_iter().collect::<Result<_>>()?))
}

/// Image-quality summary of a set of views.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub psnr: f64,
    pub ssim: f64,
    pub views: usize,
}

/// Mean PSNR and SSIM over render/ground-truth pairs.
pub fn image_report(pairs: &[(Image<f32>, Image<f32>)]) -> Result<ImageReport> {
    let per: Vec<(f64, f64)> = pairs.par_iter().map(|(r, g)| image_metrics(r, g)).collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok(ImageReport {
        psnr: per.iter().map(|p| p.0).sum::<f64>() / n,
        ssim: per.iter().map(|p| p.1).sum::<f64>() / n,
        views: per.len(),
    })
}

/// Table-shaped summary: image quality followed by segmentation means.
pub fn write_summary_csv(image: &ImageReport, seg: &SegmentationReport, out: impl Write) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { format: "csv", reason: e.to_string() };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["psnr", "ssim", "mpa", "mp", "miou", "map"]).map_err(fmt)?;
    w.write_record([image.psnr, image.ssim, seg.mpa, seg.mp, seg.miou, seg.map].map(f)).map_err(fmt)?;
    w.flush().map_err(|e| Error::Format { format: "csv", reason: e.to_string() })
}
