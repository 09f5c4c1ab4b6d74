//! Per-class average precision and mAP@IoU evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detector::{BBox, Detection, DetectionModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy matching in descending-score order; every ground truth is consumed
/// at most once, and a prediction is a true positive iff its best
/// still-unconsumed ground truth exceeds the IoU threshold (strictly).
/// Returns (score, is_tp) pairs in the matching order. Score ties keep the
/// input order (stable sort).
pub fn match_detections(
    preds: &[(BBox, f64)],
    gts: &[BBox],
    iou_threshold: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .1
            .partial_cmp(&preds[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut consumed = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let (bbox, score) = preds[pi];
        let mut best = -1.0;
        let mut best_gt = usize::MAX;
        for (gi, gt) in gts.iter().enumerate() {
            if consumed[gi] {
                continue;
            }
            let v = iou(gt, &bbox);
            if v > best {
                best = v;
                best_gt = gi;
            }
        }
        let tp = best > iou_threshold;
        if tp {
            consumed[best_gt] = true;
        }
        flags.push((score, tp));
    }
    flags
}

/// All-point interpolated average precision: integral of the precision
/// envelope over recall. Returns 0 when there are no ground truths.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sorted: Vec<(f64, bool)> = flags.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(sorted.len()); // (recall, precision)
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / n_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    // precision envelope from the right, integrated over recall steps
    let mut ap = 0.0;
    let mut max_prec = 0.0f64;
    let mut prev_recall = points.last().map(|p| p.0).unwrap_or(0.0);
    for &(recall, precision) in points.iter().rev() {
        max_prec = max_prec.max(precision);
        ap += (prev_recall - recall) * max_prec;
        prev_recall = recall;
    }
    ap += prev_recall * max_prec; // segment down to recall 0
    ap
}

/// Evaluation summary for one dataset (one domain).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: String,
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: f64,
    pub n_images: usize,
    pub n_ground_truths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub domains: Vec<DomainEval>,
}

/// mAP from precomputed per-image detections; classes absent from the
/// ground truth are excluded from the mean.
pub fn evaluate_detections<T: Scalar>(
    preds_per_image: &[Vec<Detection>],
    dataset: &Dataset<T>,
    iou_threshold: f64,
) -> Result<DomainEval> {
    if preds_per_image.len() != dataset.samples.len() {
        return Err(Error::invalid(format!(
            "{} prediction lists for {} images",
            preds_per_image.len(),
            dataset.samples.len()
        )));
    }
    let k = dataset.class_names.len();
    let mut per_class_ap = BTreeMap::new();
    let mut total_gt = 0usize;
    let mut present = 0usize;
    let mut map_sum = 0.0;
    for class_id in 1..=k {
        let mut flags: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for (preds, sample) in preds_per_image.iter().zip(&dataset.samples) {
            let gts: Vec<BBox> = sample
                .annotations
                .iter()
                .filter(|(_, c)| *c == class_id)
                .map(|(b, _)| *b)
                .collect();
            n_gt += gts.len();
            let class_preds: Vec<(BBox, f64)> = preds
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(|d| (d.bbox, d.score))
                .collect();
            flags.extend(match_detections(&class_preds, &gts, iou_threshold));
        }
        total_gt += n_gt;
        let ap = average_precision(&flags, n_gt);
        if n_gt > 0 {
            present += 1;
            map_sum += ap;
        }
        per_class_ap.insert(dataset.class_names[class_id - 1].clone(), ap);
    }
    let map = if present == 0 {
        0.0
    } else {
        map_sum / present as f64
    };
    Ok(DomainEval {
        domain: dataset.domain.clone(),
        per_class_ap,
        map,
        n_images: dataset.samples.len(),
        n_ground_truths: total_gt,
    })
}

/// Run the detector on every image and compute mAP@`iou_threshold`.
pub fn evaluate_map<T: Scalar>(
    model: &DetectionModel<T>,
    dataset: &Dataset<T>,
    iou_threshold: f64,
) -> Result<DomainEval> {
    if dataset.samples.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    let preds: Vec<Vec<Detection>> = dataset
        .samples
        .iter()
        .map(|s| model.detect(&s.image, model.cfg.score_threshold, model.cfg.nms_iou))
        .collect::<Result<_>>()?;
    evaluate_detections(&preds, dataset, iou_threshold)
}

/// Markdown table: one row per domain, one column per class plus mAP.
pub fn report_markdown(report: &EvalReport) -> String {
    let mut classes: Vec<String> = Vec::new();
    for d in &report.domains {
        for c in d.per_class_ap.keys() {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
    }
    let mut out = String::new();
    out.push_str("| Domain |");
    for c in &classes {
        out.push_str(&format!(" {c} |"));
    }
    out.push_str(" mAP |\n|---|");
    for _ in &classes {
        out.push_str("---|");
    }
    out.push_str("---|\n");
    for d in &report.domains {
        out.push_str(&format!("| {} |", d.domain));
        for c in &classes {
            match d.per_class_ap.get(c) {
                Some(ap) => out.push_str(&format!(" {ap:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {:.4} |\n", d.map));
    }
    out
}
