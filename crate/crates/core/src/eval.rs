//! Localization and detection metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{contains, iou, BBox};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no positive images with ground truth")]
    NoPositiveImages,
    #[error("no ground-truth boxes")]
    NoGroundTruth,
    #[error("image {0} has a prediction but no ground truth")]
    MissingGroundTruth(String),
    #[error("no categories to aggregate")]
    NoCategories,
}

/// One line of `gt.jsonl`. `parts` lists extra planted blocks that are not
/// objects themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image_id: String,
    pub category: String,
    pub boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<BBox>,
}

/// Ground-truth boxes per image; images without boxes are left out.
pub type GroundTruthIndex = BTreeMap<String, Vec<BBox>>;

pub fn gt_index<'a>(records: impl IntoIterator<Item = &'a GtRecord>, category: &str) -> GroundTruthIndex {
    records
        .into_iter()
        .filter(|r| r.category == category && !r.boxes.is_empty())
        .map(|r| (r.image_id.clone(), r.boxes.clone()))
        .collect()
}

pub const CORLOC_IOU: f64 = 0.5;

fn best_iou(pred: &BBox, gt: &[BBox]) -> f64 {
    gt.iter().map(|g| iou(pred, g)).fold(0.0, f64::max)
}

/// Fraction of positive images whose prediction overlaps some GT box by
/// more than 0.5 IOU. Missed images count as failures when
/// `include_missed`, and leave the denominator otherwise.
pub fn corloc(predictions: &BTreeMap<String, BBox>, gt: &GroundTruthIndex, include_missed: bool) -> Result<f64, EvalError> {
    if gt.is_empty() {
        return Err(EvalError::NoPositiveImages);
    }
    if let Some(id) = predictions.keys().find(|id| !gt.contains_key(*id)) {
        return Err(EvalError::MissingGroundTruth(id.clone()));
    }
    let hits = predictions
        .iter()
        .filter(|(id, p)| best_iou(p, &gt[*id]) > CORLOC_IOU)
        .count();
    let denom = if include_missed { gt.len() } else { predictions.len() };
    Ok(if denom == 0 { 0.0 } else { hits as f64 / denom as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCase {
    CorrectLocalization,
    PseudoInGt,
    GtInPseudo,
    LowOverlap,
    NoOverlap,
}

impl ErrorCase {
    pub const ALL: [ErrorCase; 5] = [
        Self::CorrectLocalization,
        Self::PseudoInGt,
        Self::GtInPseudo,
        Self::LowOverlap,
        Self::NoOverlap,
    ];
}

/// First matching case, tested against the GT box of highest IOU (the
/// first such box on ties).
pub fn categorize_error(pred: &BBox, gt_boxes: &[BBox]) -> Result<ErrorCase, EvalError> {
    let mut best: Option<(f64, &BBox)> = None;
    for g in gt_boxes {
        let o = iou(pred, g);
        if best.map_or(true, |(b, _)| o > b) {
            best = Some((o, g));
        }
    }
    let (o, g) = best.ok_or(EvalError::NoGroundTruth)?;
    Ok(if o >= CORLOC_IOU {
        ErrorCase::CorrectLocalization
    } else if contains(g, pred) {
        ErrorCase::PseudoInGt
    } else if contains(pred, g) {
        ErrorCase::GtInPseudo
    } else if o > 0.0 {
        ErrorCase::LowOverlap
    } else {
        ErrorCase::NoOverlap
    })
}

/// Counts per case over every predicted image; all five keys are present.
pub fn error_histogram(predictions: &BTreeMap<String, BBox>, gt: &GroundTruthIndex) -> Result<BTreeMap<ErrorCase, usize>, EvalError> {
    let mut hist: BTreeMap<ErrorCase, usize> = ErrorCase::ALL.iter().map(|&c| (c, 0)).collect();
    for (id, p) in predictions {
        let boxes = gt.get(id).ok_or_else(|| EvalError::MissingGroundTruth(id.clone()))?;
        *hist.get_mut(&categorize_error(p, boxes)?).expect("all cases present") += 1;
    }
    Ok(hist)
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    ElevenPoint,
    AllPoint,
}

pub const AP_IOU: f64 = 0.5;

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Precision and recall after each detection in score order. A detection
/// is a true positive when its highest-IOU GT box in the same image
/// exceeds `iou_thresh` and is still unmatched.
pub fn pr_curve(detections: &[Detection], gt: &GroundTruthIndex, iou_thresh: f64) -> Result<Vec<(f64, f64)>, EvalError> {
    let n_gt: usize = gt.values().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut dets: Vec<&Detection> = detections.iter().collect();
    dets.sort_by(|a, b| detection_order(a, b));
    let mut matched: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut hit = false;
        if let Some(boxes) = gt.get(&d.image_id) {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                let o = iou(&d.bbox, g);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, o)) = best {
                let flags = matched.get_mut(d.image_id.as_str()).expect("same keys as gt");
                if o > iou_thresh && !flags[j] {
                    flags[j] = true;
                    hit = true;
                }
            }
        }
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        out.push((tp as f64 / (tp + fp) as f64, tp as f64 / n_gt as f64));
    }
    Ok(out)
}

pub fn average_precision(detections: &[Detection], gt: &GroundTruthIndex, iou_thresh: f64, mode: ApMode) -> Result<f64, EvalError> {
    let curve = pr_curve(detections, gt, iou_thresh)?;
    let max_prec_from = |r: f64| {
        curve
            .iter()
            .filter(|(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max)
    };
    Ok(match mode {
        ApMode::ElevenPoint => (0..=10).map(|i| max_prec_from(i as f64 / 10.0)).sum::<f64>() / 11.0,
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for &(_, r) in &curve {
                if r > prev_r {
                    ap += (r - prev_r) * max_prec_from(r);
                    prev_r = r;
                }
            }
            ap
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub corloc_all: f64,
    pub corloc_found: f64,
    pub ap: f64,
    pub error_histogram: BTreeMap<ErrorCase, usize>,
    /// Ablation values such as per-stage AP and CorLoc.
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub categories: BTreeMap<String, CategoryMetrics>,
    pub mean_corloc: f64,
    pub mean_corloc_found: f64,
    pub map: f64,
}

pub fn aggregate(categories: BTreeMap<String, CategoryMetrics>) -> Result<Metrics, EvalError> {
    if categories.is_empty() {
        return Err(EvalError::NoCategories);
    }
    let n = categories.len() as f64;
    let mean = |f: fn(&CategoryMetrics) -> f64| categories.values().map(f).sum::<f64>() / n;
    Ok(Metrics {
        mean_corloc: mean(|c| c.corloc_all),
        mean_corloc_found: mean(|c| c.corloc_found),
        map: mean(|c| c.ap),
        categories,
    })
}
