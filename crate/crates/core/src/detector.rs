//! Linear detector trained from pseudo ground truth.
//!
//! Label assignment, the 32/96 minibatch sampler, a hinge-loss linear
//! classifier, the latent update of pseudo GT boxes, box regression and
//! bandwidth selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, nms, BBox, ScoredBox};
use crate::mining::{ImageLabel, LabeledImage, Proposal};
use crate::voting::PseudoGt;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("example pool has no {0} examples")]
    EmptyPool(&'static str),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("regression needs at least one training pair")]
    NoTrainingPairs,
    #[error("regression system is singular")]
    SingularSystem,
    #[error("empty bandwidth grid")]
    EmptyGrid,
}

pub const HARD_NEG_LOW: f64 = 0.1;
pub const HARD_NEG_HIGH: f64 = 0.3;
pub const FINETUNE_POS: f64 = 0.6;
pub const UPDATE_MIN_IOU: f64 = 0.5;
pub const UPDATE_NMS: f64 = 0.3;
pub const BATCH_POS: usize = 32;
pub const BATCH_NEG: usize = 96;

/// Proposal indices of one image split three ways. `pseudo_gt` is set
/// when the pseudo GT box itself is a positive example.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelAssignment {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub ignored: Vec<usize>,
    pub pseudo_gt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Pseudo GT positive, `0.1 < IOU < 0.3` negative.
    Rcnn,
    /// `IOU >= 0.6` positive, `0.1 <= IOU <= 0.3` negative.
    Finetune,
}

impl std::str::FromStr for LabelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rcnn" => Ok(Self::Rcnn),
            "finetune" => Ok(Self::Finetune),
            other => Err(format!("unknown label mode {other:?}")),
        }
    }
}

fn assign(
    proposals: &[BBox],
    pseudo_gt: Option<&BBox>,
    label: ImageLabel,
    classify: impl Fn(f64) -> Option<bool>,
) -> LabelAssignment {
    let mut out = LabelAssignment::default();
    match (label, pseudo_gt) {
        (ImageLabel::Neg, _) => out.negatives = (0..proposals.len()).collect(),
        (ImageLabel::Pos, None) => out.ignored = (0..proposals.len()).collect(),
        (ImageLabel::Pos, Some(gt)) => {
            out.pseudo_gt = true;
            for (i, p) in proposals.iter().enumerate() {
                match classify(iou(p, gt)) {
                    Some(true) => out.positives.push(i),
                    Some(false) => out.negatives.push(i),
                    None => out.ignored.push(i),
                }
            }
        }
    }
    out
}

/// Hard negatives only: strictly between 0.1 and 0.3 IOU with the pseudo GT.
pub fn assign_rcnn_labels(proposals: &[BBox], pseudo_gt: Option<&BBox>, label: ImageLabel) -> LabelAssignment {
    assign(proposals, pseudo_gt, label, |o| {
        (o > HARD_NEG_LOW && o < HARD_NEG_HIGH).then_some(false)
    })
}

pub fn assign_finetune_labels(proposals: &[BBox], pseudo_gt: Option<&BBox>, label: ImageLabel) -> LabelAssignment {
    assign(proposals, pseudo_gt, label, |o| {
        if o >= FINETUNE_POS {
            Some(true)
        } else if (HARD_NEG_LOW..=HARD_NEG_HIGH).contains(&o) {
            Some(false)
        } else {
            None
        }
    })
}

pub fn assign_labels(mode: LabelMode, proposals: &[BBox], pseudo_gt: Option<&BBox>, label: ImageLabel) -> LabelAssignment {
    match mode {
        LabelMode::Rcnn => assign_rcnn_labels(proposals, pseudo_gt, label),
        LabelMode::Finetune => assign_finetune_labels(proposals, pseudo_gt, label),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExamplePool {
    pub positives: Vec<Vec<f32>>,
    pub negatives: Vec<Vec<f32>>,
}

impl ExamplePool {
    /// Collects examples from every image. `gt_feature` describes a pseudo
    /// GT box of an image.
    pub fn build(
        images: &[LabeledImage],
        pseudo: &BTreeMap<String, PseudoGt>,
        mode: LabelMode,
        gt_feature: impl Fn(&str, &BBox) -> Vec<f32>,
    ) -> Self {
        let mut pool = Self::default();
        for img in images {
            let gt = pseudo.get(&img.image_id).map(|p| p.bbox);
            let boxes: Vec<BBox> = img.proposals.iter().map(|p| p.bbox).collect();
            let a = assign_labels(mode, &boxes, gt.as_ref(), img.label);
            if a.pseudo_gt {
                let gt = gt.expect("assignment marks a pseudo GT only when present");
                pool.positives.push(gt_feature(&img.image_id, &gt));
            }
            pool.positives.extend(a.positives.iter().map(|&i| img.proposals[i].feature.clone()));
            pool.negatives.extend(a.negatives.iter().map(|&i| img.proposals[i].feature.clone()));
        }
        pool
    }

    fn dim(&self) -> Option<usize> {
        self.positives.iter().chain(&self.negatives).next().map(Vec::len)
    }
}

/// Draws `count` indices from `0..pool`: without replacement when the pool
/// is large enough, uniformly with replacement otherwise.
fn draw(rng: &mut ChaCha8Rng, pool: usize, count: usize) -> Vec<usize> {
    if pool >= count {
        sample(rng, pool, count).into_vec()
    } else {
        (0..count).map(|_| rng.gen_range(0..pool)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn sample_minibatch(n_pos: usize, n_neg: usize, rng: &mut ChaCha8Rng) -> Result<Minibatch, DetectorError> {
    if n_pos == 0 {
        return Err(DetectorError::EmptyPool("positive"));
    }
    if n_neg == 0 {
        return Err(DetectorError::EmptyPool("negative"));
    }
    Ok(Minibatch {
        positives: draw(rng, n_pos, BATCH_POS),
        negatives: draw(rng, n_neg, BATCH_NEG),
    })
}

/// One line of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub category_id: String,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zero(category_id: &str, dim: usize) -> Self {
        Self {
            category_id: category_id.to_string(),
            dim,
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn score(&self, feature: &[f32]) -> Result<f64, DetectorError> {
        if feature.len() != self.dim {
            return Err(DetectorError::DimensionMismatch {
                expected: self.dim,
                found: feature.len(),
            });
        }
        Ok(self.raw_score(feature))
    }

    fn raw_score(&self, feature: &[f32]) -> f64 {
        self.weights
            .iter()
            .zip(feature)
            .map(|(w, &x)| w * x as f64)
            .sum::<f64>()
            + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.1,
            lambda: 1e-3,
            seed: 0,
        }
    }
}

/// Class weights of the hinge terms, matching the 32/96 batch mix.
pub const POS_WEIGHT: f64 = BATCH_POS as f64 / (BATCH_POS + BATCH_NEG) as f64;
pub const NEG_WEIGHT: f64 = BATCH_NEG as f64 / (BATCH_POS + BATCH_NEG) as f64;

/// `lambda/2 |w|^2 + 0.25 mean_pos hinge + 0.75 mean_neg hinge`. The zero
/// model scores exactly 1.
pub fn objective(model: &LinearModel, pool: &ExamplePool, lambda: f64) -> f64 {
    let hinge = |xs: &[Vec<f32>], y: f64| {
        if xs.is_empty() {
            return 0.0;
        }
        xs.iter().map(|x| (1.0 - y * model.raw_score(x)).max(0.0)).sum::<f64>() / xs.len() as f64
    };
    let reg = 0.5 * lambda * model.weights.iter().map(|w| w * w).sum::<f64>();
    reg + POS_WEIGHT * hinge(&pool.positives, 1.0) + NEG_WEIGHT * hinge(&pool.negatives, -1.0)
}

const OBJECTIVE_EVERY: usize = 10;

/// Minibatch subgradient descent on [`objective`]. The learning rate drops
/// tenfold halfway through; the best iterate seen is returned, so the
/// result never scores worse than the zero model.
pub fn train_linear(category_id: &str, pool: &ExamplePool, cfg: &TrainConfig) -> Result<LinearModel, DetectorError> {
    let dim = pool.dim().ok_or(DetectorError::EmptyPool("positive"))?;
    for x in pool.positives.iter().chain(&pool.negatives) {
        if x.len() != dim {
            return Err(DetectorError::DimensionMismatch { expected: dim, found: x.len() });
        }
    }
    let mut model = LinearModel::zero(category_id, dim);
    if cfg.steps == 0 {
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = model.clone();
    let mut best_obj = objective(&model, pool, cfg.lambda);
    let mut grad = vec![0.0f64; dim];
    for step in 0..cfg.steps {
        let batch = sample_minibatch(pool.positives.len(), pool.negatives.len(), &mut rng)?;
        let lr = if step < cfg.steps / 2 {
            cfg.learning_rate
        } else {
            cfg.learning_rate * 0.1
        };
        for (g, w) in grad.iter_mut().zip(&model.weights) {
            *g = cfg.lambda * w;
        }
        let mut grad_b = 0.0;
        for (idx, xs, y, wt) in [
            (&batch.positives, &pool.positives, 1.0, POS_WEIGHT),
            (&batch.negatives, &pool.negatives, -1.0, NEG_WEIGHT),
        ] {
            let c = wt / idx.len() as f64;
            for &i in idx {
                let x = &xs[i];
                if y * model.raw_score(x) < 1.0 {
                    for (g, &v) in grad.iter_mut().zip(x) {
                        *g -= c * y * v as f64;
                    }
                    grad_b -= c * y;
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
        model.bias -= lr * grad_b;
        if (step + 1) % OBJECTIVE_EVERY == 0 || step + 1 == cfg.steps {
            let obj = objective(&model, pool, cfg.lambda);
            if obj < best_obj {
                best_obj = obj;
                best = model.clone();
            }
        }
    }
    Ok(best)
}

/// Scored proposals after NMS, best first.
pub fn detect(model: &LinearModel, proposals: &[Proposal], nms_thresh: f64) -> Result<Vec<ScoredBox>, DetectorError> {
    let scored = proposals
        .iter()
        .map(|p| Ok(ScoredBox::new(p.bbox, model.score(&p.feature)?)))
        .collect::<Result<Vec<_>, DetectorError>>()?;
    Ok(nms(&scored, nms_thresh))
}

/// One latent update round over the positive images. Missing pseudo GT
/// boxes are filled with the top detection; existing ones move to the top
/// detection overlapping them by at least 0.5 IOU, or stay put.
pub fn lsvm_update(
    model: &LinearModel,
    images: &[LabeledImage],
    pseudo: &BTreeMap<String, PseudoGt>,
) -> Result<BTreeMap<String, PseudoGt>, DetectorError> {
    let mut out = pseudo.clone();
    for img in images.iter().filter(|i| i.label == ImageLabel::Pos) {
        let dets = detect(model, &img.proposals, UPDATE_NMS)?;
        match pseudo.get(&img.image_id) {
            None => {
                if let Some(top) = dets.first() {
                    out.insert(
                        img.image_id.clone(),
                        PseudoGt {
                            image_id: img.image_id.clone(),
                            bbox: top.bbox,
                            vote: 0.0,
                            support: 0,
                            updated: true,
                        },
                    );
                }
            }
            Some(old) => {
                let pick = dets.iter().find(|d| iou(&d.bbox, &old.bbox) >= UPDATE_MIN_IOU);
                let mut next = old.clone();
                next.updated = false;
                if let Some(d) = pick {
                    if d.bbox != old.bbox {
                        next.bbox = d.bbox;
                        next.updated = true;
                    }
                }
                out.insert(img.image_id.clone(), next);
            }
        }
    }
    Ok(out)
}

/// Center/size offsets of `g` relative to `p`.
pub fn regression_targets(p: &BBox, g: &BBox) -> [f64; 4] {
    let (px, py) = p.center();
    let (gx, gy) = g.center();
    [
        (gx - px) / p.width(),
        (gy - py) / p.height(),
        (g.width() / p.width()).ln(),
        (g.height() / p.height()).ln(),
    ]
}

/// Inverse of [`regression_targets`].
pub fn apply_targets(p: &BBox, t: [f64; 4]) -> Option<BBox> {
    let (px, py) = p.center();
    let cx = px + t[0] * p.width();
    let cy = py + t[1] * p.height();
    let w = p.width() * t[2].exp();
    let h = p.height() * t[3].exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressor {
    pub dim: usize,
    /// One weight row per target `(t_x, t_y, t_w, t_h)`.
    pub weights: [Vec<f64>; 4],
    pub bias: [f64; 4],
}

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;
pub const REGRESSION_MIN_IOU: f64 = 0.6;

impl BoxRegressor {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            weights: std::array::from_fn(|_| vec![0.0; dim]),
            bias: [0.0; 4],
        }
    }

    pub fn predict(&self, feature: &[f32]) -> Result<[f64; 4], DetectorError> {
        if feature.len() != self.dim {
            return Err(DetectorError::DimensionMismatch { expected: self.dim, found: feature.len() });
        }
        Ok(std::array::from_fn(|k| {
            self.bias[k] + self.weights[k].iter().zip(feature).map(|(w, &x)| w * x as f64).sum::<f64>()
        }))
    }

    /// Refined box; the proposal itself when the prediction is degenerate.
    pub fn apply(&self, feature: &[f32], proposal: &BBox) -> Result<BBox, DetectorError> {
        let t = self.predict(feature)?;
        Ok(apply_targets(proposal, t).unwrap_or(*proposal))
    }
}

/// One regression example: proposal feature, proposal box, target box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPair {
    pub feature: Vec<f32>,
    pub proposal: BBox,
    pub target: BBox,
}

/// Ridge regression with an unpenalized bias, solved on centered data.
pub fn fit_bbox_regressor(pairs: &[RegressionPair], lambda: f64) -> Result<BoxRegressor, DetectorError> {
    let first = pairs.first().ok_or(DetectorError::NoTrainingPairs)?;
    let dim = first.feature.len();
    if let Some(p) = pairs.iter().find(|p| p.feature.len() != dim) {
        return Err(DetectorError::DimensionMismatch { expected: dim, found: p.feature.len() });
    }
    let n = pairs.len();
    let x = DMatrix::from_fn(n, dim, |i, j| pairs[i].feature[j] as f64);
    let t: Vec<[f64; 4]> = pairs.iter().map(|p| regression_targets(&p.proposal, &p.target)).collect();
    let y = DMatrix::from_fn(n, 4, |i, k| t[i][k]);
    let x_mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let y_mean = DVector::from_fn(4, |k, _| y.column(k).mean());
    let mut reg = BoxRegressor::identity(dim);
    if dim > 0 {
        let xc = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - x_mean[j]);
        let yc = DMatrix::from_fn(n, 4, |i, k| y[(i, k)] - y_mean[k]);
        let a = xc.transpose() * &xc + DMatrix::identity(dim, dim) * lambda;
        let w = a
            .cholesky()
            .ok_or(DetectorError::SingularSystem)?
            .solve(&(xc.transpose() * yc));
        if w.iter().any(|v| !v.is_finite()) {
            return Err(DetectorError::SingularSystem);
        }
        for k in 0..4 {
            reg.weights[k] = w.column(k).iter().copied().collect();
        }
    }
    for k in 0..4 {
        reg.bias[k] = y_mean[k] - reg.weights[k].iter().zip(x_mean.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(reg)
}

/// Training pairs: proposals of positive images overlapping their pseudo
/// GT by at least 0.6 IOU.
pub fn regression_pairs(images: &[LabeledImage], pseudo: &BTreeMap<String, PseudoGt>) -> Vec<RegressionPair> {
    let mut out = Vec::new();
    for img in images.iter().filter(|i| i.label == ImageLabel::Pos) {
        let Some(gt) = pseudo.get(&img.image_id) else { continue };
        for p in &img.proposals {
            if iou(&p.bbox, &gt.bbox) >= REGRESSION_MIN_IOU {
                out.push(RegressionPair {
                    feature: p.feature.clone(),
                    proposal: p.bbox,
                    target: gt.bbox,
                });
            }
        }
    }
    out
}

/// Fits on the pairs, falling back to the identity regressor when the
/// system cannot be solved or there is nothing to fit.
pub fn fit_or_identity(pairs: &[RegressionPair], dim: usize, lambda: f64) -> (BoxRegressor, bool) {
    match fit_bbox_regressor(pairs, lambda) {
        Ok(r) => (r, true),
        Err(e) => {
            log::warn!("box regression falls back to identity: {e}");
            (BoxRegressor::identity(dim), false)
        }
    }
}

/// Scores every bandwidth with `evaluate` and returns the best one along
/// with all scores. Ties go to the smaller bandwidth.
pub fn cross_validate_bandwidth<E: From<DetectorError>>(
    grid: &[f64],
    mut evaluate: impl FnMut(f64) -> Result<f64, E>,
) -> Result<(f64, Vec<(f64, f64)>), E> {
    if grid.is_empty() {
        return Err(DetectorError::EmptyGrid.into());
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for b in sorted {
        let ap = evaluate(b)?;
        scores.push((b, ap));
        if best.map_or(true, |(_, s)| ap > s) {
            best = Some((b, ap));
        }
    }
    Ok((best.expect("grid is non-empty").0, scores))
}
