//! File-level stages: each reads its inputs from the dataset and output
//! directories, writes its products and a report under `reports/`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::detector::{
    cross_validate_bandwidth, detect, fit_or_identity, lsvm_update, regression_pairs, train_linear, BoxRegressor,
    ExamplePool, LinearModel, TrainConfig, UPDATE_NMS,
};
use crate::eval::{
    aggregate, average_precision, corloc, error_histogram, gt_index, CategoryMetrics, Detection, GroundTruthIndex,
    GtRecord, Metrics, AP_IOU,
};
use crate::featmap::{pool_box, query_for_box, read_fmap, slide_match, FeatError, FeatureMap, FeaturePyramid, WindowHit};
use crate::geometry::{iou, nms, BBox, ScoredBox};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::mining::{mine, Dataset, ImageLabel, LabeledImage, MinedRegion, Proposal, ProposalRecord};
use crate::synth::{files, FrameGt, FrameProposal, Manifest, Split, FEATURE_GRID};
use crate::tracks::{candidates_by_frame, evaluate_selection, select_tracks, FrameMatch, FrameSelection, Track};
use crate::transfer::{merge_top_matches, retrieve_boxes, sampled_positions, FrameHits, TransferredBox, VideoMatch};
use crate::voting::{export_heatmap, select_pseudo_gt, MeanShiftParams, PseudoGt, VoteSpace};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input {0}")]
    MissingInput(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("{stage}: {message}")]
    StageFailure { stage: &'static str, message: String },
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingInput(_) => "MissingInput",
            Self::ConfigInvalid(_) => "ConfigInvalid",
            Self::StageFailure { .. } => "StageFailure",
        }
    }

    pub fn to_json(&self) -> Value {
        let stage = match self {
            Self::StageFailure { stage, .. } => Some(*stage),
            _ => None,
        };
        json!({ "error": self.kind(), "stage": stage, "message": self.to_string() })
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn failure<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::StageFailure { stage, message: e.to_string() }
}

/// Output file names.
pub mod outputs {
    pub const REGIONS: &str = "regions.jsonl";
    pub const CLUSTERS: &str = "clusters.jsonl";
    pub const FRAME_HITS: &str = "frame_hits.jsonl";
    pub const SELECTIONS: &str = "selections.jsonl";
    pub const MATCHES: &str = "matches.jsonl";
    pub const TRANSFERS: &str = "transfers.jsonl";
    pub const CV: &str = "cv_bandwidth.json";
    pub const PSEUDO_GT: &str = "pseudo_gt.jsonl";
    pub const PSEUDO_GT_UPDATED: &str = "pseudo_gt_updated.jsonl";
    pub const MODEL: &str = "model.json";
    pub const MODEL_UPDATED: &str = "model_updated.json";
    pub const REGRESSOR: &str = "regressor.json";
    pub const DETECTIONS: &str = "detections.jsonl";
    pub const METRICS: &str = "metrics.json";
    pub const REPORTS: &str = "reports";
    pub const HEATMAPS: &str = "heatmaps";
}

/// Dataset directory, output directory and settings shared by all stages.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub data: PathBuf,
    pub out: PathBuf,
    pub cfg: PipelineConfig,
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput(path.display().to_string()))
    }
}

impl Ctx {
    pub fn new(data: impl Into<PathBuf>, out: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate().map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(failure("setup"))?;
        Ok(Self { data: data.into(), out, cfg })
    }

    fn data_file(&self, name: &str) -> Result<PathBuf> {
        let p = self.data.join(name);
        require(&p)?;
        Ok(p)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.out_file(name);
        require(&p)?;
        Ok(p)
    }

    fn seed(&self) -> Result<u64> {
        self.cfg
            .seed
            .ok_or_else(|| PipelineError::ConfigInvalid("a seed is required for training".into()))
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.data_file(files::MANIFEST)?).map_err(failure("manifest"))
    }

    fn read<T: DeserializeOwned>(&self, stage: &'static str, path: &Path) -> Result<Vec<T>> {
        read_jsonl(path).map_err(failure(stage))
    }

    fn write<'a, T: Serialize + 'a>(&self, stage: &'static str, name: &str, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
        write_jsonl(&self.out_file(name), items).map_err(failure(stage))
    }

    fn write_json<T: Serialize>(&self, stage: &'static str, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value).map_err(failure(stage))?;
        fs::write(self.out_file(name), bytes).map_err(failure(stage))
    }

    fn read_json<T: DeserializeOwned>(&self, stage: &'static str, name: &str) -> Result<T> {
        let bytes = fs::read(self.input(name)?).map_err(failure(stage))?;
        serde_json::from_slice(&bytes).map_err(failure(stage))
    }

    fn report(&self, stage: &'static str, started: Instant, mut body: Value) -> Result<Value> {
        body["stage"] = json!(stage);
        body["elapsed_ms"] = json!(started.elapsed().as_millis() as u64);
        fs::create_dir_all(self.out_file(outputs::REPORTS)).map_err(failure(stage))?;
        self.write_json(stage, &format!("{}/{stage}.json", outputs::REPORTS), &body)?;
        log::info!("{stage}: {body}");
        Ok(body)
    }

    fn train_dataset(&self, stage: &'static str) -> Result<Dataset> {
        let recs: Vec<ProposalRecord> = self.read(stage, &self.data_file(files::PROPOSALS)?)?;
        Dataset::from_records(recs).map_err(failure(stage))
    }

    fn image_fmaps(&self, stage: &'static str, manifest: &Manifest, ids: &BTreeSet<String>) -> Result<HashMap<String, FeatureMap>> {
        manifest
            .images
            .iter()
            .filter(|i| ids.contains(&i.id))
            .map(|i| Ok((i.id.clone(), read_fmap(&self.data.join(&i.fmap)).map_err(failure(stage))?)))
            .collect()
    }

    fn pseudo(&self, stage: &'static str, name: &str) -> Result<BTreeMap<String, PseudoGt>> {
        let recs: Vec<PseudoGt> = self.read(stage, &self.input(name)?)?;
        Ok(recs.into_iter().map(|p| (p.image_id.clone(), p)).collect())
    }
}

/// Mines discriminative regions from the training proposals.
pub fn run_mine(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "mine";
    let t0 = Instant::now();
    let ds = ctx.train_dataset(STAGE)?;
    let k = ctx.cfg.k.unwrap_or_else(|| ds.default_k());
    let (clusters, set) = mine(&ds, k, ctx.cfg.top_clusters).map_err(failure(STAGE))?;
    let summary: Vec<Value> = clusters
        .iter()
        .take(ctx.cfg.top_clusters)
        .enumerate()
        .map(|(rank, c)| {
            json!({
                "rank": rank,
                "seed": ds.region_id(c.seed),
                "positive_count": c.positive_count,
                "mean_similarity": c.mean_similarity(),
                "members": c.members.iter().map(|m| json!({
                    "region": ds.region_id(m.region),
                    "image_id": ds.proposal(m.region).image_id,
                    "box": ds.proposal(m.region).bbox,
                    "similarity": m.similarity,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    ctx.write(STAGE, outputs::CLUSTERS, &summary)?;
    ctx.write(STAGE, outputs::REGIONS, &set.regions)?;
    ctx.report(
        STAGE,
        t0,
        json!({ "k": k, "clusters_kept": clusters.len(), "regions": set.regions.len() }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub level: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl From<&WindowHit> for HitRecord {
    fn from(h: &WindowHit) -> Self {
        Self { level: h.level, cell_x: h.cell_x, cell_y: h.cell_y, bbox: h.pixel_box, score: h.score }
    }
}

impl From<&HitRecord> for WindowHit {
    fn from(h: &HitRecord) -> Self {
        Self { level: h.level, cell_x: h.cell_x, cell_y: h.cell_y, pixel_box: h.bbox, score: h.score }
    }
}

/// One line of `frame_hits.jsonl`: the top `n` placements of a region in a
/// sampled frame, or its single best placement in any other frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHitsRecord {
    pub region_id: usize,
    pub video_id: String,
    pub frame_idx: usize,
    pub hits: Vec<HitRecord>,
}

/// One line of `matches.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub region_id: usize,
    pub image_id: String,
    pub region_box: BBox,
    pub video_id: String,
    pub frame_idx: usize,
    pub level: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub video_box: BBox,
    pub sim: f64,
}

impl From<&VideoMatch> for MatchRecord {
    fn from(m: &VideoMatch) -> Self {
        Self {
            region_id: m.region_id,
            image_id: m.image_id.clone(),
            region_box: m.region_box,
            video_id: m.video_id.clone(),
            frame_idx: m.frame_idx,
            level: m.hit.level,
            cell_x: m.hit.cell_x,
            cell_y: m.hit.cell_y,
            video_box: m.hit.pixel_box,
            sim: m.sim,
        }
    }
}

fn load_videos(ctx: &Ctx, manifest: &Manifest, stage: &'static str) -> Result<Vec<(String, Vec<FeaturePyramid>)>> {
    manifest
        .videos
        .iter()
        .map(|v| {
            let frames = v
                .frames
                .iter()
                .map(|d| FeaturePyramid::load(&ctx.data.join(d)))
                .collect::<std::result::Result<Vec<_>, FeatError>>()
                .map_err(failure(stage))?;
            Ok((v.id.clone(), frames))
        })
        .collect()
}

fn read_tracks(ctx: &Ctx, stage: &'static str) -> Result<BTreeMap<String, Vec<Track>>> {
    let tracks: Vec<Track> = ctx.read(stage, &ctx.data_file(files::TRACKS)?)?;
    let mut by_video: BTreeMap<String, Vec<Track>> = BTreeMap::new();
    for t in tracks {
        t.validate().map_err(failure(stage))?;
        by_video.entry(t.video_id.clone()).or_default().push(t);
    }
    Ok(by_video)
}

/// Matches every mined region into the video frames and picks one track
/// box per frame from the best placements.
pub fn run_select_tracks(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "select-tracks";
    let t0 = Instant::now();
    let manifest = ctx.manifest()?;
    let regions: Vec<MinedRegion> = ctx.read(STAGE, &ctx.input(outputs::REGIONS)?)?;
    let ids: BTreeSet<String> = regions.iter().map(|r| r.image_id.clone()).collect();
    let fmaps = ctx.image_fmaps(STAGE, &manifest, &ids)?;
    let stride = manifest.cell_stride;
    let queries: Vec<_> = regions
        .iter()
        .map(|r| {
            let fmap = fmaps
                .get(&r.image_id)
                .ok_or_else(|| PipelineError::MissingInput(format!("feature map of {}", r.image_id)))?;
            Ok(query_for_box(fmap, 1.0, stride, &r.bbox, ctx.cfg.target_cells))
        })
        .collect::<Result<_>>()?;
    let videos = load_videos(ctx, &manifest, STAGE)?;
    let n = ctx.cfg.top_matches;

    let mut jobs = Vec::new();
    for (vi, (_, frames)) in videos.iter().enumerate() {
        let sampled: BTreeSet<usize> = sampled_positions(frames.len(), ctx.cfg.frame_stride).into_iter().collect();
        for f in 0..frames.len() {
            let is_sampled = sampled.contains(&f);
            if is_sampled || ctx.cfg.select_every_frame {
                for ri in 0..regions.len() {
                    jobs.push((ri, vi, f, if is_sampled { n } else { 1 }));
                }
            }
        }
    }
    let hits: Vec<FrameHitsRecord> = jobs
        .par_iter()
        .map(|&(ri, vi, f, top)| {
            let hits = match slide_match(&queries[ri], &videos[vi].1[f], top) {
                Ok(h) => h,
                Err(FeatError::WindowTooLarge { .. }) => Vec::new(),
                Err(e) => return Err(failure(STAGE)(e)),
            };
            Ok(FrameHitsRecord {
                region_id: regions[ri].region_id,
                video_id: videos[vi].0.clone(),
                frame_idx: f,
                hits: hits.iter().map(HitRecord::from).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let selections = selections_from_hits(ctx, &hits)?;
    ctx.write(STAGE, outputs::FRAME_HITS, &hits)?;
    ctx.write(STAGE, outputs::SELECTIONS, &selections)?;
    ctx.report(
        STAGE,
        t0,
        json!({ "regions": regions.len(), "frames_scanned": jobs.len() / regions.len().max(1), "selections": selections.len() }),
    )
}

fn selections_from_hits(ctx: &Ctx, hits: &[FrameHitsRecord]) -> Result<Vec<FrameSelection>> {
    const STAGE: &str = "select-tracks";
    let tracks = read_tracks(ctx, STAGE)?;
    let mut evidence: BTreeMap<(String, usize), Vec<FrameMatch>> = BTreeMap::new();
    for rec in hits {
        let entry = evidence.entry((rec.video_id.clone(), rec.frame_idx)).or_default();
        if let Some(best) = rec.hits.first() {
            entry.push(FrameMatch { region_id: rec.region_id, video_box: best.bbox, sim: best.score });
        }
    }
    let mut out = Vec::new();
    for (video_id, vt) in &tracks {
        let frames: Vec<usize> = evidence
            .keys()
            .filter(|(v, _)| v == video_id)
            .map(|(_, f)| *f)
            .collect();
        out.extend(select_tracks(video_id, vt, &frames, |f| {
            evidence.get(&(video_id.clone(), f)).cloned().unwrap_or_default()
        }));
    }
    Ok(out)
}

/// Keeps the global top `n` placements of each region over the sampled
/// frames and carries the selected track boxes back to the images.
pub fn run_match(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "match";
    let t0 = Instant::now();
    let regions: Vec<MinedRegion> = ctx.read(STAGE, &ctx.input(outputs::REGIONS)?)?;
    let hits: Vec<FrameHitsRecord> = ctx.read(STAGE, &ctx.input(outputs::FRAME_HITS)?)?;
    let selections: Vec<FrameSelection> = ctx.read(STAGE, &ctx.input(outputs::SELECTIONS)?)?;
    let stride = ctx.cfg.frame_stride;
    let mut per_region: BTreeMap<usize, Vec<FrameHits>> = BTreeMap::new();
    for rec in hits.iter().filter(|r| r.frame_idx % stride == 0) {
        per_region.entry(rec.region_id).or_default().push(FrameHits {
            video_id: rec.video_id.clone(),
            frame_idx: rec.frame_idx,
            hits: rec.hits.iter().map(WindowHit::from).collect(),
        });
    }
    if per_region.is_empty() && !regions.is_empty() {
        return Err(failure(STAGE)("no frames to match against"));
    }
    let mut matches = Vec::new();
    for r in &regions {
        let per_frame = per_region.get(&r.region_id).map(Vec::as_slice).unwrap_or(&[]);
        matches.extend(merge_top_matches(r.region_id, &r.image_id, r.bbox, per_frame, ctx.cfg.top_matches));
    }
    let selected: HashMap<(String, usize), BBox> = selections
        .iter()
        .map(|s| ((s.video_id.clone(), s.frame_idx), s.bbox))
        .collect();
    let (transfers, report) = retrieve_boxes(&matches, &selected);
    let records: Vec<MatchRecord> = matches.iter().map(MatchRecord::from).collect();
    ctx.write(STAGE, outputs::MATCHES, &records)?;
    ctx.write(STAGE, outputs::TRANSFERS, &transfers)?;
    ctx.report(
        STAGE,
        t0,
        json!({
            "matches": matches.len(),
            "transferred": report.transferred,
            "no_track": report.no_track,
            "no_overlap": report.no_overlap,
            "degenerate": report.degenerate,
        }),
    )
}

/// Pseudo GT of every positive training image from its transferred boxes.
pub fn vote_pseudo_gt(
    manifest: &Manifest,
    transfers: &[TransferredBox],
    bandwidth: f64,
    cfg: &PipelineConfig,
) -> std::result::Result<BTreeMap<String, PseudoGt>, crate::voting::VotingError> {
    let mut by_image: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
    for t in transfers {
        by_image.entry(t.image_id.as_str()).or_default().push(t.bbox);
    }
    let images: Vec<_> = manifest
        .images
        .iter()
        .filter(|i| i.split == Split::Train && i.label == ImageLabel::Pos)
        .filter_map(|i| by_image.get(i.id.as_str()).map(|b| (i, b)))
        .collect();
    let picked = images
        .par_iter()
        .map(|(img, boxes)| {
            let space = VoteSpace::from_boxes(boxes, bandwidth, cfg.kernel)?;
            select_pseudo_gt(
                &img.id,
                &space,
                cfg.theta,
                (img.width as f64, img.height as f64),
                MeanShiftParams::default(),
            )
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(picked.into_iter().flatten().map(|p| (p.image_id.clone(), p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthScore {
    pub bandwidth: f64,
    pub ap: f64,
    pub pseudo_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub best: f64,
    pub scores: Vec<BandwidthScore>,
}

fn bandwidth(ctx: &Ctx, stage: &'static str) -> Result<f64> {
    match ctx.cfg.bandwidth {
        Some(b) => Ok(b),
        None => Ok(ctx.read_json::<CvReport>(stage, outputs::CV)?.best),
    }
}

/// Votes one pseudo GT box per positive training image.
pub fn run_vote(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "vote";
    let t0 = Instant::now();
    let manifest = ctx.manifest()?;
    let transfers: Vec<TransferredBox> = ctx.read(STAGE, &ctx.input(outputs::TRANSFERS)?)?;
    let b = bandwidth(ctx, STAGE)?;
    let pseudo = vote_pseudo_gt(&manifest, &transfers, b, &ctx.cfg).map_err(failure(STAGE))?;
    ctx.write(STAGE, outputs::PSEUDO_GT, pseudo.values())?;
    if ctx.cfg.heatmaps {
        let mut by_image: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
        for t in &transfers {
            by_image.entry(t.image_id.as_str()).or_default().push(t.bbox);
        }
        for img in manifest.images.iter().filter(|i| by_image.contains_key(i.id.as_str())) {
            let path = ctx.out_file(&format!("{}/{}.pgm", outputs::HEATMAPS, img.id));
            export_heatmap(&by_image[img.id.as_str()], img.width as u32, img.height as u32, &path).map_err(failure(STAGE))?;
        }
    }
    let positives = manifest
        .images
        .iter()
        .filter(|i| i.split == Split::Train && i.label == ImageLabel::Pos)
        .count();
    ctx.report(STAGE, t0, json!({ "bandwidth": b, "pseudo_gt": pseudo.len(), "positive_images": positives }))
}

struct TrainInputs {
    ds: Dataset,
    fmaps: HashMap<String, FeatureMap>,
    stride: f64,
}

impl TrainInputs {
    fn load(ctx: &Ctx, stage: &'static str) -> Result<Self> {
        let manifest = ctx.manifest()?;
        let ds = ctx.train_dataset(stage)?;
        let ids: BTreeSet<String> = ds.images().iter().map(|i| i.image_id.clone()).collect();
        let fmaps = ctx.image_fmaps(stage, &manifest, &ids)?;
        Ok(Self { ds, fmaps, stride: manifest.cell_stride })
    }

    fn train(&self, ctx: &Ctx, pseudo: &BTreeMap<String, PseudoGt>, stage: &'static str) -> Result<LinearModel> {
        let pool = ExamplePool::build(self.ds.images(), pseudo, ctx.cfg.label_mode, |id, b| {
            pool_box(&self.fmaps[id], 1.0, self.stride, b, FEATURE_GRID)
        });
        let tc = TrainConfig {
            steps: ctx.cfg.train_steps,
            learning_rate: ctx.cfg.learning_rate,
            lambda: ctx.cfg.lambda,
            seed: ctx.seed()?,
        };
        train_linear(&ctx.cfg.category, &pool, &tc).map_err(failure(stage))
    }
}

/// Trains the detector on the initial pseudo GT.
pub fn run_train(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "train";
    let t0 = Instant::now();
    ctx.seed()?;
    let inputs = TrainInputs::load(ctx, STAGE)?;
    let pseudo = ctx.pseudo(STAGE, outputs::PSEUDO_GT)?;
    let model = inputs.train(ctx, &pseudo, STAGE)?;
    ctx.write_json(STAGE, outputs::MODEL, &model)?;
    ctx.report(STAGE, t0, json!({ "pseudo_gt": pseudo.len(), "dim": model.dim, "label": "initial" }))
}

/// Latent update of the pseudo GT followed by retraining.
pub fn run_update(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "update";
    let t0 = Instant::now();
    ctx.seed()?;
    let inputs = TrainInputs::load(ctx, STAGE)?;
    let mut pseudo = ctx.pseudo(STAGE, outputs::PSEUDO_GT)?;
    let before = pseudo.len();
    let mut model: LinearModel = ctx.read_json(STAGE, outputs::MODEL)?;
    let mut changed = BTreeSet::new();
    for _ in 0..ctx.cfg.lsvm_rounds {
        pseudo = lsvm_update(&model, inputs.ds.images(), &pseudo).map_err(failure(STAGE))?;
        changed.extend(pseudo.values().filter(|p| p.updated).map(|p| p.image_id.clone()));
        model = inputs.train(ctx, &pseudo, STAGE)?;
    }
    for p in pseudo.values_mut() {
        p.updated = changed.contains(&p.image_id);
    }
    ctx.write(STAGE, outputs::PSEUDO_GT_UPDATED, pseudo.values())?;
    ctx.write_json(STAGE, outputs::MODEL_UPDATED, &model)?;
    ctx.report(
        STAGE,
        t0,
        json!({ "pseudo_gt_before": before, "pseudo_gt_after": pseudo.len(), "updated": changed.len(), "label": "updated" }),
    )
}

/// Fits the box regressor on proposals around the updated pseudo GT.
pub fn run_regress(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "regress";
    let t0 = Instant::now();
    let ds = ctx.train_dataset(STAGE)?;
    let name = if ctx.out_file(outputs::PSEUDO_GT_UPDATED).exists() {
        outputs::PSEUDO_GT_UPDATED
    } else {
        outputs::PSEUDO_GT
    };
    let pseudo = ctx.pseudo(STAGE, name)?;
    let dim = ds.images()[0].proposals[0].feature.len();
    let pairs = regression_pairs(ds.images(), &pseudo);
    let (reg, fitted) = fit_or_identity(&pairs, dim, ctx.cfg.ridge_lambda);
    ctx.write_json(STAGE, outputs::REGRESSOR, &reg)?;
    ctx.report(STAGE, t0, json!({ "pairs": pairs.len(), "fitted": fitted, "label": "updated+bboxreg" }))
}

/// Scored detections of every image after NMS, optionally regressed.
pub fn detect_all(
    model: &LinearModel,
    regressor: Option<&BoxRegressor>,
    images: &[(String, Vec<Proposal>)],
) -> std::result::Result<Vec<Detection>, crate::detector::DetectorError> {
    let per_image = images
        .par_iter()
        .map(|(id, props)| {
            let dets = match regressor {
                None => detect(model, props, UPDATE_NMS)?,
                Some(reg) => {
                    let scored = props
                        .iter()
                        .map(|p| Ok(ScoredBox::new(reg.apply(&p.feature, &p.bbox)?, model.score(&p.feature)?)))
                        .collect::<std::result::Result<Vec<_>, crate::detector::DetectorError>>()?;
                    nms(&scored, UPDATE_NMS)
                }
            };
            Ok(dets
                .into_iter()
                .map(|d| Detection { image_id: id.clone(), bbox: d.bbox, score: d.score })
                .collect::<Vec<_>>())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

fn group_images(images: &[LabeledImage]) -> Vec<(String, Vec<Proposal>)> {
    images.iter().map(|i| (i.image_id.clone(), i.proposals.clone())).collect()
}

fn frame_key(video_id: &str, frame_idx: usize) -> String {
    format!("{video_id}/{frame_idx:05}")
}

fn frame_groups(props: Vec<FrameProposal>) -> Vec<(String, Vec<Proposal>)> {
    let mut by_frame: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
    for p in props {
        let key = frame_key(&p.video_id, p.frame_idx);
        by_frame.entry(key.clone()).or_default().push(Proposal { image_id: key, bbox: p.bbox, feature: p.feature });
    }
    by_frame.into_iter().collect()
}

/// Picks the bandwidth whose detector best finds the selected track
/// boxes in the video frames.
pub fn run_cv_bandwidth(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "cv-bandwidth";
    let t0 = Instant::now();
    ctx.seed()?;
    let grid = ctx
        .cfg
        .bandwidth_grid
        .clone()
        .or(ctx.cfg.bandwidth.map(|b| vec![b]))
        .ok_or_else(|| PipelineError::ConfigInvalid("no bandwidth grid".into()))?;
    let manifest = ctx.manifest()?;
    let transfers: Vec<TransferredBox> = ctx.read(STAGE, &ctx.input(outputs::TRANSFERS)?)?;
    let selections: Vec<FrameSelection> = ctx.read(STAGE, &ctx.input(outputs::SELECTIONS)?)?;
    let noisy_gt: GroundTruthIndex = selections
        .iter()
        .map(|s| (frame_key(&s.video_id, s.frame_idx), vec![s.bbox]))
        .collect();
    let frames = frame_groups(ctx.read(STAGE, &ctx.data_file(files::FRAME_PROPOSALS)?)?);
    let frames: Vec<_> = frames.into_iter().filter(|(k, _)| noisy_gt.contains_key(k)).collect();
    let inputs = TrainInputs::load(ctx, STAGE)?;
    let mut scores = Vec::new();
    let (best, _) = cross_validate_bandwidth(&grid, |b| {
        let pseudo = vote_pseudo_gt(&manifest, &transfers, b, &ctx.cfg).map_err(failure(STAGE))?;
        let ap = if pseudo.is_empty() {
            0.0
        } else {
            let model = inputs.train(ctx, &pseudo, STAGE)?;
            let dets = detect_all(&model, None, &frames).map_err(failure(STAGE))?;
            average_precision(&dets, &noisy_gt, AP_IOU, ctx.cfg.ap_mode).map_err(failure(STAGE))?
        };
        scores.push(BandwidthScore { bandwidth: b, ap, pseudo_gt: pseudo.len() });
        Ok::<f64, PipelineError>(ap)
    })
    .map_err(|e| match e {
        PipelineError::StageFailure { .. } => e,
        other => other,
    })?;
    let report = CvReport { best, scores };
    ctx.write_json(STAGE, outputs::CV, &report)?;
    ctx.report(STAGE, t0, serde_json::to_value(&report).map_err(failure(STAGE))?)
}

impl From<crate::detector::DetectorError> for PipelineError {
    fn from(e: crate::detector::DetectorError) -> Self {
        failure("cv-bandwidth")(e)
    }
}

fn best_region_per_image(regions: &[MinedRegion]) -> BTreeMap<String, BBox> {
    let mut best: BTreeMap<String, (usize, usize, BBox)> = BTreeMap::new();
    for r in regions {
        let key = (r.cluster_rank, r.region_id);
        match best.get(&r.image_id) {
            Some(&(rank, id, _)) if (rank, id) <= key => {}
            _ => {
                best.insert(r.image_id.clone(), (key.0, key.1, r.bbox));
            }
        }
    }
    best.into_iter().map(|(k, v)| (k, v.2)).collect()
}

fn boxes_of(pseudo: &BTreeMap<String, PseudoGt>) -> BTreeMap<String, BBox> {
    pseudo.iter().map(|(k, p)| (k.clone(), p.bbox)).collect()
}

/// CorLoc, error breakdown, test-set AP per stage and track selection
/// quality.
pub fn run_eval(ctx: &Ctx) -> Result<Value> {
    const STAGE: &str = "eval";
    let t0 = Instant::now();
    let cat = ctx.cfg.category.clone();
    let gt_recs: Vec<GtRecord> = ctx.read(STAGE, &ctx.data_file(files::GT)?)?;
    let gt = gt_index(&gt_recs, &cat);
    let initial = ctx.pseudo(STAGE, outputs::PSEUDO_GT)?;
    let updated = if ctx.out_file(outputs::PSEUDO_GT_UPDATED).exists() {
        Some(ctx.pseudo(STAGE, outputs::PSEUDO_GT_UPDATED)?)
    } else {
        None
    };
    let final_pseudo = boxes_of(updated.as_ref().unwrap_or(&initial));
    let init_boxes = boxes_of(&initial);
    let mut extra = BTreeMap::new();
    extra.insert("corloc_initial_all".to_string(), corloc(&init_boxes, &gt, true).map_err(failure(STAGE))?);
    extra.insert("corloc_initial_found".to_string(), corloc(&init_boxes, &gt, false).map_err(failure(STAGE))?);
    extra.insert("pseudo_gt_initial".to_string(), initial.len() as f64);
    extra.insert("pseudo_gt_final".to_string(), final_pseudo.len() as f64);
    extra.insert("positive_images".to_string(), gt.len() as f64);
    if ctx.out_file(outputs::REGIONS).exists() {
        let regions: Vec<MinedRegion> = ctx.read(STAGE, &ctx.out_file(outputs::REGIONS))?;
        let best = best_region_per_image(&regions);
        extra.insert("corloc_best_region".to_string(), corloc(&best, &gt, true).map_err(failure(STAGE))?);
    }

    let test_recs: Vec<GtRecord> = ctx.read(STAGE, &ctx.data_file(files::TEST_GT)?)?;
    let test_gt = gt_index(&test_recs, &cat);
    let test_ds =
        Dataset::from_records(ctx.read(STAGE, &ctx.data_file(files::TEST_PROPOSALS)?)?).map_err(failure(STAGE))?;
    let test_images = group_images(test_ds.images());
    let mut ap = None;
    let mut final_dets = Vec::new();
    for (label, model_file, reg_file) in [
        ("ap_initial", outputs::MODEL, None),
        ("ap_updated", outputs::MODEL_UPDATED, None),
        ("ap_updated_bboxreg", outputs::MODEL_UPDATED, Some(outputs::REGRESSOR)),
    ] {
        if !ctx.out_file(model_file).exists() || reg_file.map_or(false, |r| !ctx.out_file(r).exists()) {
            continue;
        }
        let model: LinearModel = ctx.read_json(STAGE, model_file)?;
        let reg: Option<BoxRegressor> = reg_file.map(|r| ctx.read_json(STAGE, r)).transpose()?;
        let dets = detect_all(&model, reg.as_ref(), &test_images).map_err(failure(STAGE))?;
        let v = average_precision(&dets, &test_gt, AP_IOU, ctx.cfg.ap_mode).map_err(failure(STAGE))?;
        extra.insert(label.to_string(), v);
        ap = Some(v);
        final_dets = dets;
    }
    if !final_dets.is_empty() {
        ctx.write(STAGE, outputs::DETECTIONS, &final_dets)?;
    }

    if ctx.out_file(outputs::SELECTIONS).exists() && ctx.data.join(files::FRAME_GT).exists() {
        let selections: Vec<FrameSelection> = ctx.read(STAGE, &ctx.out_file(outputs::SELECTIONS))?;
        let frame_gt: Vec<FrameGt> = ctx.read(STAGE, &ctx.data.join(files::FRAME_GT))?;
        let tracks = read_tracks(ctx, STAGE)?;
        let selected: BTreeSet<(String, usize)> =
            selections.iter().map(|s| (s.video_id.clone(), s.frame_idx)).collect();
        let gt_map: BTreeMap<(String, usize), BBox> = frame_gt
            .iter()
            .map(|g| ((g.video_id.clone(), g.frame_idx), g.bbox))
            .filter(|(k, _)| selected.contains(k))
            .collect();
        let mut cands = BTreeMap::new();
        for (video, vt) in &tracks {
            for (f, c) in candidates_by_frame(vt) {
                cands.insert((video.clone(), f), c);
            }
        }
        if !gt_map.is_empty() {
            let q = evaluate_selection(&selections, &cands, &gt_map).map_err(failure(STAGE))?;
            let exact = selections
                .iter()
                .filter(|s| gt_map.get(&(s.video_id.clone(), s.frame_idx)).map_or(false, |g| iou(g, &s.bbox) == 1.0))
                .count();
            extra.insert("track_mean_iou".to_string(), q.mean_iou);
            extra.insert("track_upper_bound_iou".to_string(), q.upper_bound_mean_iou);
            extra.insert("track_true_rate".to_string(), exact as f64 / gt_map.len() as f64);
            extra.insert("track_frames".to_string(), q.frames as f64);
        }
    }

    let cm = CategoryMetrics {
        corloc_all: corloc(&final_pseudo, &gt, true).map_err(failure(STAGE))?,
        corloc_found: corloc(&final_pseudo, &gt, false).map_err(failure(STAGE))?,
        ap: ap.unwrap_or(0.0),
        error_histogram: error_histogram(&final_pseudo, &gt).map_err(failure(STAGE))?,
        extra,
    };
    let metrics: Metrics = aggregate([(cat, cm)].into()).map_err(failure(STAGE))?;
    ctx.write_json(STAGE, outputs::METRICS, &metrics)?;
    ctx.report(STAGE, t0, serde_json::to_value(&metrics).map_err(failure(STAGE))?)
}

/// Every stage in order; the bandwidth is cross-validated when a grid is
/// configured.
pub fn run_pipeline(ctx: &Ctx) -> Result<Metrics> {
    let t0 = Instant::now();
    ctx.seed()?;
    run_mine(ctx)?;
    run_select_tracks(ctx)?;
    run_match(ctx)?;
    if ctx.cfg.bandwidth.is_none() {
        run_cv_bandwidth(ctx)?;
    }
    run_vote(ctx)?;
    run_train(ctx)?;
    run_update(ctx)?;
    run_regress(ctx)?;
    run_eval(ctx)?;
    let metrics: Metrics = ctx.read_json("pipeline", outputs::METRICS)?;
    ctx.report("pipeline", t0, json!({ "stages": ["mine", "select-tracks", "match", "cv-bandwidth", "vote", "train", "update", "regress", "eval"] }))?;
    Ok(metrics)
}
