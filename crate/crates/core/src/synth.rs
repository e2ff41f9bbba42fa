//! Deterministic synthetic datasets.
//!
//! Objects carry two planted parts, top-left and bottom-right, each a
//! smooth blend of category signature vectors. The other two quadrants of
//! an object hold an instance-specific body vector, so the parts are far
//! more repeatable than the object as a whole. Distractor blocks appear in
//! every image and video regardless of label. Everything is drawn from one
//! ChaCha8 stream seeded by `SynthConfig::seed`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::eval::GtRecord;
use crate::featmap::{pool_box, write_fmap, FeatError, FeatureMap, FeaturePyramid, PyramidLevel, FMAP_VERSION};
use crate::geometry::BBox;
use crate::jsonl::{write_jsonl, JsonlError};
use crate::mining::{ImageLabel, ProposalRecord};
use crate::tracks::{Track, TrackFrame};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const CATEGORY: &str = "object";
/// Pooling grid of proposal descriptors.
pub const FEATURE_GRID: usize = 2;
pub const DISTRACTOR_TRACKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_pos_images: usize,
    pub n_neg_images: usize,
    pub n_test_pos: usize,
    pub n_test_neg: usize,
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// Side of every image and frame, in cells at unit scale.
    pub map_size: usize,
    pub channels: usize,
    pub signature_strength: f32,
    pub noise_sigma: f32,
    pub n_distractors: usize,
    pub multi_instance_prob: f64,
    pub proposal_count: usize,
    pub min_object: usize,
    pub max_object: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pos_images: 16,
            n_neg_images: 16,
            n_test_pos: 8,
            n_test_neg: 8,
            n_videos: 2,
            frames_per_video: 16,
            map_size: 16,
            channels: 8,
            signature_strength: 1.0,
            noise_sigma: 0.15,
            n_distractors: 2,
            multi_instance_prob: 0.0,
            proposal_count: 40,
            min_object: 8,
            max_object: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.to_string()));
        if self.n_pos_images == 0 || self.n_neg_images == 0 {
            return bad("need at least one positive and one negative image");
        }
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return bad("need at least one video frame");
        }
        // parts are orthonormal blends of four vectors each
        if self.channels < 8 {
            return bad("channels must be at least 8");
        }
        if self.min_object < 4 || self.min_object > self.max_object || self.max_object > self.map_size {
            return bad("object size range must satisfy 4 <= min <= max <= map_size");
        }
        if !(self.signature_strength > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("strength must be positive and noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.multi_instance_prob) {
            return bad("multi_instance_prob must lie in [0, 1]");
        }
        if self.proposal_count < 12 {
            return bad("proposal_count must be at least 12");
        }
        Ok(())
    }
}

/// Video pyramid scales, `2^(1 - i/2)`.
pub fn video_scales() -> Vec<f64> {
    (0..7).map(|i| 2f64.powf(1.0 - i as f64 / 2.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub label: ImageLabel,
    pub split: Split,
    pub fmap: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    /// Pyramid directories, one per frame in order.
    pub frames: Vec<String>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fmap_version: u8,
    pub categories: Vec<String>,
    pub cell_stride: f64,
    pub images: Vec<ManifestImage>,
    pub videos: Vec<ManifestVideo>,
    pub config: SynthConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// One line of `frame_proposals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameProposal {
    pub video_id: String,
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f32>,
}

/// One line of `frame_gt.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGt {
    pub video_id: String,
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

struct Palette {
    part_tl: [Vec<f32>; 4],
    part_br: [Vec<f32>; 4],
    distractors: Vec<[Vec<f32>; 4]>,
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, c: usize) -> Vec<f32> {
    unit((0..c).map(|_| StandardNormal.sample(rng)).collect())
}

/// Eight orthonormal vectors by Gram-Schmidt over random draws.
fn orthonormal(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f32>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f32> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f32 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let n2: f32 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-3 {
            basis.push(unit(v));
        }
    }
    basis
}

impl Palette {
    fn draw(rng: &mut ChaCha8Rng, c: usize, n_kinds: usize) -> Self {
        let mut e = orthonormal(rng, c, 8).into_iter();
        let mut four = || std::array::from_fn(|_| e.next().expect("eight vectors"));
        let part_tl = four();
        let part_br = four();
        let distractors = (0..n_kinds.max(1))
            .map(|_| std::array::from_fn(|_| random_unit(rng, c)))
            .collect();
        Self { part_tl, part_br, distractors }
    }
}

#[derive(Debug, Clone)]
struct Instance {
    bbox: BBox,
    body: [Vec<f32>; 2],
}

#[derive(Debug, Clone)]
struct Block {
    bbox: BBox,
    kind: usize,
}

#[derive(Debug, Clone, Default)]
struct Scene {
    instances: Vec<Instance>,
    blocks: Vec<Block>,
}

fn blend(corners: &[Vec<f32>; 4], a: f32, b: f32, out: &mut [f32], k: f32) {
    let w = [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b];
    for (ci, corner) in corners.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(corner) {
            *o += k * w[ci] * v;
        }
    }
}

fn inside(b: &BBox, x: f64, y: f64) -> bool {
    x >= b.x_min() && x < b.x_max() && y >= b.y_min() && y < b.y_max()
}

impl Scene {
    /// Noise-free feature at pixel point `(x, y)`.
    fn value(&self, pal: &Palette, strength: f32, x: f64, y: f64, out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for inst in &self.instances {
            let b = &inst.bbox;
            if !inside(b, x, y) {
                continue;
            }
            let u = ((x - b.x_min()) / b.width()) as f32;
            let v = ((y - b.y_min()) / b.height()) as f32;
            match (u < 0.5, v < 0.5) {
                (true, true) => blend(&pal.part_tl, u * 2.0, v * 2.0, out, strength),
                (false, false) => blend(&pal.part_br, u * 2.0 - 1.0, v * 2.0 - 1.0, out, strength),
                (false, true) => out.iter_mut().zip(&inst.body[0]).for_each(|(o, &s)| *o = strength * s),
                (true, false) => out.iter_mut().zip(&inst.body[1]).for_each(|(o, &s)| *o = strength * s),
            }
            return;
        }
        for blk in &self.blocks {
            let b = &blk.bbox;
            if inside(b, x, y) {
                let u = ((x - b.x_min()) / b.width()) as f32;
                let v = ((y - b.y_min()) / b.height()) as f32;
                blend(&pal.distractors[blk.kind], u, v, out, strength);
                return;
            }
        }
    }

    fn render(&self, pal: &Palette, cfg: &SynthConfig, scale: f64, rng: &mut ChaCha8Rng) -> FeatureMap {
        let n = ((cfg.map_size as f64) * scale).round().max(1.0) as usize;
        let c = cfg.channels;
        let noise = Normal::new(0.0f32, cfg.noise_sigma).expect("sigma validated");
        let mut fmap = FeatureMap::zeros(n, n, c);
        let mut buf = vec![0.0f32; c];
        for y in 0..n {
            for x in 0..n {
                self.value(pal, cfg.signature_strength, (x as f64 + 0.5) / scale, (y as f64 + 0.5) / scale, &mut buf);
                let cell = fmap.cell_mut(x, y);
                for (dst, &v) in cell.iter_mut().zip(&buf) {
                    *dst = v + if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                }
            }
        }
        fmap
    }
}

fn part_boxes(b: &BBox) -> [BBox; 2] {
    let (cx, cy) = b.center();
    [
        BBox::new(b.x_min(), b.y_min(), cx, cy).expect("object has positive size"),
        BBox::new(cx, cy, b.x_max(), b.y_max()).expect("object has positive size"),
    ]
}

fn random_box(rng: &mut ChaCha8Rng, size: usize, lo: usize, hi: usize) -> BBox {
    let w = rng.gen_range(lo..=hi).min(size);
    let h = rng.gen_range(lo..=hi).min(size);
    let x = rng.gen_range(0..=size - w);
    let y = rng.gen_range(0..=size - h);
    BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).expect("positive size")
}

/// Copy of `b` with every edge moved by at most `amount` pixels, kept
/// inside the frame.
fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64, size: usize) -> BBox {
    loop {
        let d: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-amount..=amount).round());
        let s = size as f64;
        let c = [
            (b.x_min() + d[0]).clamp(0.0, s),
            (b.y_min() + d[1]).clamp(0.0, s),
            (b.x_max() + d[2]).clamp(0.0, s),
            (b.y_max() + d[3]).clamp(0.0, s),
        ];
        if c[2] - c[0] >= 2.0 && c[3] - c[1] >= 2.0 {
            return BBox::from_array(c).expect("checked extent");
        }
    }
}

fn disjoint(a: &BBox, others: &[BBox]) -> bool {
    others.iter().all(|o| a.intersection_area(o) == 0.0)
}

fn place_blocks(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n_kinds: usize, avoid: &[BBox]) -> Vec<Block> {
    let mut placed: Vec<BBox> = avoid.to_vec();
    let mut blocks = Vec::new();
    for i in 0..cfg.n_distractors {
        for _ in 0..50 {
            let b = random_box(rng, cfg.map_size, 3, 5);
            if disjoint(&b, &placed) {
                placed.push(b);
                blocks.push(Block { bbox: b, kind: i % n_kinds });
                break;
            }
        }
    }
    blocks
}

fn place_instances(rng: &mut ChaCha8Rng, cfg: &SynthConfig, count: usize, c: usize) -> Vec<Instance> {
    let s = cfg.map_size;
    let boxes: Vec<BBox> = if count >= 2 {
        // side by side, one per half, sized to fit
        let half = s / 2;
        let side = cfg.min_object.min(half.saturating_sub(1)).max(4);
        (0..2)
            .map(|i| {
                let x = i * half + rng.gen_range(0..=half - side);
                let y = rng.gen_range(0..=s - side);
                BBox::new(x as f64, y as f64, (x + side) as f64, (y + side) as f64).expect("positive size")
            })
            .collect()
    } else {
        vec![random_box(rng, s, cfg.min_object, cfg.max_object)]
    };
    boxes
        .into_iter()
        .map(|bbox| Instance {
            bbox,
            body: [random_unit(rng, c), random_unit(rng, c)],
        })
        .collect()
}

fn proposals_for(rng: &mut ChaCha8Rng, cfg: &SynthConfig, scene: &Scene) -> Vec<BBox> {
    let s = cfg.map_size;
    let mut out = Vec::with_capacity(cfg.proposal_count);
    for inst in &scene.instances {
        out.push(inst.bbox);
        for _ in 0..3 {
            out.push(jitter(rng, &inst.bbox, 1.0, s));
        }
        for p in part_boxes(&inst.bbox) {
            out.push(p);
            out.push(jitter(rng, &p, 1.0, s));
        }
    }
    for blk in &scene.blocks {
        out.push(blk.bbox);
        out.push(jitter(rng, &blk.bbox, 1.0, s));
    }
    while out.len() < cfg.proposal_count {
        out.push(random_box(rng, s, 3, 12));
    }
    out
}

struct ImageOut {
    id: String,
    label: ImageLabel,
    split: Split,
    fmap: FeatureMap,
    proposals: Vec<BBox>,
    gt: Vec<BBox>,
    parts: Vec<BBox>,
}

fn gen_image(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    pal: &Palette,
    id: String,
    label: ImageLabel,
    split: Split,
) -> ImageOut {
    let instances = match label {
        ImageLabel::Pos => {
            let count = if rng.gen_bool(cfg.multi_instance_prob) { 2 } else { 1 };
            place_instances(rng, cfg, count, cfg.channels)
        }
        ImageLabel::Neg => Vec::new(),
    };
    let avoid: Vec<BBox> = instances.iter().map(|i| i.bbox).collect();
    let blocks = place_blocks(rng, cfg, pal.distractors.len(), &avoid);
    let scene = Scene { instances, blocks };
    let fmap = scene.render(pal, cfg, 1.0, rng);
    let proposals = proposals_for(rng, cfg, &scene);
    let gt: Vec<BBox> = scene.instances.iter().map(|i| i.bbox).collect();
    let parts = gt.iter().flat_map(part_boxes).collect();
    ImageOut { id, label, split, fmap, proposals, gt, parts }
}

struct VideoOut {
    id: String,
    frames: Vec<FeaturePyramid>,
    object: Vec<BBox>,
    tracks: Vec<Track>,
    proposals: Vec<Vec<BBox>>,
}

fn clamp_box(b: [f64; 4], size: f64) -> [f64; 4] {
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    let x = b[0].clamp(0.0, size - w);
    let y = b[1].clamp(0.0, size - h);
    [x, y, x + w, y + h]
}

/// Start and length of the longest run of `true`.
fn longest_run(flags: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    for (i, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        if !f {
            if i > start && best.map_or(true, |(_, l)| i - start > l) {
                best = Some((start, i - start));
            }
            start = i + 1;
        }
    }
    best
}

fn gen_video(rng: &mut ChaCha8Rng, cfg: &SynthConfig, pal: &Palette, id: String) -> VideoOut {
    let s = cfg.map_size as f64;
    let f = cfg.frames_per_video;
    let start = random_box(rng, cfg.map_size, cfg.min_object, cfg.max_object);
    let body = [random_unit(rng, cfg.channels), random_unit(rng, cfg.channels)];
    let mut vel = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    let mut object = Vec::with_capacity(f);
    let mut cur = start.to_array();
    for _ in 0..f {
        object.push(BBox::from_array(cur).expect("size preserved"));
        let next = [cur[0] + vel[0], cur[1] + vel[1], cur[2] + vel[0], cur[3] + vel[1]];
        for axis in 0..2 {
            if next[axis] < 0.0 || next[axis + 2] > s {
                vel[axis] = -vel[axis];
            }
        }
        cur = clamp_box([cur[0] + vel[0], cur[1] + vel[1], cur[2] + vel[0], cur[3] + vel[1]], s);
    }
    let blocks = place_blocks(rng, cfg, pal.distractors.len(), &[]);

    let mut candidates: Vec<Vec<TrackFrame>> = vec![object
        .iter()
        .enumerate()
        .map(|(t, b)| TrackFrame { t, bbox: *b })
        .collect()];
    for i in 0..DISTRACTOR_TRACKS {
        // the first few follow static blocks while they are visible, the
        // rest wander
        if let Some(blk) = blocks.get(i).filter(|_| i < 2) {
            let visible: Vec<bool> = object.iter().map(|o| o.intersection_area(&blk.bbox) == 0.0).collect();
            if let Some((first, len)) = longest_run(&visible) {
                let frames = (first..first + len)
                    .map(|t| TrackFrame { t, bbox: jitter(rng, &blk.bbox, 1.0, cfg.map_size) })
                    .collect();
                candidates.push(frames);
                continue;
            }
        }
        let len = rng.gen_range(f.min(4)..=f);
        let first = rng.gen_range(0..=f - len);
        let mut frames = Vec::with_capacity(len);
        let mut b = random_box(rng, cfg.map_size, cfg.min_object, cfg.max_object).to_array();
        for t in first..first + len {
            frames.push(TrackFrame { t, bbox: BBox::from_array(b).expect("size preserved") });
            let dx = rng.gen_range(-1.0..=1.0f64).round();
            let dy = rng.gen_range(-1.0..=1.0f64).round();
            b = clamp_box([b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy], s);
        }
        candidates.push(frames);
    }
    let mut ids: Vec<u32> = (0..candidates.len() as u32).collect();
    ids.shuffle(rng);
    let mut ranks: Vec<u32> = (1..=candidates.len() as u32).collect();
    ranks.shuffle(rng);
    let mut tracks: Vec<Track> = candidates
        .into_iter()
        .enumerate()
        .map(|(i, frames)| Track { video_id: id.clone(), track_id: ids[i], rank: ranks[i], frames })
        .collect();
    tracks.sort_by_key(|t| t.track_id);

    let mut frames = Vec::with_capacity(f);
    let mut proposals = Vec::with_capacity(f);
    for obj in &object {
        let scene = Scene {
            instances: vec![Instance { bbox: *obj, body: body.clone() }],
            blocks: blocks.clone(),
        };
        let levels = video_scales()
            .into_iter()
            .map(|scale| PyramidLevel { scale, fmap: scene.render(pal, cfg, scale, rng) })
            .collect();
        frames.push(FeaturePyramid::new(levels, 1.0).expect("valid scale ladder"));
        proposals.push(proposals_for(rng, cfg, &scene));
    }
    VideoOut { id, frames, object, tracks, proposals }
}

fn features(fmap: &FeatureMap, scale: f64, boxes: &[BBox]) -> Vec<Vec<f32>> {
    boxes.iter().map(|b| pool_box(fmap, scale, 1.0, b, FEATURE_GRID)).collect()
}

/// File names inside a dataset directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const PROPOSALS: &str = "proposals.jsonl";
    pub const TEST_PROPOSALS: &str = "test_proposals.jsonl";
    pub const FRAME_PROPOSALS: &str = "frame_proposals.jsonl";
    pub const TRACKS: &str = "tracks.jsonl";
    pub const GT: &str = "gt.jsonl";
    pub const TEST_GT: &str = "test_gt.jsonl";
    pub const FRAME_GT: &str = "frame_gt.jsonl";
    pub const PIPELINE_CONF: &str = "pipeline.conf";
}

/// Writes a complete dataset under `out`.
pub fn gen_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pal = Palette::draw(&mut rng, cfg.channels, cfg.n_distractors);

    let mut images = Vec::new();
    for (split, n_pos, n_neg, prefix) in [
        (Split::Train, cfg.n_pos_images, cfg.n_neg_images, ""),
        (Split::Test, cfg.n_test_pos, cfg.n_test_neg, "test_"),
    ] {
        for i in 0..n_pos {
            images.push(gen_image(&mut rng, cfg, &pal, format!("{prefix}pos_{i:03}"), ImageLabel::Pos, split));
        }
        for i in 0..n_neg {
            images.push(gen_image(&mut rng, cfg, &pal, format!("{prefix}neg_{i:03}"), ImageLabel::Neg, split));
        }
    }
    let videos: Vec<VideoOut> = (0..cfg.n_videos)
        .map(|v| gen_video(&mut rng, cfg, &pal, format!("vid_{v:02}")))
        .collect();

    fs::create_dir_all(out.join("images"))?;
    let mut m_images = Vec::new();
    let mut train_props = Vec::new();
    let mut test_props = Vec::new();
    let mut train_gt = Vec::new();
    let mut test_gt = Vec::new();
    for img in &images {
        let rel = format!("images/{}.fmap", img.id);
        write_fmap(&out.join(&rel), &img.fmap)?;
        m_images.push(ManifestImage {
            id: img.id.clone(),
            label: img.label,
            split: img.split,
            fmap: rel,
            width: cfg.map_size,
            height: cfg.map_size,
        });
        let recs = img
            .proposals
            .iter()
            .zip(features(&img.fmap, 1.0, &img.proposals))
            .map(|(b, feature)| ProposalRecord { image_id: img.id.clone(), label: img.label, bbox: *b, feature });
        let gt = GtRecord {
            image_id: img.id.clone(),
            category: CATEGORY.to_string(),
            boxes: img.gt.clone(),
            parts: img.parts.clone(),
        };
        match img.split {
            Split::Train => {
                train_props.extend(recs);
                train_gt.push(gt);
            }
            Split::Test => {
                test_props.extend(recs);
                test_gt.push(gt);
            }
        }
    }

    let mut m_videos = Vec::new();
    let mut tracks = Vec::new();
    let mut frame_props = Vec::new();
    let mut frame_gt = Vec::new();
    for v in &videos {
        let mut dirs = Vec::new();
        for (t, pyr) in v.frames.iter().enumerate() {
            let rel = format!("videos/{}/f{t:03}", v.id);
            pyr.save(&out.join(&rel))?;
            dirs.push(rel);
            let base = pyr.base_level();
            for (b, feature) in v.proposals[t].iter().zip(features(&base.fmap, base.scale, &v.proposals[t])) {
                frame_props.push(FrameProposal { video_id: v.id.clone(), frame_idx: t, bbox: *b, feature });
            }
            frame_gt.push(FrameGt { video_id: v.id.clone(), frame_idx: t, bbox: v.object[t] });
        }
        m_videos.push(ManifestVideo { id: v.id.clone(), frames: dirs, width: cfg.map_size, height: cfg.map_size });
        tracks.extend(v.tracks.iter().cloned());
    }

    let manifest = Manifest {
        fmap_version: FMAP_VERSION,
        categories: vec![CATEGORY.to_string()],
        cell_stride: 1.0,
        images: m_images,
        videos: m_videos,
        config: cfg.clone(),
    };
    fs::write(out.join(files::MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    write_jsonl(&out.join(files::PROPOSALS), &train_props)?;
    write_jsonl(&out.join(files::TEST_PROPOSALS), &test_props)?;
    write_jsonl(&out.join(files::FRAME_PROPOSALS), &frame_props)?;
    write_jsonl(&out.join(files::TRACKS), &tracks)?;
    write_jsonl(&out.join(files::GT), &train_gt)?;
    write_jsonl(&out.join(files::TEST_GT), &test_gt)?;
    write_jsonl(&out.join(files::FRAME_GT), &frame_gt)?;
    fs::write(out.join(files::PIPELINE_CONF), PipelineConfig::synthetic_profile(cfg.seed).to_conf_string())?;
    Ok(manifest)
}

/// Every positive image holds two instances, one in each half.
pub fn gen_multi_instance_case(cfg: &SynthConfig, out: &Path) -> Result<Manifest, SynthError> {
    let cfg = SynthConfig { multi_instance_prob: 1.0, ..cfg.clone() };
    gen_dataset(&cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmap::{extract_window, slide_match, CellRect, QueryWindow};

    #[test]
    fn orthonormal_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = orthonormal(&mut rng, 8, 8);
        for i in 0..8 {
            for j in 0..8 {
                let d: f32 = e[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn scale_ladder() {
        let s = video_scales();
        assert_eq!(s.len(), 7);
        assert_eq!(s[2], 1.0);
        assert!(s.windows(2).all(|w| (w[1] / w[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12));
    }

    #[test]
    fn invalid_config() {
        let cfg = SynthConfig { n_pos_images: 0, ..SynthConfig::default() };
        assert!(matches!(cfg.validate(), Err(SynthError::ConfigInvalid(_))));
        let cfg = SynthConfig { channels: 4, ..SynthConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noiseless_planted_window_scores_one() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pal = Palette::draw(&mut rng, cfg.channels, cfg.n_distractors);
        for i in 0..4 {
            let img = gen_image(&mut rng, &cfg, &pal, format!("p{i}"), ImageLabel::Pos, Split::Train);
            let g = img.gt[0];
            let rect = CellRect {
                x: g.x_min() as usize,
                y: g.y_min() as usize,
                w: g.width() as usize,
                h: g.height() as usize,
            };
            let q: QueryWindow = extract_window(&img.fmap, rect).unwrap();
            let pyr = FeaturePyramid::single(img.fmap.clone(), 1.0).unwrap();
            let hits = slide_match(&q, &pyr, 1).unwrap();
            assert!((hits[0].score - 1.0).abs() < 1e-9);
            assert_eq!(hits[0].pixel_box, g);
        }
    }

    #[test]
    fn proposals_include_planted_boxes() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pal = Palette::draw(&mut rng, cfg.channels, cfg.n_distractors);
        let img = gen_image(&mut rng, &cfg, &pal, "p".into(), ImageLabel::Pos, Split::Train);
        assert_eq!(img.proposals.len(), cfg.proposal_count);
        assert!(img.proposals.contains(&img.gt[0]));
        for p in &img.parts {
            assert!(img.proposals.contains(p));
        }
        let neg = gen_image(&mut rng, &cfg, &pal, "n".into(), ImageLabel::Neg, Split::Train);
        assert!(neg.gt.is_empty());
    }

    #[test]
    fn true_track_covers_object() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pal = Palette::draw(&mut rng, cfg.channels, cfg.n_distractors);
        let v = gen_video(&mut rng, &cfg, &pal, "v".into());
        assert_eq!(v.tracks.len(), 1 + DISTRACTOR_TRACKS);
        for (t, obj) in v.object.iter().enumerate() {
            let best = v
                .tracks
                .iter()
                .filter_map(|tr| tr.box_at(t))
                .map(|b| crate::geometry::iou(&b, obj))
                .fold(0.0, f64::max);
            assert_eq!(best, 1.0);
        }
        for tr in &v.tracks {
            tr.validate().unwrap();
        }
    }

    #[test]
    fn multi_instance_halves() {
        let cfg = SynthConfig { multi_instance_prob: 1.0, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pal = Palette::draw(&mut rng, cfg.channels, cfg.n_distractors);
        let img = gen_image(&mut rng, &cfg, &pal, "p".into(), ImageLabel::Pos, Split::Train);
        assert_eq!(img.gt.len(), 2);
        assert!(img.gt[0].x_max() <= 8.0 && img.gt[1].x_min() >= 8.0);
    }
}
