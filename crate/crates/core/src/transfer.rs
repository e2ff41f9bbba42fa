//! Matching mined regions into video frames and carrying tracked boxes back.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featmap::{slide_match, FeatError, FeaturePyramid, QueryWindow, WindowHit};
use crate::geometry::{iou, transfer_box, BBox};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("no frames to match against")]
    NoFrames,
    #[error(transparent)]
    Feat(#[from] FeatError),
}

pub const DEFAULT_TOP_MATCHES: usize = 20;
pub const DEFAULT_FRAME_STRIDE: usize = 8;

/// Positions `0, stride, 2*stride, ...` below `len`.
pub fn sampled_positions(len: usize, stride: usize) -> Vec<usize> {
    (0..len).step_by(stride.max(1)).collect()
}

/// Frames of one video with their pyramids, in frame order.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub video_id: String,
    pub frames: Vec<(usize, FeaturePyramid)>,
}

/// Top hits of one region inside one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameHits {
    pub video_id: String,
    pub frame_idx: usize,
    pub hits: Vec<WindowHit>,
}

/// Source image region being matched.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionQuery {
    pub region_id: usize,
    pub image_id: String,
    pub bbox: BBox,
    pub window: QueryWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoMatch {
    pub region_id: usize,
    pub image_id: String,
    pub region_box: BBox,
    pub video_id: String,
    pub frame_idx: usize,
    pub hit: WindowHit,
    pub sim: f64,
}

fn match_order(a: &VideoMatch, b: &VideoMatch) -> Ordering {
    b.sim
        .total_cmp(&a.sim)
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.frame_idx.cmp(&b.frame_idx))
        .then(a.hit.level.cmp(&b.hit.level))
        .then(a.hit.cell_y.cmp(&b.hit.cell_y))
        .then(a.hit.cell_x.cmp(&b.hit.cell_x))
}

/// Top `n` hits of the region in every sampled frame of every video.
pub fn hits_per_frame(
    query: &QueryWindow,
    videos: &[VideoFrames],
    n: usize,
    frame_stride: usize,
) -> Result<Vec<FrameHits>, TransferError> {
    let jobs: Vec<(&str, usize, &FeaturePyramid)> = videos
        .iter()
        .flat_map(|v| {
            sampled_positions(v.frames.len(), frame_stride)
                .into_iter()
                .map(move |p| (v.video_id.as_str(), v.frames[p].0, &v.frames[p].1))
        })
        .collect();
    if jobs.is_empty() {
        return Err(TransferError::NoFrames);
    }
    let mut out = jobs
        .par_iter()
        .map(|&(video_id, frame_idx, pyr)| {
            // a frame too small for the window contributes nothing
            let hits = match slide_match(query, pyr, n) {
                Ok(h) => h,
                Err(FeatError::WindowTooLarge { .. }) => Vec::new(),
                Err(e) => return Err(e),
            };
            Ok(FrameHits {
                video_id: video_id.to_string(),
                frame_idx,
                hits,
            })
        })
        .collect::<Result<Vec<_>, FeatError>>()?;
    out.sort_by(|a, b| a.video_id.cmp(&b.video_id).then(a.frame_idx.cmp(&b.frame_idx)));
    Ok(out)
}

/// Global top `n` across frames, canonical order.
pub fn merge_top_matches(region_id: usize, image_id: &str, region_box: BBox, per_frame: &[FrameHits], n: usize) -> Vec<VideoMatch> {
    let mut all: Vec<VideoMatch> = per_frame
        .iter()
        .flat_map(|f| {
            f.hits.iter().map(move |h| VideoMatch {
                region_id,
                image_id: image_id.to_string(),
                region_box,
                video_id: f.video_id.clone(),
                frame_idx: f.frame_idx,
                hit: *h,
                sim: h.score,
            })
        })
        .collect();
    all.sort_by(match_order);
    all.truncate(n);
    all
}

/// The `n` best placements of the region across all sampled frames.
pub fn match_region_to_videos(
    region: &RegionQuery,
    videos: &[VideoFrames],
    n: usize,
    frame_stride: usize,
) -> Result<Vec<VideoMatch>, TransferError> {
    let per_frame = hits_per_frame(&region.window, videos, n, frame_stride)?;
    Ok(merge_top_matches(region.region_id, &region.image_id, region.bbox, &per_frame, n))
}

/// One line of `transfers.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferredBox {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub region_id: usize,
    pub video_id: String,
    pub frame_idx: usize,
    pub sim: f64,
    pub region_box: BBox,
    pub video_box: BBox,
    pub track_box: BBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrieveReport {
    pub transferred: usize,
    pub no_track: usize,
    pub no_overlap: usize,
    pub degenerate: usize,
}

/// Carries the selected track box of each matched frame back to the
/// region's image. Matches without a selected box in their frame, or whose
/// box has zero-area overlap with the matched window, carry nothing.
pub fn retrieve_boxes(
    matches: &[VideoMatch],
    selected: &HashMap<(String, usize), BBox>,
) -> (Vec<TransferredBox>, RetrieveReport) {
    let mut report = RetrieveReport::default();
    let mut out = Vec::new();
    for m in matches {
        let Some(track_box) = selected.get(&(m.video_id.clone(), m.frame_idx)) else {
            report.no_track += 1;
            continue;
        };
        let v = m.hit.pixel_box;
        if iou(&v, track_box) <= 0.0 {
            report.no_overlap += 1;
            continue;
        }
        match transfer_box(&m.region_box, &v, track_box) {
            Ok(bbox) => {
                report.transferred += 1;
                out.push(TransferredBox {
                    image_id: m.image_id.clone(),
                    bbox,
                    region_id: m.region_id,
                    video_id: m.video_id.clone(),
                    frame_idx: m.frame_idx,
                    sim: m.sim,
                    region_box: m.region_box,
                    video_box: v,
                    track_box: *track_box,
                });
            }
            Err(_) => report.degenerate += 1,
        }
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmap::{extract_window, CellRect, FeatureMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(c: [f64; 4]) -> BBox {
        BBox::from_array(c).unwrap()
    }

    fn random_pyr(rng: &mut ChaCha8Rng, size: usize) -> FeaturePyramid {
        let data = (0..size * size * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeaturePyramid::single(FeatureMap::new(size, size, 3, data).unwrap(), 1.0).unwrap()
    }

    fn region(window: QueryWindow) -> RegionQuery {
        RegionQuery {
            region_id: 0,
            image_id: "img".into(),
            bbox: b([0., 0., 3., 3.]),
            window,
        }
    }

    #[test]
    fn sampling_positions() {
        assert_eq!(sampled_positions(16, 8), vec![0, 8]);
        assert_eq!(sampled_positions(5, 8), vec![0]);
        assert_eq!(sampled_positions(0, 8), Vec::<usize>::new());
    }

    #[test]
    fn planted_copy_is_top_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pyr = random_pyr(&mut rng, 9);
        let q = extract_window(&pyr.levels()[0].fmap, CellRect { x: 4, y: 2, w: 3, h: 3 }).unwrap();
        let videos = vec![VideoFrames { video_id: "v".into(), frames: vec![(0, pyr)] }];
        let ms = match_region_to_videos(&region(q), &videos, 20, 8).unwrap();
        assert!((ms[0].sim - 1.0).abs() < 1e-9);
        assert_eq!(ms[0].hit.pixel_box.to_array(), [4., 2., 7., 5.]);
        assert!(ms.len() <= 20);
        assert!(ms.windows(2).all(|w| w[0].sim >= w[1].sim));
    }

    #[test]
    fn no_frames_error() {
        let q = QueryWindow::new(1, 1, 3, vec![1.0; 3]).unwrap();
        let videos = vec![VideoFrames { video_id: "v".into(), frames: vec![] }];
        assert!(matches!(match_region_to_videos(&region(q), &videos, 5, 8), Err(TransferError::NoFrames)));
    }

    #[test]
    fn top_matches_equal_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let videos: Vec<VideoFrames> = (0..2)
            .map(|v| VideoFrames {
                video_id: format!("v{v}"),
                frames: (0..3).map(|f| (f, random_pyr(&mut rng, 6))).collect(),
            })
            .collect();
        let q = QueryWindow::new(2, 2, 3, (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let ms = match_region_to_videos(&region(q.clone()), &videos, 5, 1).unwrap();

        let mut oracle = Vec::new();
        for v in &videos {
            for (f, pyr) in &v.frames {
                let m = &pyr.levels()[0].fmap;
                for y in 0..5 {
                    for x in 0..5 {
                        let w = extract_window(m, CellRect { x, y, w: 2, h: 2 }).unwrap();
                        let s = crate::featmap::cosine_or_zero(&q.data, &w.data);
                        oracle.push((s, v.video_id.clone(), *f, y, x));
                    }
                }
            }
        }
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
        let got: Vec<_> = ms.iter().map(|m| (m.sim, m.video_id.clone(), m.frame_idx, m.hit.cell_y, m.hit.cell_x)).collect();
        assert_eq!(got, oracle[..5].to_vec());
    }

    fn vm(region_box: [f64; 4], v: [f64; 4], video: &str, frame: usize) -> VideoMatch {
        let pixel_box = b(v);
        VideoMatch {
            region_id: 3,
            image_id: "img".into(),
            region_box: b(region_box),
            video_id: video.into(),
            frame_idx: frame,
            hit: WindowHit { level: 0, cell_x: 0, cell_y: 0, pixel_box, score: 0.9 },
            sim: 0.9,
        }
    }

    #[test]
    fn retrieval_rules() {
        let r = [10., 10., 20., 20.];
        let mut sel = HashMap::new();
        sel.insert(("a".to_string(), 0), b([0., 0., 10., 10.])); // equals v
        sel.insert(("a".to_string(), 8), b([30., 30., 40., 40.])); // disjoint
        sel.insert(("b".to_string(), 0), b([2., 1., 14., 11.])); // shifted and grown
        sel.insert(("b".to_string(), 8), b([10., 0., 20., 10.])); // touches edge only
        let matches = vec![
            vm(r, [0., 0., 10., 10.], "a", 0),
            vm(r, [0., 0., 10., 10.], "a", 8),
            vm(r, [0., 0., 10., 10.], "b", 0),
            vm(r, [0., 0., 10., 10.], "b", 8),
            vm(r, [0., 0., 10., 10.], "c", 0),
        ];
        let (out, report) = retrieve_boxes(&matches, &sel);
        let boxes: Vec<_> = out.iter().map(|t| t.bbox.to_array()).collect();
        assert_eq!(boxes, vec![r, [12., 11., 24., 21.]]);
        assert_eq!(report, RetrieveReport { transferred: 2, no_track: 1, no_overlap: 2, degenerate: 0 });
        for t in &out {
            assert_eq!(transfer_box(&t.region_box, &t.video_box, &t.track_box).unwrap(), t.bbox);
        }
    }
}
