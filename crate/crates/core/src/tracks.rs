//! Choosing the relevant tracked box in each frame.
//!
//! Every mined region contributes its best match `v_i` in the frame; a
//! candidate track box `t` scores `sum_i IOU(v_i, t) * sim_i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track {video_id}/{track_id}: frame indices must strictly increase")]
    UnorderedFrames { video_id: String, track_id: u32 },
    #[error("no ground truth for any evaluated frame")]
    NoGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub t: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One line of `tracks.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub video_id: String,
    pub track_id: u32,
    pub rank: u32,
    pub frames: Vec<TrackFrame>,
}

impl Track {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.frames.windows(2).all(|w| w[0].t < w[1].t) {
            Ok(())
        } else {
            Err(TrackError::UnorderedFrames {
                video_id: self.video_id.clone(),
                track_id: self.track_id,
            })
        }
    }

    pub fn box_at(&self, frame_idx: usize) -> Option<BBox> {
        self.frames
            .binary_search_by_key(&frame_idx, |f| f.t)
            .ok()
            .map(|i| self.frames[i].bbox)
    }
}

/// Best match of one mined region inside one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMatch {
    pub region_id: usize,
    pub video_box: BBox,
    pub sim: f64,
}

/// One line of `selections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSelection {
    pub video_id: String,
    pub frame_idx: usize,
    pub track_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

pub fn score_track_box(t: &BBox, frame_matches: &[FrameMatch]) -> f64 {
    frame_matches.iter().map(|m| iou(&m.video_box, t) * m.sim).sum()
}

/// Highest-scoring candidate; the lowest `track_id` wins ties. `None` when
/// no track covers the frame.
pub fn select_track_per_frame(
    video_id: &str,
    frame_idx: usize,
    candidates: &[(u32, BBox)],
    frame_matches: &[FrameMatch],
) -> Option<FrameSelection> {
    let mut best: Option<(u32, BBox, f64)> = None;
    for &(track_id, bbox) in candidates {
        let score = score_track_box(&bbox, frame_matches);
        let better = match best {
            None => true,
            Some((id, _, s)) => score > s || (score == s && track_id < id),
        };
        if better {
            best = Some((track_id, bbox, score));
        }
    }
    best.map(|(track_id, bbox, score)| FrameSelection {
        video_id: video_id.to_string(),
        frame_idx,
        track_id,
        bbox,
        // every sim can be negative; the stored score is clamped at zero
        score: score.max(0.0),
    })
}

/// Candidate boxes of all tracks of one video, keyed by frame.
pub fn candidates_by_frame(tracks: &[Track]) -> BTreeMap<usize, Vec<(u32, BBox)>> {
    let mut out: BTreeMap<usize, Vec<(u32, BBox)>> = BTreeMap::new();
    for track in tracks {
        for f in &track.frames {
            out.entry(f.t).or_default().push((track.track_id, f.bbox));
        }
    }
    for cands in out.values_mut() {
        cands.sort_by_key(|c| c.0);
    }
    out
}

/// Selects a box in each listed frame of one video.
pub fn select_tracks(
    video_id: &str,
    tracks: &[Track],
    frames: &[usize],
    matches_for: impl Fn(usize) -> Vec<FrameMatch>,
) -> Vec<FrameSelection> {
    let cands = candidates_by_frame(tracks);
    frames
        .iter()
        .filter_map(|&f| {
            let c = cands.get(&f)?;
            select_track_per_frame(video_id, f, c, &matches_for(f))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuality {
    pub mean_iou: f64,
    pub upper_bound_mean_iou: f64,
    pub frames: usize,
}

/// Mean IOU of the selected box against GT, and of the best candidate
/// against GT, over every frame that has GT. Frames without a selection
/// (or without candidates) contribute 0.
pub fn evaluate_selection(
    selections: &[FrameSelection],
    candidates: &BTreeMap<(String, usize), Vec<(u32, BBox)>>,
    gt: &BTreeMap<(String, usize), BBox>,
) -> Result<SelectionQuality, TrackError> {
    if gt.is_empty() {
        return Err(TrackError::NoGroundTruth);
    }
    let chosen: BTreeMap<(String, usize), BBox> = selections
        .iter()
        .map(|s| ((s.video_id.clone(), s.frame_idx), s.bbox))
        .collect();
    let (mut sel, mut upper) = (0.0, 0.0);
    for (key, g) in gt {
        sel += chosen.get(key).map_or(0.0, |b| iou(b, g));
        upper += candidates
            .get(key)
            .map(|c| c.iter().map(|(_, b)| iou(b, g)).fold(0.0, f64::max))
            .unwrap_or(0.0);
    }
    let n = gt.len() as f64;
    Ok(SelectionQuality {
        mean_iou: sel / n,
        upper_bound_mean_iou: upper / n,
        frames: gt.len(),
    })
}
