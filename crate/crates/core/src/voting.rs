//! Hough voting in the 4-D box space `[x_min, y_min, x_max, y_max]`.
//!
//! Each transferred box casts one vote; the vote at `l` is
//! `sum_i K((l - r_i) / b)` with the kernel scaled so `K(0) = 1`, which makes
//! the vote of a location read as a number of supporting boxes. Modes are
//! found by mean-shift ascent seeded at every point.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum VotingError {
    #[error("vote space has no points")]
    NoPoints,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("vote point {0:?} is not finite")]
    NonFinite([f64; 4]),
    #[error("invalid image size {0}x{1}")]
    InvalidSize(u32, u32),
    #[error("heatmap write failed: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    /// Kernel profile at squared normalized distance `u2`, with value 1 at 0.
    #[inline]
    pub fn profile(self, u2: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u2).exp(),
            Kernel::Epanechnikov => (1.0 - u2).max(0.0),
        }
    }

    /// Mean-shift weight: the negated derivative of the profile, up to a constant.
    #[inline]
    fn shift_weight(self, u2: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u2).exp(),
            Kernel::Epanechnikov => {
                if u2 < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Kernel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Kernel::Gaussian),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            other => Err(format!("unknown kernel '{other}'")),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Epanechnikov => "epanechnikov",
        })
    }
}

pub type Point4 = [f64; 4];

#[inline]
fn dist2(a: &Point4, b: &Point4) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex(a: &Point4, b: &Point4) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteSpace {
    points: Vec<Point4>,
    bandwidth: f64,
    kernel: Kernel,
}

impl VoteSpace {
    /// Points are stored in lexicographic order so results do not depend on
    /// the order boxes arrive in.
    pub fn new(mut points: Vec<Point4>, bandwidth: f64, kernel: Kernel) -> Result<Self, VotingError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(VotingError::InvalidBandwidth(bandwidth));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(VotingError::NonFinite(*p));
        }
        points.sort_by(lex);
        Ok(Self {
            points,
            bandwidth,
            kernel,
        })
    }

    pub fn from_boxes(boxes: &[BBox], bandwidth: f64, kernel: Kernel) -> Result<Self, VotingError> {
        Self::new(boxes.iter().map(BBox::to_array).collect(), bandwidth, kernel)
    }

    pub fn points(&self) -> &[Point4] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }
}

pub fn vote_value(l: &Point4, space: &VoteSpace) -> f64 {
    let inv_b2 = 1.0 / (space.bandwidth * space.bandwidth);
    space
        .points
        .iter()
        .map(|p| space.kernel.profile(dist2(l, p) * inv_b2))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub center: Point4,
    pub vote: f64,
    /// Number of seeds whose ascent ended in this mode.
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftParams {
    /// Stop once a step moves less than this, in pixels. `None` means `1e-3 * b`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Converged points closer than this multiple of `b` are merged.
    pub merge_radius: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: 200,
            merge_radius: 0.5,
        }
    }
}

fn ascend(seed: &Point4, space: &VoteSpace, tol: f64, max_iter: usize) -> Point4 {
    let inv_b2 = 1.0 / (space.bandwidth * space.bandwidth);
    let mut x = *seed;
    for _ in 0..max_iter {
        let mut wsum = 0.0;
        let mut acc = [0.0f64; 4];
        for p in &space.points {
            let w = space.kernel.shift_weight(dist2(&x, p) * inv_b2);
            if w == 0.0 {
                continue;
            }
            wsum += w;
            for d in 0..4 {
                acc[d] += w * (p[d] - seed[d]);
            }
        }
        if wsum == 0.0 {
            break;
        }
        let next = [
            seed[0] + acc[0] / wsum,
            seed[1] + acc[1] / wsum,
            seed[2] + acc[2] / wsum,
            seed[3] + acc[3] / wsum,
        ];
        let step = dist2(&x, &next).sqrt();
        x = next;
        if step < tol {
            break;
        }
    }
    x
}

/// Mean-shift modes sorted by vote descending (coordinates break ties).
pub fn mean_shift_modes(space: &VoteSpace, params: MeanShiftParams) -> Result<Vec<Mode>, VotingError> {
    if space.points.is_empty() {
        return Err(VotingError::NoPoints);
    }
    let tol = params.tol.unwrap_or(1e-3 * space.bandwidth);
    let mut converged: Vec<(Point4, f64)> = space
        .points
        .par_iter()
        .map(|seed| {
            let c = ascend(seed, space, tol, params.max_iter);
            (c, vote_value(&c, space))
        })
        .collect();
    converged.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| lex(&a.0, &b.0)));

    let radius2 = (params.merge_radius * space.bandwidth).powi(2);
    let mut modes: Vec<Mode> = Vec::new();
    for (center, vote) in converged {
        match modes.iter_mut().find(|m| dist2(&m.center, &center) < radius2) {
            Some(m) => m.support += 1,
            None => modes.push(Mode {
                center,
                vote,
                support: 1,
            }),
        }
    }
    Ok(modes)
}

pub const DEFAULT_THETA: f64 = 20.0;

/// One line of `pseudo_gt.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGt {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub vote: f64,
    pub support: usize,
    pub updated: bool,
}

/// Highest-vote mode when it gathers at least `theta` votes, clipped to
/// `[0, 0, width, height]`. `Ok(None)` when evidence is insufficient.
pub fn select_pseudo_gt(
    image_id: &str,
    space: &VoteSpace,
    theta: f64,
    image_size: (f64, f64),
    params: MeanShiftParams,
) -> Result<Option<PseudoGt>, VotingError> {
    let modes = mean_shift_modes(space, params)?;
    let best = &modes[0];
    if best.vote < theta {
        return Ok(None);
    }
    let Some(bbox) = BBox::from_array(best.center)
        .ok()
        .and_then(|b| b.clip(image_size.0, image_size.1))
    else {
        return Ok(None);
    };
    Ok(Some(PseudoGt {
        image_id: image_id.to_string(),
        bbox,
        vote: best.vote,
        support: best.support,
        updated: false,
    }))
}

/// Per-pixel count of covering boxes, max-normalized to `0..=255`. A pixel
/// is covered when its center lies inside the box.
pub fn heatmap_pixels(boxes: &[BBox], width: u32, height: u32) -> Vec<u8> {
    let (w, h) = (width as usize, height as usize);
    let mut counts = vec![0u32; w * h];
    for b in boxes {
        for y in 0..h {
            let cy = y as f64 + 0.5;
            if cy < b.y_min() || cy > b.y_max() {
                continue;
            }
            for x in 0..w {
                let cx = x as f64 + 0.5;
                if cx >= b.x_min() && cx <= b.x_max() {
                    counts[y * w + x] += 1;
                }
            }
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0; w * h];
    }
    counts
        .iter()
        .map(|&c| ((c as f64) * 255.0 / max as f64).round() as u8)
        .collect()
}

/// Writes the coverage heatmap as binary PGM (P5).
pub fn export_heatmap(boxes: &[BBox], width: u32, height: u32, path: &Path) -> Result<(), VotingError> {
    if width == 0 || height == 0 {
        return Err(VotingError::InvalidSize(width, height));
    }
    let pixels = heatmap_pixels(boxes, width, height);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(points: Vec<Point4>, b: f64) -> VoteSpace {
        VoteSpace::new(points, b, Kernel::Gaussian).unwrap()
    }

    #[test]
    fn vote_examples() {
        let p = [1.0, 2.0, 5.0, 7.0];
        assert_eq!(vote_value(&p, &space(vec![p], 3.0)), 1.0);
        assert_eq!(vote_value(&p, &space(vec![p; 7], 3.0)), 7.0);
        let q = [1.0 + 3.0, 2.0, 5.0, 7.0];
        let v = vote_value(&p, &space(vec![p, q], 3.0));
        assert!((v - (1.0 + (-0.5f64).exp())).abs() < 1e-12);
        let e = VoteSpace::new(vec![p, q], 6.0, Kernel::Epanechnikov).unwrap();
        assert!((vote_value(&p, &e) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn coincident_points_single_mode() {
        for kernel in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let p = [0.1, 0.7, 3.3, 9.1];
            let s = VoteSpace::new(vec![p; 5], 2.0, kernel).unwrap();
            let modes = mean_shift_modes(&s, MeanShiftParams::default()).unwrap();
            assert_eq!(modes.len(), 1);
            assert_eq!(modes[0].center, p);
            assert_eq!(modes[0].vote, 5.0);
            assert_eq!(modes[0].support, 5);
        }
    }

    #[test]
    fn no_points_is_an_error() {
        let s = space(vec![], 1.0);
        assert!(matches!(mean_shift_modes(&s, MeanShiftParams::default()), Err(VotingError::NoPoints)));
    }

    /// Coarse 4-D grid search for the highest vote near a given center.
    fn grid_max(s: &VoteSpace, center: Point4, half: f64, pitch: f64) -> (Point4, f64) {
        let steps = (2.0 * half / pitch).round() as i64;
        let mut best = (center, f64::MIN);
        for a in 0..=steps {
            for b in 0..=steps {
                for c in 0..=steps {
                    for d in 0..=steps {
                        let l = [
                            center[0] - half + a as f64 * pitch,
                            center[1] - half + b as f64 * pitch,
                            center[2] - half + c as f64 * pitch,
                            center[3] - half + d as f64 * pitch,
                        ];
                        let v = vote_value(&l, s);
                        if v > best.1 {
                            best = (l, v);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn two_symmetric_clusters() {
        let b = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c1 = [10.0, 10.0, 20.0, 20.0];
        let c2 = [20.0, 10.0, 30.0, 20.0]; // 10b apart
        let mut pts = Vec::new();
        let offsets: Vec<Point4> = (0..6)
            .map(|_| [(); 4].map(|_| rng.gen_range(-0.2..0.2)))
            .collect();
        for o in &offsets {
            pts.push([c1[0] + o[0], c1[1] + o[1], c1[2] + o[2], c1[3] + o[3]]);
            pts.push([c2[0] - o[0], c2[1] - o[1], c2[2] - o[2], c2[3] - o[3]]);
        }
        let s = space(pts.clone(), b);
        let modes = mean_shift_modes(&s, MeanShiftParams::default()).unwrap();
        assert_eq!(modes.len(), 2);
        for m in &modes {
            let centroid = pts
                .iter()
                .filter(|p| dist2(p, &m.center) < 4.0)
                .fold([0.0; 4], |mut acc, p| {
                    for d in 0..4 {
                        acc[d] += p[d] / 6.0;
                    }
                    acc
                });
            let (_, gmax) = grid_max(&s, centroid, 0.5, 0.25 * b);
            assert!(dist2(&m.center, &centroid).sqrt() < 0.05);
            assert!(m.vote >= gmax - 1e-9);
        }
        assert!((modes[0].vote - modes[1].vote).abs() < 1e-6);
    }

    #[test]
    fn threshold_rules() {
        let p = [2.0, 2.0, 8.0, 8.0];
        let s = space(vec![p; 25], 2.0);
        let gt = select_pseudo_gt("im", &s, 20.0, (16.0, 16.0), MeanShiftParams::default())
            .unwrap()
            .unwrap();
        assert_eq!(gt.bbox.to_array(), p);
        assert_eq!(gt.vote, 25.0);
        assert!(!gt.updated);
        let s = space(vec![p; 10], 2.0);
        assert!(select_pseudo_gt("im", &s, 20.0, (16.0, 16.0), MeanShiftParams::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn clipping_to_image_bounds() {
        let s = space(vec![[-3.0, 4.0, 20.0, 9.0]; 3], 1.0);
        let gt = select_pseudo_gt("im", &s, 1.0, (16.0, 12.0), MeanShiftParams::default())
            .unwrap()
            .unwrap();
        assert_eq!(gt.bbox.to_array(), [0.0, 4.0, 16.0, 9.0]);
        let outside = space(vec![[20.0, 20.0, 30.0, 30.0]; 3], 1.0);
        assert!(select_pseudo_gt("im", &outside, 1.0, (16.0, 12.0), MeanShiftParams::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn denser_cluster_wins() {
        let mut pts = vec![[1.0, 1.0, 5.0, 5.0]; 18];
        pts.extend(vec![[9.0, 9.0, 14.0, 14.0]; 12]);
        let s = space(pts, 1.0);
        let gt = select_pseudo_gt("im", &s, 10.0, (16.0, 16.0), MeanShiftParams::default())
            .unwrap()
            .unwrap();
        assert_eq!(gt.bbox.to_array(), [1.0, 1.0, 5.0, 5.0]);
        assert!((gt.vote - 18.0).abs() < 1e-6);
    }

    #[test]
    fn order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts: Vec<Point4> = (0..30)
            .map(|_| {
                let x = rng.gen_range(0.0..4.0);
                let y = rng.gen_range(0.0..4.0);
                [x, y, x + rng.gen_range(3.0..5.0), y + rng.gen_range(3.0..5.0)]
            })
            .collect();
        let a = mean_shift_modes(&space(pts.clone(), 1.0), MeanShiftParams::default()).unwrap();
        pts.reverse();
        let b = mean_shift_modes(&space(pts, 1.0), MeanShiftParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_point_at_mode_never_lowers_vote() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Point4> = (0..15)
            .map(|_| [(); 4].map(|_| rng.gen_range(0.0..3.0)))
            .collect();
        let s = space(pts.clone(), 1.5);
        let m = mean_shift_modes(&s, MeanShiftParams::default()).unwrap()[0].clone();
        let mut more = pts;
        more.push(m.center);
        let s2 = space(more, 1.5);
        assert!(vote_value(&m.center, &s2) >= m.vote);
        let m2 = mean_shift_modes(&s2, MeanShiftParams::default()).unwrap()[0].clone();
        assert!(m2.vote >= m.vote);
    }

    #[test]
    fn heatmaps() {
        let full = BBox::new(0.0, 0.0, 4.0, 3.0).unwrap();
        assert_eq!(heatmap_pixels(&[full], 4, 3), vec![255; 12]);
        assert_eq!(heatmap_pixels(&[], 4, 3), vec![0; 12]);
        // 10x1 strip: A covers columns 0..6, B covers 3..9
        let a = BBox::new(0.0, 0.0, 6.0, 1.0).unwrap();
        let b = BBox::new(3.0, 0.0, 9.0, 1.0).unwrap();
        let px = heatmap_pixels(&[a, b], 10, 1);
        assert_eq!(px, vec![128, 128, 128, 255, 255, 255, 128, 128, 128, 0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        export_heatmap(&[a, b], 10, 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n10 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 10..], px.as_slice());
        assert!(export_heatmap(&[], 0, 3, &path).is_err());
    }
}
