//! Dense feature maps, multi-scale pyramids and sliding-window matching.
//!
//! A [`FeatureMap`] stores an `H x W x C` grid in `(y, x, c)` row-major order.
//! Cell `(x, y)` of a level with scale `s` covers the pixel rectangle
//! `[x, x + 1) * stride / s` by `[y, y + 1) * stride / s`.

mod io;
mod matching;

pub use io::{read_fmap, write_fmap, PyramidLevelEntry, PyramidSidecar, FMAP_MAGIC, FMAP_VERSION};
pub use matching::{map_window_to_pixels, slide_match, WindowHit};

use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("zero-norm feature vector")]
    ZeroVector,
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("feature map shape {h}x{w}x{c} does not match data length {len}")]
    ShapeMismatch { h: usize, w: usize, c: usize, len: usize },
    #[error("feature map contains non-finite values")]
    NonFinite,
    #[error("cell rect {0:?} out of bounds")]
    OutOfBounds(CellRect),
    #[error("query window {w}x{h} fits no pyramid level")]
    WindowTooLarge { w: usize, h: usize },
    #[error("channel mismatch: query has {query}, map has {map}")]
    ChannelMismatch { query: usize, map: usize },
    #[error("invalid pyramid: {0}")]
    InvalidPyramid(String),
    #[error("bad FMAP data: {0}")]
    BadFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, FeatError> {
        if height * width * channels != data.len() || channels == 0 {
            return Err(FeatError::ShapeMismatch {
                h: height,
                w: width,
                c: channels,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatError::NonFinite);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = self.offset(x, y);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Contiguous `(x..x+w, c)` slice of row `y`.
    #[inline]
    pub(crate) fn row_span(&self, x: usize, y: usize, w: usize) -> &[f32] {
        let o = self.offset(x, y);
        &self.data[o..o + w * self.channels]
    }

    /// Returns a copy with every value multiplied by `k`.
    pub fn scaled(&self, k: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub scale: f64,
    pub fmap: FeatureMap,
}

/// Multi-scale stack of feature maps of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<PyramidLevel>,
    cell_stride: f64,
}

pub const MAX_LEVELS: usize = 7;
/// Scale ratio between consecutive pyramid levels.
pub const LEVEL_RATIO: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl FeaturePyramid {
    pub fn new(levels: Vec<PyramidLevel>, cell_stride: f64) -> Result<Self, FeatError> {
        if levels.is_empty() || levels.len() > MAX_LEVELS {
            return Err(FeatError::InvalidPyramid(format!(
                "{} levels (expected 1..={MAX_LEVELS})",
                levels.len()
            )));
        }
        if !(cell_stride.is_finite() && cell_stride > 0.0) {
            return Err(FeatError::InvalidPyramid(format!("cell_stride {cell_stride}")));
        }
        let channels = levels[0].fmap.channels();
        for pair in levels.windows(2) {
            if !(pair[1].scale < pair[0].scale) {
                return Err(FeatError::InvalidPyramid("scales must strictly decrease".into()));
            }
            if levels.len() == MAX_LEVELS {
                let ratio = pair[1].scale / pair[0].scale;
                if (ratio / LEVEL_RATIO - 1.0).abs() > 0.01 {
                    return Err(FeatError::InvalidPyramid(format!(
                        "level ratio {ratio:.4} is not 2^(-1/2)"
                    )));
                }
            }
        }
        for level in &levels {
            if !(level.scale.is_finite() && level.scale > 0.0) {
                return Err(FeatError::InvalidPyramid(format!("scale {}", level.scale)));
            }
            if level.fmap.channels() != channels {
                return Err(FeatError::InvalidPyramid("levels disagree on channel count".into()));
            }
        }
        Ok(Self { levels, cell_stride })
    }

    pub fn single(fmap: FeatureMap, cell_stride: f64) -> Result<Self, FeatError> {
        Self::new(vec![PyramidLevel { scale: 1.0, fmap }], cell_stride)
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn cell_stride(&self) -> f64 {
        self.cell_stride
    }

    pub fn channels(&self) -> usize {
        self.levels[0].fmap.channels()
    }

    /// Level whose scale is closest to 1 in log space.
    pub fn base_level(&self) -> &PyramidLevel {
        self.levels
            .iter()
            .min_by(|a, b| a.scale.ln().abs().total_cmp(&b.scale.ln().abs()))
            .expect("pyramid has at least one level")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// A flattened `h_cells x w_cells x C` window used as a matching template.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWindow {
    pub w_cells: usize,
    pub h_cells: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub source: Option<(String, BBox)>,
}

impl QueryWindow {
    pub fn new(w_cells: usize, h_cells: usize, channels: usize, data: Vec<f32>) -> Result<Self, FeatError> {
        if w_cells == 0 || h_cells == 0 || w_cells * h_cells * channels != data.len() {
            return Err(FeatError::ShapeMismatch {
                h: h_cells,
                w: w_cells,
                c: channels,
                len: data.len(),
            });
        }
        Ok(Self {
            w_cells,
            h_cells,
            channels,
            data,
            source: None,
        })
    }

    pub fn with_source(mut self, image_id: impl Into<String>, bbox: BBox) -> Self {
        self.source = Some((image_id.into(), bbox));
        self
    }
}

pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Cosine similarity accumulated in `f64`.
pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64, FeatError> {
    if u.len() != v.len() {
        return Err(FeatError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu < ZERO_NORM_EPS || nv < ZERO_NORM_EPS {
        return Err(FeatError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity with degenerate vectors scored 0.
pub fn cosine_or_zero(u: &[f32], v: &[f32]) -> f64 {
    match cosine_sim(u, v) {
        Ok(s) => s,
        Err(FeatError::ZeroVector) => 0.0,
        Err(e) => panic!("cosine_or_zero: {e}"),
    }
}

pub const DEFAULT_TARGET_CELLS: usize = 48;
pub const MIN_WINDOW_SIDE: usize = 2;

/// Picks an integer window shape of roughly `target_cells` cells whose
/// aspect ratio is as close as possible to the box's.
///
/// Candidates have both sides at least [`MIN_WINDOW_SIDE`] and an area within
/// `target_cells` +/- one sixth (40..=56 for the default 48). Ranked by
/// `|ln(w/h) - ln(aspect)|`, then `|w*h - target|`, then smaller `w`.
pub fn window_shape_for_box(bbox: &BBox, target_cells: usize) -> (usize, usize) {
    let target = target_cells.max(1);
    let lo = ((target as f64) * 5.0 / 6.0).round() as usize;
    let hi = ((target as f64) * 7.0 / 6.0).round() as usize;
    let log_aspect = (bbox.width() / bbox.height()).ln();
    let mut best: Option<((f64, usize, usize), (usize, usize))> = None;
    for h in MIN_WINDOW_SIDE..=hi {
        for w in MIN_WINDOW_SIDE..=hi {
            let area = w * h;
            if area < lo || area > hi {
                continue;
            }
            let key = (
                ((w as f64 / h as f64).ln() - log_aspect).abs(),
                area.abs_diff(target),
                w,
            );
            let better = match &best {
                None => true,
                Some((k, _)) => {
                    key.0 < k.0 || (key.0 == k.0 && (key.1, key.2) < (k.1, k.2))
                }
            };
            if better {
                best = Some((key, (w, h)));
            }
        }
    }
    best.map(|(_, s)| s).unwrap_or((MIN_WINDOW_SIDE, MIN_WINDOW_SIDE))
}

pub fn extract_window(fmap: &FeatureMap, rect: CellRect) -> Result<QueryWindow, FeatError> {
    if rect.w == 0 || rect.h == 0 || rect.x + rect.w > fmap.width() || rect.y + rect.h > fmap.height() {
        return Err(FeatError::OutOfBounds(rect));
    }
    let mut data = Vec::with_capacity(rect.w * rect.h * fmap.channels());
    for y in rect.y..rect.y + rect.h {
        data.extend_from_slice(fmap.row_span(rect.x, y, rect.w));
    }
    QueryWindow::new(rect.w, rect.h, fmap.channels(), data)
}

/// Bilinearly samples `fmap` (a level at `scale`) on a `w x h` grid of
/// points evenly covering the pixel box. Samples outside the map clamp
/// to the border cells.
pub fn sample_window(
    fmap: &FeatureMap,
    scale: f64,
    cell_stride: f64,
    bbox: &BBox,
    w_cells: usize,
    h_cells: usize,
) -> Vec<f32> {
    let c = fmap.channels();
    let mut out = vec![0.0f32; w_cells * h_cells * c];
    let to_cell = scale / cell_stride;
    let max_x = (fmap.width() - 1) as f64;
    let max_y = (fmap.height() - 1) as f64;
    let mut acc = vec![0.0f64; c];
    for j in 0..h_cells {
        let py = bbox.y_min() + (j as f64 + 0.5) / h_cells as f64 * bbox.height();
        let cy = (py * to_cell - 0.5).clamp(0.0, max_y);
        let y0 = cy.floor() as usize;
        let y1 = (y0 + 1).min(fmap.height() - 1);
        let fy = cy - y0 as f64;
        for i in 0..w_cells {
            let px = bbox.x_min() + (i as f64 + 0.5) / w_cells as f64 * bbox.width();
            let cx = (px * to_cell - 0.5).clamp(0.0, max_x);
            let x0 = cx.floor() as usize;
            let x1 = (x0 + 1).min(fmap.width() - 1);
            let fx = cx - x0 as f64;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (xx, yy, wgt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(fmap.cell(xx, yy)) {
                    *a += wgt * v as f64;
                }
            }
            let o = (j * w_cells + i) * c;
            for (dst, a) in out[o..o + c].iter_mut().zip(&acc) {
                *dst = *a as f32;
            }
        }
    }
    out
}

/// Builds the matching template for an image region: the region is
/// resampled onto the window shape chosen by [`window_shape_for_box`].
pub fn query_for_box(
    fmap: &FeatureMap,
    scale: f64,
    cell_stride: f64,
    bbox: &BBox,
    target_cells: usize,
) -> QueryWindow {
    let (w, h) = window_shape_for_box(bbox, target_cells);
    let data = sample_window(fmap, scale, cell_stride, bbox, w, h);
    QueryWindow::new(w, h, fmap.channels(), data).expect("sampled window has consistent shape")
}

/// Region descriptor: area-weighted mean of the cells under each cell of a
/// `grid x grid` subdivision of the box, concatenated row-major.
pub fn pool_box(fmap: &FeatureMap, scale: f64, cell_stride: f64, bbox: &BBox, grid: usize) -> Vec<f32> {
    let c = fmap.channels();
    let cell_px = cell_stride / scale;
    let mut out = Vec::with_capacity(grid * grid * c);
    let mut acc = vec![0.0f64; c];
    for gy in 0..grid {
        for gx in 0..grid {
            let sx0 = bbox.x_min() + bbox.width() * gx as f64 / grid as f64;
            let sx1 = bbox.x_min() + bbox.width() * (gx + 1) as f64 / grid as f64;
            let sy0 = bbox.y_min() + bbox.height() * gy as f64 / grid as f64;
            let sy1 = bbox.y_min() + bbox.height() * (gy + 1) as f64 / grid as f64;
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut total = 0.0f64;
            let cx0 = ((sx0 / cell_px).floor().max(0.0)) as usize;
            let cy0 = ((sy0 / cell_px).floor().max(0.0)) as usize;
            let cx1 = ((sx1 / cell_px).ceil().max(0.0) as usize).min(fmap.width());
            let cy1 = ((sy1 / cell_px).ceil().max(0.0) as usize).min(fmap.height());
            for y in cy0..cy1 {
                let oy = (sy1.min((y + 1) as f64 * cell_px) - sy0.max(y as f64 * cell_px)).max(0.0);
                if oy == 0.0 {
                    continue;
                }
                for x in cx0..cx1 {
                    let ox = (sx1.min((x + 1) as f64 * cell_px) - sx0.max(x as f64 * cell_px)).max(0.0);
                    let wgt = ox * oy;
                    if wgt == 0.0 {
                        continue;
                    }
                    total += wgt;
                    for (a, &v) in acc.iter_mut().zip(fmap.cell(x, y)) {
                        *a += wgt * v as f64;
                    }
                }
            }
            if total > 0.0 {
                out.extend(acc.iter().map(|a| (a / total) as f32));
            } else {
                out.extend(std::iter::repeat(0.0f32).take(c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c).map(|i| i as f32).collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0f32, 2.0, -3.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let two_u: Vec<f32> = u.iter().map(|v| 2.0 * v).collect();
        assert!((cosine_sim(&u, &two_u).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(FeatError::ZeroVector)));
        assert_eq!(cosine_or_zero(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    /// Enumerates every shape with area in [40, 56] and applies the ranking
    /// by hand; the frozen results below come from this enumeration.
    fn shape_oracle(aspect: f64) -> (usize, usize) {
        let mut cands = Vec::new();
        for w in 1..=56usize {
            for h in 1..=56usize {
                if (40..=56).contains(&(w * h)) && w >= 2 && h >= 2 {
                    cands.push((w, h));
                }
            }
        }
        cands.sort_by(|a, b| {
            let ea = ((a.0 as f64 / a.1 as f64) / aspect).ln().abs();
            let eb = ((b.0 as f64 / b.1 as f64) / aspect).ln().abs();
            ea.total_cmp(&eb)
                .then((a.0 * a.1).abs_diff(48).cmp(&(b.0 * b.1).abs_diff(48)))
                .then(a.0.cmp(&b.0))
        });
        cands[0]
    }

    #[test]
    fn window_shapes() {
        let square = BBox::new(0.0, 0.0, 30.0, 30.0).unwrap();
        let wide = BBox::new(0.0, 0.0, 40.0, 20.0).unwrap();
        let extreme = BBox::new(0.0, 0.0, 1000.0, 10.0).unwrap();
        assert_eq!(shape_oracle(1.0), (7, 7));
        assert_eq!(shape_oracle(2.0), (10, 5));
        assert_eq!(window_shape_for_box(&square, 48), (7, 7));
        assert_eq!(window_shape_for_box(&wide, 48), (10, 5));
        let (w, h) = window_shape_for_box(&extreme, 48);
        assert!(h >= 2);
        assert_eq!((w, h), shape_oracle(100.0));
        let tall = BBox::new(0.0, 0.0, 10.0, 1000.0).unwrap();
        assert!(window_shape_for_box(&tall, 48).0 >= 2);
    }

    #[test]
    fn window_shape_area_band() {
        for i in 1..200 {
            let aspect = 0.05 * i as f64;
            let bx = BBox::new(0.0, 0.0, aspect * 10.0, 10.0).unwrap();
            let (w, h) = window_shape_for_box(&bx, 48);
            assert!((40..=56).contains(&(w * h)), "aspect {aspect}: {w}x{h}");
            assert_eq!((w, h), shape_oracle(aspect));
        }
    }

    #[test]
    fn extract_examples() {
        let m = ramp(3, 4, 2);
        let full = extract_window(&m, CellRect { x: 0, y: 0, w: 4, h: 3 }).unwrap();
        assert_eq!(full.data, m.data());
        let one = extract_window(&m, CellRect { x: 2, y: 1, w: 1, h: 1 }).unwrap();
        assert_eq!(one.data, m.cell(2, 1));
        // cells (1,1),(2,1),(1,2),(2,2) -> offsets (y*4+x)*2
        let two = extract_window(&m, CellRect { x: 1, y: 1, w: 2, h: 2 }).unwrap();
        assert_eq!(two.data, vec![10.0, 11.0, 12.0, 13.0, 18.0, 19.0, 20.0, 21.0]);
        assert!(matches!(
            extract_window(&m, CellRect { x: 3, y: 0, w: 2, h: 1 }),
            Err(FeatError::OutOfBounds(_))
        ));
    }

    #[test]
    fn sample_window_on_aligned_box_is_exact() {
        let m = ramp(6, 6, 3);
        let bx = BBox::new(1.0, 2.0, 4.0, 5.0).unwrap();
        let s = sample_window(&m, 1.0, 1.0, &bx, 3, 3);
        let e = extract_window(&m, CellRect { x: 1, y: 2, w: 3, h: 3 }).unwrap();
        assert_eq!(s, e.data);
    }

    #[test]
    fn pool_box_constant_region() {
        let mut m = FeatureMap::zeros(8, 8, 2);
        for y in 2..6 {
            for x in 2..6 {
                m.cell_mut(x, y).copy_from_slice(&[1.0, -2.0]);
            }
        }
        let bx = BBox::new(2.0, 2.0, 6.0, 6.0).unwrap();
        assert_eq!(pool_box(&m, 1.0, 1.0, &bx, 2), vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        // half the box over zeros halves the mean
        let half = BBox::new(0.0, 2.0, 4.0, 6.0).unwrap();
        let p = pool_box(&m, 1.0, 1.0, &half, 1);
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn pyramid_invariants() {
        let lv = |s: f64| PyramidLevel { scale: s, fmap: FeatureMap::zeros(2, 2, 1) };
        assert!(FeaturePyramid::new(vec![lv(1.0), lv(1.0)], 1.0).is_err());
        assert!(FeaturePyramid::new(vec![], 1.0).is_err());
        let seven: Vec<_> = (0..7).map(|i| lv(LEVEL_RATIO.powi(i))).collect();
        assert!(FeaturePyramid::new(seven, 16.0).is_ok());
        let bad: Vec<_> = (0..7).map(|i| lv(0.5f64.powi(i))).collect();
        assert!(FeaturePyramid::new(bad, 16.0).is_err());
    }
}
