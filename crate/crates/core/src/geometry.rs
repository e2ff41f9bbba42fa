//! Axis-aligned box arithmetic.
//!
//! Boxes live in continuous pixel coordinates `[x_min, y_min, x_max, y_max]`
//! with area `(x_max - x_min) * (y_max - y_min)`.

use std::cmp::Ordering;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box {0:?}: coordinates must be finite with x_min < x_max and y_min < y_max")]
    InvalidBox([f64; 4]),
    #[error("transferred box {0:?} is degenerate")]
    DegenerateResult([f64; 4]),
}

/// Axis-aligned rectangle with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::from_array([x_min, y_min, x_max, y_max])
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        let finite = c.iter().all(|v| v.is_finite());
        if !finite || c[0] >= c[2] || c[1] >= c[3] {
            return Err(GeometryError::InvalidBox(c));
        }
        Ok(Self {
            x_min: c[0],
            y_min: c[1],
            x_max: c[2],
            y_max: c[3],
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Area of the intersection; zero for disjoint or edge-touching boxes.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, 0, width, height]`. `None` when nothing valid remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    pub fn translate(&self, d: [f64; 4]) -> Result<BBox, GeometryError> {
        let c = self.to_array();
        BBox::from_array([c[0] + d[0], c[1] + d[1], c[2] + d[2], c[3] + d[3]])
    }

    /// Lexicographic order on `[x_min, y_min, x_max, y_max]`.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(deserializer)?;
        BBox::from_array(c).map_err(serde::de::Error::custom)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// `r' = r + (t - v)`, coordinate-wise.
pub fn transfer_box(r: &BBox, v: &BBox, t: &BBox) -> Result<BBox, GeometryError> {
    let (r, v, t) = (r.to_array(), v.to_array(), t.to_array());
    let out = [
        r[0] + (t[0] - v[0]),
        r[1] + (t[1] - v[1]),
        r[2] + (t[2] - v[2]),
        r[3] + (t[3] - v[3]),
    ];
    BBox::from_array(out).map_err(|_| GeometryError::DegenerateResult(out))
}

/// Closed containment test on all four coordinates.
pub fn contains(outer: &BBox, inner: &BBox) -> bool {
    outer.x_min <= inner.x_min
        && outer.y_min <= inner.y_min
        && outer.x_max >= inner.x_max
        && outer.y_max >= inner.y_max
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

/// Score descending, then lexicographic coordinates ascending.
pub fn scored_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy non-maximum suppression. A box is dropped when its IOU with an
/// already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(scored_order);
    let mut kept: Vec<ScoredBox> = Vec::with_capacity(sorted.len());
    for cand in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_thresh) {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(c: [f64; 4]) -> BBox {
        BBox::from_array(c).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b([20.0, 20.0, 30.0, 30.0])), 0.0);
        assert!((iou(&a, &b([5.0, 0.0, 15.0, 10.0])) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,0,1]").is_err());
        let parsed: BBox = serde_json::from_str("[0,1,2,3.5]").unwrap();
        assert_eq!(parsed.to_array(), [0.0, 1.0, 2.0, 3.5]);
    }

    #[test]
    fn transfer_examples() {
        let r = b([10.0, 10.0, 50.0, 50.0]);
        let v = b([20.0, 20.0, 60.0, 60.0]);
        assert_eq!(transfer_box(&r, &v, &v).unwrap(), r);
        let t = b([25.0, 15.0, 65.0, 55.0]);
        assert_eq!(
            transfer_box(&r, &v, &t).unwrap().to_array(),
            [15.0, 5.0, 55.0, 45.0]
        );
        let shifted = v.translate([3.0; 4]).unwrap();
        assert_eq!(
            transfer_box(&r, &v, &shifted).unwrap(),
            r.translate([3.0; 4]).unwrap()
        );
    }

    #[test]
    fn transfer_degenerate() {
        let r = b([0.0, 0.0, 2.0, 2.0]);
        let v = b([0.0, 0.0, 10.0, 10.0]);
        let t = b([0.0, 0.0, 5.0, 5.0]);
        assert!(matches!(
            transfer_box(&r, &v, &t),
            Err(GeometryError::DegenerateResult(_))
        ));
    }

    #[test]
    fn contains_examples() {
        let o = b([0.0, 0.0, 10.0, 10.0]);
        assert!(contains(&o, &o));
        assert!(contains(&o, &b([2.0, 2.0, 8.0, 8.0])));
        assert!(!contains(&o, &b([5.0, 5.0, 15.0, 15.0])));
    }

    #[test]
    fn nms_examples() {
        let a = ScoredBox::new(b([0.0, 0.0, 10.0, 10.0]), 1.0);
        assert_eq!(nms(&[a], 0.5), vec![a]);

        let hi = ScoredBox::new(a.bbox, 2.0);
        assert_eq!(nms(&[a, hi], 0.5), vec![hi]);
    }

    /// Exhaustive greedy oracle: repeatedly take the best remaining box and
    /// strike everything it overlaps too much.
    fn greedy_oracle(boxes: &[ScoredBox], thresh: f64) -> Vec<ScoredBox> {
        let mut alive: Vec<bool> = vec![true; boxes.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if !alive[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(j) if scored_order(&boxes[i], &boxes[j]) == Ordering::Less => Some(i),
                    keep => keep,
                };
            }
            let Some(i) = best else { break };
            alive[i] = false;
            out.push(boxes[i]);
            for j in 0..boxes.len() {
                if alive[j] && iou(&boxes[i].bbox, &boxes[j].bbox) > thresh {
                    alive[j] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_chain_matches_oracle() {
        // A overlaps B, B overlaps C, A does not overlap C: greedy keeps A and C.
        let boxes = [
            ScoredBox::new(b([0.0, 0.0, 10.0, 10.0]), 0.9),
            ScoredBox::new(b([4.0, 0.0, 14.0, 10.0]), 0.8),
            ScoredBox::new(b([8.0, 0.0, 18.0, 10.0]), 0.7),
        ];
        let kept = nms(&boxes, 0.3);
        assert_eq!(kept, greedy_oracle(&boxes, 0.3));
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn nms_tie_break_is_lexicographic() {
        let x = ScoredBox::new(b([1.0, 0.0, 5.0, 5.0]), 1.0);
        let y = ScoredBox::new(b([0.0, 0.0, 4.0, 5.0]), 1.0);
        assert_eq!(nms(&[x, y], 0.1), vec![y]);
        assert_eq!(nms(&[y, x], 0.1), vec![y]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| b([x, y, x + w, y + h]))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), c in arb_box(), dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let d = [dx, dy, dx, dy];
            let moved = iou(&a.translate(d).unwrap(), &c.translate(d).unwrap());
            prop_assert!((moved - iou(&a, &c)).abs() < 1e-9);
        }

        #[test]
        fn containment_implies_area_ratio(a in arb_box(), fx in 0.0..0.4f64, fy in 0.0..0.4f64) {
            let inner = b([
                a.x_min() + fx * a.width(),
                a.y_min() + fy * a.height(),
                a.x_max() - fx * a.width() * 0.5,
                a.y_max() - fy * a.height() * 0.5,
            ]);
            prop_assert!(contains(&a, &inner));
            prop_assert!((iou(&a, &inner) - inner.area() / a.area()).abs() < 1e-9);
        }

        #[test]
        fn transfer_inverse(r in arb_box(), v in arb_box(), t in arb_box()) {
            if let Ok(moved) = transfer_box(&r, &v, &t) {
                if let Ok(back) = transfer_box(&moved, &t, &v) {
                    for (x, y) in back.to_array().iter().zip(r.to_array().iter()) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn nms_matches_greedy_oracle(
            raw in proptest::collection::vec((arb_box(), 0u8..5), 1..12),
            thresh in 0.0..1.0f64,
        ) {
            let boxes: Vec<ScoredBox> =
                raw.into_iter().map(|(bx, s)| ScoredBox::new(bx, s as f64)).collect();
            prop_assert_eq!(nms(&boxes, thresh), greedy_oracle(&boxes, thresh));
        }
    }
}
