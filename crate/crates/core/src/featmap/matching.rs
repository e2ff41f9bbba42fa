use std::cmp::Ordering;

use rayon::prelude::*;

use super::{FeatError, FeaturePyramid, QueryWindow, ZERO_NORM_EPS};
use crate::geometry::BBox;

/// One scored window placement inside a pyramid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowHit {
    pub level: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub pixel_box: BBox,
    pub score: f64,
}

impl WindowHit {
    /// Score descending, then `(level, y, x)` ascending.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.level.cmp(&other.level))
            .then(self.cell_y.cmp(&other.cell_y))
            .then(self.cell_x.cmp(&other.cell_x))
    }
}

/// `[x, y, x + w, y + h] * cell_stride / scale`.
pub fn map_window_to_pixels(
    scale: f64,
    cell_x: usize,
    cell_y: usize,
    w_cells: usize,
    h_cells: usize,
    cell_stride: f64,
) -> BBox {
    let k = cell_stride / scale;
    BBox::new(
        cell_x as f64 * k,
        cell_y as f64 * k,
        (cell_x + w_cells) as f64 * k,
        (cell_y + h_cells) as f64 * k,
    )
    .expect("window with positive extent maps to a valid box")
}

/// Scores every placement of `q` at every level that can hold it and
/// returns the `top_n` best in canonical order. Windows with zero norm
/// score 0.
pub fn slide_match(q: &QueryWindow, pyr: &FeaturePyramid, top_n: usize) -> Result<Vec<WindowHit>, FeatError> {
    if q.channels != pyr.channels() {
        return Err(FeatError::ChannelMismatch {
            query: q.channels,
            map: pyr.channels(),
        });
    }
    let (w, h) = (q.w_cells, q.h_cells);
    let rows: Vec<(usize, usize)> = pyr
        .levels()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.fmap.width() >= w && l.fmap.height() >= h)
        .flat_map(|(li, l)| (0..=l.fmap.height() - h).map(move |y| (li, y)))
        .collect();
    if rows.is_empty() {
        return Err(FeatError::WindowTooLarge { w, h });
    }
    let q_norm = q.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let row_len = w * q.channels;

    let mut hits: Vec<WindowHit> = rows
        .par_iter()
        .flat_map_iter(|&(li, y)| {
            let level = &pyr.levels()[li];
            let fmap = &level.fmap;
            let mut out = Vec::with_capacity(fmap.width() - w + 1);
            for x in 0..=fmap.width() - w {
                // Same accumulation order as extract_window + cosine_sim.
                let (mut dot, mut ww) = (0.0f64, 0.0f64);
                for (dy, q_row) in q.data.chunks_exact(row_len).enumerate() {
                    let span = fmap.row_span(x, y + dy, w);
                    for (&a, &b) in q_row.iter().zip(span) {
                        let (a, b) = (a as f64, b as f64);
                        dot += a * b;
                        ww += b * b;
                    }
                }
                let w_norm = ww.sqrt();
                let score = if q_norm < ZERO_NORM_EPS || w_norm < ZERO_NORM_EPS {
                    0.0
                } else {
                    (dot / (q_norm * w_norm)).clamp(-1.0, 1.0)
                };
                out.push(WindowHit {
                    level: li,
                    cell_x: x,
                    cell_y: y,
                    pixel_box: map_window_to_pixels(level.scale, x, y, w, h, pyr.cell_stride()),
                    score,
                });
            }
            out
        })
        .collect();

    let n = top_n.min(hits.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < hits.len() {
        hits.select_nth_unstable_by(n - 1, WindowHit::canonical_cmp);
        hits.truncate(n);
    }
    hits.sort_by(WindowHit::canonical_cmp);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featmap::{cosine_or_zero, extract_window, CellRect, FeatureMap, PyramidLevel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    /// Brute force: extract every placement and rank with a stable sort.
    fn oracle(q: &QueryWindow, pyr: &FeaturePyramid, n: usize) -> Vec<(usize, usize, usize, f64)> {
        let mut all = Vec::new();
        for (li, level) in pyr.levels().iter().enumerate() {
            let m = &level.fmap;
            if m.width() < q.w_cells || m.height() < q.h_cells {
                continue;
            }
            for y in 0..=m.height() - q.h_cells {
                for x in 0..=m.width() - q.w_cells {
                    let win = extract_window(m, CellRect { x, y, w: q.w_cells, h: q.h_cells }).unwrap();
                    all.push((li, y, x, cosine_or_zero(&q.data, &win.data)));
                }
            }
        }
        all.sort_by(|a, b| b.3.total_cmp(&a.3));
        all.truncate(n);
        all
    }

    #[test]
    fn pixel_mapping() {
        assert_eq!(map_window_to_pixels(1.0, 0, 0, 3, 3, 16.0).to_array(), [0.0, 0.0, 48.0, 48.0]);
        assert_eq!(map_window_to_pixels(0.5, 1, 2, 3, 3, 16.0).to_array(), [32.0, 64.0, 128.0, 160.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let b = map_window_to_pixels(s, 2, 1, 4, 2, 16.0).to_array();
        let k = 16.0 * 2f64.sqrt();
        for (got, cells) in b.iter().zip([2.0, 1.0, 6.0, 3.0]) {
            assert!((got - cells * k).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_query_found_at_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 10, 12, 4);
        let q = extract_window(&m, CellRect { x: 5, y: 3, w: 4, h: 3 }).unwrap();
        let pyr = FeaturePyramid::single(m, 1.0).unwrap();
        let hits = slide_match(&q, &pyr, 3).unwrap();
        assert_eq!((hits[0].cell_x, hits[0].cell_y), (5, 3));
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].pixel_box.to_array(), [5.0, 3.0, 9.0, 6.0]);
    }

    #[test]
    fn zero_frame_scores_zero() {
        let pyr = FeaturePyramid::single(FeatureMap::zeros(5, 5, 2), 1.0).unwrap();
        let q = QueryWindow::new(2, 2, 2, vec![1.0; 8]).unwrap();
        let hits = slide_match(&q, &pyr, 4).unwrap();
        assert!(hits.iter().all(|h| h.score == 0.0));
        let order: Vec<_> = hits.iter().map(|h| (h.cell_y, h.cell_x)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn too_large_window() {
        let pyr = FeaturePyramid::single(FeatureMap::zeros(3, 3, 1), 1.0).unwrap();
        let q = QueryWindow::new(4, 1, 1, vec![1.0; 4]).unwrap();
        assert!(matches!(slide_match(&q, &pyr, 1), Err(FeatError::WindowTooLarge { .. })));
    }

    #[test]
    fn planted_signature_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = random_map(&mut rng, 8, 8, 3);
        let sig = [0.9f32, -0.4, 0.2];
        for y in 4..6 {
            for x in 1..4 {
                m.cell_mut(x, y).copy_from_slice(&sig);
            }
        }
        let q = QueryWindow::new(3, 2, 3, sig.repeat(6)).unwrap();
        let pyr = FeaturePyramid::single(m, 1.0).unwrap();
        let hits = slide_match(&q, &pyr, 3).unwrap();
        let expect = oracle(&q, &pyr, 3);
        assert_eq!((hits[0].cell_x, hits[0].cell_y), (1, 4));
        for (h, e) in hits.iter().zip(&expect) {
            assert_eq!((h.level, h.cell_y, h.cell_x, h.score), *e);
        }
    }

    #[test]
    fn scale_invariance_and_multilevel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let levels = vec![
            PyramidLevel { scale: 1.0, fmap: random_map(&mut rng, 9, 7, 2) },
            PyramidLevel { scale: 0.7, fmap: random_map(&mut rng, 6, 5, 2) },
            PyramidLevel { scale: 0.5, fmap: random_map(&mut rng, 2, 2, 2) },
        ];
        let pyr = FeaturePyramid::new(levels.clone(), 4.0).unwrap();
        let q = QueryWindow::new(3, 3, 2, (0..18).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let hits = slide_match(&q, &pyr, 10).unwrap();
        let expect = oracle(&q, &pyr, 10);
        let got: Vec<_> = hits.iter().map(|h| (h.level, h.cell_y, h.cell_x, h.score)).collect();
        assert_eq!(got, expect);

        let scaled_levels = levels
            .into_iter()
            .map(|l| PyramidLevel { scale: l.scale, fmap: l.fmap.scaled(3.0) })
            .collect();
        let scaled = FeaturePyramid::new(scaled_levels, 4.0).unwrap();
        let again = slide_match(&q, &scaled, 10).unwrap();
        for (a, b) in hits.iter().zip(&again) {
            assert_eq!((a.level, a.cell_x, a.cell_y), (b.level, b.cell_x, b.cell_y));
            assert!((a.score - b.score).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pyr = FeaturePyramid::single(random_map(&mut rng, 16, 16, 4), 1.0).unwrap();
        let q = QueryWindow::new(4, 3, 4, (0..48).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| slide_match(&q, &pyr, 20).unwrap())
        };
        assert_eq!(run(1), run(6));
    }
}
