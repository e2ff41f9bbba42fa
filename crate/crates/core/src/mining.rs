//! Discriminative positive region mining.
//!
//! Every proposal seeds a cluster made of its best match in each other image
//! (regardless of label), truncated to the `k` most similar. Clusters are
//! ranked by how many of their regions come from positive images, greedily
//! de-duplicated, and the positive regions of the top `C` survivors form the
//! mined set.

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featmap::cosine_or_zero;
use crate::geometry::{iou, BBox};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("image {0} has no proposals")]
    EmptyImage(String),
    #[error("feature dimension mismatch: expected {expected}, found {found} in image {image_id}")]
    DimensionMismatch {
        image_id: String,
        expected: usize,
        found: usize,
    },
    #[error("image {0} listed with conflicting labels")]
    ConflictingLabel(String),
    #[error("no positive regions survived mining")]
    NoPositives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageLabel {
    Pos,
    Neg,
}

/// One line of `proposals.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: String,
    pub label: ImageLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: String,
    pub bbox: BBox,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub label: ImageLabel,
    pub proposals: Vec<Proposal>,
}

/// Images sorted by id, proposals within an image sorted by box then
/// feature, so indices are independent of input ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<LabeledImage>,
}

/// Index of a proposal inside a canonical [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionRef {
    pub image: usize,
    pub proposal: usize,
}

impl Dataset {
    pub fn from_records(records: Vec<ProposalRecord>) -> Result<Self, MiningError> {
        let mut images: Vec<LabeledImage> = Vec::new();
        let mut sorted = records;
        sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for rec in sorted {
            match images.last_mut() {
                Some(img) if img.image_id == rec.image_id => {
                    if img.label != rec.label {
                        return Err(MiningError::ConflictingLabel(rec.image_id));
                    }
                    img.proposals.push(Proposal {
                        image_id: rec.image_id,
                        bbox: rec.bbox,
                        feature: rec.feature,
                    });
                }
                _ => images.push(LabeledImage {
                    image_id: rec.image_id.clone(),
                    label: rec.label,
                    proposals: vec![Proposal {
                        image_id: rec.image_id,
                        bbox: rec.bbox,
                        feature: rec.feature,
                    }],
                }),
            }
        }
        Self::new(images)
    }

    pub fn new(mut images: Vec<LabeledImage>) -> Result<Self, MiningError> {
        if images.is_empty() {
            return Err(MiningError::EmptyDataset);
        }
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let dim = images[0].proposals.first().map(|p| p.feature.len());
        for img in &mut images {
            if img.proposals.is_empty() {
                return Err(MiningError::EmptyImage(img.image_id.clone()));
            }
            for p in &img.proposals {
                if Some(p.feature.len()) != dim {
                    return Err(MiningError::DimensionMismatch {
                        image_id: img.image_id.clone(),
                        expected: dim.unwrap_or(0),
                        found: p.feature.len(),
                    });
                }
            }
            img.proposals.sort_by(|a, b| {
                a.bbox.lex_cmp(&b.bbox).then_with(|| {
                    a.feature
                        .iter()
                        .zip(&b.feature)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| *o != Ordering::Equal)
                        .unwrap_or(Ordering::Equal)
                })
            });
        }
        Ok(Self { images })
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn proposal(&self, r: RegionRef) -> &Proposal {
        &self.images[r.image].proposals[r.proposal]
    }

    pub fn label(&self, r: RegionRef) -> ImageLabel {
        self.images[r.image].label
    }

    pub fn positive_image_count(&self) -> usize {
        self.images.iter().filter(|i| i.label == ImageLabel::Pos).count()
    }

    /// `ceil(#positive images / 2)`.
    pub fn default_k(&self) -> usize {
        self.positive_image_count().div_ceil(2)
    }

    pub fn region_id(&self, r: RegionRef) -> String {
        format!("{}#{}", self.images[r.image].image_id, r.proposal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub region: RegionRef,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub seed: RegionRef,
    /// At most one per image, never from the seed's image, similarity descending.
    pub members: Vec<Member>,
    pub positive_count: usize,
}

impl Cluster {
    pub fn mean_similarity(&self) -> f64 {
        if self.members.is_empty() {
            0.0
        } else {
            self.members.iter().map(|m| m.similarity).sum::<f64>() / self.members.len() as f64
        }
    }

    /// Seed followed by the members.
    pub fn regions(&self) -> impl Iterator<Item = RegionRef> + '_ {
        std::iter::once(self.seed).chain(self.members.iter().map(|m| m.region))
    }

    pub fn len(&self) -> usize {
        self.members.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Builds one cluster per proposal, in canonical seed order.
pub fn build_clusters(ds: &Dataset, k: usize) -> Vec<Cluster> {
    let seeds: Vec<RegionRef> = ds
        .images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.proposals.len()).map(move |p| RegionRef { image: i, proposal: p }))
        .collect();
    seeds
        .par_iter()
        .map(|&seed| {
            let seed_feat = &ds.proposal(seed).feature;
            let mut champions: Vec<Member> = ds
                .images
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != seed.image)
                .map(|(j, img)| {
                    let mut best = Member {
                        region: RegionRef { image: j, proposal: 0 },
                        similarity: cosine_or_zero(seed_feat, &img.proposals[0].feature),
                    };
                    for (p, prop) in img.proposals.iter().enumerate().skip(1) {
                        let s = cosine_or_zero(seed_feat, &prop.feature);
                        if s > best.similarity {
                            best = Member {
                                region: RegionRef { image: j, proposal: p },
                                similarity: s,
                            };
                        }
                    }
                    best
                })
                .collect();
            champions.sort_by(|a, b| {
                b.similarity
                    .total_cmp(&a.similarity)
                    .then(a.region.cmp(&b.region))
            });
            champions.truncate(k);
            let positive_count = std::iter::once(seed)
                .chain(champions.iter().map(|m| m.region))
                .filter(|r| ds.label(*r) == ImageLabel::Pos)
                .count();
            Cluster {
                seed,
                members: champions,
                positive_count,
            }
        })
        .collect()
}

/// Positive count descending, then mean member similarity descending, then seed.
pub fn rank_clusters(mut clusters: Vec<Cluster>) -> Vec<Cluster> {
    clusters.sort_by(|a, b| {
        b.positive_count
            .cmp(&a.positive_count)
            .then_with(|| b.mean_similarity().total_cmp(&a.mean_similarity()))
            .then(a.seed.cmp(&b.seed))
    });
    clusters
}

pub const DUPLICATE_IOU: f64 = 0.25;

/// Greedy near-duplicate removal over rank-sorted clusters.
///
/// A cluster is dropped when at least 10% of its regions (seed included,
/// rounded up) overlap some same-image region of an already kept cluster
/// with IOU above [`DUPLICATE_IOU`].
pub fn dedup_clusters(ds: &Dataset, ranked: Vec<Cluster>) -> Vec<Cluster> {
    // kept regions bucketed by image
    let mut kept_regions: Vec<Vec<BBox>> = vec![Vec::new(); ds.images.len()];
    let mut kept = Vec::new();
    for cluster in ranked {
        let dupes = cluster
            .regions()
            .filter(|r| {
                let b = &ds.proposal(*r).bbox;
                kept_regions[r.image].iter().any(|k| iou(k, b) > DUPLICATE_IOU)
            })
            .count();
        if dupes * 10 >= cluster.len() && dupes > 0 {
            continue;
        }
        for r in cluster.regions() {
            kept_regions[r.image].push(ds.proposal(r).bbox);
        }
        kept.push(cluster);
    }
    kept
}

pub const DEFAULT_TOP_CLUSTERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedRegion {
    pub region_id: usize,
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Rank (0-based) of the cluster that contributed the region first.
    pub cluster_rank: usize,
    pub cluster_seed: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedRegionSet {
    pub regions: Vec<MinedRegion>,
    pub source_cluster_ids: Vec<String>,
}

/// Positive regions (seed included when positive) of the top `top_c`
/// clusters; repeated `(image, box)` pairs are kept once.
pub fn select_positive_regions(ds: &Dataset, deduped: &[Cluster], top_c: usize) -> Result<MinedRegionSet, MiningError> {
    let mut seen: HashSet<(usize, [u64; 4])> = HashSet::new();
    let mut regions = Vec::new();
    let mut source_cluster_ids = Vec::new();
    for (rank, cluster) in deduped.iter().take(top_c).enumerate() {
        let seed_id = ds.region_id(cluster.seed);
        source_cluster_ids.push(seed_id.clone());
        for r in cluster.regions() {
            if ds.label(r) != ImageLabel::Pos {
                continue;
            }
            let p = ds.proposal(r);
            let key = (r.image, p.bbox.to_array().map(f64::to_bits));
            if !seen.insert(key) {
                continue;
            }
            regions.push(MinedRegion {
                region_id: regions.len(),
                image_id: p.image_id.clone(),
                bbox: p.bbox,
                cluster_rank: rank,
                cluster_seed: seed_id.clone(),
            });
        }
    }
    if regions.is_empty() {
        return Err(MiningError::NoPositives);
    }
    Ok(MinedRegionSet {
        regions,
        source_cluster_ids,
    })
}

/// Runs the full mining chain with `k` neighbours and `top_c` clusters.
pub fn mine(ds: &Dataset, k: usize, top_c: usize) -> Result<(Vec<Cluster>, MinedRegionSet), MiningError> {
    let ranked = rank_clusters(build_clusters(ds, k));
    let deduped = dedup_clusters(ds, ranked);
    let set = select_positive_regions(ds, &deduped, top_c)?;
    Ok((deduped, set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(image: &str, label: ImageLabel, b: [f64; 4], f: &[f32]) -> ProposalRecord {
        ProposalRecord {
            image_id: image.into(),
            label,
            bbox: BBox::from_array(b).unwrap(),
            feature: f.to_vec(),
        }
    }

    use ImageLabel::{Neg, Pos};

    #[test]
    fn k_zero_gives_singletons() {
        let ds = Dataset::from_records(vec![
            rec("a", Pos, [0., 0., 2., 2.], &[1., 0.]),
            rec("b", Neg, [0., 0., 2., 2.], &[0., 1.]),
        ])
        .unwrap();
        let cs = build_clusters(&ds, 0);
        assert_eq!(cs.len(), 2);
        assert!(cs.iter().all(|c| c.members.is_empty()));
        assert_eq!(cs[0].positive_count, 1);
        assert_eq!(cs[1].positive_count, 0);
    }

    #[test]
    fn identical_proposals_cluster_symmetrically() {
        let ds = Dataset::from_records(
            ["a", "b", "c"]
                .iter()
                .map(|i| rec(i, Pos, [0., 0., 2., 2.], &[1., 2., 3.]))
                .collect(),
        )
        .unwrap();
        for c in build_clusters(&ds, 2) {
            assert_eq!(c.members.len(), 2);
            assert!(c.members.iter().all(|m| (m.similarity - 1.0).abs() < 1e-12));
            assert!(c.members.iter().all(|m| m.region.image != c.seed.image));
            assert_eq!(c.positive_count, 3);
        }
    }

    /// Hand-checked nearest neighbours on a 4-image, 2-proposal dataset.
    #[test]
    fn four_image_neighbours() {
        let ds = Dataset::from_records(vec![
            rec("i0", Pos, [0., 0., 1., 1.], &[1.0, 0.0]),
            rec("i0", Pos, [1., 1., 2., 2.], &[0.0, 1.0]),
            rec("i1", Pos, [0., 0., 1., 1.], &[0.9, 0.1]),
            rec("i1", Pos, [1., 1., 2., 2.], &[0.2, 1.0]),
            rec("i2", Neg, [0., 0., 1., 1.], &[0.5, 0.5]),
            rec("i2", Neg, [1., 1., 2., 2.], &[-1.0, 0.0]),
            rec("i3", Neg, [0., 0., 1., 1.], &[0.0, -1.0]),
            rec("i3", Neg, [1., 1., 2., 2.], &[1.0, 0.3]),
        ])
        .unwrap();
        let cs = build_clusters(&ds, 2);
        // seed i0#0 = [1,0]: champions i1#0 (0.9939), i3#1 (0.9578), i2#0 (0.7071)
        let c = &cs[0];
        let got: Vec<_> = c.members.iter().map(|m| (m.region.image, m.region.proposal)).collect();
        assert_eq!(got, vec![(1, 0), (3, 1)]);
        assert_eq!(c.positive_count, 2);
        let cos = |a: [f64; 2], b: [f64; 2]| (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1]));
        assert!((c.members[0].similarity - cos([1.0, 0.0], [0.9, 0.1])).abs() < 1e-6);
        // seed i0#1 = [0,1]: i1#1 (0.9806), i2#0 (0.7071), i3#1 (0.2873)
        let got: Vec<_> = cs[1].members.iter().map(|m| (m.region.image, m.region.proposal)).collect();
        assert_eq!(got, vec![(1, 1), (2, 0)]);
    }

    #[test]
    fn proposal_order_does_not_matter() {
        let mut recs = vec![
            rec("x", Pos, [0., 0., 1., 1.], &[1.0, 0.2]),
            rec("x", Pos, [2., 0., 3., 1.], &[0.3, 1.0]),
            rec("y", Neg, [0., 0., 1., 1.], &[1.0, 0.2]),
            rec("y", Neg, [1., 1., 3., 3.], &[1.0, 0.2]),
            rec("z", Pos, [0., 0., 2., 2.], &[0.5, 0.5]),
        ];
        let a = rank_clusters(build_clusters(&Dataset::from_records(recs.clone()).unwrap(), 2));
        recs.reverse();
        let b = rank_clusters(build_clusters(&Dataset::from_records(recs).unwrap(), 2));
        assert_eq!(a, b);
    }

    fn cluster(seed: (usize, usize), members: &[(usize, usize, f64)], count: usize) -> Cluster {
        Cluster {
            seed: RegionRef { image: seed.0, proposal: seed.1 },
            members: members
                .iter()
                .map(|&(i, p, s)| Member {
                    region: RegionRef { image: i, proposal: p },
                    similarity: s,
                })
                .collect(),
            positive_count: count,
        }
    }

    #[test]
    fn ranking_rules() {
        let cs = vec![
            cluster((0, 0), &[(1, 0, 0.5)], 3),
            cluster((0, 1), &[(1, 0, 0.5)], 1),
            cluster((1, 0), &[(0, 0, 0.5)], 2),
        ];
        let counts: Vec<_> = rank_clusters(cs).iter().map(|c| c.positive_count).collect();
        assert_eq!(counts, vec![3, 2, 1]);

        let tied = vec![
            cluster((0, 0), &[(1, 0, 0.2)], 2),
            cluster((0, 1), &[(1, 0, 0.9)], 2),
            cluster((1, 0), &[(0, 0, 0.9)], 2),
        ];
        let seeds: Vec<_> = rank_clusters(tied).iter().map(|c| (c.seed.image, c.seed.proposal)).collect();
        assert_eq!(seeds, vec![(0, 1), (1, 0), (0, 0)]);
    }

    fn grid_dataset(n_images: usize, boxes: &[[f64; 4]]) -> Dataset {
        let mut recs = Vec::new();
        for i in 0..n_images {
            for (j, b) in boxes.iter().enumerate() {
                recs.push(rec(&format!("im{i:02}"), Pos, *b, &[j as f32 + 1.0, 1.0]));
            }
        }
        Dataset::from_records(recs).unwrap()
    }

    #[test]
    fn dedup_exact_duplicate_and_disjoint() {
        let ds = grid_dataset(3, &[[0., 0., 4., 4.], [10., 10., 14., 14.]]);
        let a = cluster((0, 0), &[(1, 0, 1.0), (2, 0, 1.0)], 3);
        let kept = dedup_clusters(&ds, vec![a.clone(), a.clone()]);
        assert_eq!(kept.len(), 1);

        let b = cluster((0, 1), &[(1, 1, 1.0), (2, 1, 1.0)], 3);
        let kept = dedup_clusters(&ds, vec![a, b]);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn dedup_threshold_is_inclusive() {
        // 10 regions per cluster; the second shares exactly one (10%) with the first.
        let boxes: Vec<[f64; 4]> = (0..2).map(|j| [j as f64 * 10.0, 0.0, j as f64 * 10.0 + 4.0, 4.0]).collect();
        let ds = grid_dataset(12, &boxes);
        let first = cluster((0, 0), &(1..10).map(|i| (i, 0, 1.0)).collect::<Vec<_>>(), 10);
        let mut second_members: Vec<(usize, usize, f64)> = (1..9).map(|i| (i, 1, 1.0)).collect();
        second_members.push((9, 0, 1.0)); // same box as first's member in image 9
        let second = cluster((10, 1), &second_members, 10);
        assert_eq!(dedup_clusters(&ds, vec![first.clone(), second.clone()]).len(), 1);

        // with 11 regions, one shared region is below 10%... ceil(1.1) = 2 needed
        let mut eleven = second_members.clone();
        eleven.push((11, 1, 1.0));
        let bigger = cluster((10, 1), &eleven, 11);
        assert_eq!(dedup_clusters(&ds, vec![first, bigger]).len(), 2);
    }

    #[test]
    fn selection_rules() {
        let ds = Dataset::from_records(vec![
            rec("a", Pos, [0., 0., 2., 2.], &[1., 0.]),
            rec("b", Neg, [0., 0., 2., 2.], &[1., 0.]),
            rec("c", Neg, [0., 0., 2., 2.], &[1., 0.]),
            rec("d", Pos, [1., 1., 3., 3.], &[1., 0.]),
        ])
        .unwrap();
        let neg_only = cluster((1, 0), &[(2, 0, 1.0)], 0);
        assert!(matches!(
            select_positive_regions(&ds, &[neg_only.clone()], 200),
            Err(MiningError::NoPositives)
        ));
        let mixed = cluster((0, 0), &[(1, 0, 1.0), (3, 0, 0.9)], 2);
        let again = cluster((3, 0), &[(0, 0, 0.9)], 2);
        let set = select_positive_regions(&ds, &[neg_only, mixed, again], 200).unwrap();
        let got: Vec<_> = set.regions.iter().map(|r| (r.image_id.as_str(), r.cluster_rank)).collect();
        assert_eq!(got, vec![("a", 1), ("d", 1)]);
        assert_eq!(set.source_cluster_ids.len(), 3);
    }
}
