//! PartSelect: cluster interaction embeddings into prototypes, score each
//! prototype's egocentric similarity mask against the saliency mask with
//! PartIoU, and keep at most one object-part prototype.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{mean_threshold, FeatureMap, SaliencyMask};
use crate::error::{Error, Result};
use crate::region::EmbeddingBag;
use crate::rng;
use crate::tensor::{norm, Tensor3};

/// Guard on vector norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// A single k-means++ start finds the optimal split of unstructured points
/// only about half the time; ten keep misses rare at negligible cost.
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub clusters: usize,
    pub max_iters: usize,
    /// Independent k-means++ initialisations; the lowest-cost run is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansOptions {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self { clusters, max_iters: 100, restarts: DEFAULT_RESTARTS, seed }
    }
}

/// `K` cluster centres in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub centers: Vec<Vec<f64>>,
    pub member_counts: Vec<usize>,
    pub assignments: Vec<usize>,
    pub kmeans_iters_used: usize,
    /// Sum of squared distances of members to their centres.
    pub cost: f64,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from [`DEFAULT_RESTARTS`] k-means++ seedings.
pub fn cluster_prototypes(bag: &EmbeddingBag, clusters: usize, seed: u64) -> Result<PrototypeSet> {
    kmeans(&bag.embeddings, &KMeansOptions::new(clusters, seed))
}

pub fn kmeans(points: &[Vec<f64>], opts: &KMeansOptions) -> Result<PrototypeSet> {
    if opts.clusters == 0 {
        return Err(Error::Config("number of prototypes must be positive".into()));
    }
    if points.len() < opts.clusters {
        return Err(Error::Input(format!(
            "{} embeddings cannot form {} prototypes",
            points.len(),
            opts.clusters
        )));
    }
    let mut best: Option<PrototypeSet> = None;
    for run in 0..opts.restarts.max(1) {
        let mut draw = rng::stream(opts.seed, &[run as u64]);
        let init = kmeans_plus_plus(points, opts.clusters, &mut draw);
        let result = lloyd(points, init, opts.max_iters);
        if best.as_ref().is_none_or(|b| result.cost < b.cost) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one run"))
}

fn kmeans_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, draw: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[draw.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = draw.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            draw.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn recompute_centers(points: &[Vec<f64>], assignments: &[usize], centers: &mut [Vec<f64>]) -> Vec<usize> {
    let dim = points[0].len();
    let mut counts = vec![0usize; centers.len()];
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
    counts
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centers: &mut [Vec<f64>], counts: &mut Vec<usize>) -> bool {
    let mut repaired = false;
    while let Some(empty) = counts.iter().position(|&n| n == 0) {
        let largest = (0..counts.len()).max_by_key(|&k| (counts[k], usize::MAX - k)).expect("non-empty");
        let far = (0..points.len())
            .filter(|&i| assignments[i] == largest)
            .max_by(|&i, &j| {
                sq_dist(&points[i], &centers[largest])
                    .partial_cmp(&sq_dist(&points[j], &centers[largest]))
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(j.cmp(&i))
            })
            .expect("largest cluster has members");
        assignments[far] = empty;
        *counts = recompute_centers(points, assignments, centers);
        repaired = true;
    }
    repaired
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iters: usize) -> PrototypeSet {
    let k = centers.len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut iters = 0;
    let mut counts = vec![0; k];
    while iters < max_iters {
        iters += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let current = assignments[i];
            let mut best = if current < k { current } else { 0 };
            let mut best_d = sq_dist(p, &centers[best]);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if best != current {
                assignments[i] = best;
                changed = true;
            }
        }
        counts = recompute_centers(points, &assignments, &mut centers);
        if repair_empty(points, &mut assignments, &mut centers, &mut counts) {
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let cost = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
    PrototypeSet { centers, member_counts: counts, assignments, kmeans_iters_used: iters, cost }
}

/// Cosine similarity of every prototype with every egocentric cell, and the
/// per-map mean-threshold masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMaps {
    pub data: Tensor3,
    pub binary: Vec<Vec<bool>>,
}

pub fn similarity_maps(protos: &PrototypeSet, ego_features: &FeatureMap) -> Result<SimilarityMaps> {
    let (h, w) = ego_features.patch_grid();
    let dim = ego_features.dim();
    let feats = ego_features.tensor();
    let mut cell_norms = vec![0.0; h * w];
    for (i, n) in cell_norms.iter_mut().enumerate() {
        let s: f64 = (0..dim).map(|d| feats.plane(d)[i] * feats.plane(d)[i]).sum();
        *n = libm::sqrt(s).max(COSINE_EPS);
    }
    let mut data = Tensor3::zeros(protos.len(), h, w);
    for (k, center) in protos.centers.iter().enumerate() {
        if center.len() != dim {
            return Err(Error::Shape(format!("prototype width {} vs feature width {dim}", center.len())));
        }
        let cn = norm(center).max(COSINE_EPS);
        let plane = data.plane_mut(k);
        for (d, &c) in center.iter().enumerate() {
            let src = feats.plane(d);
            plane.iter_mut().zip(src).for_each(|(s, f)| *s += c * f);
        }
        plane.iter_mut().zip(&cell_norms).for_each(|(s, n)| *s /= cn * n);
    }
    let binary = (0..protos.len()).map(|k| mean_threshold(data.plane(k))).collect();
    Ok(SimilarityMaps { data, binary })
}

/// `½·|S∩A|/|S| + ½·|A|/|S∪A|`, or 0 when `S` or `S∪A` is empty.
///
/// # Panics
/// If the masks differ in length.
pub fn part_iou(sim_binary: &[bool], sal_binary: &[bool]) -> f64 {
    assert_eq!(sim_binary.len(), sal_binary.len(), "mask shapes differ");
    let (mut s, mut a, mut inter, mut union) = (0usize, 0usize, 0usize, 0usize);
    for (&x, &y) in sim_binary.iter().zip(sal_binary) {
        s += x as usize;
        a += y as usize;
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if s == 0 || union == 0 {
        return 0.0;
    }
    // Same value over a common denominator, rounded once.
    (inter * union + a * s) as f64 / (2 * s * union) as f64
}

/// Outcome of PartSelect for one egocentric image.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected: Option<Vec<f64>>,
    pub scores: Vec<f64>,
    pub chosen_index: Option<usize>,
}

impl SelectionResult {
    pub fn none() -> Self {
        Self { selected: None, scores: Vec::new(), chosen_index: None }
    }
}

/// Picks the prototype with the highest PartIoU (lowest index on ties) when
/// that score exceeds `mu`.
pub fn select_object_part(
    protos: &PrototypeSet,
    sims: &SimilarityMaps,
    saliency: &SaliencyMask,
    mu: f64,
) -> SelectionResult {
    let scores: Vec<f64> = sims.binary.iter().map(|s| part_iou(s, saliency.binary())).collect();
    let mut chosen: Option<usize> = None;
    for (k, &g) in scores.iter().enumerate() {
        if chosen.is_none_or(|c| g > scores[c]) {
            chosen = Some(k);
        }
    }
    let chosen = chosen.filter(|&k| scores[k] > mu);
    SelectionResult { selected: chosen.map(|k| protos.centers[k].clone()), scores, chosen_index: chosen }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Map2;
    use approx::assert_abs_diff_eq;

    fn mask(cells: &[usize], n: usize) -> Vec<bool> {
        (0..n).map(|i| cells.contains(&i)).collect()
    }

    #[test]
    fn part_iou_examples() {
        // 2x2 grid, row-major: (0,0)=0 (0,1)=1 (1,0)=2 (1,1)=3
        let a = mask(&[0, 1], 4);
        assert_eq!(part_iou(&mask(&[0], 4), &a), 1.0);
        assert_abs_diff_eq!(part_iou(&mask(&[0, 3], 4), &a), 7.0 / 12.0, epsilon = 1e-15);
        assert_eq!(part_iou(&mask(&[2, 3], 4), &a), 0.25);
        assert_eq!(part_iou(&mask(&[], 4), &a), 0.0);
    }

    #[test]
    fn distinct_points_are_their_own_centers() {
        let pts = vec![vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 4.0]];
        let p = kmeans(&pts, &KMeansOptions::new(3, 4)).unwrap();
        assert_eq!(p.member_counts, vec![1, 1, 1]);
        let mut centers = p.centers.clone();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect = pts.clone();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, expect);
        assert_eq!(p.cost, 0.0);
    }

    #[test]
    fn identical_points_exercise_repair() {
        let pts = vec![vec![1.5, -2.0]; 5];
        let p = kmeans(&pts, &KMeansOptions::new(2, 0)).unwrap();
        assert_eq!(p.centers, vec![vec![1.5, -2.0]; 2]);
        assert!(p.member_counts.iter().all(|&n| n > 0));
        assert_eq!(p.member_counts.iter().sum::<usize>(), 5);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![vec![1.0]];
        assert!(matches!(kmeans(&pts, &KMeansOptions::new(2, 0)), Err(Error::Input(_))));
    }

    #[test]
    fn centers_are_member_means() {
        let mut draw = rng::stream(3, &[]);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![draw.random_range(-1.0..1.0), draw.random_range(-1.0..1.0)]).collect();
        let p = kmeans(&pts, &KMeansOptions::new(3, 9)).unwrap();
        for k in 0..3 {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&p.assignments).filter(|(_, &a)| a == k).map(|(x, _)| x).collect();
            assert_eq!(members.len(), p.member_counts[k]);
            for d in 0..2 {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                assert_abs_diff_eq!(p.centers[k][d], mean, epsilon = 1e-12);
            }
        }
    }

    fn features(cells: Vec<Vec<f64>>, h: usize, w: usize) -> FeatureMap {
        let d = cells[0].len();
        let mut t = Tensor3::zeros(d, h, w);
        for (i, c) in cells.iter().enumerate() {
            for (k, v) in c.iter().enumerate() {
                t.set(k, i / w, i % w, *v);
            }
        }
        FeatureMap::new(t, (h, w)).unwrap()
    }

    #[test]
    fn cosine_extremes() {
        let f = features(vec![vec![1.0, 2.0], vec![-2.0, 1.0], vec![-1.0, -2.0], vec![0.0, 0.0]], 2, 2);
        let protos = PrototypeSet {
            centers: vec![vec![1.0, 2.0]],
            member_counts: vec![1],
            assignments: vec![0],
            kmeans_iters_used: 0,
            cost: 0.0,
        };
        let s = similarity_maps(&protos, &f).unwrap();
        let v = s.data.plane(0);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], -1.0, epsilon = 1e-12);
        assert_eq!(v[3], 0.0);
    }

    fn sims_from(binaries: Vec<Vec<bool>>) -> SimilarityMaps {
        SimilarityMaps { data: Tensor3::zeros(binaries.len(), 1, binaries[0].len()), binary: binaries }
    }

    fn protos(k: usize) -> PrototypeSet {
        PrototypeSet {
            centers: (0..k).map(|i| vec![i as f64]).collect(),
            member_counts: vec![1; k],
            assignments: (0..k).collect(),
            kmeans_iters_used: 1,
            cost: 0.0,
        }
    }

    #[test]
    fn gate_closed_selects_nothing() {
        let sal = SaliencyMask::from_weights(Map2::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        // disjoint masks score 0.25
        let sims = sims_from(vec![vec![false, false, true, true]; 2]);
        let r = select_object_part(&protos(2), &sims, &sal, 0.65);
        assert_eq!(r.scores, vec![0.25, 0.25]);
        assert!(r.selected.is_none() && r.chosen_index.is_none());
    }

    #[test]
    fn argmax_above_gate_with_low_index_ties() {
        let sal = SaliencyMask::from_weights(Map2::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let sims = sims_from(vec![
            vec![false, false, true, true],
            vec![true, false, false, false],
            vec![false, true, false, false],
        ]);
        let r = select_object_part(&protos(3), &sims, &sal, 0.5);
        assert_eq!(r.chosen_index, Some(1));
        assert_eq!(r.selected, Some(vec![1.0]));
    }
}
