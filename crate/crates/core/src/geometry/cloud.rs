use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::{Box3D, GeometryError};
use crate::scalar::Real;
use crate::scene::Scene;

/// Majority threshold `ceil(views / 2)`, at least 1.
pub fn majority_votes(views: usize) -> usize {
    views.div_ceil(2).max(1)
}

/// Keeps indices present in at least `min_votes` of the per-view sets.
pub fn fuse_views(per_view: &[BTreeSet<usize>], min_votes: usize) -> BTreeSet<usize> {
    let min_votes = min_votes.max(1);
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for set in per_view {
        for &i in set {
            *votes.entry(i).or_default() += 1;
        }
    }
    votes
        .into_iter()
        .filter_map(|(i, n)| (n >= min_votes).then_some(i))
        .collect()
}

/// Statistical outlier removal over the points named by `indices`.
///
/// Each point's score is its mean distance to its `k` nearest neighbors in
/// the set; points scoring above `mean + std_ratio * std` are dropped. Sets
/// with at most `k` points are returned unchanged.
pub fn denoise_points<T: Real>(
    indices: &BTreeSet<usize>,
    scene: &Scene<T>,
    k: usize,
    std_ratio: T,
) -> BTreeSet<usize> {
    let k = k.max(1);
    if indices.len() <= k {
        return indices.clone();
    }
    let ids: Vec<usize> = indices.iter().copied().collect();
    let pts: Vec<_> = ids.iter().map(|&i| scene.points[i]).collect();

    let scores: Vec<T> = (0..pts.len())
        .into_par_iter()
        .map(|a| {
            let mut nearest: Vec<T> = Vec::with_capacity(k + 1);
            for (b, q) in pts.iter().enumerate() {
                if a == b {
                    continue;
                }
                let d = (pts[a] - *q).norm();
                if nearest.len() < k {
                    let at = nearest.partition_point(|x| *x <= d);
                    nearest.insert(at, d);
                } else if d < nearest[k - 1] {
                    nearest.pop();
                    let at = nearest.partition_point(|x| *x <= d);
                    nearest.insert(at, d);
                }
            }
            nearest.iter().fold(T::zero(), |s, d| s + *d) / T::lit(nearest.len() as f64)
        })
        .collect();

    let n = T::lit(scores.len() as f64);
    let mean = scores.iter().fold(T::zero(), |s, v| s + *v) / n;
    let var = scores
        .iter()
        .fold(T::zero(), |s, v| s + (*v - mean) * (*v - mean))
        / n;
    let threshold = mean + std_ratio * var.sqrt();
    ids.into_iter()
        .zip(scores)
        .filter_map(|(i, s)| (s <= threshold).then_some(i))
        .collect()
}

pub fn bbox_from_indices<T: Real>(
    indices: &BTreeSet<usize>,
    scene: &Scene<T>,
) -> Result<Box3D<T>, GeometryError> {
    Box3D::hull(indices.iter().map(|&i| &scene.points[i])).ok_or(GeometryError::EmptySet)
}
