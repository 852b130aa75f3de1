use serde::{Deserialize, Serialize};

use super::{GeometryError, Vec3};
use crate::scalar::Real;
use crate::scene::CameraFrame;

/// Unit vector from the camera center towards `target`.
pub fn viewing_direction<T: Real>(
    frame: &CameraFrame<T>,
    target: &Vec3<T>,
) -> Result<Vec3<T>, GeometryError> {
    (*target - frame.pose.camera_position())
        .try_normalize(T::lit(1e-9))
        .ok_or(GeometryError::DegenerateDirection)
}

/// Angle in radians between two directions. Inputs are renormalized and the
/// cosine is clamped to [-1, 1].
pub fn angular_distance<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    let na = a.norm();
    let nb = b.norm();
    if na <= T::zero() || nb <= T::zero() {
        return T::zero();
    }
    let cos = (a.dot(b) / (na * nb)).max(-T::one()).min(T::one());
    cos.acos()
}

/// A group of input directions, by position in the input slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionCluster<T> {
    pub members: Vec<usize>,
    pub center: Vec3<T>,
}

/// Frame-level view cluster: members, common center and representative frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ViewCluster<T = f64> {
    pub frame_ids: Vec<u32>,
    pub center_direction: Vec3<T>,
    pub representative_frame_id: u32,
}

fn normalized_mean<T: Real>(dirs: impl Iterator<Item = Vec3<T>>) -> Option<Vec3<T>> {
    dirs.fold(Vec3::zero(), |acc, d| acc + d)
        .try_normalize(T::lit(1e-12))
}

/// Largest angle between any member and the normalized mean of `members`,
/// with that mean; `None` when the mean vanishes.
fn spread<T: Real>(unit: &[Vec3<T>], members: &[usize]) -> Option<(T, Vec3<T>)> {
    let center = normalized_mean(members.iter().map(|&m| unit[m]))?;
    let radius = members
        .iter()
        .map(|&m| angular_distance(&unit[m], &center))
        .fold(T::zero(), |a, b| a.max(b));
    Some((radius, center))
}

/// Agglomerative clustering under an angular radius bound.
///
/// Starting from singletons, repeatedly merges the pair of clusters whose
/// union has the smallest radius (largest member-to-center angle), as long
/// as that radius is at most `epsilon`. Ties go to the pair with the lowest
/// member indices. The merge sequence does not depend on `epsilon`, so a
/// larger threshold only extends it and never yields more clusters.
///
/// Clusters are returned ordered by their lowest member; members ascend.
pub fn cluster_directions<T: Real>(directions: &[Vec3<T>], epsilon: T) -> Vec<DirectionCluster<T>> {
    let unit: Vec<Vec3<T>> = directions
        .iter()
        .map(|d| d.try_normalize(T::lit(1e-12)).unwrap_or(*d))
        .collect();
    let mut clusters: Vec<DirectionCluster<T>> = unit
        .iter()
        .enumerate()
        .map(|(i, d)| DirectionCluster { members: vec![i], center: *d })
        .collect();
    loop {
        let mut best: Option<(T, usize, usize, Vec3<T>)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut joined = clusters[a].members.clone();
                joined.extend_from_slice(&clusters[b].members);
                let Some((radius, center)) = spread(&unit, &joined) else {
                    continue;
                };
                if radius <= epsilon && best.as_ref().is_none_or(|(r, ..)| radius < *r) {
                    best = Some((radius, a, b, center));
                }
            }
        }
        let Some((_, a, b, center)) = best else {
            break;
        };
        let absorbed = clusters.remove(b);
        clusters[a].members.extend(absorbed.members);
        clusters[a].members.sort_unstable();
        clusters[a].center = center;
    }
    clusters
}
