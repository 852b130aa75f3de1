use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Box2D, GeometryError, Vec3};
use crate::mask::BinaryMask;
use crate::scalar::Real;
use crate::scene::{CameraFrame, Proposal3D, Scene};

/// Camera-space depth at or below which a point counts as behind the camera.
pub const BEHIND_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection<T> {
    InFront { u: T, v: T, depth: T },
    Behind,
}

/// Pinhole projection of a world point into `frame`.
pub fn project_point<T: Real>(p: &Vec3<T>, frame: &CameraFrame<T>) -> Projection<T> {
    let c = frame.pose.world_to_camera(p);
    if c.z <= T::lit(BEHIND_EPS) {
        return Projection::Behind;
    }
    let k = &frame.intrinsics;
    Projection::InFront {
        u: k.fx * c.x / c.z + k.cx,
        v: k.fy * c.y / c.z + k.cy,
        depth: c.z,
    }
}

/// Projects `p` and applies the in-frame and depth-consistency test.
/// Returns the continuous pixel coordinates when the point is visible.
#[inline]
fn visible_pixel<T: Real>(p: &Vec3<T>, frame: &CameraFrame<T>, depth_tol: T) -> Option<(T, T)> {
    let Projection::InFront { u, v, depth } = project_point(p, frame) else {
        return None;
    };
    let (w, h) = (T::lit(frame.width() as f64), T::lit(frame.height() as f64));
    if !(u >= T::zero() && u < w && v >= T::zero() && v < h) {
        return None;
    }
    let (px, py) = (u.floor().to_u32()?, v.floor().to_u32()?);
    let measured = T::lit(frame.depth.get(px, py)? as f64);
    ((depth - measured).abs() <= depth_tol).then_some((u, v))
}

/// Visibility of a proposal in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Visibility<T = f64> {
    pub frame_id: u32,
    pub visible_fraction: T,
    pub bbox2d: Option<Box2D<T>>,
    pub pixel_area: u64,
}

/// Indices (from `indices`) whose points pass the visibility test in `frame`.
pub fn visible_point_indices<T: Real>(
    indices: &[usize],
    frame: &CameraFrame<T>,
    scene: &Scene<T>,
    depth_tol: T,
) -> Vec<usize> {
    indices
        .iter()
        .copied()
        .filter(|&i| visible_pixel(&scene.points[i], frame, depth_tol).is_some())
        .collect()
}

pub fn proposal_visibility<T: Real>(
    proposal: &Proposal3D<T>,
    frame: &CameraFrame<T>,
    scene: &Scene<T>,
    depth_tol: T,
) -> Visibility<T> {
    let pixels: Vec<(T, T)> = proposal
        .mask
        .iter()
        .filter_map(|&i| visible_pixel(&scene.points[i], frame, depth_tol))
        .collect();
    let visible_fraction = if proposal.mask.is_empty() {
        T::zero()
    } else {
        T::lit(pixels.len() as f64 / proposal.mask.len() as f64)
    };
    let bbox2d = Box2D::hull(pixels).map(|b| {
        b.clip(
            T::lit(frame.width() as f64),
            T::lit(frame.height() as f64),
        )
    });
    let pixel_area = bbox2d
        .map(|b| b.area().as_f64().round().max(0.0) as u64)
        .unwrap_or(0);
    Visibility {
        frame_id: frame.frame_id,
        visible_fraction,
        bbox2d,
        pixel_area,
    }
}

/// Frames where at least `min_fraction` of the proposal is visible, largest
/// projected area first, ties by ascending frame id.
pub fn rank_visible_frames<T: Real>(
    proposal: &Proposal3D<T>,
    scene: &Scene<T>,
    min_fraction: T,
    depth_tol: T,
) -> Vec<Visibility<T>> {
    let mut out: Vec<Visibility<T>> = scene
        .frames
        .par_iter()
        .map(|f| proposal_visibility(proposal, f, scene, depth_tol))
        .filter(|v| v.visible_fraction >= min_fraction && v.bbox2d.is_some())
        .collect();
    out.sort_by(|a, b| {
        b.pixel_area
            .cmp(&a.pixel_area)
            .then(a.frame_id.cmp(&b.frame_id))
    });
    out
}

/// Cloud points whose projection lands on a set mask pixel and passes the depth check.
pub fn back_project_mask<T: Real>(
    mask: &BinaryMask,
    frame: &CameraFrame<T>,
    scene: &Scene<T>,
    depth_tol: T,
) -> Result<BTreeSet<usize>, GeometryError> {
    if mask.dimensions() != (frame.width(), frame.height()) {
        return Err(GeometryError::DimensionMismatch {
            mask: mask.dimensions(),
            frame: (frame.width(), frame.height()),
        });
    }
    Ok(scene
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (u, v) = visible_pixel(p, frame, depth_tol)?;
            mask.get(u.floor().to_u32()?, v.floor().to_u32()?)
                .then_some(i)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::scene::DepthMap;
    use image::RgbImage;

    fn frame(pose: Pose<f64>, depth: DepthMap) -> CameraFrame<f64> {
        CameraFrame {
            frame_id: 0,
            image: RgbImage::new(depth.width, depth.height),
            depth,
            pose,
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 50.0,
                cy: 50.0,
                width: 100,
                height: 100,
            },
        }
    }

    #[test]
    fn principal_axis_point() {
        let f = frame(Pose::identity(), DepthMap::new(100, 100));
        assert_eq!(
            project_point(&Vec3::new(0.0, 0.0, 2.0), &f),
            Projection::InFront { u: 50.0, v: 50.0, depth: 2.0 }
        );
        assert_eq!(
            project_point(&Vec3::new(1.0, 0.0, 2.0), &f),
            Projection::InFront { u: 100.0, v: 50.0, depth: 2.0 }
        );
        assert_eq!(project_point(&Vec3::new(0.0, 0.0, -1.0), &f), Projection::Behind);
        assert_eq!(project_point(&Vec3::new(0.0, 0.0, 1e-7), &f), Projection::Behind);
    }

    #[test]
    fn translated_pose_moves_camera() {
        let mut pose = Pose::identity();
        pose.translation = Vec3::new(0.0, 0.0, -1.0);
        let f = frame(pose, DepthMap::new(100, 100));
        assert_eq!(
            project_point(&Vec3::new(0.0, 0.0, 1.0), &f),
            Projection::InFront { u: 50.0, v: 50.0, depth: 2.0 }
        );
    }

    fn one_point_scene(p: Vec3<f64>, depth_at: Option<f32>) -> Scene<f64> {
        let mut depth = DepthMap::new(100, 100);
        if let Some(d) = depth_at {
            depth.set(50, 50, d);
        }
        Scene {
            scene_id: "s".into(),
            points: vec![p],
            colors: vec![[0; 3]],
            frames: vec![frame(Pose::identity(), depth)],
        }
    }

    #[test]
    fn occlusion_and_invalid_depth() {
        let p = Vec3::new(0.0, 0.0, 2.0);
        let ok = one_point_scene(p, Some(2.01));
        let prop = Proposal3D::from_mask(0, [0], "x", 1.0, &ok).unwrap();
        let v = proposal_visibility(&prop, &ok.frames[0], &ok, 0.05);
        assert_eq!(v.visible_fraction, 1.0);
        assert_eq!(v.pixel_area, 0);
        assert!(v.bbox2d.is_some());

        let occluded = one_point_scene(p, Some(1.0));
        let v = proposal_visibility(&prop, &occluded.frames[0], &occluded, 0.05);
        assert_eq!(v.visible_fraction, 0.0);
        assert!(v.bbox2d.is_none());

        let missing = one_point_scene(p, None);
        let v = proposal_visibility(&prop, &missing.frames[0], &missing, 0.05);
        assert_eq!(v.visible_fraction, 0.0);
    }

    #[test]
    fn back_project_dimension_mismatch() {
        let s = one_point_scene(Vec3::new(0.0, 0.0, 2.0), Some(2.0));
        let err = back_project_mask(&BinaryMask::new(10, 10), &s.frames[0], &s, 0.05).unwrap_err();
        assert_eq!(
            err,
            GeometryError::DimensionMismatch { mask: (10, 10), frame: (100, 100) }
        );
        let all = back_project_mask(&BinaryMask::filled(100, 100), &s.frames[0], &s, 0.05).unwrap();
        assert_eq!(all.into_iter().collect::<Vec<_>>(), vec![0]);
        let none = back_project_mask(&BinaryMask::new(100, 100), &s.frames[0], &s, 0.05).unwrap();
        assert!(none.is_empty());
    }
}
