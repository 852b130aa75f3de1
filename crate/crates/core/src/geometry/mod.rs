//! Projective geometry over a [`Scene`](crate::scene::Scene): projection with
//! depth-consistent visibility, 2D/3D overlap, viewing-direction clustering,
//! and mask back-projection with cross-view fusion and outlier removal.
//!
//! Everything here is a pure function of immutable inputs and generic over
//! the scalar type.

mod cloud;
mod directions;
mod overlap;
mod primitives;
mod projection;

use thiserror::Error;

pub use cloud::{bbox_from_indices, denoise_points, fuse_views, majority_votes};
pub use directions::{
    angular_distance, cluster_directions, viewing_direction, DirectionCluster, ViewCluster,
};
pub use overlap::{iou_2d, iou_3d};
pub use primitives::{Box2D, Box3D, Intrinsics, Pose, Vec3, RIGID_TOL};
pub use projection::{
    back_project_mask, project_point, proposal_visibility, rank_visible_frames,
    visible_point_indices, Projection, Visibility, BEHIND_EPS,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("target coincides with the camera position")]
    DegenerateDirection,
    #[error("mask is {mask:?} but frame is {frame:?}")]
    DimensionMismatch { mask: (u32, u32), frame: (u32, u32) },
    #[error("cannot take the hull of an empty index set")]
    EmptySet,
}
