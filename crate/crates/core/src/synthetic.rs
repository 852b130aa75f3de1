//! Point-splat rendering of synthetic RGB-D views.
//!
//! Each cloud point is splatted into the single pixel it projects to; the
//! nearest point wins both color and depth. Depth maps produced this way are
//! consistent with the cloud by construction, which makes them useful as
//! ground truth for visibility and back-projection checks.

use image::{Rgb, RgbImage};

use crate::geometry::{project_point, Intrinsics, Pose, Projection, Vec3};
use crate::scalar::Real;
use crate::scene::{CameraFrame, DepthMap};

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

pub fn render_frame<T: Real>(
    frame_id: u32,
    points: &[Vec3<T>],
    colors: &[[u8; 3]],
    pose: Pose<T>,
    intrinsics: Intrinsics<T>,
) -> CameraFrame<T> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut frame = CameraFrame {
        frame_id,
        image: RgbImage::from_pixel(w, h, BACKGROUND),
        depth: DepthMap::new(w, h),
        pose,
        intrinsics,
    };
    let mut zbuf = vec![f64::INFINITY; (w * h) as usize];
    for (p, c) in points.iter().zip(colors) {
        let Projection::InFront { u, v, depth } = project_point(p, &frame) else {
            continue;
        };
        let (u, v) = (u.as_f64(), v.as_f64());
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            continue;
        }
        let (x, y) = (u.floor() as u32, v.floor() as u32);
        let slot = (y * w + x) as usize;
        let d = depth.as_f64();
        if d < zbuf[slot] {
            zbuf[slot] = d;
            frame.depth.set(x, y, d as f32);
            frame.image.put_pixel(x, y, Rgb(*c));
        }
    }
    frame
}

/// Renders a view from a camera at `eye` looking at `target` with world +z up.
pub fn render_look_at<T: Real>(
    frame_id: u32,
    points: &[Vec3<T>],
    colors: &[[u8; 3]],
    eye: Vec3<T>,
    target: Vec3<T>,
    intrinsics: Intrinsics<T>,
) -> Option<CameraFrame<T>> {
    let up = Vec3::new(T::zero(), T::zero(), T::one());
    let pose = Pose::look_at(eye, target, up)?;
    Some(render_frame(frame_id, points, colors, pose, intrinsics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_point_wins() {
        let k = Intrinsics { fx: 10.0, fy: 10.0, cx: 5.0, cy: 5.0, width: 10, height: 10 };
        let pts = [Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 1.0)];
        let f = render_frame(0, &pts, &[[1, 1, 1], [2, 2, 2]], Pose::identity(), k);
        assert_eq!(f.depth.get(5, 5), Some(1.0));
        assert_eq!(f.image.get_pixel(5, 5), &Rgb([2, 2, 2]));
        assert_eq!(f.image.get_pixel(0, 0), &BACKGROUND);
        assert_eq!(f.depth.get(0, 0), None);
    }
}
