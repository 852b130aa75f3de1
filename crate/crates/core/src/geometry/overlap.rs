use super::{Box2D, Box3D};
use crate::scalar::Real;

/// Intersection over union of two image boxes; `0` when the union is empty.
pub fn iou_2d<T: Real>(a: &Box2D<T>, b: &Box2D<T>) -> T {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(T::zero());
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}

/// Intersection over union of two axis-aligned 3D boxes.
pub fn iou_3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let lo = a.min.component_max(&b.min);
    let hi = a.max.component_min(&b.max);
    let e = hi - lo;
    let inter = e.x.max(T::zero()) * e.y.max(T::zero()) * e.z.max(T::zero());
    let union = a.volume() + b.volume() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        (inter / union).min(T::one())
    }
}
