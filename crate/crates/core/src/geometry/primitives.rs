use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A 3-vector, serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
#[serde(bound = "T: Real")]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T> From<[T; 3]> for Vec3<T> {
    fn from([x, y, z]: [T; 3]) -> Self {
        Self { x, y, z }
    }
}

impl<T> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Unit vector in the same direction, or `None` when the norm is below `min_norm`.
    pub fn try_normalize(&self, min_norm: T) -> Option<Self> {
        let n = self.norm();
        if n < min_norm || !n.is_finite() {
            None
        } else {
            Some(*self / n)
        }
    }

    pub fn component_min(&self, o: &Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(&self, o: &Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn cast<U: Real>(&self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Axis-aligned image-space box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Box2D<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Real> Box2D<T> {
    /// Builds a box, swapping coordinates so that min <= max holds.
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self {
            x_min: x0.min(x1),
            y_min: y0.min(y1),
            x_max: x0.max(x1),
            y_max: y0.max(y1),
        }
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn contains(&self, x: T, y: T) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Smallest box containing every `(x, y)`; `None` for an empty iterator.
    pub fn hull<I: IntoIterator<Item = (T, T)>>(pts: I) -> Option<Self> {
        let mut it = pts.into_iter();
        let (x, y) = it.next()?;
        let mut b = Self {
            x_min: x,
            y_min: y,
            x_max: x,
            y_max: y,
        };
        for (x, y) in it {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }

    pub fn clip(&self, width: T, height: T) -> Self {
        let c = |v: T, hi: T| v.max(T::zero()).min(hi);
        Self {
            x_min: c(self.x_min, width),
            y_min: c(self.y_min, height),
            x_max: c(self.x_max, width),
            y_max: c(self.y_max, height),
        }
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Axis-aligned 3D box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Box3D<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Box3D<T> {
    /// Builds a box from two corners in any order.
    pub fn new(a: Vec3<T>, b: Vec3<T>) -> Self {
        Self {
            min: a.component_min(&b),
            max: a.component_max(&b),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.min.x <= self.max.x && self.min.y <= self.max.y && self.min.z <= self.max.z
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max) * T::lit(0.5)
    }

    pub fn volume(&self) -> T {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: &Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }

    pub fn hull<'a, I>(pts: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a Vec3<T>>,
    {
        let mut it = pts.into_iter();
        let first = *it.next()?;
        Some(it.fold(Self { min: first, max: first }, |b, p| Self {
            min: b.min.component_min(p),
            max: b.max.component_max(p),
        }))
    }

    /// The eight corners, x varying fastest.
    pub fn corners(&self) -> [Vec3<T>; 8] {
        let (a, b) = (self.min, self.max);
        std::array::from_fn(|i| {
            Vec3::new(
                if i & 1 == 0 { a.x } else { b.x },
                if i & 2 == 0 { a.y } else { b.y },
                if i & 4 == 0 { a.z } else { b.z },
            )
        })
    }
}

/// Pinhole intrinsics plus raster size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Intrinsics<T> {
    pub fn is_valid(&self) -> bool {
        self.fx > T::zero()
            && self.fy > T::zero()
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.width > 0
            && self.height > 0
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    /// Row-major rotation; columns are the camera axes expressed in world frame.
    pub rotation: [[T; 3]; 3],
    pub translation: Vec3<T>,
}

/// Rotation orthonormality / determinant tolerance.
pub const RIGID_TOL: f64 = 1e-5;

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: Vec3::zero(),
        }
    }

    /// Parses a row-major 4x4 matrix, returning `None` unless it is a proper rigid transform.
    pub fn from_row_major(m: &[T; 16]) -> Option<Self> {
        let tol = T::lit(RIGID_TOL);
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        let expected = [T::zero(), T::zero(), T::zero(), T::one()];
        if bottom.iter().zip(expected).any(|(a, b)| (*a - b).abs() > tol) {
            return None;
        }
        let pose = Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: Vec3::new(m[3], m[7], m[11]),
        };
        pose.is_rigid().then_some(pose)
    }

    pub fn to_row_major(&self) -> [T; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        let (z, o) = (T::zero(), T::one());
        [
            r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1],
            r[2][2], t.z, z, z, z, o,
        ]
    }

    /// True when the rotation block is orthonormal with determinant +1 (tolerance 1e-5).
    pub fn is_rigid(&self) -> bool {
        let tol = T::lit(RIGID_TOL);
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).fold(T::zero(), |acc, k| acc + r[k][i] * r[k][j]);
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - T::one()).abs() <= tol
    }

    pub fn determinant(&self) -> T {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn camera_position(&self) -> Vec3<T> {
        self.translation
    }

    /// Camera +z axis in world coordinates.
    pub fn optical_axis(&self) -> Vec3<T> {
        let r = &self.rotation;
        Vec3::new(r[0][2], r[1][2], r[2][2])
    }

    pub fn world_to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        let d = *p - self.translation;
        let r = &self.rotation;
        // R^T * d
        Vec3::new(
            r[0][0] * d.x + r[1][0] * d.y + r[2][0] * d.z,
            r[0][1] * d.x + r[1][1] * d.y + r[2][1] * d.z,
            r[0][2] * d.x + r[1][2] * d.y + r[2][2] * d.z,
        )
    }

    pub fn camera_to_world(&self, p: &Vec3<T>) -> Vec3<T> {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        ) + self.translation
    }

    /// Camera at `eye` looking at `target`, image y axis pointing towards world `-up`.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Option<Self> {
        let eps = T::lit(1e-9);
        let z = (target - eye).try_normalize(eps)?;
        let x = z.cross(&up).try_normalize(eps)?;
        let y = z.cross(&x);
        Some(Self {
            rotation: [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]],
            translation: eye,
        })
    }
}
