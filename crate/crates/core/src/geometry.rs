//! 3D primitives and rigid transforms.
//!
//! Everything here is a small `Copy` value type. Rotations are stored as
//! row-major 3x3 matrices; there is deliberately no quaternion API.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|axis| - 1` accepted by the rotation constructors.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("rotation axis must be unit length (|axis| = {norm})")]
    InvalidAxis { norm: f64 },
    #[error("vector has zero or non-finite length")]
    Degenerate,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("rotation matrix is not orthonormal with det +1")]
    NotOrthonormal,
    #[error("circle radius must be positive and finite (got {0})")]
    InvalidRadius(f64),
}

/// A point (or free vector) in workspace coordinates, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Point3) -> Point3 {
        Point3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    /// Squared distance, computed component-wise as `dx² + dy² + dz²`.
    pub fn distance_squared(self, other: Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn component(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("component index {i} out of range"),
        }
    }

    pub fn lerp(self, other: Point3, t: f64) -> Point3 {
        self + (other - self) * t
    }

    /// The vector with its z component removed.
    pub fn horizontal(self) -> Point3 {
        Point3::new(self.x, self.y, 0.0)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        p.to_array()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        *self = *self + o;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// A direction of unit Euclidean length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVector3(Point3);

impl UnitVector3 {
    pub const X: UnitVector3 = UnitVector3(Point3::new(1.0, 0.0, 0.0));
    pub const Y: UnitVector3 = UnitVector3(Point3::new(0.0, 1.0, 0.0));
    pub const Z: UnitVector3 = UnitVector3(Point3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`. Vectors already unit to within 1e-12 are kept bit-exact.
    pub fn new_normalize(v: Point3) -> Result<Self, GeometryError> {
        if !v.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let n2 = v.norm_squared();
        if !(n2 > 1e-300) {
            return Err(GeometryError::Degenerate);
        }
        if (n2 - 1.0).abs() <= 1e-12 {
            return Ok(UnitVector3(v));
        }
        Ok(UnitVector3(v * (1.0 / n2.sqrt())))
    }

    /// Accepts `v` only when it is already unit within [`UNIT_TOLERANCE`].
    pub fn try_unit(v: Point3) -> Result<Self, GeometryError> {
        let norm = v.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeometryError::InvalidAxis { norm });
        }
        Ok(UnitVector3(v))
    }

    pub fn from_components(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        Self::new_normalize(Point3::new(x, y, z))
    }

    pub fn into_inner(self) -> Point3 {
        self.0
    }

    pub fn x(self) -> f64 {
        self.0.x
    }

    pub fn y(self) -> f64 {
        self.0.y
    }

    pub fn z(self) -> f64 {
        self.0.z
    }

    pub fn dot(self, other: UnitVector3) -> f64 {
        self.0.dot(other.0)
    }

    pub fn flipped(self) -> UnitVector3 {
        UnitVector3(-self.0)
    }

    /// Angle between the two directions, in `[0, π]`.
    pub fn angle_to(self, other: UnitVector3) -> f64 {
        // atan2 form stays accurate near 0 and π where acos does not.
        let c = self.0.dot(other.0);
        let s = self.0.cross(other.0).norm();
        s.atan2(c)
    }

    /// Angle between the two lines spanned by the directions, in `[0, π/2]`.
    pub fn axial_angle_to(self, other: UnitVector3) -> f64 {
        let a = self.angle_to(other);
        a.min(std::f64::consts::PI - a)
    }
}

impl From<UnitVector3> for Point3 {
    fn from(u: UnitVector3) -> Self {
        u.0
    }
}

impl TryFrom<[f64; 3]> for UnitVector3 {
    type Error = GeometryError;
    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        UnitVector3::new_normalize(a.into())
    }
}

impl From<UnitVector3> for [f64; 3] {
    fn from(u: UnitVector3) -> Self {
        u.0.to_array()
    }
}

impl Mul<f64> for UnitVector3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        self.0 * s
    }
}

/// The plane `{p : normal · p = offset}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: UnitVector3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: UnitVector3, offset: f64) -> Result<Self, GeometryError> {
        if !offset.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { normal, offset })
    }

    pub fn through_point(normal: UnitVector3, point: Point3) -> Self {
        Self {
            normal,
            offset: normal.into_inner().dot(point),
        }
    }

    pub fn signed_distance(&self, p: Point3) -> f64 {
        self.normal.into_inner().dot(p) - self.offset
    }

    /// Point of the plane closest to the origin.
    pub fn anchor(&self) -> Point3 {
        self.normal * self.offset
    }
}

/// A circle embedded in 3D.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle3D {
    pub center: Point3,
    pub normal: UnitVector3,
    pub radius: f64,
}

impl Circle3D {
    pub fn new(center: Point3, normal: UnitVector3, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidRadius(radius));
        }
        if !center.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { center, normal, radius })
    }

    pub fn plane(&self) -> Plane {
        Plane::through_point(self.normal, self.center)
    }

    /// Closest point of the circle to `p`: project onto the plane, then
    /// radially out to the circle. A point on the axis maps along the plane
    /// basis `u` direction.
    pub fn snap(&self, p: Point3) -> Point3 {
        let q = project_point_to_plane(p, &self.plane());
        let d = q - self.center;
        let n = d.norm();
        let dir = if n > 1e-300 {
            d * (1.0 / n)
        } else {
            plane_basis(&self.plane()).0.into_inner()
        };
        self.center + dir * self.radius
    }

    /// Distance from `p` to the circle curve.
    pub fn distance_to(&self, p: Point3) -> f64 {
        p.distance(self.snap(p))
    }

    pub fn transformed(&self, t: &RigidTransform) -> Circle3D {
        Circle3D {
            center: t.apply(self.center),
            normal: t.apply_unit(self.normal),
            radius: self.radius,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: Point3) -> Point3 {
    Point3::new(
        a[0][0] * v.x + a[0][1] * v.y + a[0][2] * v.z,
        a[1][0] * v.x + a[1][1] * v.y + a[1][2] * v.z,
        a[2][0] * v.x + a[2][1] * v.y + a[2][2] * v.z,
    )
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// `p ↦ rotation · p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Point3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: Point3::ORIGIN,
        }
    }

    /// Validates orthonormality and `det = +1` within 1e-9.
    pub fn new(rotation: [[f64; 3]; 3], translation: Point3) -> Result<Self, GeometryError> {
        if rotation.iter().flatten().any(|v| !v.is_finite()) || !translation.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                if (rtr[i][j] - IDENTITY3[i][j]).abs() > 1e-9 {
                    return Err(GeometryError::NotOrthonormal);
                }
            }
        }
        if (det(&rotation) - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotOrthonormal);
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(v: Point3) -> Self {
        Self {
            rotation: IDENTITY3,
            translation: v,
        }
    }

    /// Rotation whose columns are the given right-handed orthonormal axes,
    /// placed at `origin`. This maps the local frame into the world.
    pub fn from_frame(
        e1: UnitVector3,
        e2: UnitVector3,
        e3: UnitVector3,
        origin: Point3,
    ) -> Result<Self, GeometryError> {
        let (a, b, c) = (e1.into_inner(), e2.into_inner(), e3.into_inner());
        Self::new([[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]], origin)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        self.rotation
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        mat_vec(&self.rotation, p) + self.translation
    }

    pub fn apply_vector(&self, v: Point3) -> Point3 {
        mat_vec(&self.rotation, v)
    }

    /// Rotates a direction. The result is re-normalized to absorb rounding.
    pub fn apply_unit(&self, u: UnitVector3) -> UnitVector3 {
        let v = mat_vec(&self.rotation, u.into_inner());
        UnitVector3::new_normalize(v).unwrap_or(u)
    }

    /// `self` followed by `next`, i.e. `next ∘ self`.
    pub fn then(&self, next: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&next.rotation, &self.rotation),
            translation: mat_vec(&next.rotation, self.translation) + next.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        RigidTransform {
            rotation: rt,
            translation: -mat_vec(&rt, self.translation),
        }
    }

    pub fn determinant(&self) -> f64 {
        det(&self.rotation)
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let tr = r[0][0] + r[1][1] + r[2][2];
        let s = Point3::new(r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]).norm() * 0.5;
        s.atan2((tr - 1.0) * 0.5)
    }

    /// Largest absolute entry difference against another transform.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.rotation[i][j] - other.rotation[i][j]).abs());
            }
        }
        m.max(
            (self.translation - other.translation)
                .to_array()
                .iter()
                .fold(0.0, |a, v| a.max(v.abs())),
        )
    }
}

/// Pure rotation by `angle` (right-handed) about `axis` through the origin.
pub fn rotation_about_axis(axis: impl Into<Point3>, angle: f64) -> Result<RigidTransform, GeometryError> {
    let k = UnitVector3::try_unit(axis.into())?.into_inner();
    if !angle.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    // R = cI + s[k]x + (1 - c) k kᵀ
    let rotation = [
        [c + t * k.x * k.x, t * k.x * k.y - s * k.z, t * k.x * k.z + s * k.y],
        [t * k.y * k.x + s * k.z, c + t * k.y * k.y, t * k.y * k.z - s * k.x],
        [t * k.z * k.x - s * k.y, t * k.z * k.y + s * k.x, c + t * k.z * k.z],
    ];
    Ok(RigidTransform {
        rotation,
        translation: Point3::ORIGIN,
    })
}

/// Rotation about the line through `pivot` along `axis`; `pivot` is fixed.
pub fn rotation_about_point(
    axis: impl Into<Point3>,
    angle: f64,
    pivot: Point3,
) -> Result<RigidTransform, GeometryError> {
    let r = rotation_about_axis(axis, angle)?;
    Ok(RigidTransform::from_translation(-pivot)
        .then(&r)
        .then(&RigidTransform::from_translation(pivot)))
}

/// Rotation taking `from` onto `to`.
///
/// For `from · to > -0.99` this is the minimal-angle rotation about
/// `from × to`. Closer to antiparallel, the map is built as a half turn about
/// the axis perpendicular to `from` obtained from the coordinate axis least
/// aligned with `from`, followed by the (now well-conditioned) minimal
/// rotation from `-from` to `to`. Exactly antiparallel inputs therefore get a
/// deterministic half turn rather than a NaN.
pub fn align_vectors(from: UnitVector3, to: UnitVector3) -> RigidTransform {
    let c = from.dot(to);
    if c > -0.99 {
        return minimal_alignment(from.into_inner(), to.into_inner(), c);
    }
    let a = from.into_inner();
    let e = least_aligned_axis(a);
    let p = UnitVector3::new_normalize(e - a * e.dot(a)).expect("axis orthogonal to a unit vector");
    let half_turn = rotation_about_axis(p, std::f64::consts::PI).expect("unit axis");
    let neg = -a;
    half_turn.then(&minimal_alignment(neg, to.into_inner(), neg.dot(to.into_inner())))
}

fn minimal_alignment(a: Point3, b: Point3, c: f64) -> RigidTransform {
    // R = I + [v]x + [v]x² / (1 + c), v = a × b
    let v = a.cross(b);
    let k = 1.0 / (1.0 + c);
    let vx = [[0.0, -v.z, v.y], [v.z, 0.0, -v.x], [-v.y, v.x, 0.0]];
    let vx2 = mat_mul(&vx, &vx);
    let mut rotation = IDENTITY3;
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] += vx[i][j] + vx2[i][j] * k;
        }
    }
    RigidTransform {
        rotation,
        translation: Point3::ORIGIN,
    }
}

/// Coordinate axis with the smallest absolute component of `n` (lowest index on ties).
fn least_aligned_axis(n: Point3) -> Point3 {
    let comps = [n.x.abs(), n.y.abs(), n.z.abs()];
    let mut best = 0;
    for i in 1..3 {
        if comps[i] < comps[best] {
            best = i;
        }
    }
    let mut e = [0.0; 3];
    e[best] = 1.0;
    e.into()
}

pub fn project_point_to_plane(p: Point3, plane: &Plane) -> Point3 {
    p - plane.normal * plane.signed_distance(p)
}

/// Orthonormal in-plane axes `(u, v)` with `u × v = normal`.
///
/// `u` is the normalized projection of the coordinate axis least aligned with
/// the plane normal, so the basis depends only on the plane.
pub fn plane_basis(plane: &Plane) -> (UnitVector3, UnitVector3) {
    let n = plane.normal.into_inner();
    let e = least_aligned_axis(n);
    let u = UnitVector3::new_normalize(e - n * e.dot(n)).expect("least aligned axis is never parallel");
    let v = UnitVector3::new_normalize(n.cross(u.into_inner())).expect("cross of orthonormal pair");
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: Point3, b: Point3, tol: f64) -> bool {
        a.distance(b) <= tol
    }

    #[test]
    fn zero_angle_is_identity() {
        let r = rotation_about_axis(UnitVector3::Z, 0.0).unwrap();
        assert!(r.max_abs_diff(&RigidTransform::identity()) < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_about_axis(UnitVector3::Z, FRAC_PI_2).unwrap();
        assert!(close(
            r.apply(Point3::new(1.0, 0.0, 0.0)),
            Point3::new(0.0, 1.0, 0.0),
            1e-15
        ));
    }

    #[test]
    fn eighth_turn_about_y() {
        // Hand evaluation of cI + s[k]x + (1-c)kkᵀ with k = ŷ, θ = π/4:
        // first column is (c, 0, -s).
        let r = rotation_about_axis(UnitVector3::Y, FRAC_PI_4).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!(close(
            r.apply(Point3::new(1.0, 0.0, 0.0)),
            Point3::new(h, 0.0, -h),
            1e-15
        ));
    }

    #[test]
    fn non_unit_axis_rejected() {
        let err = rotation_about_axis(Point3::new(0.0, 0.0, 2.0), 1.0).unwrap_err();
        assert!(matches!(err, GeometryError::InvalidAxis { .. }));
        assert!(rotation_about_axis(Point3::new(0.0, 0.0, 1.0 + 1e-6), 1.0).is_err());
    }

    #[test]
    fn pivot_is_fixed() {
        let p = Point3::new(0.3, -0.2, 1.7);
        let axis = UnitVector3::from_components(1.0, 2.0, -0.5).unwrap();
        let t = rotation_about_point(axis, 1.234, p).unwrap();
        assert!(close(t.apply(p), p, 1e-14));
    }

    #[test]
    fn half_turn_about_offset_pivot() {
        let t = rotation_about_point(UnitVector3::Z, PI, Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(t.apply(Point3::new(2.0, 0.0, 0.0)), Point3::ORIGIN, 1e-15));
    }

    #[test]
    fn pivot_rotation_matches_composition_oracle() {
        // Oracle: translate by -p, rotate, translate by +p, one step at a time.
        let pivot = Point3::new(0.0, 0.0, 1.0);
        let r = rotation_about_axis(UnitVector3::Y, FRAC_PI_2).unwrap();
        let q = Point3::ORIGIN;
        let oracle = r.apply(q - pivot) + pivot;
        let t = rotation_about_point(UnitVector3::Y, FRAC_PI_2, pivot).unwrap();
        assert!(close(t.apply(q), oracle, 1e-15));
        assert!(close(oracle, Point3::new(-1.0, 0.0, 1.0), 1e-15));
    }

    #[test]
    fn align_identity_and_canonical() {
        let r = align_vectors(UnitVector3::X, UnitVector3::X);
        assert!(r.max_abs_diff(&RigidTransform::identity()) < 1e-15);
        let r = align_vectors(UnitVector3::X, UnitVector3::Y);
        let q = rotation_about_axis(UnitVector3::Z, FRAC_PI_2).unwrap();
        assert!(r.max_abs_diff(&q) < 1e-15);
    }

    #[test]
    fn align_diagonal_by_application() {
        let from = UnitVector3::from_components(1.0, 1.0, 0.0).unwrap();
        let r = align_vectors(from, UnitVector3::Y);
        assert!(close(r.apply(from.into_inner()), UnitVector3::Y.into_inner(), 1e-9));
    }

    #[test]
    fn align_antiparallel_is_half_turn() {
        for from in [UnitVector3::X, UnitVector3::Y, UnitVector3::Z] {
            let r = align_vectors(from, from.flipped());
            assert!(close(r.apply(from.into_inner()), -from.into_inner(), 1e-12));
            assert!((r.rotation_angle() - PI).abs() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        let z0 = Plane::new(UnitVector3::Z, 0.0).unwrap();
        assert_eq!(
            project_point_to_plane(Point3::new(1.0, 2.0, 3.0), &z0),
            Point3::new(1.0, 2.0, 0.0)
        );
        // x + y + z = 1 normalized: n = (1,1,1)/√3, d = 1/√3.
        // p - (n·p - d) n = (1,1,1) - (√3 - 1/√3)(1,1,1)/√3 = (1,1,1) - (2/3)(1,1,1).
        let n = UnitVector3::from_components(1.0, 1.0, 1.0).unwrap();
        let plane = Plane::new(n, 1.0 / 3f64.sqrt()).unwrap();
        let q = project_point_to_plane(Point3::new(1.0, 1.0, 1.0), &plane);
        assert!(close(q, Point3::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 1e-12));
        assert!(plane.signed_distance(q).abs() < 1e-12);
    }

    #[test]
    fn basis_properties() {
        let z0 = Plane::new(UnitVector3::Z, 0.0).unwrap();
        let (u, v) = plane_basis(&z0);
        assert!(u.z().abs() < 1e-15 && v.z().abs() < 1e-15);
        assert!(u.dot(v).abs() < 1e-15);
        let n = UnitVector3::from_components(0.3, -0.8, 0.52).unwrap();
        let plane = Plane::new(n, 0.4).unwrap();
        let (u, v) = plane_basis(&plane);
        let c = u.into_inner().cross(v.into_inner());
        assert!(close(c, n.into_inner(), 1e-12));
        assert_eq!(plane_basis(&plane), (u, v));
    }

    #[test]
    fn circle_snap_lands_on_circle() {
        let c = Circle3D::new(
            Point3::new(0.1, 0.2, 0.3),
            UnitVector3::from_components(0.0, 1.0, 1.0).unwrap(),
            0.012,
        )
        .unwrap();
        let s = c.snap(Point3::new(0.5, -0.1, 0.2));
        assert!(c.plane().signed_distance(s).abs() < 1e-12);
        assert!((s.distance(c.center) - 0.012).abs() < 1e-12);
    }

    #[test]
    fn invalid_constructors() {
        assert!(Circle3D::new(Point3::ORIGIN, UnitVector3::Z, 0.0).is_err());
        assert!(Plane::new(UnitVector3::Z, f64::NAN).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(
            RigidTransform::new(skew, Point3::ORIGIN),
            Err(GeometryError::NotOrthonormal)
        );
        let mirror = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(mirror, Point3::ORIGIN).is_err());
        assert!(UnitVector3::new_normalize(Point3::ORIGIN).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let t = rotation_about_point(
            UnitVector3::from_components(1.0, -1.0, 2.0).unwrap(),
            0.7,
            Point3::new(1.0, 2.0, 3.0),
        )
        .unwrap();
        let id = t.then(&t.inverse());
        assert!(id.max_abs_diff(&RigidTransform::identity()) < 1e-14);
    }
}
