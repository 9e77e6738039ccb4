//! Rigid-body poses, Euler angles and the decoupled pose update.
//!
//! Euler angles are stored as `[roll, pitch, yaw]` and composed intrinsically
//! Z-Y-X, i.e. `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

/// Orthonormality drift above which rotations are projected back onto SO(3).
pub const ORTHO_DRIFT_TOL: f64 = 1e-9;

/// Pitch distance from ±π/2 treated as gimbal lock.
pub const GIMBAL_TOL: f64 = 1e-6;

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Roll, pitch and yaw in radians, each wrapped to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        euler_to_rot(self)
    }
}

impl From<[f64; 3]> for EulerAngles {
    fn from(o: [f64; 3]) -> Self {
        Self::new(o[0], o[1], o[2])
    }
}

impl From<EulerAngles> for [f64; 3] {
    fn from(o: EulerAngles) -> Self {
        o.as_array()
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation about an arbitrary axis (normalized internally).
pub fn rot_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

pub fn euler_to_rot(o: &EulerAngles) -> Matrix3<f64> {
    rot_z(o.yaw) * rot_y(o.pitch) * rot_x(o.roll)
}

/// Inverse of [`euler_to_rot`]. Near pitch = ±π/2 the roll is set to zero and
/// the remaining rotation about the vertical is reported as yaw.
pub fn rot_to_euler(r: &Matrix3<f64>) -> EulerAngles {
    let pitch = (-r[(2, 0)]).atan2((r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt());
    if (pitch - FRAC_PI_2).abs() < GIMBAL_TOL || (pitch + FRAC_PI_2).abs() < GIMBAL_TOL {
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return EulerAngles::new(0.0, pitch, yaw);
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    EulerAngles::new(roll, pitch, yaw)
}

/// Largest entry of |RᵀR − I|.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest rotation matrix in the Frobenius sense (polar projection).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

/// Rotation angle of `r`, in [0, π].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    sin.atan2(cos)
}

/// Axis-angle vector of `r` (unit axis scaled by the rotation angle).
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let angle = rotation_angle(r);
    let half_skew = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
    if angle < 1e-12 {
        half_skew
    } else if angle < PI - 1e-6 {
        half_skew * (angle / angle.sin())
    } else {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    }
}

/// Position and orientation of a rigid body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
        }
    }

    pub fn new(p: Vector3<f64>, r: Matrix3<f64>) -> Self {
        Self { p, r }
    }

    pub fn from_euler(p: Vector3<f64>, o: EulerAngles) -> Self {
        Self { p, r: euler_to_rot(&o) }
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Self { p, r: Matrix3::identity() }
    }

    pub fn euler(&self) -> EulerAngles {
        rot_to_euler(&self.r)
    }

    /// `self * other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            p: self.p + self.r * other.p,
            r: self.r * other.r,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose { p: -(rt * self.p), r: rt }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.p + self.r * x
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.r.iter()).all(|v| v.is_finite())
    }
}

/// Applies a translation update and a left-composed rotation update.
///
/// `p⁺ = p + dp`, `R⁺ = dR · R`; the rotation is re-projected onto SO(3) once its
/// orthonormality drift exceeds [`ORTHO_DRIFT_TOL`].
pub fn pose_update(pose: &Pose, dp: &Vector3<f64>, dr: &Matrix3<f64>) -> Pose {
    let mut r = dr * pose.r;
    if orthonormality_error(&r) > ORTHO_DRIFT_TOL {
        r = orthonormalize(&r);
    }
    Pose { p: pose.p + dp, r }
}

/// Translation error (m) and relative rotation angle (rad, in [0, π]).
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let pos = (a.p - b.p).norm();
    let ang = rotation_angle(&(a.r.transpose() * b.r));
    (pos, ang)
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    p: [f64; 3],
    o: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = String;

    fn try_from(v: PoseRepr) -> Result<Self, Self::Error> {
        if v.p.iter().chain(v.o.iter()).any(|x| !x.is_finite()) {
            return Err("pose components must be finite".into());
        }
        Ok(Pose::from_euler(Vector3::from(v.p), EulerAngles::from(v.o)))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            p: p.p.into(),
            o: p.euler().as_array(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn wrap_interval_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!(close(wrap_angle(-PI), PI, 1e-15));
        assert!(close(wrap_angle(3.3), 3.3 - TAU, 1e-15));
        assert!(close(wrap_angle(-3.3), TAU - 3.3, 1e-15));
        assert_eq!(wrap_angle(0.5), 0.5);
    }

    #[test]
    fn zero_euler_is_identity() {
        assert_eq!(euler_to_rot(&EulerAngles::zero()), Matrix3::identity());
    }

    #[test]
    fn yaw_quarter_turn_maps_x_to_y() {
        let r = euler_to_rot(&EulerAngles::new(0.0, 0.0, FRAC_PI_2));
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn identity_to_euler() {
        let o = rot_to_euler(&Matrix3::identity());
        assert_eq!(o.as_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn euler_round_trip_fixed() {
        let o = rot_to_euler(&euler_to_rot(&EulerAngles::new(0.1, 0.2, 0.3)));
        assert!(close(o.roll, 0.1, 1e-12));
        assert!(close(o.pitch, 0.2, 1e-12));
        assert!(close(o.yaw, 0.3, 1e-12));
    }

    #[test]
    fn gimbal_lock_branch_zeroes_roll() {
        for &pitch in &[FRAC_PI_2, -FRAC_PI_2] {
            let r = euler_to_rot(&EulerAngles::new(0.4, pitch, 0.9));
            let o = rot_to_euler(&r);
            assert_eq!(o.roll, 0.0);
            assert!(close(o.pitch, pitch, 1e-7));
            // Same rotation must be reproduced.
            assert!((euler_to_rot(&o) - r).abs().max() < 1e-7);
        }
    }

    #[test]
    fn euler_round_trip_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut n = 0;
        while n < 1000 {
            let o = EulerAngles::new(
                rng.random_range(-PI..PI),
                rng.random_range(-1.5..1.5),
                rng.random_range(-PI..PI),
            );
            let back = rot_to_euler(&euler_to_rot(&o));
            assert!(close(wrap_angle(back.roll - o.roll), 0.0, 1e-10), "{o:?} {back:?}");
            assert!(close(back.pitch, o.pitch, 1e-10));
            assert!(close(wrap_angle(back.yaw - o.yaw), 0.0, 1e-10));
            n += 1;
        }
    }

    #[test]
    fn pose_update_examples() {
        let pose = Pose::identity();
        assert_eq!(pose_update(&pose, &Vector3::zeros(), &Matrix3::identity()), pose);

        let moved = pose_update(&pose, &Vector3::new(0.1, 0.0, 0.0), &Matrix3::identity());
        assert_eq!(moved.p, Vector3::new(0.1, 0.0, 0.0));

        let turned = pose_update(&pose, &Vector3::zeros(), &rot_z(FRAC_PI_2));
        assert!((turned.r * Vector3::x() - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn pose_update_left_composes() {
        let pose = Pose::new(Vector3::zeros(), rot_x(0.3));
        let dr = rot_z(0.7);
        let out = pose_update(&pose, &Vector3::zeros(), &dr);
        assert!((out.r - dr * rot_x(0.3)).abs().max() < 1e-15);
    }

    #[test]
    fn long_update_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = Pose::identity();
        for _ in 0..10_000 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) + Vector3::new(1e-3, 0.0, 0.0);
            let dr = rot_axis(&axis, rng.random_range(-0.5..0.5));
            let dp = Vector3::new(rng.random_range(-0.01..0.01), 0.0, 0.0);
            pose = pose_update(&pose, &dp, &dr);
            assert!(orthonormality_error(&pose.r) <= 1e-9);
            assert!((pose.r.determinant() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn distance_examples() {
        let a = Pose::identity();
        assert_eq!(pose_distance(&a, &a), (0.0, 0.0));

        let b = Pose::from_translation(Vector3::new(0.03, 0.04, 0.0));
        let (dp, da) = pose_distance(&a, &b);
        assert!(close(dp, 0.05, 1e-15));
        assert_eq!(da, 0.0);

        for axis in [Vector3::x(), Vector3::y(), Vector3::new(1.0, -2.0, 0.5)] {
            let c = Pose::new(Vector3::zeros(), rot_axis(&axis, FRAC_PI_2));
            let (dp, da) = pose_distance(&a, &c);
            assert_eq!(dp, 0.0);
            assert!(close(da, FRAC_PI_2, 1e-12));
        }
    }

    #[test]
    fn orthonormalize_repairs_drift() {
        let mut r = rot_z(0.4) * rot_y(-0.2);
        r[(0, 1)] += 1e-6;
        let fixed = orthonormalize(&r);
        assert!(orthonormality_error(&fixed) < 1e-14);
        assert!((fixed.determinant() - 1.0).abs() < 1e-14);
        assert!((fixed - r).abs().max() < 1e-5);
    }

    #[test]
    fn pose_serde_round_trip() {
        let pose = Pose::from_euler(Vector3::new(0.5, -0.1, 0.2), EulerAngles::new(0.1, -0.2, 1.0));
        let s = serde_json::to_string(&pose).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        let (dp, da) = pose_distance(&pose, &back);
        assert!(dp < 1e-15 && da < 1e-12);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(
            a in prop::array::uniform3(-PI..PI), b in prop::array::uniform3(-PI..PI),
            pa in prop::array::uniform3(-1.0..1.0f64), pb in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let x = Pose::from_euler(Vector3::from(pa), EulerAngles::from(a));
            let y = Pose::from_euler(Vector3::from(pb), EulerAngles::from(b));
            let (p1, a1) = pose_distance(&x, &y);
            let (p2, a2) = pose_distance(&y, &x);
            prop_assert!((p1 - p2).abs() < 1e-12);
            prop_assert!((a1 - a2).abs() < 1e-9);
            prop_assert!((0.0..=PI).contains(&a1));
            let (ps, as_) = pose_distance(&x, &x);
            prop_assert_eq!(ps, 0.0);
            prop_assert!(as_ < 1e-7);
        }

        #[test]
        fn euler_inverse_away_from_lock(r in -3.1..3.1f64, p in -1.55..1.55f64, y in -3.1..3.1f64) {
            let o = EulerAngles::new(r, p, y);
            let back = rot_to_euler(&euler_to_rot(&o));
            prop_assert!(wrap_angle(back.roll - r).abs() < 1e-10);
            prop_assert!((back.pitch - p).abs() < 1e-10);
            prop_assert!(wrap_angle(back.yaw - y).abs() < 1e-10);
        }
    }
}
