//! Rigid poses with unit-quaternion orientation.
//!
//! Every constructor and operation returns a quaternion that is normalized and
//! sign-canonical (`w >= 0`), so two poses describing the same rotation also
//! serialize to the same bytes.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("interpolation parameter {0} outside [0, 1]")]
    Range(f64),
    #[error("pose contains non-finite values")]
    NonFinite,
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Position in meters plus orientation as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose6D {
    position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    /// w, x, y, z
    orientation: [f64; 4],
}

impl From<Pose6D> for PoseRepr {
    fn from(p: Pose6D) -> Self {
        PoseRepr {
            position: [p.position.x, p.position.y, p.position.z],
            orientation: p.quat_wxyz(),
        }
    }
}

impl TryFrom<PoseRepr> for Pose6D {
    type Error = PoseError;
    fn try_from(r: PoseRepr) -> Result<Self, PoseError> {
        Pose6D::from_arrays(r.position, r.orientation)
    }
}

// Already-unit inputs pass through untouched so wire and file round-trips
// stay bit-exact.
fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { q };
    if (q.norm_squared() - 1.0).abs() <= 1e-14 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

impl Default for Pose6D {
    fn default() -> Self {
        Pose6D::identity()
    }
}

impl Pose6D {
    pub fn identity() -> Self {
        Pose6D {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Normalizes `orientation` and flips it into the `w >= 0` hemisphere.
    pub fn new(position: Vector3<f64>, orientation: Quaternion<f64>) -> Result<Self, PoseError> {
        if !position.iter().all(|v| v.is_finite()) || !orientation.coords.iter().all(|v| v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        if orientation.norm() == 0.0 {
            return Err(PoseError::ZeroQuaternion);
        }
        Ok(Pose6D {
            position,
            orientation: canonical(orientation),
        })
    }

    pub fn from_parts(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose6D {
            position,
            orientation: canonical(orientation.into_inner()),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose6D::from_parts(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), at the origin.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Pose6D::from_parts(Vector3::zeros(), rot)
    }

    /// `position = [x, y, z]`, `quat = [w, x, y, z]`.
    pub fn from_arrays(position: [f64; 3], quat: [f64; 4]) -> Result<Self, PoseError> {
        Pose6D::new(
            Vector3::from(position),
            Quaternion::new(quat[0], quat[1], quat[2], quat[3]),
        )
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        self.orientation
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn with_position(&self, position: Vector3<f64>) -> Self {
        Pose6D {
            position,
            orientation: self.orientation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
    }

    /// Rigid composition `self ∘ other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        let position = self.position + self.orientation * other.position;
        let q = self.orientation.into_inner() * other.orientation.into_inner();
        Pose6D {
            position,
            orientation: canonical(q),
        }
    }

    pub fn inverse(&self) -> Pose6D {
        let inv = self.orientation.inverse();
        Pose6D {
            position: -(inv * self.position),
            orientation: canonical(inv.into_inner()),
        }
    }

    /// Relative transform taking `self` to `target`: `self ∘ delta = target`.
    pub fn delta_to(&self, target: &Pose6D) -> Pose6D {
        self.inverse().compose(target)
    }

    /// Linear position blend with shortest-arc slerp of the orientation.
    pub fn interpolate(&self, other: &Pose6D, t: f64) -> Result<Pose6D, PoseError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(PoseError::Range(t));
        }
        if t == 0.0 {
            return Ok(*self);
        }
        if t == 1.0 {
            return Ok(*other);
        }
        let position = self.position + (other.position - self.position) * t;
        Ok(Pose6D {
            position,
            orientation: slerp(&self.orientation, &other.orientation, t),
        })
    }

    /// Geodesic angle (radians, in [0, π]) between the two orientations.
    pub fn angle_to(&self, other: &Pose6D) -> f64 {
        quat_angle(&self.orientation, &other.orientation)
    }

    pub fn distance_to(&self, other: &Pose6D) -> f64 {
        (self.position - other.position).norm()
    }
}

/// Geodesic angle between two unit quaternions, in [0, π].
pub fn quat_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    // atan2 form stays accurate near zero where acos(dot) does not
    let d = a.inverse() * b;
    2.0 * d.imag().norm().atan2(d.w.abs())
}

/// Shortest-arc spherical interpolation, result sign-canonical.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let q = if dot > 1.0 - 1e-12 {
        qa * (1.0 - t) + qb * t
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - t) * theta).sin() / s) + qb * ((t * theta).sin() / s)
    };
    canonical(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: &Pose6D, b: &Pose6D, tol: f64) -> bool {
        a.distance_to(b) < tol && a.angle_to(b) < tol
    }

    #[test]
    fn identity_is_neutral() {
        let p = Pose6D::from_parts(
            Vector3::new(0.1, -0.2, 0.3),
            UnitQuaternion::from_euler_angles(0.3, -0.4, 1.1),
        );
        assert!(close(&Pose6D::identity().compose(&p), &p, 1e-15));
        assert!(close(&p.compose(&p.inverse()), &Pose6D::identity(), 1e-9));
    }

    #[test]
    fn quarter_turns_compose_to_half_turn() {
        let q90 = Pose6D::from_axis_angle(Vector3::z(), FRAC_PI_2);
        let r = q90.compose(&q90);
        // cos(π/2) = 0, sin(π/2) = 1 → (0, 0, 0, 1) by hand multiplication
        let [w, x, y, z] = r.quat_wxyz();
        assert!(w.abs() < 1e-15 && x.abs() < 1e-15 && y.abs() < 1e-15);
        assert!((z - 1.0).abs() < 1e-15);
        assert!((r.angle_to(&Pose6D::identity()) - PI).abs() < 1e-9);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = Pose6D::identity();
        let b = Pose6D::from_axis_angle(Vector3::z(), FRAC_PI_2);
        assert_eq!(a.interpolate(&b, 0.0).unwrap(), a);
        assert_eq!(a.interpolate(&b, 1.0).unwrap(), b);
        let mid = a.interpolate(&b, 0.5).unwrap();
        // half angle π/8: (cos π/8, 0, 0, sin π/8)
        let expected = [(PI / 8.0).cos(), 0.0, 0.0, (PI / 8.0).sin()];
        for (got, want) in mid.quat_wxyz().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((mid.angle_to(&a) - FRAC_PI_4).abs() < 1e-12);
        assert_eq!(a.interpolate(&b, 1.5), Err(PoseError::Range(1.5)));
        assert!(a.interpolate(&b, -0.1).is_err());
    }

    #[test]
    fn interpolation_takes_short_arc() {
        let a = Pose6D::from_axis_angle(Vector3::z(), 0.1);
        // same rotation as -0.1 would be far; use antipodal representation of 0.3 rad
        let b_raw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3).into_inner();
        let b = Pose6D::new(Vector3::zeros(), -b_raw).unwrap();
        let mid = a.interpolate(&b, 0.5).unwrap();
        let expected = Pose6D::from_axis_angle(Vector3::z(), 0.2);
        assert!(mid.angle_to(&expected) < 1e-12);
    }

    #[test]
    fn canonical_sign() {
        let p = Pose6D::from_arrays([0.0; 3], [-0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p.quat_wxyz(), [0.5, -0.5, -0.5, -0.5]);
        assert_eq!(Pose6D::from_arrays([0.0; 3], [0.0; 4]), Err(PoseError::ZeroQuaternion));
    }

    #[test]
    fn serde_roundtrip() {
        let p = Pose6D::from_parts(
            Vector3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        );
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose6D = serde_json::from_str(&s).unwrap();
        assert!(close(&p, &back, 1e-15));
    }

    #[test]
    fn reconstruction_is_bit_exact() {
        let p = Pose6D::from_parts(
            Vector3::new(0.3, -0.2, 0.1),
            UnitQuaternion::from_euler_angles(-1.0, 0.4, 2.9),
        );
        let q = Pose6D::from_arrays([0.3, -0.2, 0.1], p.quat_wxyz()).unwrap();
        assert_eq!(p.quat_wxyz().map(f64::to_bits), q.quat_wxyz().map(f64::to_bits));
    }
}
