//! Value types shared by every subsystem: timestamps, wrenches and grip state.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since the Unix epoch in some declared clock domain
/// (a node's local clock, or the broker's reference clock).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_nanos(nanos: i64) -> Self {
        Timestamp(nanos)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * 1e9).round() as i64)
    }

    pub fn nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn checked_add(self, nanos: i64) -> Option<Timestamp> {
        self.0.checked_add(nanos).map(Timestamp)
    }

    pub fn checked_sub(self, nanos: i64) -> Option<Timestamp> {
        self.0.checked_sub(nanos).map(Timestamp)
    }

    /// Signed distance `self - earlier` in nanoseconds, saturating.
    pub fn since(self, earlier: Timestamp) -> i64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

pub const NANOS_PER_SEC: i64 = 1_000_000_000;
pub const NANOS_PER_MILLI: i64 = 1_000_000;

/// Period in nanoseconds for a rate given in Hz.
pub fn period_from_hz(hz: f64) -> i64 {
    (1e9 / hz).round() as i64
}

#[derive(Debug, Error, PartialEq)]
pub enum ValueError {
    #[error("{field} is not finite")]
    NonFinite { field: &'static str },
    #[error("{field} = {value} outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid grip state: {0}")]
    Grip(&'static str),
}

/// Combined force (N) and torque (N·m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench6D {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench6D {
    pub const ZERO: Wrench6D = Wrench6D {
        force: Vector3::new(0.0, 0.0, 0.0),
        torque: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Result<Self, ValueError> {
        let w = Wrench6D { force, torque };
        if !w.is_finite() {
            return Err(ValueError::NonFinite { field: "wrench" });
        }
        Ok(w)
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Wrench6D {
            force: Vector3::new(a[0], a[1], a[2]),
            torque: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all six components.
    pub fn norm(&self) -> f64 {
        (self.force.norm_squared() + self.torque.norm_squared()).sqrt()
    }
}

impl Add for Wrench6D {
    type Output = Wrench6D;
    fn add(self, rhs: Wrench6D) -> Wrench6D {
        Wrench6D {
            force: self.force + rhs.force,
            torque: self.torque + rhs.torque,
        }
    }
}

impl Sub for Wrench6D {
    type Output = Wrench6D;
    fn sub(self, rhs: Wrench6D) -> Wrench6D {
        Wrench6D {
            force: self.force - rhs.force,
            torque: self.torque - rhs.torque,
        }
    }
}

impl Mul<f64> for Wrench6D {
    type Output = Wrench6D;
    fn mul(self, s: f64) -> Wrench6D {
        Wrench6D {
            force: self.force * s,
            torque: self.torque * s,
        }
    }
}

impl Neg for Wrench6D {
    type Output = Wrench6D;
    fn neg(self) -> Wrench6D {
        self * -1.0
    }
}

/// Gripper actuator state as reported by the motor controller.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GripState {
    /// Current jaw opening, meters.
    pub width: f64,
    /// Commanded opening, meters.
    pub setpoint: f64,
    /// Four-bar input angle, radians.
    pub motor_angle: f64,
    /// Squeeze force, newtons.
    pub grip_force: f64,
    pub stalled: bool,
}

impl GripState {
    pub fn at_rest(width: f64) -> Self {
        GripState {
            width,
            setpoint: width,
            motor_angle: 0.0,
            grip_force: 0.0,
            stalled: false,
        }
    }

    pub fn validate(&self, max_width: f64) -> Result<(), ValueError> {
        for (field, v) in [
            ("width", self.width),
            ("setpoint", self.setpoint),
            ("motor_angle", self.motor_angle),
            ("grip_force", self.grip_force),
        ] {
            if !v.is_finite() {
                return Err(ValueError::NonFinite { field });
            }
        }
        if self.width < 0.0 || self.width > max_width {
            return Err(ValueError::OutOfRange {
                field: "width",
                value: self.width,
                min: 0.0,
                max: max_width,
            });
        }
        if self.grip_force < 0.0 {
            return Err(ValueError::Grip("negative grip force"));
        }
        if self.stalled && self.width == self.setpoint {
            return Err(ValueError::Grip("stalled at setpoint"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_ordering_and_overflow() {
        assert!(Timestamp(-5) < Timestamp(3));
        assert_eq!(Timestamp(i64::MAX).checked_add(1), None);
        assert_eq!(Timestamp(10).since(Timestamp(4)), 6);
        // ±292 years fits
        let years_292 = 292i64 * 365 * 24 * 3600 * NANOS_PER_SEC;
        assert!(Timestamp(years_292).checked_add(0).is_some());
    }

    #[test]
    fn wrench_rejects_nan() {
        let err = Wrench6D::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(err.is_err());
        let w = Wrench6D::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Wrench6D::from_array(w.to_array()), w);
    }

    #[test]
    fn grip_state_invariants() {
        let mut s = GripState::at_rest(0.05);
        assert!(s.validate(0.1).is_ok());
        s.stalled = true;
        assert!(s.validate(0.1).is_err());
        s.setpoint = 0.02;
        assert!(s.validate(0.1).is_ok());
        s.width = 0.2;
        assert!(s.validate(0.1).is_err());
    }
}
