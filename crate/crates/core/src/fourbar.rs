//! Quasi-static kinematics of the parallel four-bar jaw linkage.
//!
//! Each finger rides on a parallelogram crank of length `L`. At input angle θ
//! the finger sits `L(1 − cos θ)` out from its closed position and `L sin θ`
//! up along the crank arc; its orientation never changes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FourBarError {
    #[error("angle {theta} outside [{min}, {max}]")]
    Range { theta: f64, min: f64, max: f64 },
    #[error("invalid four-bar parameters: {0}")]
    Params(&'static str),
    #[error("invalid input: {0}")]
    Input(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourBarParams {
    /// Crank length, meters.
    pub link_length: f64,
    /// Jaw opening at θ = 0, meters.
    pub closed_width: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Maximum motor torque, N·m.
    pub torque_cap: f64,
}

impl Default for FourBarParams {
    fn default() -> Self {
        FourBarParams {
            link_length: 0.05,
            closed_width: 0.01,
            theta_min: 0.0,
            theta_max: std::f64::consts::FRAC_PI_2,
            torque_cap: 0.5,
        }
    }
}

impl FourBarParams {
    pub fn new(
        link_length: f64,
        closed_width: f64,
        theta_min: f64,
        theta_max: f64,
        torque_cap: f64,
    ) -> Result<Self, FourBarError> {
        let p = FourBarParams {
            link_length,
            closed_width,
            theta_min,
            theta_max,
            torque_cap,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FourBarError> {
        if !(self.link_length > 0.0) {
            return Err(FourBarError::Params("link length must be positive"));
        }
        if !(self.closed_width >= 0.0) {
            return Err(FourBarError::Params("closed width must be non-negative"));
        }
        if !(0.0 <= self.theta_min
            && self.theta_min < self.theta_max
            && self.theta_max <= std::f64::consts::FRAC_PI_2)
        {
            return Err(FourBarError::Params("need 0 <= theta_min < theta_max <= pi/2"));
        }
        if !(self.torque_cap >= 0.0) {
            return Err(FourBarError::Params("torque cap must be non-negative"));
        }
        Ok(())
    }

    fn check(&self, theta: f64) -> Result<(), FourBarError> {
        if !(self.theta_min..=self.theta_max).contains(&theta) {
            return Err(FourBarError::Range {
                theta,
                min: self.theta_min,
                max: self.theta_max,
            });
        }
        Ok(())
    }

    /// Jaw opening `w0 + 2L(1 − cos θ)`.
    pub fn width(&self, theta: f64) -> Result<f64, FourBarError> {
        self.check(theta)?;
        Ok(self.closed_width + 2.0 * self.opening(theta))
    }

    pub fn max_width(&self) -> f64 {
        self.closed_width + 2.0 * self.opening(self.theta_max)
    }

    /// Per-finger lateral travel `L(1 − cos θ)`. Not range-checked.
    pub fn opening(&self, theta: f64) -> f64 {
        self.link_length * (1.0 - theta.cos())
    }

    /// Fingertip height along the crank arc, `L sin θ`. Not range-checked.
    pub fn height(&self, theta: f64) -> f64 {
        self.link_length * theta.sin()
    }

    /// Analytic `dw/dθ = 2L sin θ`.
    pub fn width_rate(&self, theta: f64) -> f64 {
        2.0 * self.link_length * theta.sin()
    }

    /// Input angle producing `width`, clamped to the angle range.
    pub fn angle_for_width(&self, width: f64) -> f64 {
        let c = 1.0 - (width - self.closed_width) / (2.0 * self.link_length);
        c.clamp(-1.0, 1.0).acos().clamp(self.theta_min, self.theta_max)
    }

    /// Per-finger jaw force `min(force_cap, τ / (L sin θ))`.
    ///
    /// The motor torque is limited to `torque_cap` first. At θ = 0 the
    /// mechanical advantage is unbounded and the result is `force_cap`.
    pub fn jaw_force(&self, theta: f64, motor_torque: f64, force_cap: f64) -> Result<f64, FourBarError> {
        self.check(theta)?;
        if !(motor_torque >= 0.0) {
            return Err(FourBarError::Input("motor torque must be non-negative"));
        }
        if !(force_cap >= 0.0) {
            return Err(FourBarError::Input("force cap must be non-negative"));
        }
        let torque = motor_torque.min(self.torque_cap);
        if torque == 0.0 {
            return Ok(0.0);
        }
        let lever = self.link_length * theta.sin();
        if lever <= 0.0 {
            return Ok(force_cap);
        }
        Ok((torque / lever).min(force_cap))
    }
}
