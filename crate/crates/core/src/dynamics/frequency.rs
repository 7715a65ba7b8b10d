//! Bus frequency synthesis from voltage-angle samples, and the grid-forming
//! droop law.

use std::f64::consts::{PI, TAU};

/// Low-pass time constant of the bus frequency estimator, s.
pub const ESTIMATOR_TC: f64 = 0.020;

/// Droop frequency of a grid-forming inverter, Hz.
///
/// `p_filt` and `p_set` must be in the same per-unit base as `mp`.
pub fn inverter_frequency(f_nominal: f64, p_filt: f64, p_set: f64, mp: f64) -> f64 {
    f_nominal * (1.0 - mp * (p_filt - p_set))
}

/// Wraps an angle difference into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// First-order filtered derivative of the bus voltage angle.
///
/// Between samples the angle is taken to move linearly, which makes the
/// update exact for a piecewise-constant frequency regardless of step size.
/// An instantaneous angle jump (a topology change at a step boundary) only
/// moves the reference: phase steps are not frequency, and the filter state
/// carries over unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyEstimator {
    f_nominal: f64,
    tc: f64,
    last_angle: Option<f64>,
    deviation: f64,
}

impl FrequencyEstimator {
    pub fn new(f_nominal: f64, tc: f64) -> Self {
        Self {
            f_nominal,
            tc,
            last_angle: None,
            deviation: 0.0,
        }
    }

    /// Restarts at nominal frequency with the given angle as reference.
    pub fn reset(&mut self, angle: f64) {
        self.last_angle = Some(angle);
        self.deviation = 0.0;
    }

    /// Marks the bus as de-energized.
    pub fn invalidate(&mut self) {
        self.last_angle = None;
        self.deviation = 0.0;
    }

    pub fn is_valid(&self) -> bool {
        self.last_angle.is_some()
    }

    /// Advances by `dt` seconds to a new angle sample.
    pub fn advance(&mut self, angle: f64, dt: f64) {
        let Some(prev) = self.last_angle else {
            self.reset(angle);
            return;
        };
        let raw = wrap_angle(angle - prev) / (TAU * dt);
        let a = (-dt / self.tc).exp();
        self.deviation = a * self.deviation + (1.0 - a) * raw;
        self.last_angle = Some(angle);
    }

    /// Re-references to an angle that changed instantaneously.
    pub fn jump(&mut self, angle: f64) {
        if self.last_angle.is_none() {
            self.reset(angle);
        } else {
            self.last_angle = Some(angle);
        }
    }

    /// Hz, or NaN when de-energized.
    pub fn frequency(&self) -> f64 {
        if self.last_angle.is_some() {
            self.f_nominal + self.deviation
        } else {
            f64::NAN
        }
    }
}

/// Runs the estimator over an equally spaced angle history and returns the
/// final frequency in Hz. Angles need not be unwrapped beyond ±π per sample.
/// A history with fewer than two samples, or containing a non-finite angle
/// (de-energized bus), yields NaN.
pub fn estimate_bus_frequency(angle_history: &[f64], dt: f64, f_nominal: f64) -> f64 {
    if angle_history.len() < 2 || angle_history.iter().any(|a| !a.is_finite()) {
        return f64::NAN;
    }
    let mut est = FrequencyEstimator::new(f_nominal, ESTIMATOR_TC);
    est.reset(angle_history[0]);
    for &a in &angle_history[1..] {
        est.advance(a, dt);
    }
    est.frequency()
}
