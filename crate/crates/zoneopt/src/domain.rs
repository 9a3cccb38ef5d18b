//! Core vehicle types, calibration parameters, and scenario validation.
//!
//! Positions are meters, speeds m/s, accelerations m/s², times seconds. The
//! headway state between a vehicle and its leader is `s = xi * (p_k - p)`,
//! and the rear-end safety constraint requires `s >= delta(v)` with the
//! speed-dependent safe distance `delta(v) = gamma + rho * v`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lead::LeadProfile;

/// Calibrated limits and safety-law coefficients for one vehicle.
///
/// Deserialization fills omitted fields from [`VehicleParams::default`], so
/// scenario files may state only the values they change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Hardest allowed deceleration (negative).
    pub u_min: f64,
    /// Hardest allowed acceleration (positive).
    pub u_max: f64,
    /// Lowest allowed speed; kept strictly positive so the vehicle always
    /// progresses toward the zone exit.
    pub v_min: f64,
    /// Highest allowed speed.
    pub v_max: f64,
    /// Standstill gap of the safe-distance law, in meters.
    pub gamma: f64,
    /// Time headway of the safe-distance law, in seconds.
    pub rho: f64,
    /// Scale mapping the positional gap to the headway state `s`.
    pub xi: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            u_min: -1.0,
            u_max: 1.0,
            v_min: 0.1,
            v_max: 25.0,
            gamma: 2.0,
            rho: 1.2,
            xi: 1.0,
        }
    }
}

impl VehicleParams {
    /// Safe following distance required at speed `v`.
    pub fn safe_distance(&self, v: f64) -> f64 {
        self.gamma + self.rho * v
    }

    /// Tracking rate `theta = xi / rho` of the safety-constrained dynamics:
    /// while the constraint is active the speed obeys `v' = theta (v_k - v)`.
    pub fn theta(&self) -> f64 {
        self.xi / self.rho
    }

    /// Checks the structural parameter invariants.
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.u_min < 0.0 && 0.0 < self.u_max) {
            return Err(DomainError::Params(format!(
                "control bounds must straddle zero, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if !(0.0 <= self.v_min && self.v_min < self.v_max) {
            return Err(DomainError::Params(format!(
                "speed bounds must satisfy 0 <= v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(DomainError::Params(format!(
                "standstill gap must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.rho > 0.0) {
            return Err(DomainError::Params(format!(
                "time headway must be positive, got {}",
                self.rho
            )));
        }
        if !(self.xi > 0.0) {
            return Err(DomainError::Params(format!(
                "headway scale must be positive, got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// Instantaneous kinematic state of the controlled vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position along the zone, meters.
    pub p: f64,
    /// Speed, m/s.
    pub v: f64,
}

/// Fixed endpoint data of one crossing: the vehicle enters the zone at `t0`
/// with speed `v0` at position `p0` and must reach `pf` at the scheduled
/// exit time `tf` with zero terminal control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub t0: f64,
    pub tf: f64,
    pub p0: f64,
    pub v0: f64,
    pub pf: f64,
}

impl BoundaryConditions {
    /// Scheduled crossing duration.
    pub fn horizon(&self) -> f64 {
        self.tf - self.t0
    }
}

/// One solve instance: who drives, between which endpoints, behind whom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Omitted in scenario files to mean the default calibration.
    #[serde(default)]
    pub params: VehicleParams,
    pub bc: BoundaryConditions,
    /// Preceding-vehicle profile; `None` when the lane ahead is clear.
    #[serde(default)]
    pub lead: Option<LeadProfile>,
}

/// Validation failures for parameters and scenarios.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum DomainError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid boundary conditions: {0}")]
    Boundary(String),
    #[error("invalid lead profile: {0}")]
    Lead(String),
    #[error("infeasible initial headway: {0}")]
    InitialHeadway(String),
}

/// Checks a scenario against all structural invariants and returns every
/// violation found (an empty list means the scenario is well formed).
///
/// Beyond the parameter invariants this enforces: a positive horizon, an
/// initial speed within bounds, a terminal position ahead of the start, a
/// lead profile that is defined and non-reversing over the whole horizon,
/// and — when a lead exists — an initial headway no smaller than the safe
/// distance, so the vehicle starts from a feasible state.
pub fn validate_scenario(scenario: &Scenario) -> Vec<DomainError> {
    let mut violations = Vec::new();
    if let Err(e) = scenario.params.validate() {
        violations.push(e);
    }
    let bc = &scenario.bc;
    if !(bc.tf > bc.t0) {
        violations.push(DomainError::Boundary(format!(
            "horizon must be positive, got t0={} tf={}",
            bc.t0, bc.tf
        )));
    }
    if !(bc.v0 >= scenario.params.v_min && bc.v0 <= scenario.params.v_max) {
        violations.push(DomainError::Boundary(format!(
            "initial speed {} outside [{}, {}]",
            bc.v0, scenario.params.v_min, scenario.params.v_max
        )));
    }
    if !(bc.pf > bc.p0) {
        violations.push(DomainError::Boundary(format!(
            "terminal position {} must lie ahead of start {}",
            bc.pf, bc.p0
        )));
    }
    if bc.tf > bc.t0 && bc.pf > bc.p0 {
        let mean = (bc.pf - bc.p0) / (bc.tf - bc.t0);
        if mean > scenario.params.v_max {
            violations.push(DomainError::Boundary(format!(
                "required mean speed {:.3} exceeds v_max {}",
                mean, scenario.params.v_max
            )));
        }
    }
    if let Some(lead) = &scenario.lead {
        if let Err(e) = lead.validate(bc.t0, bc.tf) {
            violations.push(e);
        } else {
            let (p_k, _, _) = lead.eval(bc.t0);
            let s0 = scenario.params.xi * (p_k - bc.p0);
            let needed = scenario.params.safe_distance(bc.v0);
            if s0 < needed {
                violations.push(DomainError::InitialHeadway(format!(
                    "initial headway {:.3} below safe distance {:.3}",
                    s0, needed
                )));
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lead::LeadProfile;

    fn base_scenario() -> Scenario {
        Scenario {
            params: VehicleParams::default(),
            bc: BoundaryConditions {
                t0: 0.0,
                tf: 26.0,
                p0: 0.0,
                v0: 14.0,
                pf: 300.0,
            },
            lead: None,
        }
    }

    #[test]
    fn default_params_are_valid() {
        assert_eq!(VehicleParams::default().validate(), Ok(()));
    }

    #[test]
    fn safe_distance_is_affine_in_speed() {
        let p = VehicleParams::default();
        assert_eq!(p.safe_distance(0.0), p.gamma);
        assert_eq!(p.safe_distance(10.0), p.gamma + 10.0 * p.rho);
    }

    #[test]
    fn rejects_inverted_control_bounds() {
        let p = VehicleParams {
            u_min: 0.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn rejects_nonpositive_headway_scale() {
        let p = VehicleParams {
            xi: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn clean_lead_free_scenario_passes() {
        assert!(validate_scenario(&base_scenario()).is_empty());
    }

    #[test]
    fn rejects_negative_horizon() {
        let mut s = base_scenario();
        s.bc.tf = -1.0;
        assert!(!validate_scenario(&s).is_empty());
    }

    #[test]
    fn rejects_unreachable_mean_speed() {
        let mut s = base_scenario();
        s.bc.pf = 10_000.0;
        assert!(validate_scenario(&s)
            .iter()
            .any(|e| matches!(e, DomainError::Boundary(_))));
    }

    #[test]
    fn rejects_initial_headway_below_safe_distance() {
        let mut s = base_scenario();
        // Leader 10 m ahead at matched speed: delta(14) = 2 + 1.2*14 = 18.8 > 10.
        s.lead = Some(LeadProfile::constant_accel(0.0, 10.0, 14.0, 0.0));
        assert!(validate_scenario(&s)
            .iter()
            .any(|e| matches!(e, DomainError::InitialHeadway(_))));
    }

    #[test]
    fn accepts_generous_initial_headway() {
        let mut s = base_scenario();
        s.lead = Some(LeadProfile::constant_accel(0.0, 40.0, 14.0, 0.0));
        assert!(validate_scenario(&s).is_empty());
    }
}
