//! Leader-vehicle motion profiles.
//!
//! A [`LeadProfile`] describes the preceding vehicle as a piecewise-linear
//! acceleration history anchored at a known time, position, and speed. Speed
//! and position then follow by exact integration — quadratic and cubic per
//! segment — so the safety constraint's right-hand side is available in
//! closed form everywhere, with no numerical integration anywhere in the
//! solver. After its last segment a profile coasts (zero acceleration), which
//! extends it over any solve horizon.

use serde::{Deserialize, Serialize};

use crate::arcs::{eval_arc, Arc};
use crate::domain::DomainError;
use crate::stitcher::Trajectory;

/// One acceleration segment: `u_k(t) = a0 + a1 * (t - t_start)` on
/// `[t_start, t_end)`, where `t_start` is the end of the previous segment
/// (or the profile anchor for the first one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadSegment {
    pub t_end: f64,
    pub a0: f64,
    pub a1: f64,
}

/// Piecewise-polynomial leader profile, exactly integrable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadProfile {
    /// Anchor time at which `p_init`/`v_init` hold.
    pub t_start: f64,
    /// Leader position at the anchor.
    pub p_init: f64,
    /// Leader speed at the anchor.
    pub v_init: f64,
    /// Acceleration segments in time order; empty means permanent coasting.
    pub segments: Vec<LeadSegment>,
}

impl LeadProfile {
    /// Leader coasting at constant speed from the anchor onward.
    pub fn cruise(t_start: f64, p_init: f64, v_init: f64) -> Self {
        LeadProfile {
            t_start,
            p_init,
            v_init,
            segments: Vec::new(),
        }
    }

    /// Leader holding a constant acceleration indefinitely.
    pub fn constant_accel(t_start: f64, p_init: f64, v_init: f64, accel: f64) -> Self {
        LeadProfile {
            t_start,
            p_init,
            v_init,
            segments: vec![LeadSegment {
                t_end: f64::MAX,
                a0: accel,
                a1: 0.0,
            }],
        }
    }

    /// Leader applying `u_k(t) = a0 + a1 * (t - t_start)` until `until`,
    /// then coasting.
    pub fn linear_accel(t_start: f64, p_init: f64, v_init: f64, a0: f64, a1: f64, until: f64) -> Self {
        LeadProfile {
            t_start,
            p_init,
            v_init,
            segments: vec![LeadSegment {
                t_end: until,
                a0,
                a1,
            }],
        }
    }

    /// Position, speed, and acceleration at time `t`.
    ///
    /// Before the anchor the leader is extrapolated backward at constant
    /// speed; after the last segment it coasts.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        if t < self.t_start {
            return (self.p_init - self.v_init * (self.t_start - t), self.v_init, 0.0);
        }
        let (mut ts, mut p, mut v) = (self.t_start, self.p_init, self.v_init);
        for seg in &self.segments {
            let te = seg.t_end.min(t);
            if te > ts {
                let dt = te - ts;
                p += v * dt + seg.a0 * dt * dt / 2.0 + seg.a1 * dt * dt * dt / 6.0;
                v += seg.a0 * dt + seg.a1 * dt * dt / 2.0;
            }
            if t < seg.t_end {
                let dt = t - ts;
                return (p, v, seg.a0 + seg.a1 * dt);
            }
            ts = seg.t_end;
        }
        // Coasting tail.
        p += v * (t - ts);
        (p, v, 0.0)
    }

    /// Like [`eval`](Self::eval) but also returns dU/dt of the acceleration,
    /// i.e. the slope of the active segment (right-continuous at knots).
    /// The closed-form safety-ride integrator needs it to anchor the local
    /// quadratic expansion of the leader speed.
    pub fn eval_with_slope(&self, t: f64) -> (f64, f64, f64, f64) {
        let (p, v, u) = self.eval(t);
        if t >= self.t_start {
            for seg in &self.segments {
                if t < seg.t_end {
                    return (p, v, u, seg.a1);
                }
            }
        }
        (p, v, u, 0.0)
    }

    /// Segment boundaries (plus the anchor) that fall inside `[t0, tf]`,
    /// in increasing order. The solver splits analytic integrals there.
    pub fn knots(&self, t0: f64, tf: f64) -> Vec<f64> {
        let mut ks = Vec::new();
        if self.t_start > t0 && self.t_start < tf {
            ks.push(self.t_start);
        }
        for seg in &self.segments {
            if seg.t_end > t0 && seg.t_end < tf {
                ks.push(seg.t_end);
            }
        }
        ks
    }

    /// Checks that the profile is well formed and never implies a reversing
    /// leader on `[t0, tf]`. A leader moving backward is rejected rather than
    /// clamped: the following model has no meaning behind a reversing target.
    pub fn validate(&self, t0: f64, tf: f64) -> Result<(), DomainError> {
        let mut prev = self.t_start;
        for seg in &self.segments {
            if !(seg.t_end > prev) {
                return Err(DomainError::Lead(format!(
                    "segment end {} does not advance past {}",
                    seg.t_end, prev
                )));
            }
            if !(seg.a0.is_finite() && seg.a1.is_finite()) {
                return Err(DomainError::Lead("non-finite acceleration".into()));
            }
            prev = seg.t_end;
        }
        // Per segment the speed is quadratic; check endpoints and the interior
        // stationary point of each piece restricted to [t0, tf].
        let check = |t: f64| -> Result<(), DomainError> {
            let (_, v, _) = self.eval(t);
            if v < 0.0 {
                return Err(DomainError::Lead(format!(
                    "implied leader speed {:.4} m/s at t={:.3} is negative",
                    v, t
                )));
            }
            Ok(())
        };
        check(t0)?;
        check(tf)?;
        let (mut ts, mut v) = (self.t_start, self.v_init);
        for seg in &self.segments {
            let te = seg.t_end.min(tf);
            if te > ts {
                let dt = te - ts;
                // v(ts + h) = v + a0 h + a1 h^2 / 2; stationary at h* = -a0/a1.
                if seg.a1 != 0.0 {
                    let h_star = -seg.a0 / seg.a1;
                    let t_star = ts + h_star;
                    if h_star > 0.0 && h_star < dt && t_star >= t0 && t_star <= tf {
                        check(t_star)?;
                    }
                }
                if te >= t0 && te <= tf {
                    check(te)?;
                }
                v += seg.a0 * dt + seg.a1 * dt * dt / 2.0;
            }
            ts = seg.t_end;
            if ts >= tf {
                break;
            }
        }
        let _ = v;
        Ok(())
    }
}

/// Position, speed, and acceleration of the leader at `t`.
pub fn eval_lead(profile: &LeadProfile, t: f64) -> (f64, f64, f64) {
    profile.eval(t)
}

/// Re-exports a solved trajectory as a leader profile for the next vehicle
/// in a queue.
///
/// Arcs with affine control are copied exactly. Safety-constrained arcs have
/// exponential speed; they are subdivided into piecewise-linear acceleration
/// segments, doubling the subdivision until the reconstructed speed matches
/// the analytic arc to better than 1e-3 m/s everywhere.
pub fn from_follower_trajectory(traj: &Trajectory) -> LeadProfile {
    let params = &traj.scenario.params;
    let own_lead = traj.scenario.lead.as_ref();
    let bc = &traj.scenario.bc;
    let mut profile = LeadProfile {
        t_start: bc.t0,
        p_init: bc.p0,
        v_init: bc.v0,
        segments: Vec::new(),
    };
    let at = |arc: &Arc, t: f64| -> (f64, f64, f64) {
        eval_arc(arc, params, own_lead, t).expect("arc evaluated inside its own interval")
    };
    for arc in &traj.arcs {
        let (ta, tb) = (arc.t_enter, arc.t_exit);
        if tb - ta <= 1e-12 {
            continue;
        }
        if arc.kind.has_linear_control() {
            let (_, _, ua) = at(arc, ta);
            let (_, _, ub) = at(arc, tb);
            profile.segments.push(LeadSegment {
                t_end: tb,
                a0: ua,
                a1: (ub - ua) / (tb - ta),
            });
        } else {
            // Exponential tracking arc: refine until the speed error passes.
            let mut parts = 2usize;
            loop {
                let candidate = subdivide_linear(&at, arc, parts);
                let err = reconstruction_error(&at, arc, &candidate);
                if err < 1e-3 || parts >= 4096 {
                    profile.segments.extend(candidate);
                    break;
                }
                parts *= 2;
            }
        }
    }
    profile
}

/// Piecewise-linear acceleration segments interpolating the arc's control at
/// `parts + 1` evenly spaced knots.
fn subdivide_linear(
    at: &dyn Fn(&Arc, f64) -> (f64, f64, f64),
    arc: &Arc,
    parts: usize,
) -> Vec<LeadSegment> {
    let (ta, tb) = (arc.t_enter, arc.t_exit);
    let h = (tb - ta) / parts as f64;
    let mut segs = Vec::with_capacity(parts);
    for i in 0..parts {
        let s = ta + i as f64 * h;
        let e = if i + 1 == parts { tb } else { s + h };
        let (_, _, us) = at(arc, s);
        let (_, _, ue) = at(arc, e);
        segs.push(LeadSegment {
            t_end: e,
            a0: us,
            a1: (ue - us) / (e - s),
        });
    }
    segs
}

/// Max |reconstructed speed − analytic speed| over a dense grid on the arc,
/// where the reconstruction integrates the candidate segments from the arc's
/// true entry speed.
fn reconstruction_error(
    at: &dyn Fn(&Arc, f64) -> (f64, f64, f64),
    arc: &Arc,
    segs: &[LeadSegment],
) -> f64 {
    let (_, va, _) = at(arc, arc.t_enter);
    let mut worst: f64 = 0.0;
    let mut ts = arc.t_enter;
    let mut v = va;
    for seg in segs {
        let n = 16;
        for j in 1..=n {
            let t = ts + (seg.t_end - ts) * j as f64 / n as f64;
            let dt = t - ts;
            let v_re = v + seg.a0 * dt + seg.a1 * dt * dt / 2.0;
            let (_, v_true, _) = at(arc, t);
            worst = worst.max((v_re - v_true).abs());
        }
        let dt = seg.t_end - ts;
        v += seg.a0 * dt + seg.a1 * dt * dt / 2.0;
        ts = seg.t_end;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cruise_evaluates_linearly() {
        let lead = LeadProfile::cruise(0.0, 20.0, 11.5);
        let (p, v, u) = lead.eval(4.0);
        assert_eq!((p, v, u), (20.0 + 46.0, 11.5, 0.0));
    }

    #[test]
    fn linear_accel_then_coast_matches_hand_integration() {
        // u_k = 0.06 - 0.012 t on [0, 10], then coast: v returns to 11.5.
        let lead = LeadProfile::linear_accel(0.0, 20.0, 11.5, 0.06, -0.012, 10.0);
        let (_, v10, u10) = lead.eval(10.0);
        assert!((v10 - 11.5).abs() < 1e-12);
        assert_eq!(u10, 0.0);
        let (p26, v26, _) = lead.eval(26.0);
        assert!((v26 - 11.5).abs() < 1e-12);
        // p(10) = 20 + 115 + 0.06*100/2 - 0.012*1000/6 = 136; then 16 s cruise.
        assert!((p26 - (136.0 + 11.5 * 16.0)).abs() < 1e-9);
    }

    #[test]
    fn speed_matches_position_derivative() {
        let lead = LeadProfile::linear_accel(0.0, 20.0, 11.5, -0.5, 0.05, 26.0);
        let h = 1e-5;
        for &t in &[1.0, 5.0, 9.99, 10.01, 18.0, 25.0] {
            let (pm, _, _) = lead.eval(t - h);
            let (pp, _, _) = lead.eval(t + h);
            let (_, v, _) = lead.eval(t);
            let fd = (pp - pm) / (2.0 * h);
            assert!(
                ((fd - v) / v.max(1.0)).abs() < 1e-6,
                "t={} fd={} v={}",
                t,
                fd,
                v
            );
        }
    }

    #[test]
    fn accel_matches_speed_derivative() {
        let lead = LeadProfile::linear_accel(0.0, 20.0, 11.5, -0.5, 0.05, 26.0);
        let h = 1e-5;
        for &t in &[1.0, 7.0, 19.5] {
            let (_, vm, _) = lead.eval(t - h);
            let (_, vp, _) = lead.eval(t + h);
            let (_, _, u) = lead.eval(t);
            let fd = (vp - vm) / (2.0 * h);
            assert!((fd - u).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_reversing_leader() {
        // Hard braking drives the speed through zero inside the horizon.
        let lead = LeadProfile::constant_accel(0.0, 20.0, 5.0, -1.0);
        assert!(lead.validate(0.0, 26.0).is_err());
        // But the same profile is fine over a short horizon.
        assert!(lead.validate(0.0, 4.0).is_ok());
    }

    #[test]
    fn rejects_speed_dip_below_zero_at_interior_minimum() {
        // v = 2 - t + 0.05 t^2 has an interior minimum below zero near t=10
        // even though both endpoint speeds are positive over [0, 20].
        let lead = LeadProfile::linear_accel(0.0, 0.0, 2.0, -1.0, 0.1, 20.0);
        assert!(lead.validate(0.0, 20.0).is_err());
    }

    #[test]
    fn knots_report_interior_breaks_only() {
        let lead = LeadProfile::linear_accel(0.0, 20.0, 11.5, 0.06, -0.012, 10.0);
        assert_eq!(lead.knots(0.0, 26.0), vec![10.0]);
        assert!(lead.knots(0.0, 8.0).is_empty());
    }

    #[test]
    fn reference_case_leader_speed_minimum_at_ten_seconds() {
        let lead = LeadProfile::linear_accel(0.0, 20.0, 11.5, -0.5, 0.05, 26.0);
        let (_, v10, u10) = lead.eval(10.0);
        assert!((v10 - 9.0).abs() < 1e-12);
        assert!(u10.abs() < 1e-12);
        assert!(lead.validate(0.0, 26.0).is_ok());
    }
}
