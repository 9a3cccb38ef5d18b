//! Arc primitives: the closed-form building blocks of an optimal trajectory.
//!
//! Every trajectory is a concatenation of four arc kinds. On an
//! [`ArcKind::Unconstrained`] arc the control is affine in time, `u = m·t + c`,
//! the unique stationary shape of the energy functional. Saturated arcs pin
//! the control or the speed at a bound. On an [`ArcKind::SafetyConstrained`]
//! arc the vehicle rides the minimum following-distance boundary, which turns
//! the dynamics into the linear tracking ODE `v̇ = θ(v_k(t) − v)` with
//! `θ = ξ/ρ`; for the piecewise-quadratic leader speeds produced by
//! [`LeadProfile`](crate::lead::LeadProfile) this integrates in closed form
//! (polynomial particular solution plus a decaying exponential), so no arc
//! ever needs numerical integration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::VehicleParams;
use crate::lead::LeadProfile;

/// Control law of an arc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArcKind {
    /// `u(t) = slope·t + intercept` in absolute time; slope equals
    /// `λ^p − ξ·λ^s` for the arc's costate constants.
    Unconstrained { slope: f64, intercept: f64 },
    /// Riding the following-distance boundary: `u = ξ(v_k − v)/ρ`.
    SafetyConstrained,
    /// Control pinned at a bound.
    ControlSat { u: f64 },
    /// Speed pinned at a bound; `u = 0`.
    SpeedSat { v: f64 },
}

impl ArcKind {
    /// Whether the control is an affine function of time on the arc
    /// (true for everything except the exponential safety ride).
    pub fn has_linear_control(&self) -> bool {
        !matches!(self, ArcKind::SafetyConstrained)
    }

    /// Short stable label used in CSV output and summaries.
    pub fn label(&self) -> &'static str {
        match self {
            ArcKind::Unconstrained { .. } => "unconstrained",
            ArcKind::SafetyConstrained => "safety",
            ArcKind::ControlSat { .. } => "control_sat",
            ArcKind::SpeedSat { .. } => "speed_sat",
        }
    }
}

/// Costate constants attached to an arc.
///
/// `lambda_p` is constant on the whole trajectory; `lambda_s` is constant on
/// every arc except the safety ride, where the stored value is the one at arc
/// entry. `pi` is the junction multiplier of the corner condition where the
/// arc begins (recorded only at safety-arc entry).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostateRecord {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub pi: Option<f64>,
}

impl CostateRecord {
    /// λ^v(t) = −(slope·t + intercept) on an unconstrained arc; provided for
    /// diagnostics.
    pub fn lambda_v(&self, params: &VehicleParams, intercept: f64, t: f64) -> f64 {
        -((self.lambda_p - params.xi * self.lambda_s) * t + intercept)
    }
}

/// One solved arc: a control law on `[t_enter, t_exit]` together with the
/// state it starts from. Evaluation is pure; arcs are immutable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub kind: ArcKind,
    pub t_enter: f64,
    pub t_exit: f64,
    pub p_enter: f64,
    pub v_enter: f64,
    pub costates: CostateRecord,
}

#[derive(Debug, Error)]
pub enum ArcError {
    #[error("safety-constrained arc requires a lead profile")]
    MissingLead,
    #[error("t={t} outside arc interval [{t_enter}, {t_exit}]")]
    OutsideInterval { t: f64, t_enter: f64, t_exit: f64 },
    #[error("degenerate horizon: tf must exceed the arc start time")]
    DegenerateHorizon,
}

/// Slack allowed when checking `t` against an arc interval; junction times
/// are themselves Newton iterates, so exact endpoint queries carry roundoff.
const INTERVAL_SLACK: f64 = 1e-9;

impl Arc {
    pub fn duration(&self) -> f64 {
        self.t_exit - self.t_enter
    }

    fn contains(&self, t: f64) -> bool {
        t >= self.t_enter - INTERVAL_SLACK && t <= self.t_exit + INTERVAL_SLACK
    }
}

/// State and costate of a safety ride at a query time.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RideEval {
    pub p: f64,
    pub v: f64,
    pub u: f64,
    /// λ^s at the query time (grows along the ride; zero required at the
    /// exit of the final safety arc).
    pub lambda_s: f64,
    /// e^{−θ(t − t_enter)}, the decay factor accumulated since entry.
    pub decay: f64,
}

/// Position, speed, and control at time `t` on an arc.
pub fn eval_arc(
    arc: &Arc,
    params: &VehicleParams,
    lead: Option<&LeadProfile>,
    t: f64,
) -> Result<(f64, f64, f64), ArcError> {
    if !arc.contains(t) {
        return Err(ArcError::OutsideInterval {
            t,
            t_enter: arc.t_enter,
            t_exit: arc.t_exit,
        });
    }
    match arc.kind {
        ArcKind::Unconstrained { slope, intercept } => Ok(eval_affine_control(
            slope,
            intercept,
            arc.t_enter,
            arc.p_enter,
            arc.v_enter,
            t,
        )),
        ArcKind::ControlSat { u } => {
            let dt = t - arc.t_enter;
            let v = arc.v_enter + u * dt;
            let p = arc.p_enter + arc.v_enter * dt + u * dt * dt / 2.0;
            Ok((p, v, u))
        }
        ArcKind::SpeedSat { v } => {
            let p = arc.p_enter + v * (t - arc.t_enter);
            Ok((p, v, 0.0))
        }
        ArcKind::SafetyConstrained => {
            let lead = lead.ok_or(ArcError::MissingLead)?;
            let ride = eval_ride(
                lead,
                params,
                arc.t_enter,
                arc.p_enter,
                arc.v_enter,
                arc.costates.lambda_s,
                arc.costates.lambda_p,
                t,
            );
            Ok((ride.p, ride.v, ride.u))
        }
    }
}

/// Evaluate `u = slope·t + intercept` and its integrals from an entry state.
pub(crate) fn eval_affine_control(
    slope: f64,
    intercept: f64,
    t_enter: f64,
    p_enter: f64,
    v_enter: f64,
    t: f64,
) -> (f64, f64, f64) {
    let dt = t - t_enter;
    let u = slope * t + intercept;
    let u_enter = slope * t_enter + intercept;
    // v = v_enter + ∫u: quadratic; p adds its integral.
    let v = v_enter + u_enter * dt + slope * dt * dt / 2.0;
    let p = p_enter + v_enter * dt + u_enter * dt * dt / 2.0 + slope * dt * dt * dt / 6.0;
    (p, v, u)
}

/// Closed-form state of the safety ride at time `t`, walking the leader's
/// acceleration segments from the entry point.
///
/// On each leader segment the target speed is quadratic, so the tracking ODE
/// has a quadratic particular solution `w(τ)` plus a decaying transient
/// `C·e^{−θτ}` (τ measured from the segment start). The costate obeys
/// `λ̇^s = θλ^s + (u̇ − λ^p)/ρ`, which grows like `e^{+θτ}`; it is propagated
/// in the scaled variable `z = λ^s·e^{−θ(t−t_enter)}` whose increments stay
/// bounded, and unscaled only at the query time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn eval_ride(
    lead: &LeadProfile,
    params: &VehicleParams,
    t_enter: f64,
    p_enter: f64,
    v_enter: f64,
    lambda_s_enter: f64,
    lambda_p: f64,
    t: f64,
) -> RideEval {
    let theta = params.theta();
    let rho = params.rho;
    let mut ts = t_enter;
    let mut p = p_enter;
    let mut v = v_enter;
    let mut z = lambda_s_enter;
    let mut decay_at_ts = 1.0; // e^{−θ(ts − t_enter)}
    loop {
        let te = next_lead_knot(lead, ts, t).min(t);
        let (_, k0, k1, k1_slope) = lead.eval_with_slope(ts);
        let k2 = k1_slope / 2.0;
        // Particular solution w(τ) = w0 + w1·τ + w2·τ² of v̇ + θv = θ·v_k.
        let w2 = k2;
        let w1 = k1 - 2.0 * k2 / theta;
        let w0 = k0 - w1 / theta;
        let c_exp = v - w0;
        let h = te - ts;
        let eh = (-theta * h).exp();
        let decay_at_te = decay_at_ts * eh;
        // Scaled-costate increment over the piece (all exponents ≤ 0).
        z += (2.0 * w2 - lambda_p) / (rho * theta) * (decay_at_ts - decay_at_te)
            + theta * c_exp / (2.0 * rho) * decay_at_ts * (1.0 - eh * eh);
        let u_te = w1 + 2.0 * w2 * h - theta * c_exp * eh;
        let p_te =
            p + w0 * h + w1 * h * h / 2.0 + w2 * h * h * h / 3.0 + c_exp * (1.0 - eh) / theta;
        let v_te = w0 + w1 * h + w2 * h * h + c_exp * eh;
        if te >= t {
            return RideEval {
                p: p_te,
                v: v_te,
                u: u_te,
                lambda_s: z / decay_at_te,
                decay: decay_at_te,
            };
        }
        p = p_te;
        v = v_te;
        decay_at_ts = decay_at_te;
        ts = te;
    }
}

/// First leader knot strictly after `ts`, clamped to `t_end`.
fn next_lead_knot(lead: &LeadProfile, ts: f64, t_end: f64) -> f64 {
    let mut te = t_end;
    for k in lead.knots(ts, t_end) {
        if k > ts + 1e-12 {
            te = te.min(k);
            break;
        }
    }
    te
}

/// The unique unconstrained arc from `(t_s, p_s, v_s)` meeting `p(tf) = pf`
/// with zero terminal control.
///
/// With λ^s ≡ 0 on a terminal arc, the control is `u = A·(t − tf)` and the
/// terminal-position condition fixes `A = 3(v_s·T − D)/T³` in the shifted
/// frame `T = tf − t_s`, `D = pf − p_s`.
pub fn solve_terminal_unconstrained(
    t_s: f64,
    p_s: f64,
    v_s: f64,
    tf: f64,
    pf: f64,
) -> Result<Arc, ArcError> {
    let t_span = tf - t_s;
    if !(t_span > 0.0) {
        return Err(ArcError::DegenerateHorizon);
    }
    let dist = pf - p_s;
    let a = 3.0 * (v_s * t_span - dist) / (t_span * t_span * t_span);
    Ok(Arc {
        kind: ArcKind::Unconstrained {
            slope: a,
            intercept: -a * tf,
        },
        t_enter: t_s,
        t_exit: tf,
        p_enter: p_s,
        v_enter: v_s,
        costates: CostateRecord {
            lambda_p: a,
            lambda_s: 0.0,
            pi: None,
        },
    })
}

/// Control at the entry of a safety ride: `ξ(v_k − v_i)/ρ`.
pub fn safety_arc_entry_control(params: &VehicleParams, v_k: f64, v_i: f64) -> f64 {
    params.xi * (v_k - v_i) / params.rho
}

/// Energy `½∫u²` over the arc: closed form where the control is affine,
/// adaptive Simpson quadrature (tolerance 1e-10) on the safety ride.
pub fn arc_cost(
    arc: &Arc,
    params: &VehicleParams,
    lead: Option<&LeadProfile>,
) -> Result<f64, ArcError> {
    let (ta, tb) = (arc.t_enter, arc.t_exit);
    match arc.kind {
        ArcKind::Unconstrained { slope, intercept } => {
            Ok(affine_control_cost(slope, intercept, ta, tb))
        }
        ArcKind::ControlSat { u } => Ok(0.5 * u * u * (tb - ta)),
        ArcKind::SpeedSat { .. } => Ok(0.0),
        ArcKind::SafetyConstrained => {
            let lead = lead.ok_or(ArcError::MissingLead)?;
            let f = |t: f64| {
                let r = eval_ride(
                    lead,
                    params,
                    arc.t_enter,
                    arc.p_enter,
                    arc.v_enter,
                    arc.costates.lambda_s,
                    arc.costates.lambda_p,
                    t,
                );
                0.5 * r.u * r.u
            };
            // Integrate piecewise between leader knots so the integrand is
            // smooth on each panel.
            let mut cost = 0.0;
            let mut ts = ta;
            while ts < tb - 1e-12 {
                let te = next_lead_knot(lead, ts, tb);
                cost += adaptive_simpson(&f, ts, te, 1e-10);
                ts = te;
            }
            Ok(cost)
        }
    }
}

/// ½∫(slope·t + intercept)² dt over [ta, tb], exactly.
pub(crate) fn affine_control_cost(slope: f64, intercept: f64, ta: f64, tb: f64) -> f64 {
    let i3 = (tb * tb * tb - ta * ta * ta) / 3.0;
    let i2 = tb * tb - ta * ta;
    let i1 = tb - ta;
    0.5 * (slope * slope * i3 + slope * intercept * i2 + intercept * intercept * i1)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fm = f(0.5 * (a + b));
    let fb = f(b);
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol, 30)
}
