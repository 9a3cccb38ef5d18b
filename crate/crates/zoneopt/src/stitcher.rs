//! Piecing arcs into complete trajectories.
//!
//! The solver starts from the unconstrained cubic, finds the first constraint
//! violation, extends the arc-sequence template with the arc kind matching
//! that constraint, and re-solves the junction/boundary system, repeating
//! until the trajectory is violation-free.
//!
//! A template's unknowns are the costate slope `a = λ^p`, one pair
//! `(b_i, c_i)` of integration constants per unconstrained arc (`b_i` is the
//! constant value of λ^s there, `c_i` the control intercept), and one
//! switching time per junction. The residual system stacks, in walk order:
//! costate links `b_i = λ^s(τ⁻)` at each unconstrained-arc entry, boundary
//! tangency `g = 0, ġ = 0` at safety entries, control continuity at every
//! other junction, the terminal conditions `u(tf) = 0` (when the last arc is
//! unconstrained) and `p(tf) = pf`, and the transversality `λ^s(tf) = 0`.
//! State continuity never appears as a residual: arcs are propagated
//! sequentially from the initial state, so it holds by construction. The
//! square system is solved by damped Newton iteration with a
//! finite-difference Jacobian.
//!
//! Scenarios whose terminal position is unreachable behind the leader (the
//! following-distance bound caps `p(tf)` below `pf`) get best-effort
//! treatment instead: the cheapest feasible tangential entry onto the
//! boundary, riding it to the horizon, reported infeasible with the terminal
//! residual.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arcs::{
    self, affine_control_cost, arc_cost, eval_affine_control, eval_arc, Arc, ArcKind,
    CostateRecord,
};
use crate::domain::{validate_scenario, DomainError, Scenario, VehicleParams};
use crate::lead::LeadProfile;

/// A solved trajectory: arcs tiling `[t0, tf]`, the junctions between them,
/// and the total control energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario: Scenario,
    pub arcs: Vec<Arc>,
    pub junctions: Vec<JunctionRecord>,
    pub total_cost: f64,
}

/// One junction between consecutive arcs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionRecord {
    pub time: f64,
    pub from_kind: ArcKind,
    pub to_kind: ArcKind,
    /// u(t⁺) − u(t⁻); zero everywhere except possibly at safety-arc entry.
    pub control_jump: f64,
    /// Corner multiplier at safety-arc entry (tangential entries make it 0);
    /// absent at other junctions.
    pub pi: Option<f64>,
}

/// Which side of a junction time to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Minus,
    Plus,
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.scenario.bc.t0
    }

    pub fn tf(&self) -> f64 {
        self.scenario.bc.tf
    }

    /// State and control at `t`, using the later arc at junction times.
    pub fn eval(&self, t: f64) -> Result<(f64, f64, f64), arcs::ArcError> {
        self.eval_side(t, Side::Plus)
    }

    /// State and control at `t`, choosing the earlier or later arc when `t`
    /// is a junction time.
    pub fn eval_side(&self, t: f64, side: Side) -> Result<(f64, f64, f64), arcs::ArcError> {
        let arc = self.arc_at(t, side);
        eval_arc(arc, &self.scenario.params, self.scenario.lead.as_ref(), t)
    }

    /// The arc covering `t`, taking the later arc (`Plus`) or the earlier
    /// one (`Minus`) when `t` is a junction time.
    pub fn arc_at(&self, t: f64, side: Side) -> &Arc {
        match side {
            Side::Plus => self
                .arcs
                .iter()
                .rev()
                .find(|a| t >= a.t_enter - 1e-9)
                .unwrap_or(&self.arcs[0]),
            Side::Minus => self
                .arcs
                .iter()
                .find(|a| t <= a.t_exit + 1e-9)
                .unwrap_or(&self.arcs[self.arcs.len() - 1]),
        }
    }

    /// Smallest constraint margins over a sampling grid (nonnegative margins
    /// mean the constraint is satisfied).
    pub fn min_margins(&self, sample_dt: f64) -> MarginReport {
        let params = &self.scenario.params;
        let lead = self.scenario.lead.as_ref();
        let mut rep = MarginReport {
            u_min: f64::INFINITY,
            u_max: f64::INFINITY,
            v_min: f64::INFINITY,
            v_max: f64::INFINITY,
            safety: lead.map(|_| f64::INFINITY),
        };
        let mut t = self.t0();
        loop {
            if let Ok((p, v, u)) = self.eval(t) {
                rep.u_min = rep.u_min.min(u - params.u_min);
                rep.u_max = rep.u_max.min(params.u_max - u);
                rep.v_min = rep.v_min.min(v - params.v_min);
                rep.v_max = rep.v_max.min(params.v_max - v);
                if let (Some(l), Some(m)) = (lead, rep.safety.as_mut()) {
                    let (pk, _, _) = l.eval(t);
                    let s = params.xi * (pk - p);
                    *m = m.min(s - params.safe_distance(v));
                }
            }
            if t >= self.tf() {
                break;
            }
            t = (t + sample_dt).min(self.tf());
        }
        rep
    }
}

/// Minimum margin per constraint over a grid; `safety` is absent without a
/// lead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub safety: Option<f64>,
}

/// The constraint identified by violation detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    UMin,
    UMax,
    VMin,
    VMax,
    Safety,
}

/// First instant at which a candidate arc sequence leaves the feasible set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationEvent {
    pub time: f64,
    pub constraint: Constraint,
    /// d(margin)/dt at the crossing; negative means the margin was falling.
    pub slope: f64,
}

/// Arc-kind template the junction solver assembles equations for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TemplateArc {
    Unconstrained,
    Safety,
    ControlSat { u: f64 },
    SpeedSat { v: f64 },
}

/// Output of a junction-system solve: materialized arcs plus diagnostics.
#[derive(Debug, Clone)]
pub struct SystemSolution {
    pub arcs: Vec<Arc>,
    pub junctions: Vec<JunctionRecord>,
    pub residual_norm: f64,
}

/// A finished solve. `feasible == false` marks best-effort output where the
/// safety constraint pinned the vehicle behind the leader through the
/// horizon; `terminal_residual` is then `p(tf) − pf`.
#[derive(Debug, Clone)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub feasible: bool,
    pub terminal_residual: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("scenario failed validation: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<DomainError>),
    #[error("unsupported arc-sequence template: {0}")]
    UnsupportedTemplate(String),
    #[error("junction system did not converge (template {template}, residual {residual:.3e})")]
    Newton { template: String, residual: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("arc-sequence template extension exceeded {0} arcs")]
    TemplateCap(usize),
}

const VIOLATION_TOL: f64 = 1e-9;
const GRID_DT: f64 = 1e-3;

/// Scan the margins of a candidate arc sequence on a 1 ms grid and refine
/// the earliest crossing by bisection to 1e-9 s. Ties inside one grid step
/// resolve safety first, then control bounds, then speed bounds.
pub fn detect_first_violation(
    candidate: &[Arc],
    params: &VehicleParams,
    lead: Option<&LeadProfile>,
) -> Option<ViolationEvent> {
    if candidate.is_empty() {
        return None;
    }
    let t0 = candidate[0].t_enter;
    let tf = candidate[candidate.len() - 1].t_exit;
    let margin = |t: f64, c: Constraint| -> f64 {
        let arc = candidate
            .iter()
            .rev()
            .find(|a| t >= a.t_enter - 1e-9)
            .unwrap_or(&candidate[0]);
        let (p, v, u) = match eval_arc(arc, params, lead, t) {
            Ok(x) => x,
            Err(_) => return f64::INFINITY,
        };
        match c {
            Constraint::UMin => u - params.u_min,
            Constraint::UMax => params.u_max - u,
            Constraint::VMin => v - params.v_min,
            Constraint::VMax => params.v_max - v,
            Constraint::Safety => match lead {
                Some(l) => {
                    let (pk, _, _) = l.eval(t);
                    params.xi * (pk - p) - params.safe_distance(v)
                }
                None => f64::INFINITY,
            },
        }
    };
    // Priority order within a grid step.
    let order = [
        Constraint::Safety,
        Constraint::UMin,
        Constraint::UMax,
        Constraint::VMin,
        Constraint::VMax,
    ];
    let mut t = t0;
    let mut prev = t0;
    loop {
        for &c in &order {
            if margin(t, c) < -VIOLATION_TOL {
                // Bisect [prev, t] down to 1e-9 s on the sign change.
                let (mut lo, mut hi) = (prev, t);
                if lo < hi {
                    for _ in 0..60 {
                        if hi - lo < 1e-9 {
                            break;
                        }
                        let mid = 0.5 * (lo + hi);
                        if margin(mid, c) < 0.0 {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                }
                let time = 0.5 * (lo + hi);
                let h = 1e-6;
                let slope = (margin((time + h).min(tf), c) - margin((time - h).max(t0), c))
                    / ((time + h).min(tf) - (time - h).max(t0));
                return Some(ViolationEvent {
                    time,
                    constraint: c,
                    slope,
                });
            }
        }
        if t >= tf {
            return None;
        }
        prev = t;
        t = (t + GRID_DT).min(tf);
    }
}

/// Unknown-vector layout for a template.
struct Layout {
    /// Index pairs (b, c) per template arc; `None` for non-unconstrained.
    coeffs: Vec<Option<(usize, usize)>>,
    /// Indices of the junction times.
    times: Vec<usize>,
    n: usize,
}

fn layout(template: &[TemplateArc]) -> Layout {
    let mut n = 1; // x[0] = a
    let coeffs = template
        .iter()
        .map(|k| match k {
            TemplateArc::Unconstrained => {
                let ix = (n, n + 1);
                n += 2;
                Some(ix)
            }
            _ => None,
        })
        .collect();
    let times = (0..template.len().saturating_sub(1))
        .map(|_| {
            let i = n;
            n += 1;
            i
        })
        .collect();
    Layout { coeffs, times, n }
}

fn template_name(template: &[TemplateArc]) -> String {
    template
        .iter()
        .map(|k| match k {
            TemplateArc::Unconstrained => "U",
            TemplateArc::Safety => "S",
            TemplateArc::ControlSat { .. } => "CS",
            TemplateArc::SpeedSat { .. } => "SS",
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Structural checks on a template before any equations are assembled.
fn validate_template(template: &[TemplateArc], has_lead: bool) -> Result<(), SolveError> {
    use TemplateArc::*;
    let fail = |msg: &str| {
        Err(SolveError::UnsupportedTemplate(format!(
            "[{}]: {msg}",
            template_name(template)
        )))
    };
    if template.is_empty() {
        return fail("empty");
    }
    if template.len() > MAX_ARCS {
        return Err(SolveError::TemplateCap(MAX_ARCS));
    }
    if !template
        .iter()
        .any(|k| matches!(k, Unconstrained))
    {
        return fail("needs at least one unconstrained arc");
    }
    match template[0] {
        Unconstrained | ControlSat { .. } => {}
        Safety => return fail("cannot start on the safety boundary"),
        SpeedSat { .. } => return fail("cannot start speed-saturated"),
    }
    match template[template.len() - 1] {
        Unconstrained | SpeedSat { .. } => {}
        _ => return fail("must end unconstrained or speed-saturated"),
    }
    for w in template.windows(2) {
        match (w[0], w[1]) {
            (Unconstrained, Unconstrained) => return fail("adjacent unconstrained arcs"),
            (Safety, Safety) => return fail("adjacent safety arcs"),
            (ControlSat { .. }, ControlSat { .. }) => return fail("adjacent saturated arcs"),
            (ControlSat { .. }, SpeedSat { .. }) => {
                return fail("control-saturated into speed-saturated needs a ramp between")
            }
            (Safety, SpeedSat { .. }) => {
                return fail("safety ride into speed-saturated is not supported")
            }
            (SpeedSat { .. }, _) => return fail("speed-saturated arcs are terminal"),
            _ => {}
        }
    }
    if template.iter().any(|k| matches!(k, Safety)) && !has_lead {
        return fail("safety arc requires a lead");
    }
    Ok(())
}

/// One forward pass through the template: propagates the state, optionally
/// materializes arcs, and stacks the residual equations in walk order.
struct WalkOutput {
    res: Vec<f64>,
    arcs: Vec<Arc>,
}

fn walk(
    template: &[TemplateArc],
    scenario: &Scenario,
    lay: &Layout,
    x: &[f64],
    materialize: bool,
) -> Option<WalkOutput> {
    let params = &scenario.params;
    let bc = &scenario.bc;
    let lead = scenario.lead.as_ref();
    let a = x[0];
    if !a.is_finite() {
        return None;
    }
    let mut bounds = Vec::with_capacity(template.len() + 1);
    bounds.push(bc.t0);
    for &i in &lay.times {
        bounds.push(x[i]);
    }
    bounds.push(bc.tf);
    for w in bounds.windows(2) {
        if !(w[1] - w[0] > 1e-9) {
            return None;
        }
    }
    let mut res = Vec::with_capacity(lay.n);
    let mut built = Vec::new();
    let (mut p, mut v) = (bc.p0, bc.v0);
    let mut carrier: Option<f64> = None;
    for (i, kind) in template.iter().enumerate() {
        let (ta, tb) = (bounds[i], bounds[i + 1]);
        // Exit state and control of this arc.
        let (p_out, v_out, u_out, lambda_out): (f64, f64, f64, Option<f64>);
        match kind {
            TemplateArc::Unconstrained => {
                let (bi, ci) = lay.coeffs[i].expect("layout matches template");
                let (b, c) = (x[bi], x[ci]);
                if let Some(l) = carrier {
                    res.push(b - l);
                }
                carrier = Some(b);
                let slope = a - params.xi * b;
                let (pe, ve, ue) = eval_affine_control(slope, c, ta, p, v, tb);
                (p_out, v_out, u_out, lambda_out) = (pe, ve, ue, None);
                if materialize {
                    built.push(Arc {
                        kind: ArcKind::Unconstrained {
                            slope,
                            intercept: c,
                        },
                        t_enter: ta,
                        t_exit: tb,
                        p_enter: p,
                        v_enter: v,
                        costates: CostateRecord {
                            lambda_p: a,
                            lambda_s: b,
                            pi: None,
                        },
                    });
                }
            }
            TemplateArc::Safety => {
                let l = lead?;
                let entry_lambda = carrier?;
                let ride = arcs::eval_ride(l, params, ta, p, v, entry_lambda, a, tb);
                if !ride.lambda_s.is_finite() || ride.decay < 1e-12 {
                    return None;
                }
                carrier = Some(ride.lambda_s);
                (p_out, v_out, u_out, lambda_out) = (ride.p, ride.v, ride.u, Some(ride.lambda_s));
                if materialize {
                    built.push(Arc {
                        kind: ArcKind::SafetyConstrained,
                        t_enter: ta,
                        t_exit: tb,
                        p_enter: p,
                        v_enter: v,
                        costates: CostateRecord {
                            lambda_p: a,
                            lambda_s: entry_lambda,
                            pi: Some(0.0),
                        },
                    });
                }
            }
            TemplateArc::ControlSat { u } => {
                let h = tb - ta;
                (p_out, v_out, u_out, lambda_out) =
                    (p + v * h + u * h * h / 2.0, v + u * h, *u, None);
                if materialize {
                    built.push(Arc {
                        kind: ArcKind::ControlSat { u: *u },
                        t_enter: ta,
                        t_exit: tb,
                        p_enter: p,
                        v_enter: v,
                        costates: CostateRecord {
                            lambda_p: a,
                            lambda_s: carrier.unwrap_or(0.0),
                            pi: None,
                        },
                    });
                }
            }
            TemplateArc::SpeedSat { v: vb } => {
                let h = tb - ta;
                (p_out, v_out, u_out, lambda_out) = (p + v * h, *vb, 0.0, None);
                if materialize {
                    built.push(Arc {
                        kind: ArcKind::SpeedSat { v: *vb },
                        t_enter: ta,
                        t_exit: tb,
                        p_enter: p,
                        v_enter: v,
                        costates: CostateRecord {
                            lambda_p: a,
                            lambda_s: carrier.unwrap_or(0.0),
                            pi: None,
                        },
                    });
                }
            }
        }
        let _ = lambda_out;
        // Junction equations with the next arc.
        if i + 1 < template.len() {
            match template[i + 1] {
                TemplateArc::Safety => {
                    let l = lead?;
                    let (pk, vk, _) = l.eval(tb);
                    res.push(params.gamma + params.rho * v_out - params.xi * (pk - p_out));
                    res.push(params.rho * u_out - params.xi * (vk - v_out));
                }
                TemplateArc::Unconstrained => {
                    let (bi, ci) = lay.coeffs[i + 1].expect("layout matches template");
                    let u_next = (a - params.xi * x[bi]) * tb + x[ci];
                    res.push(u_next - u_out);
                }
                TemplateArc::ControlSat { u } => {
                    res.push(u_out - u);
                }
                TemplateArc::SpeedSat { v: vb } => {
                    res.push(v_out - vb);
                    res.push(u_out);
                }
            }
        } else {
            // Terminal conditions.
            match kind {
                TemplateArc::Unconstrained => {
                    res.push(u_out);
                    res.push(p_out - bc.pf);
                }
                TemplateArc::SpeedSat { .. } => {
                    res.push(p_out - bc.pf);
                }
                _ => return None,
            }
        }
        p = p_out;
        v = v_out;
    }
    // Transversality: λ^s vanishes at the horizon.
    res.push(carrier?);
    if res.iter().any(|r| !r.is_finite()) {
        return None;
    }
    Some(WalkOutput { res, arcs: built })
}

/// Damped Newton iteration with a finite-difference Jacobian. `f` returns
/// `None` for inadmissible iterates (e.g. collapsed arc ordering), which the
/// line search treats as failed trials.
fn newton<F>(f: F, x0: Vec<f64>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64), String
>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = x0;
    let mut r = f(&x).ok_or("seed outside the admissible region")?;
    let n = x.len();
    if r.len() != n {
        return Err(format!("system is not square: {} equations, {n} unknowns", r.len()));
    }
    let mut rnorm = norm(&r);
    for _ in 0..max_iter {
        if rnorm < tol {
            return Ok((x, rnorm));
        }
        // Forward-difference Jacobian, column by column.
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xh = x.clone();
            xh[j] += h;
            let rh = match f(&xh) {
                Some(rh) => rh,
                None => {
                    xh[j] = x[j] - h;
                    f(&xh).ok_or("finite-difference probe left the admissible region")?
                }
            };
            let sign = if xh[j] > x[j] { 1.0 } else { -1.0 };
            for i in 0..n {
                jac[(i, j)] = sign * (rh[i] - r[i]) / h;
            }
        }
        let rhs = nalgebra::DVector::from_iterator(n, r.iter().map(|v| -v));
        let step = jac
            .clone()
            .lu()
            .solve(&rhs)
            .or_else(|| {
                // Nearly singular: tiny Tikhonov nudge.
                let mut jr = jac;
                for i in 0..n {
                    jr[(i, i)] += 1e-12;
                }
                jr.lu().solve(&rhs)
            })
            .ok_or("singular Jacobian")?;
        if step.iter().any(|d| !d.is_finite()) {
            return Err("non-finite Newton step".into());
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let xt: Vec<f64> = x
                .iter()
                .zip(step.iter())
                .map(|(xi, di)| xi + alpha * di)
                .collect();
            if let Some(rt) = f(&xt) {
                let nt = norm(&rt);
                if nt < rnorm {
                    x = xt;
                    r = rt;
                    rnorm = nt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(format!("stalled at residual {rnorm:.3e}"));
        }
    }
    if rnorm < tol {
        Ok((x, rnorm))
    } else {
        Err(format!("no convergence, residual {rnorm:.3e}"))
    }
}

const MAX_ARCS: usize = 8;
const NEWTON_TOL: f64 = 1e-10;
const NEWTON_ACCEPT: f64 = 1e-9;

/// Solve the algebraic junction/boundary system for a template. `time_seeds`
/// supplies one initial switching time per junction (typically the detected
/// violation instants).
pub fn solve_junction_system(
    template: &[TemplateArc],
    scenario: &Scenario,
    time_seeds: &[f64],
) -> Result<SystemSolution, SolveError> {
    validate_template(template, scenario.lead.is_some())?;
    if time_seeds.len() + 1 != template.len() {
        return Err(SolveError::UnsupportedTemplate(format!(
            "[{}]: expected {} time seeds, got {}",
            template_name(template),
            template.len() - 1,
            time_seeds.len()
        )));
    }
    let lay = layout(template);
    let bc = &scenario.bc;
    // Seed constants from the terminal cubic: u ≈ A(t − tf).
    let a0 = 3.0 * (bc.v0 * bc.horizon() - (bc.pf - bc.p0))
        / (bc.horizon() * bc.horizon() * bc.horizon());
    let mut failure = String::new();
    for jitter in [0.0, 0.35, -0.35] {
        let mut x0 = vec![0.0; lay.n];
        x0[0] = a0;
        for ix in lay.coeffs.iter().flatten() {
            x0[ix.0] = 0.0;
            x0[ix.1] = -a0 * bc.tf;
        }
        let jittered = sanitize_times(
            &time_seeds.iter().map(|t| t + jitter).collect::<Vec<_>>(),
            bc.t0,
            bc.tf,
        );
        for (slot, t) in lay.times.iter().zip(jittered.iter()) {
            x0[*slot] = *t;
        }
        // Verify squareness on the seed before iterating.
        match walk(template, scenario, &lay, &x0, false) {
            Some(w) if w.res.len() != lay.n => {
                return Err(SolveError::UnsupportedTemplate(format!(
                    "[{}]: {} equations for {} unknowns",
                    template_name(template),
                    w.res.len(),
                    lay.n
                )))
            }
            Some(_) => {}
            None => {
                failure = "seed outside the admissible region".into();
                continue;
            }
        }
        let f = |x: &[f64]| walk(template, scenario, &lay, x, false).map(|w| w.res);
        match newton(f, x0, NEWTON_TOL, 100) {
            Ok((x, rnorm)) if rnorm <= NEWTON_ACCEPT => {
                let out = walk(template, scenario, &lay, &x, true)
                    .expect("converged iterate is admissible");
                let mut arcs = out.arcs;
                backfill_prefix_costates(&mut arcs);
                let junctions = junction_records(&arcs, scenario);
                return Ok(SystemSolution {
                    arcs,
                    junctions,
                    residual_norm: rnorm,
                });
            }
            Ok((_, rnorm)) => failure = format!("residual {rnorm:.3e}"),
            Err(e) => failure = e,
        }
    }
    Err(SolveError::Newton {
        template: template_name(template),
        residual: failure
            .split_whitespace()
            .last()
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::NAN),
    })
}

/// Clamp seed times into (t0, tf) and force strict ordering.
fn sanitize_times(seeds: &[f64], t0: f64, tf: f64) -> Vec<f64> {
    let gap = (tf - t0) * 1e-4;
    let mut out = Vec::with_capacity(seeds.len());
    let mut floor = t0 + gap;
    for (i, &s) in seeds.iter().enumerate() {
        let ceil = tf - gap * (seeds.len() - i) as f64;
        let v = s.clamp(floor.min(ceil), ceil);
        out.push(v);
        floor = v + gap;
    }
    out
}

/// λ^s on a control-saturated prefix equals the constant of the first
/// unconstrained arc after it; patch the materialized records.
fn backfill_prefix_costates(arcs: &mut [Arc]) {
    let first_b = arcs.iter().find_map(|a| match a.kind {
        ArcKind::Unconstrained { .. } => Some(a.costates.lambda_s),
        _ => None,
    });
    if let Some(b) = first_b {
        for a in arcs.iter_mut() {
            if matches!(a.kind, ArcKind::ControlSat { .. } | ArcKind::SpeedSat { .. })
                && matches!(a.costates.lambda_s, x if x == 0.0)
            {
                a.costates.lambda_s = b;
            } else {
                break;
            }
        }
    }
}

fn junction_records(arcs: &[Arc], scenario: &Scenario) -> Vec<JunctionRecord> {
    let params = &scenario.params;
    let lead = scenario.lead.as_ref();
    arcs.windows(2)
        .map(|w| {
            let t = w[0].t_exit;
            let u_minus = eval_arc(&w[0], params, lead, t).map(|x| x.2).unwrap_or(f64::NAN);
            let u_plus = eval_arc(&w[1], params, lead, t).map(|x| x.2).unwrap_or(f64::NAN);
            JunctionRecord {
                time: t,
                from_kind: w[0].kind,
                to_kind: w[1].kind,
                control_jump: u_plus - u_minus,
                pi: match w[1].kind {
                    ArcKind::SafetyConstrained => Some(0.0),
                    _ => None,
                },
            }
        })
        .collect()
}

/// The iterative arc-piecing loop: start unconstrained, extend the template
/// at each detected violation, re-solve, and stop when violation-free.
pub fn solve_trajectory(scenario: &Scenario) -> Result<Solution, SolveError> {
    let errors = validate_scenario(scenario);
    if !errors.is_empty() {
        return Err(SolveError::InvalidScenario(errors));
    }
    let params = &scenario.params;
    let bc = &scenario.bc;
    // Kinematic envelope: saturated braking (resp. throttle) held to the
    // speed floor (resp. cap) extremizes the terminal position. A target
    // outside that band is unreachable no matter the template.
    let horizon = bc.tf - bc.t0;
    let p_lo = {
        let d = if params.u_min < 0.0 {
            ((bc.v0 - params.v_min) / -params.u_min).min(horizon)
        } else {
            0.0
        };
        bc.p0 + bc.v0 * d + params.u_min * d * d / 2.0 + params.v_min * (horizon - d)
    };
    let p_hi = {
        let d = if params.u_max > 0.0 {
            ((params.v_max - bc.v0) / params.u_max).min(horizon)
        } else {
            0.0
        };
        bc.p0 + bc.v0 * d + params.u_max * d * d / 2.0 + params.v_max * (horizon - d)
    };
    if bc.pf < p_lo - 1e-9 || bc.pf > p_hi + 1e-9 {
        return Err(SolveError::Infeasible(format!(
            "terminal position {:.3} outside the reachable band [{:.3}, {:.3}]",
            bc.pf, p_lo, p_hi
        )));
    }
    if let Some(lead) = &scenario.lead {
        // Viability precheck: braking at u_min (down to the speed floor)
        // yields the pointwise-lowest admissible speed and position, hence
        // the lowest headway term. If even that profile crosses the
        // boundary, no admissible control avoids it.
        let brake = params.u_min;
        let t_floor = if brake < 0.0 {
            bc.t0 + (bc.v0 - params.v_min) / (-brake)
        } else {
            f64::INFINITY
        };
        let steps = ((bc.tf - bc.t0) / GRID_DT).ceil() as usize;
        for k in 0..=steps {
            let t = (bc.t0 + k as f64 * GRID_DT).min(bc.tf);
            let (p_env, v_env) = if t <= t_floor {
                let dt = t - bc.t0;
                (bc.p0 + bc.v0 * dt + brake * dt * dt / 2.0, bc.v0 + brake * dt)
            } else {
                let d1 = t_floor - bc.t0;
                let p1 = bc.p0 + bc.v0 * d1 + brake * d1 * d1 / 2.0;
                (p1 + params.v_min * (t - t_floor), params.v_min)
            };
            let (pk, _, _) = lead.eval(t);
            let g = params.gamma + params.rho * v_env - params.xi * (pk - p_env);
            if g > VIOLATION_TOL {
                return Err(SolveError::Infeasible(format!(
                    "headway bound cannot be met from the initial state: \
                     maximum braking still crosses it at t={t:.3}"
                )));
            }
        }
        // Rigorous reachability precheck: any feasible trajectory satisfies
        // the following-distance bound at tf, capping p(tf). If pf lies
        // beyond the cap, no template can succeed — go straight to best
        // effort.
        let (pk_f, _, _) = lead.eval(bc.tf);
        let cap = pk_f - (params.gamma + params.rho * params.v_min) / params.xi;
        if bc.pf > cap + 1e-9 {
            return ride_out_horizon(scenario);
        }
    }
    let first = arcs::solve_terminal_unconstrained(bc.t0, bc.p0, bc.v0, bc.tf, bc.pf)
        .map_err(|e| SolveError::Infeasible(e.to_string()))?;
    let mut template = vec![TemplateArc::Unconstrained];
    let mut current = vec![first];
    let mut junctions: Vec<JunctionRecord> = Vec::new();
    'rounds: for _round in 0..MAX_ARCS {
        let lead = scenario.lead.as_ref();
        let Some(ev) = detect_first_violation(&current, params, lead) else {
            return finish(scenario, current, junctions);
        };
        let (next_template, seeds) = extend_template(&template, &current, &ev, params, scenario)?;
        if next_template == template {
            return Err(SolveError::UnsupportedTemplate(format!(
                "[{}]: no extension resolves the {:?} violation at t={:.3}",
                template_name(&template),
                ev.constraint,
                ev.time
            )));
        }
        match solve_junction_system(&next_template, scenario, &seeds) {
            Ok(sys) => {
                template = next_template;
                current = sys.arcs;
                junctions = sys.junctions;
            }
            Err(err) => {
                // Some deep-deficit (or surplus) problems have no root with
                // every arc interior: the optimum closes with a saturated
                // crawl at the speed floor (or a cruise at the cap), and the
                // all-interior sibling the extension proposed cannot reach
                // it. Retry once with a trailing speed-saturated arc.
                if matches!(&err, SolveError::Newton { .. })
                    && matches!(next_template.last(), Some(TemplateArc::Unconstrained))
                    && !next_template
                        .iter()
                        .any(|k| matches!(k, TemplateArc::SpeedSat { .. }))
                    && next_template.len() < MAX_ARCS
                {
                    let deficit = bc.pf < bc.p0 + bc.v0 * (bc.tf - bc.t0);
                    let vb = if deficit { params.v_min } else { params.v_max };
                    let mut retry_template = next_template.clone();
                    retry_template.push(TemplateArc::SpeedSat { v: vb });
                    let last_seed = seeds.last().copied().unwrap_or(bc.t0);
                    for d in [0.6, 2.0, 5.0] {
                        let tau = bc.tf - d;
                        if tau <= last_seed + 0.05 || tau <= bc.t0 + 0.05 {
                            continue;
                        }
                        let mut retry_seeds = seeds.clone();
                        retry_seeds.push(tau);
                        if let Ok(sys) =
                            solve_junction_system(&retry_template, scenario, &retry_seeds)
                        {
                            template = retry_template;
                            current = sys.arcs;
                            junctions = sys.junctions;
                            continue 'rounds;
                        }
                    }
                }
                // A safety-driven template that cannot be closed usually
                // means the exit never happens inside the horizon.
                let safety_involved = ev.constraint == Constraint::Safety
                    || next_template.iter().any(|k| matches!(k, TemplateArc::Safety));
                if safety_involved && scenario.lead.is_some() {
                    return ride_out_horizon(scenario).map_err(|_| err);
                }
                return Err(err);
            }
        }
    }
    Err(SolveError::TemplateCap(MAX_ARCS))
}

fn finish(
    scenario: &Scenario,
    arcs_v: Vec<Arc>,
    junctions: Vec<JunctionRecord>,
) -> Result<Solution, SolveError> {
    let lead = scenario.lead.as_ref();
    let total_cost: f64 = arcs_v
        .iter()
        .map(|a| arc_cost(a, &scenario.params, lead).expect("solved arcs are evaluable"))
        .sum();
    let p_end = eval_arc(
        &arcs_v[arcs_v.len() - 1],
        &scenario.params,
        lead,
        scenario.bc.tf,
    )
    .expect("terminal state evaluable")
    .0;
    Ok(Solution {
        trajectory: Trajectory {
            scenario: scenario.clone(),
            arcs: arcs_v,
            junctions,
            total_cost,
        },
        feasible: true,
        terminal_residual: p_end - scenario.bc.pf,
        failure: None,
    })
}

/// Decide how to grow the template in response to a violation, and produce
/// the matching switching-time seeds.
fn extend_template(
    template: &[TemplateArc],
    current: &[Arc],
    ev: &ViolationEvent,
    params: &VehicleParams,
    scenario: &Scenario,
) -> Result<(Vec<TemplateArc>, Vec<f64>), SolveError> {
    let idx = current
        .iter()
        .position(|a| ev.time <= a.t_exit + 1e-9)
        .unwrap_or(current.len() - 1);
    let arc = &current[idx];
    let mut times: Vec<f64> = current.iter().take(current.len() - 1).map(|a| a.t_exit).collect();
    let mut out = template.to_vec();
    let unsupported = |msg: String| Err(SolveError::UnsupportedTemplate(msg));
    match ev.constraint {
        Constraint::Safety => {
            if !matches!(arc.kind, ArcKind::Unconstrained { .. }) {
                return unsupported(format!(
                    "safety violation inside a {} arc",
                    arc.kind.label()
                ));
            }
            let exit_seed = (ev.time + 2.0).min(ev.time + 0.5 * (arc.t_exit - ev.time));
            out.splice(
                idx..=idx,
                [
                    TemplateArc::Unconstrained,
                    TemplateArc::Safety,
                    TemplateArc::Unconstrained,
                ],
            );
            times.splice(idx..idx, [ev.time, exit_seed]);
        }
        Constraint::UMin | Constraint::UMax => {
            let bound = if ev.constraint == Constraint::UMin {
                params.u_min
            } else {
                params.u_max
            };
            let ArcKind::Unconstrained { slope, intercept } = arc.kind else {
                return unsupported(format!(
                    "control-bound violation inside a {} arc",
                    arc.kind.label()
                ));
            };
            // Affine control: the violated stretch touches one end of the arc.
            let viol = |t: f64| match ev.constraint {
                Constraint::UMin => (slope * t + intercept) - params.u_min,
                _ => params.u_max - (slope * t + intercept),
            };
            let start_side = viol(arc.t_enter) <= viol(arc.t_exit);
            let cross = if slope.abs() > 1e-12 {
                ((bound - intercept) / slope).clamp(arc.t_enter, arc.t_exit)
            } else {
                ev.time
            };
            if start_side && idx == 0 {
                out.insert(0, TemplateArc::ControlSat { u: bound });
                times.insert(0, cross);
            } else if start_side && matches!(current[idx - 1].kind, ArcKind::SafetyConstrained) {
                out.insert(idx, TemplateArc::ControlSat { u: bound });
                times.insert(idx, cross);
            } else if !start_side
                && idx + 1 < current.len()
                && matches!(current[idx + 1].kind, ArcKind::SafetyConstrained)
            {
                out.insert(idx + 1, TemplateArc::ControlSat { u: bound });
                times.insert(idx, cross);
            } else {
                return unsupported(format!(
                    "control-bound violation at t={:.3} not adjacent to the horizon start or a constrained arc",
                    ev.time
                ));
            }
        }
        Constraint::VMin | Constraint::VMax => {
            let bound = if ev.constraint == Constraint::VMin {
                params.v_min
            } else {
                params.v_max
            };
            // Speed bounds bind at the horizon end for this problem family
            // (terminal arcs have monotone speed); a terminal cruise arc
            // absorbs them.
            let lead = scenario.lead.as_ref();
            let last = &current[current.len() - 1];
            let end_margin = eval_arc(last, params, lead, last.t_exit)
                .map(|(_, v, _)| match ev.constraint {
                    Constraint::VMin => v - params.v_min,
                    _ => params.v_max - v,
                })
                .unwrap_or(f64::INFINITY);
            if idx == current.len() - 1
                && matches!(arc.kind, ArcKind::Unconstrained { .. })
                && end_margin < -VIOLATION_TOL
            {
                let pos = out.len() - 1;
                out.splice(
                    pos..,
                    [TemplateArc::Unconstrained, TemplateArc::SpeedSat { v: bound }],
                );
                times.push(ev.time);
            } else {
                return unsupported(format!(
                    "interior speed-bound violation at t={:.3}",
                    ev.time
                ));
            }
        }
    }
    Ok((out, times))
}

/// Best-effort fallback when the terminal position is unreachable: pick the
/// cheapest feasible tangential entry onto the following-distance boundary
/// and ride it to the horizon. The result is flagged infeasible and carries
/// the terminal position residual.
fn ride_out_horizon(scenario: &Scenario) -> Result<Solution, SolveError> {
    let params = &scenario.params;
    let bc = &scenario.bc;
    let lead = scenario
        .lead
        .as_ref()
        .ok_or_else(|| SolveError::Infeasible("terminal position unreachable".into()))?;
    let span = bc.horizon();
    let coarse = span / 256.0;
    let mut best: Option<(f64, f64, f64, f64)> = None; // (cost, t1, m, c)
    let consider = |best: &mut Option<(f64, f64, f64, f64)>, t1: f64| {
        if let Some((cost, m, c)) = entry_candidate(scenario, lead, t1) {
            if best.is_none_or(|(prev, _, _, _)| cost < prev) {
                *best = Some((cost, t1, m, c));
            }
        }
    };
    for k in 4..=252 {
        consider(&mut best, bc.t0 + k as f64 * coarse);
    }
    let mut step = coarse;
    while step > 1e-4 {
        let Some((_, t1, _, _)) = best else { break };
        step /= 8.0;
        for k in -12..=12 {
            let t = t1 + k as f64 * step;
            if t > bc.t0 + 1e-3 && t < bc.tf - 1e-3 {
                consider(&mut best, t);
            }
        }
    }
    let Some((_, t1, m, c)) = best else {
        return Err(SolveError::Infeasible(
            "no feasible tangential entry onto the following-distance boundary".into(),
        ));
    };
    let slope = m;
    let intercept = c - m * bc.t0;
    let approach = Arc {
        kind: ArcKind::Unconstrained { slope, intercept },
        t_enter: bc.t0,
        t_exit: t1,
        p_enter: bc.p0,
        v_enter: bc.v0,
        costates: CostateRecord {
            lambda_p: slope,
            lambda_s: 0.0,
            pi: None,
        },
    };
    let (p1, v1, _) = eval_arc(&approach, params, Some(lead), t1).expect("approach evaluable");
    let ride = Arc {
        kind: ArcKind::SafetyConstrained,
        t_enter: t1,
        t_exit: bc.tf,
        p_enter: p1,
        v_enter: v1,
        costates: CostateRecord {
            lambda_p: slope,
            lambda_s: 0.0,
            pi: Some(0.0),
        },
    };
    let total_cost = arc_cost(&approach, params, Some(lead)).expect("approach cost")
        + arc_cost(&ride, params, Some(lead)).expect("ride cost");
    let (p_end, _, _) = eval_arc(&ride, params, Some(lead), bc.tf).expect("ride evaluable");
    let arcs_v = vec![approach, ride];
    let junctions = junction_records(&arcs_v, scenario);
    Ok(Solution {
        trajectory: Trajectory {
            scenario: scenario.clone(),
            arcs: arcs_v,
            junctions,
            total_cost,
        },
        feasible: false,
        terminal_residual: p_end - bc.pf,
        failure: Some(
            "terminal condition unreachable with active safety constraint".into(),
        ),
    })
}

/// Tangential-entry candidate at a fixed entry time: solve the 2×2 linear
/// system for the affine approach control meeting `g = 0` and `ġ = 0` at
/// `t1`, filter by feasibility of approach and ride, and return the energy.
fn entry_candidate(scenario: &Scenario, lead: &LeadProfile, t1: f64) -> Option<(f64, f64, f64)> {
    let params = &scenario.params;
    let bc = &scenario.bc;
    let (xi, rho, gamma) = (params.xi, params.rho, params.gamma);
    let t_span = t1 - bc.t0;
    let (pk1, vk1, _) = lead.eval(t1);
    // u(τ) = m·τ + c in time-from-start τ.
    let a11 = -xi * t_span.powi(3) / 6.0 - rho * t_span * t_span / 2.0;
    let a12 = -xi * t_span * t_span / 2.0 - rho * t_span;
    let b1 = gamma + rho * bc.v0 - xi * (pk1 - bc.p0 - bc.v0 * t_span);
    let a21 = rho * t_span + xi * t_span * t_span / 2.0;
    let a22 = rho + xi * t_span;
    let b2 = xi * (vk1 - bc.v0);
    let det = a11 * a22 - a12 * a21;
    if det.abs() < 1e-12 {
        return None;
    }
    let m = (b1 * a22 - a12 * b2) / det;
    let c = (a11 * b2 - b1 * a21) / det;
    let tol = 1e-9;
    // Control bounds at the affine endpoints.
    for u in [c, m * t_span + c] {
        if u < params.u_min - tol || u > params.u_max + tol {
            return None;
        }
    }
    // Speed bounds: endpoints plus the interior stationary point.
    let v_at = |tau: f64| bc.v0 + m * tau * tau / 2.0 + c * tau;
    let mut speed_checks = vec![bc.v0, v_at(t_span)];
    if m.abs() > 1e-12 {
        let tau_star = -c / m;
        if tau_star > 0.0 && tau_star < t_span {
            speed_checks.push(v_at(tau_star));
        }
    }
    if speed_checks
        .iter()
        .any(|&v| v < params.v_min - tol || v > params.v_max + tol)
    {
        return None;
    }
    // Approach must stay on the safe side of the boundary.
    for k in 1..256 {
        let tau = t_span * k as f64 / 256.0;
        let v = v_at(tau);
        let p = bc.p0 + bc.v0 * tau + m * tau.powi(3) / 6.0 + c * tau * tau / 2.0;
        let (pk, _, _) = lead.eval(bc.t0 + tau);
        if xi * (pk - p) - (gamma + rho * v) < -1e-7 {
            return None;
        }
    }
    // Ride feasibility to the horizon.
    let entry_p = pk1 - (gamma + rho * v_at(t_span)) / xi;
    let mut worst_u: f64 = 0.0;
    for k in 0..=256 {
        let t = t1 + (bc.tf - t1) * k as f64 / 256.0;
        let ride = arcs::eval_ride(lead, params, t1, entry_p, v_at(t_span), 0.0, 0.0, t);
        if ride.v < params.v_min - tol || ride.v > params.v_max + tol {
            return None;
        }
        worst_u = worst_u.max((ride.u - params.u_max).max(params.u_min - ride.u));
    }
    if worst_u > tol {
        return None;
    }
    let ride_arc = Arc {
        kind: ArcKind::SafetyConstrained,
        t_enter: t1,
        t_exit: bc.tf,
        p_enter: entry_p,
        v_enter: v_at(t_span),
        costates: CostateRecord {
            lambda_p: 0.0,
            lambda_s: 0.0,
            pi: Some(0.0),
        },
    };
    let cost = affine_control_cost(m, c, 0.0, t_span)
        + arc_cost(&ride_arc, params, Some(lead)).ok()?;
    Some((cost, m, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BoundaryConditions, VehicleParams};

    fn scenario(gamma: f64, rho: f64, lead: Option<LeadProfile>) -> Scenario {
        Scenario {
            params: VehicleParams {
                gamma,
                rho,
                ..VehicleParams::default()
            },
            bc: BoundaryConditions {
                t0: 0.0,
                tf: 26.0,
                p0: 0.0,
                v0: 14.0,
                pf: 300.0,
            },
            lead,
        }
    }

    fn case1_lead() -> LeadProfile {
        LeadProfile::cruise(0.0, 20.0, 11.5)
    }

    fn case2_lead() -> LeadProfile {
        LeadProfile::linear_accel(0.0, 20.0, 11.5, 0.06, -0.012, 10.0)
    }

    fn case3_lead() -> LeadProfile {
        LeadProfile::linear_accel(0.0, 20.0, 11.5, -0.5, 0.05, 26.0)
    }

    #[test]
    fn cruise_feasible_solves_as_single_zero_cost_arc() {
        let mut sc = scenario(2.0, 1.2, None);
        sc.bc.v0 = 300.0 / 26.0;
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.trajectory.arcs.len(), 1);
        assert!(sol.trajectory.junctions.is_empty());
        assert!(sol.trajectory.total_cost < 1e-18);
    }

    #[test]
    fn lead_free_reference_solve() {
        let sc = scenario(2.0, 1.2, None);
        let sol = solve_trajectory(&sc).unwrap();
        assert_eq!(sol.trajectory.arcs.len(), 1);
        let (_, _, u0) = sol.trajectory.eval(0.0).unwrap();
        let (pf, _, uf) = sol.trajectory.eval(26.0).unwrap();
        assert!((u0 + 0.2840236686390532).abs() < 1e-12);
        assert_eq!(uf, 0.0);
        assert!((pf - 300.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_candidate_first_hits_safety_for_steady_slow_lead() {
        let sc = scenario(1.4, 1.2, Some(case1_lead()));
        let first = arcs::solve_terminal_unconstrained(0.0, 0.0, 14.0, 26.0, 300.0).unwrap();
        let ev = detect_first_violation(&[first], &sc.params, sc.lead.as_ref()).unwrap();
        assert_eq!(ev.constraint, Constraint::Safety);
        // The cubic closes on the leader much sooner than the optimal entry
        // time (3.13 s): its margin crosses zero just before 0.9 s.
        assert!(
            (ev.time - 0.882).abs() < 0.02,
            "first safety violation at t={:.4}",
            ev.time
        );
        assert!(ev.slope < 0.0);
    }

    #[test]
    fn violation_refinement_matches_analytic_root() {
        // v(t) = 14 + 0.2t − 0.01t² crosses v_max = 14.75 at t = 5 exactly.
        let arc = Arc {
            kind: ArcKind::Unconstrained {
                slope: -0.02,
                intercept: 0.2,
            },
            t_enter: 0.0,
            t_exit: 26.0,
            p_enter: 0.0,
            v_enter: 14.0,
            costates: CostateRecord {
                lambda_p: -0.02,
                lambda_s: 0.0,
                pi: None,
            },
        };
        let params = VehicleParams {
            v_max: 14.75,
            ..Default::default()
        };
        let ev = detect_first_violation(&[arc], &params, None).unwrap();
        assert_eq!(ev.constraint, Constraint::VMax);
        assert!((ev.time - 5.0).abs() < 1e-8, "refined to t={:.12}", ev.time);
    }

    #[test]
    fn steady_lead_produces_three_arc_structure() {
        let sc = scenario(1.4, 1.2, Some(case1_lead()));
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(kinds, ["unconstrained", "safety", "unconstrained"]);
        let t1 = sol.trajectory.arcs[1].t_enter;
        let t2 = sol.trajectory.arcs[1].t_exit;
        assert!((t1 - 3.1281).abs() < 5e-4, "t1={t1:.5}");
        assert!((t2 - 6.0495).abs() < 5e-4, "t2={t2:.5}");
        let (_, _, u0) = sol.trajectory.eval(0.0).unwrap();
        assert!((u0 + 0.9030).abs() < 1e-3, "u0={u0:.5}");
        // Continuity and boundary conditions.
        for j in &sol.trajectory.junctions {
            assert!(j.control_jump.abs() < 1e-7, "jump {:.2e}", j.control_jump);
            let (pm, vm, _) = sol.trajectory.eval_side(j.time, Side::Minus).unwrap();
            let (pp, vp, _) = sol.trajectory.eval_side(j.time, Side::Plus).unwrap();
            assert!((pm - pp).abs() < 1e-9);
            assert!((vm - vp).abs() < 1e-9);
        }
        let (pf, _, uf) = sol.trajectory.eval(26.0).unwrap();
        assert!((pf - 300.0).abs() < 1e-9);
        assert!(uf.abs() < 1e-12);
        // On the ride, the headway identity holds.
        let lead = sc.lead.as_ref().unwrap();
        for k in 0..=20 {
            let t = t1 + (t2 - t1) * k as f64 / 20.0;
            let (p, v, _) = sol.trajectory.eval(t).unwrap();
            let (pk, _, _) = lead.eval(t);
            let s = sc.params.xi * (pk - p);
            assert!((s - sc.params.safe_distance(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn tight_calibration_adds_braking_prefix() {
        let sc = scenario(2.0, 1.2, Some(case1_lead()));
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(
            kinds,
            ["control_sat", "unconstrained", "safety", "unconstrained"]
        );
        assert!(matches!(
            sol.trajectory.arcs[0].kind,
            ArcKind::ControlSat { u } if (u - sc.params.u_min).abs() < 1e-12
        ));
        let entry = sol.trajectory.arcs[2].t_enter;
        let exit = sol.trajectory.arcs[2].t_exit;
        assert!((entry - 2.30).abs() < 0.1, "entry={entry:.4}");
        assert!((exit - 5.84).abs() < 0.1, "exit={exit:.4}");
    }

    #[test]
    fn decelerating_lead_three_arcs_with_second_unconstrained_exit() {
        let sc = scenario(1.4, 1.2, Some(case2_lead()));
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(kinds, ["unconstrained", "safety", "unconstrained"]);
        let t1 = sol.trajectory.arcs[1].t_enter;
        let t2 = sol.trajectory.arcs[1].t_exit;
        assert!((t1 - 3.0404).abs() < 1e-3, "t1={t1:.5}");
        assert!((t2 - 5.1542).abs() < 1e-3, "t2={t2:.5}");
    }

    #[test]
    fn hard_braking_lead_rides_to_horizon_with_residual() {
        let sc = scenario(1.2, 1.2, Some(case3_lead()));
        let sol = solve_trajectory(&sc).unwrap();
        assert!(!sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(kinds, ["unconstrained", "safety"]);
        let t1 = sol.trajectory.arcs[1].t_enter;
        assert!((t1 - 3.10).abs() < 0.05, "t1={t1:.4}");
        assert_eq!(sol.trajectory.arcs[1].t_exit, 26.0);
        assert!(
            sol.terminal_residual < -20.0 && sol.terminal_residual > -25.0,
            "residual {:.3}",
            sol.terminal_residual
        );
        assert!(sol
            .failure
            .as_deref()
            .unwrap()
            .contains("terminal condition unreachable"));
        let (_, _, u0) = sol.trajectory.eval(0.0).unwrap();
        assert!(u0 >= sc.params.u_min - 1e-9 && u0 < -0.9, "u0={u0:.4}");
    }

    #[test]
    fn speed_cap_ends_in_terminal_cruise_arc() {
        let mut sc = scenario(2.0, 1.2, None);
        sc.params.v_max = 15.0;
        sc.bc.pf = 385.0;
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(kinds, ["unconstrained", "speed_sat"]);
        let tau = sol.trajectory.arcs[1].t_enter;
        let (_, v_at, u_at) = sol.trajectory.eval_side(tau, Side::Minus).unwrap();
        assert!((v_at - 15.0).abs() < 1e-9);
        assert!(u_at.abs() < 1e-9);
        let (pf, vf, uf) = sol.trajectory.eval(26.0).unwrap();
        assert!((pf - 385.0).abs() < 1e-9);
        assert!((vf - 15.0).abs() < 1e-12);
        assert_eq!(uf, 0.0);
    }

    #[test]
    fn deep_deceleration_gets_braking_prefix() {
        let mut sc = scenario(2.0, 1.2, None);
        sc.bc.pf = 130.0;
        sc.params.v_min = 0.1;
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(kinds, ["control_sat", "unconstrained"]);
        let tau = sol.trajectory.arcs[0].t_exit;
        let (_, _, u_plus) = sol.trajectory.eval_side(tau, Side::Plus).unwrap();
        assert!((u_plus - sc.params.u_min).abs() < 1e-8);
        let (pf, _, uf) = sol.trajectory.eval(26.0).unwrap();
        assert!((pf - 130.0).abs() < 1e-9);
        assert!(uf.abs() < 1e-12);
    }

    #[test]
    fn single_arc_template_solves_trivially() {
        let mut sc = scenario(2.0, 1.2, None);
        sc.bc.v0 = 300.0 / 26.0;
        let sys = solve_junction_system(&[TemplateArc::Unconstrained], &sc, &[]).unwrap();
        assert!(sys.residual_norm < 1e-10);
        assert_eq!(sys.arcs.len(), 1);
        match sys.arcs[0].kind {
            ArcKind::Unconstrained { slope, intercept } => {
                assert!(slope.abs() < 1e-12 && intercept.abs() < 1e-10);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn rejects_malformed_templates() {
        let sc = scenario(2.0, 1.2, None);
        // Safety without a lead.
        let err = solve_junction_system(
            &[
                TemplateArc::Unconstrained,
                TemplateArc::Safety,
                TemplateArc::Unconstrained,
            ],
            &sc,
            &[3.0, 6.0],
        )
        .unwrap_err();
        assert!(matches!(err, SolveError::UnsupportedTemplate(_)));
        // Safety first.
        let sc2 = scenario(2.0, 1.2, Some(case1_lead()));
        let err2 = solve_junction_system(
            &[TemplateArc::Safety, TemplateArc::Unconstrained],
            &sc2,
            &[3.0],
        )
        .unwrap_err();
        assert!(matches!(err2, SolveError::UnsupportedTemplate(_)));
    }

    #[test]
    fn margins_are_nonnegative_on_solved_trajectories() {
        let sc = scenario(1.4, 1.2, Some(case2_lead()));
        let sol = solve_trajectory(&sc).unwrap();
        let rep = sol.trajectory.min_margins(1e-3);
        assert!(rep.u_min > -1e-6 && rep.u_max > -1e-6);
        assert!(rep.v_min > -1e-6 && rep.v_max > -1e-6);
        assert!(rep.safety.unwrap() > -1e-6);
    }

    #[test]
    fn unreachable_terminal_position_is_rejected_up_front() {
        // Maximum braking to the speed floor bounds p(tf) below by ~99.2 m
        // with these boundary data; the cap-and-cruise profile bounds it
        // above by ~589.5 m.
        let mut sc = scenario(2.0, 1.2, None);
        sc.bc.pf = 90.0;
        let err = solve_trajectory(&sc).unwrap_err();
        assert!(matches!(err, SolveError::Infeasible(_)));
        assert!(err.to_string().contains("reachable band"));
        sc.bc.pf = 600.0;
        let err = solve_trajectory(&sc).unwrap_err();
        assert!(err.to_string().contains("reachable band"));
    }

    #[test]
    fn unavoidable_headway_crossing_is_rejected_up_front() {
        // Closing at 5 m/s on a 25 m gap: even braking at u_min from t0 the
        // headway term peaks above zero near t = 4, so no admissible control
        // exists. The initial state itself is still legal (g(0) = -5).
        let mut sc = scenario(2.5, 1.0, Some(LeadProfile::cruise(0.0, 25.0, 12.5)));
        sc.bc.v0 = 17.5;
        sc.bc.pf = 250.0;
        let err = solve_trajectory(&sc).unwrap_err();
        assert!(matches!(err, SolveError::Infeasible(_)));
        assert!(err.to_string().contains("maximum braking"));
    }

    #[test]
    fn near_floor_deficit_closes_with_crawl_at_speed_floor() {
        // pf sits ~0.1 m above the maximum-braking position floor (~128.105 m)
        // and below the ~128.31 m minimum any brake/ramp profile can reach
        // with the speed kept at or above the floor, so the solve must land
        // on brake / ramp / crawl with the crawl pinned at v_min.
        let mut sc = scenario(2.0, 1.2, None);
        sc.bc.v0 = 16.0;
        sc.bc.tf = 17.0;
        sc.bc.pf = 128.2;
        let sol = solve_trajectory(&sc).unwrap();
        assert!(sol.feasible);
        let kinds: Vec<_> = sol.trajectory.arcs.iter().map(|a| a.kind.label()).collect();
        assert_eq!(kinds, ["control_sat", "unconstrained", "speed_sat"]);
        let (pf, vf, uf) = sol.trajectory.eval(17.0).unwrap();
        assert!((pf - 128.2).abs() < 1e-9);
        assert!((vf - sc.params.v_min).abs() < 1e-12);
        assert_eq!(uf, 0.0);
        let rep = sol.trajectory.min_margins(1e-3);
        assert!(rep.u_min > -1e-6 && rep.v_min > -1e-6);
    }
}
