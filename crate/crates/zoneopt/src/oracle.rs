//! Independent cross-check: direct transcription of the trajectory problem
//! to a convex QP, solved by a dual active-set method.
//!
//! The horizon is split into `n` forward-Euler steps with one piecewise-
//! constant control per step. Energy becomes `½·dt·Σu²`, the terminal
//! position a single linear equality, and the control, speed, and
//! following-distance constraints one linear inequality per step. Rows are
//! never materialized as a dense matrix: they are banded prefix structures,
//! so constraint scanning runs in O(n) per iteration and only the active
//! rows are stored densely.
//!
//! The solver is the classic dual active-set scheme: start at the
//! unconstrained minimizer, repeatedly pick the most violated constraint
//! (scaled by row norm), and take mixed primal-dual steps — adding the row
//! when the step reaches primal feasibility, dropping a blocking row when a
//! multiplier hits zero first. Because the Hessian is a positive multiple of
//! the identity, the working-set subproblems reduce to a growing Cholesky
//! factorization of the active Gram matrix. Infeasible problems (a terminal
//! position that no admissible control sequence reaches) are detected when a
//! violated row admits neither a primal nor a dual step, and reported with a
//! certificate instead of a solution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_scenario, Scenario, VehicleParams};
use crate::stitcher::Trajectory;

/// One inequality row of the transcribed QP, identified structurally.
/// Control rows carry the step index; speed and following-distance rows
/// carry the state index `k` (the constraint on the state after step `k−1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintId {
    UMin(usize),
    UMax(usize),
    VMin(usize),
    VMax(usize),
    Safety(usize),
}

impl ConstraintId {
    /// The control interval this row constrains, for active-set comparison.
    fn interval(&self) -> usize {
        match *self {
            ConstraintId::UMin(i) | ConstraintId::UMax(i) => i,
            ConstraintId::VMin(k) | ConstraintId::VMax(k) | ConstraintId::Safety(k) => {
                k.saturating_sub(1)
            }
        }
    }
}

impl std::fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintId::UMin(i) => write!(f, "u[{i}] >= u_min"),
            ConstraintId::UMax(i) => write!(f, "u[{i}] <= u_max"),
            ConstraintId::VMin(k) => write!(f, "v[{k}] >= v_min"),
            ConstraintId::VMax(k) => write!(f, "v[{k}] <= v_max"),
            ConstraintId::Safety(k) => write!(f, "headway[{k}] >= safe distance"),
        }
    }
}

/// The transcribed problem: minimize ½·h·‖u‖² + qᵀu subject to the terminal
/// equality (optional) and the structured inequality rows listed in `ids`.
#[derive(Debug, Clone)]
pub struct TranscribedQP {
    pub n: usize,
    pub t0: f64,
    pub dt: f64,
    /// Hessian scale: the objective matrix is `h·I`.
    pub h: f64,
    pub q: Vec<f64>,
    pub p0: f64,
    pub v0: f64,
    pub pf: f64,
    pub params: VehicleParams,
    /// Leader positions at the state grid `t0 + k·dt`, `k = 1..=n`.
    pub lead_pos: Option<Vec<f64>>,
    /// Whether the terminal-position equality is present.
    pub terminal_eq: bool,
    pub ids: Vec<ConstraintId>,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("transcription needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("scenario failed validation: {0}")]
    BadScenario(String),
    #[error("infeasible: {certificate}")]
    Infeasible { certificate: String },
    #[error("active-set iteration stalled after {iterations} iterations")]
    Stalled { iterations: usize },
}

/// Solution of the transcribed QP.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Final active inequality rows and their multipliers, aligned.
    pub active: Vec<ConstraintId>,
    pub lambda: Vec<f64>,
    /// Worst Karush-Kuhn-Tucker residual: stationarity, primal feasibility,
    /// and complementarity, as an infinity norm.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Build the forward-Euler transcription on `n` control steps.
pub fn transcribe(scenario: &Scenario, n: usize) -> Result<TranscribedQP, QpError> {
    if n < 2 {
        return Err(QpError::TooFewSteps(n));
    }
    let errors = validate_scenario(scenario);
    if !errors.is_empty() {
        return Err(QpError::BadScenario(
            errors
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let bc = &scenario.bc;
    let dt = bc.horizon() / n as f64;
    let lead_pos = scenario
        .lead
        .as_ref()
        .map(|l| (1..=n).map(|k| l.eval(bc.t0 + k as f64 * dt).0).collect());
    let mut ids = Vec::with_capacity(5 * n);
    for i in 0..n {
        ids.push(ConstraintId::UMin(i));
        ids.push(ConstraintId::UMax(i));
    }
    for k in 1..=n {
        ids.push(ConstraintId::VMin(k));
        ids.push(ConstraintId::VMax(k));
    }
    if lead_pos.is_some() {
        for k in 1..=n {
            ids.push(ConstraintId::Safety(k));
        }
    }
    Ok(TranscribedQP {
        n,
        t0: bc.t0,
        dt,
        h: dt,
        q: vec![0.0; n],
        p0: bc.p0,
        v0: bc.v0,
        pf: bc.pf,
        params: scenario.params,
        lead_pos,
        terminal_eq: true,
        ids,
    })
}

impl TranscribedQP {
    /// Dense normal and offset of one inequality row, as `aᵀu ≥ b`.
    pub fn row(&self, id: ConstraintId) -> (Vec<f64>, f64) {
        let (n, dt) = (self.n, self.dt);
        let prm = &self.params;
        let mut a = vec![0.0; n];
        let b;
        match id {
            ConstraintId::UMin(i) => {
                a[i] = 1.0;
                b = prm.u_min;
            }
            ConstraintId::UMax(i) => {
                a[i] = -1.0;
                b = -prm.u_max;
            }
            ConstraintId::VMin(k) => {
                for aj in a.iter_mut().take(k) {
                    *aj = dt;
                }
                b = prm.v_min - self.v0;
            }
            ConstraintId::VMax(k) => {
                for aj in a.iter_mut().take(k) {
                    *aj = -dt;
                }
                b = self.v0 - prm.v_max;
            }
            ConstraintId::Safety(k) => {
                for (j, aj) in a.iter_mut().take(k).enumerate() {
                    *aj = -prm.xi * dt * dt * (k - 1 - j) as f64 - prm.rho * dt;
                }
                let pk = self.lead_pos.as_ref().expect("safety row needs a lead")[k - 1];
                b = prm.gamma + prm.rho * self.v0 - prm.xi * (pk - self.p0 - k as f64 * dt * self.v0);
            }
        }
        (a, b)
    }

    /// The terminal-position equality `aᵀu = b`.
    pub fn equality(&self) -> (Vec<f64>, f64) {
        let (n, dt) = (self.n, self.dt);
        let a = (0..n).map(|j| dt * dt * (n - 1 - j) as f64).collect();
        let b = self.pf - self.p0 - n as f64 * dt * self.v0;
        (a, b)
    }

    fn row_norm(&self, id: ConstraintId) -> f64 {
        let dt = self.dt;
        match id {
            ConstraintId::UMin(_) | ConstraintId::UMax(_) => 1.0,
            ConstraintId::VMin(k) | ConstraintId::VMax(k) => dt * (k as f64).sqrt(),
            ConstraintId::Safety(k) => {
                let (xi, rho) = (self.params.xi, self.params.rho);
                let kf = k as f64;
                // Σ_{m=0}^{k−1} (ρ·dt + ξ·dt²·m)²
                let s = kf * rho * rho * dt * dt
                    + rho * xi * dt.powi(3) * kf * (kf - 1.0)
                    + xi * xi * dt.powi(4) * (kf - 1.0) * kf * (2.0 * kf - 1.0) / 6.0;
                s.sqrt()
            }
        }
    }

    /// Raw margin `aᵀu − b` of one row, given state prefix sums.
    fn margin(&self, id: ConstraintId, x: &[f64], p1: &[f64], q1: &[f64]) -> f64 {
        let (dt, prm) = (self.dt, &self.params);
        match id {
            ConstraintId::UMin(i) => x[i] - prm.u_min,
            ConstraintId::UMax(i) => prm.u_max - x[i],
            ConstraintId::VMin(k) => self.v0 + dt * p1[k] - prm.v_min,
            ConstraintId::VMax(k) => prm.v_max - (self.v0 + dt * p1[k]),
            ConstraintId::Safety(k) => {
                let kf = k as f64;
                let v = self.v0 + dt * p1[k];
                let p = self.p0 + kf * dt * self.v0 + dt * dt * ((kf - 1.0) * p1[k] - q1[k]);
                let pk = self.lead_pos.as_ref().expect("safety row needs a lead")[k - 1];
                prm.xi * (pk - p) - (prm.gamma + prm.rho * v)
            }
        }
    }

    /// Reconstruct the state grid `(p_k, v_k)`, `k = 0..=n`, from controls.
    pub fn states(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n + 1);
        let (mut p, mut v) = (self.p0, self.v0);
        out.push((p, v));
        for &u in x.iter().take(self.n) {
            p += self.dt * v;
            v += self.dt * u;
            out.push((p, v));
        }
        out
    }
}

fn prefix_sums(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut p1 = vec![0.0; n + 1];
    let mut q1 = vec![0.0; n + 1];
    for j in 0..n {
        p1[j + 1] = p1[j] + x[j];
        q1[j + 1] = q1[j] + j as f64 * x[j];
    }
    (p1, q1)
}

struct ActiveRow {
    id: Option<ConstraintId>, // None marks the terminal equality
    a: Vec<f64>,
    lambda: f64,
}

/// Growing Cholesky factor of the active Gram matrix `NᵀN / h`.
struct Workspace {
    gram: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            gram: Vec::new(),
            chol: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.gram.len()
    }

    /// Append a row whose Gram column (against existing rows, divided by h)
    /// is `w` and whose own squared norm over h is `gg`. Fails if the row is
    /// numerically dependent on the working set.
    fn push(&mut self, w: &[f64], gg: f64) -> bool {
        let l12 = forward_sub(&self.chol, w);
        let d2 = gg - l12.iter().map(|v| v * v).sum::<f64>();
        if d2 <= 1e-13 * gg.max(1e-300) {
            return false;
        }
        let k = self.len();
        for (i, &wi) in w.iter().enumerate() {
            self.gram[i].push(wi);
        }
        let mut grow = w.to_vec();
        grow.push(gg);
        self.gram.push(grow);
        let mut lrow = l12;
        lrow.push(d2.sqrt());
        self.chol.push(lrow);
        debug_assert_eq!(self.len(), k + 1);
        true
    }

    /// Remove row/column `j` and refactor.
    fn remove(&mut self, j: usize) -> bool {
        self.gram.remove(j);
        for row in self.gram.iter_mut() {
            row.remove(j);
        }
        match cholesky(&self.gram) {
            Some(l) => {
                self.chol = l;
                true
            }
            None => false,
        }
    }

    /// Solve (NᵀN/h) r = w via the factor.
    fn solve(&self, w: &[f64]) -> Vec<f64> {
        let y = forward_sub(&self.chol, w);
        backward_sub(&self.chol, &y)
    }
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; b.len()];
    for i in 0..b.len() {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i][j] * y[j];
        }
        y[i] = s / l[i][i];
    }
    y
}

fn backward_sub(l: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = y.len();
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for j in i + 1..k {
            s -= l[j][i] * x[j];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn cholesky(g: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = g.len();
    let mut l: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut row = vec![0.0; i + 1];
        for j in 0..=i {
            let mut s = g[i][j];
            for m in 0..j {
                // When j == i the factor row being built is `row` itself.
                let ljm = if j == i { row[m] } else { l[j][m] };
                s -= row[m] * ljm;
            }
            if j == i {
                if s <= 0.0 {
                    return None;
                }
                row[i] = s.sqrt();
            } else {
                row[j] = s / l[j][j];
            }
        }
        l.push(row);
    }
    Some(l)
}

const VIOLATION_TOL: f64 = 1e-10;

/// Solve the transcribed QP by the dual active-set method. Returns the
/// optimizer with multipliers and a Karush-Kuhn-Tucker residual, or an
/// infeasibility certificate naming the unsatisfiable row.
pub fn solve_qp(qp: &TranscribedQP) -> Result<QpSolution, QpError> {
    let n = qp.n;
    let h = qp.h;
    let mut x: Vec<f64> = qp.q.iter().map(|qi| -qi / h).collect();
    let mut active: Vec<ActiveRow> = Vec::new();
    let mut ws = Workspace::new();
    let mut iterations = 0usize;

    // Gram column of `a` against the working set, over h.
    let gram_col = |active: &[ActiveRow], a: &[f64]| -> Vec<f64> {
        active
            .iter()
            .map(|row| dot(&row.a, a) / h)
            .collect::<Vec<f64>>()
    };

    // Pre-activate the terminal equality with a full (free-sign) step.
    if qp.terminal_eq {
        let (ae, be) = qp.equality();
        let denom = dot(&ae, &ae) / h;
        let t = (be - dot(&ae, &x)) / denom;
        for (xi, ai) in x.iter_mut().zip(ae.iter()) {
            *xi += t * ai / h;
        }
        let ok = ws.push(&[], denom);
        debug_assert!(ok, "equality row is nonzero");
        active.push(ActiveRow {
            id: None,
            a: ae,
            lambda: t,
        });
    }

    let cap = 50 * n + 1000;
    loop {
        iterations += 1;
        if iterations > cap {
            return Err(QpError::Stalled { iterations });
        }
        // Most violated inequality, scaled by row norm.
        let (p1, q1) = prefix_sums(&x);
        let mut worst: Option<(ConstraintId, f64)> = None;
        for &id in &qp.ids {
            let m = qp.margin(id, &x, &p1, &q1) / qp.row_norm(id);
            if m < -VIOLATION_TOL && worst.is_none_or(|(_, wm)| m < wm) {
                worst = Some((id, m));
            }
        }
        let Some((pid, pviol)) = worst else { break };
        let (a, b) = qp.row(pid);
        let mut lambda_new = 0.0;
        // Mixed primal-dual steps until this row joins the working set.
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpError::Stalled { iterations });
            }
            let w = gram_col(&active, &a);
            let r = ws.solve(&w);
            // z = (a − N r)/h
            let mut z = a.clone();
            for (row, ri) in active.iter().zip(r.iter()) {
                for (zj, aj) in z.iter_mut().zip(row.a.iter()) {
                    *zj -= ri * aj;
                }
            }
            for zj in z.iter_mut() {
                *zj /= h;
            }
            let az = dot(&a, &z);
            let have_primal = az > 1e-13 * (1.0 + dot(&a, &a) / h);
            // Dual blocking step among droppable rows.
            let mut t1 = f64::INFINITY;
            let mut blocker = None;
            for (j, (row, rj)) in active.iter().zip(r.iter()).enumerate() {
                if row.id.is_some() && *rj > 1e-12 {
                    let t = row.lambda / rj;
                    if t < t1 {
                        t1 = t;
                        blocker = Some(j);
                    }
                }
            }
            let t2 = if have_primal {
                (b - dot(&a, &x)) / az
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible {
                    certificate: format!(
                        "constraint `{pid}` is violated by {:.3e} but admits no primal or dual step; \
                         the terminal-position equality is incompatible with the inequality rows",
                        -pviol
                    ),
                });
            }
            if have_primal {
                for (xj, zj) in x.iter_mut().zip(z.iter()) {
                    *xj += t * zj;
                }
            }
            for (row, rj) in active.iter_mut().zip(r.iter()) {
                row.lambda -= t * rj;
            }
            lambda_new += t;
            if t2 <= t1 {
                let gg = dot(&a, &a) / h;
                if !ws.push(&w, gg) {
                    return Err(QpError::Stalled { iterations });
                }
                active.push(ActiveRow {
                    id: Some(pid),
                    a: a.clone(),
                    lambda: lambda_new,
                });
                break;
            }
            let j = blocker.expect("finite t1 has a blocker");
            active.remove(j);
            if !ws.remove(j) {
                return Err(QpError::Stalled { iterations });
            }
        }
    }

    // Karush-Kuhn-Tucker residual.
    let mut grad: Vec<f64> = x.iter().zip(qp.q.iter()).map(|(xi, qi)| h * xi + qi).collect();
    for row in &active {
        for (gj, aj) in grad.iter_mut().zip(row.a.iter()) {
            *gj -= row.lambda * aj;
        }
    }
    let stationarity = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let (p1, q1) = prefix_sums(&x);
    let mut primal: f64 = 0.0;
    for &id in &qp.ids {
        primal = primal.max(-qp.margin(id, &x, &p1, &q1));
    }
    let mut complementarity: f64 = 0.0;
    for row in &active {
        if let Some(id) = row.id {
            complementarity =
                complementarity.max((row.lambda * qp.margin(id, &x, &p1, &q1)).abs());
        }
    }
    let eq_res = if qp.terminal_eq {
        let (ae, be) = qp.equality();
        (dot(&ae, &x) - be).abs()
    } else {
        0.0
    };
    let kkt_residual = stationarity.max(primal).max(complementarity).max(eq_res);
    let cost = 0.5 * h * dot(&x, &x) + dot(&qp.q, &x);
    let (ids, lambdas): (Vec<_>, Vec<_>) = active
        .iter()
        .filter_map(|row| row.id.map(|id| (id, row.lambda)))
        .unzip();
    Ok(QpSolution {
        x,
        cost,
        active: ids,
        lambda: lambdas,
        kkt_residual,
        iterations,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Constraint family, for comparing which constraint binds on an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    None,
    Safety,
    Control,
    Speed,
}

/// Agreement report between the arc-based solution and the transcription.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n: usize,
    pub analytic_cost: f64,
    pub oracle_cost: f64,
    pub cost_gap_rel: f64,
    pub max_pos_dev: f64,
    pub max_speed_dev: f64,
    /// Fraction of control intervals whose binding-constraint family
    /// matches between the two methods.
    pub active_set_agreement: f64,
}

/// Compare an arc-based trajectory against a transcription optimum on the
/// transcription's own grid.
pub fn compare(traj: &Trajectory, qp: &TranscribedQP, sol: &QpSolution) -> ComparisonReport {
    let states = qp.states(&sol.x);
    let mut max_pos_dev: f64 = 0.0;
    let mut max_speed_dev: f64 = 0.0;
    for (k, &(pk, vk)) in states.iter().enumerate().skip(1) {
        let t = qp.t0 + k as f64 * qp.dt;
        if let Ok((p, v, _)) = traj.eval(t) {
            max_pos_dev = max_pos_dev.max((pk - p).abs());
            max_speed_dev = max_speed_dev.max((vk - v).abs());
        }
    }
    // Binding family per interval, from the QP active set…
    let mut qp_family = vec![Family::None; qp.n];
    for (id, &lam) in sol.active.iter().zip(sol.lambda.iter()) {
        if lam <= 1e-10 {
            continue;
        }
        let i = id.interval();
        if i >= qp.n {
            continue;
        }
        let fam = match id {
            ConstraintId::Safety(_) => Family::Safety,
            ConstraintId::UMin(_) | ConstraintId::UMax(_) => Family::Control,
            ConstraintId::VMin(_) | ConstraintId::VMax(_) => Family::Speed,
        };
        qp_family[i] = dominant(qp_family[i], fam);
    }
    // …and from the arc kinds at interval midpoints.
    let mut agree = 0usize;
    for (i, qp_fam) in qp_family.iter().enumerate() {
        let t_mid = qp.t0 + (i as f64 + 0.5) * qp.dt;
        let arc = traj
            .arcs
            .iter()
            .rev()
            .find(|arc| t_mid >= arc.t_enter - 1e-9)
            .unwrap_or(&traj.arcs[0]);
        let analytic = match arc.kind {
            crate::arcs::ArcKind::Unconstrained { .. } => Family::None,
            crate::arcs::ArcKind::SafetyConstrained => Family::Safety,
            crate::arcs::ArcKind::ControlSat { .. } => Family::Control,
            crate::arcs::ArcKind::SpeedSat { .. } => Family::Speed,
        };
        if analytic == *qp_fam {
            agree += 1;
        }
    }
    let cost_gap_rel = (sol.cost - traj.total_cost).abs() / traj.total_cost.abs().max(1e-12);
    ComparisonReport {
        n: qp.n,
        analytic_cost: traj.total_cost,
        oracle_cost: sol.cost,
        cost_gap_rel,
        max_pos_dev,
        max_speed_dev,
        active_set_agreement: agree as f64 / qp.n as f64,
    }
}

fn dominant(old: Family, new: Family) -> Family {
    let rank = |f: Family| match f {
        Family::Safety => 3,
        Family::Control => 2,
        Family::Speed => 1,
        Family::None => 0,
    };
    if rank(new) > rank(old) {
        new
    } else {
        old
    }
}
