//! Canned driving cases and batch simulation on top of the solver.
//!
//! The presets cover the qualitative regimes the solver distinguishes: a
//! clear lane, a steady slower leader (boundary touch-and-release), a leader
//! whose speed dips inside the zone, and a leader braking hard enough that
//! the terminal position cannot be reached at all. `run_case` wraps one
//! solve into a serializable summary, optionally cross-checked against the
//! transcription oracle; `run_chain` strings solves into a platoon, each
//! vehicle following the realized trajectory of the one ahead.

use serde::Serialize;

use crate::domain::{BoundaryConditions, Scenario, VehicleParams};
use crate::lead::{from_follower_trajectory, LeadProfile};
use crate::oracle::{compare, solve_qp, transcribe, ComparisonReport, QpError};
use crate::stitcher::{solve_trajectory, MarginReport, Solution, SolveError};

/// Identifier for a canned driving case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseId {
    /// Clear lane: the unconstrained cubic is optimal.
    LeadFree,
    /// Steady slower leader: approach, ride the boundary, pull away.
    Case1,
    /// Slower leader accelerating gently out of the way.
    Case1Accel,
    /// Leader speeds up briefly, then eases off inside the zone.
    Case2,
    /// Leader brakes hard; the requested exit position becomes unreachable.
    Case3,
}

/// A named scenario with a one-line description.
#[derive(Debug, Clone)]
pub struct CasePreset {
    pub id: CaseId,
    pub name: &'static str,
    pub description: &'static str,
    pub scenario: Scenario,
}

fn common_bc() -> BoundaryConditions {
    BoundaryConditions {
        t0: 0.0,
        tf: 26.0,
        p0: 0.0,
        v0: 14.0,
        pf: 300.0,
    }
}

fn calibrated(gamma: f64, rho: f64) -> VehicleParams {
    VehicleParams {
        gamma,
        rho,
        ..VehicleParams::default()
    }
}

/// Look up one preset.
pub fn preset(id: CaseId) -> CasePreset {
    match id {
        CaseId::LeadFree => CasePreset {
            id,
            name: "lead-free",
            description: "clear lane; single unconstrained arc",
            scenario: Scenario {
                params: VehicleParams::default(),
                bc: common_bc(),
                lead: None,
            },
        },
        CaseId::Case1 => CasePreset {
            id,
            name: "case1",
            description: "steady slower leader 20 m ahead at 11.5 m/s",
            scenario: Scenario {
                params: calibrated(1.4, 1.2),
                bc: common_bc(),
                lead: Some(LeadProfile::cruise(0.0, 20.0, 11.5)),
            },
        },
        CaseId::Case1Accel => CasePreset {
            id,
            name: "case1-accel",
            description: "slower leader pulling away at 0.05 m/s^2",
            scenario: Scenario {
                params: calibrated(1.4, 1.2),
                bc: common_bc(),
                lead: Some(LeadProfile::constant_accel(0.0, 20.0, 11.5, 0.05)),
            },
        },
        CaseId::Case2 => CasePreset {
            id,
            name: "case2",
            description: "leader speeds up then eases off over the first 10 s",
            scenario: Scenario {
                params: calibrated(1.4, 1.2),
                bc: common_bc(),
                lead: Some(LeadProfile::linear_accel(0.0, 20.0, 11.5, 0.06, -0.012, 10.0)),
            },
        },
        CaseId::Case3 => CasePreset {
            id,
            name: "case3",
            description: "leader brakes hard; terminal position unreachable",
            scenario: Scenario {
                params: calibrated(1.2, 1.2),
                bc: common_bc(),
                lead: Some(LeadProfile::linear_accel(0.0, 20.0, 11.5, -0.5, 0.05, 26.0)),
            },
        },
    }
}

/// All presets, in menu order.
pub fn all_presets() -> Vec<CasePreset> {
    [
        CaseId::LeadFree,
        CaseId::Case1,
        CaseId::Case1Accel,
        CaseId::Case2,
        CaseId::Case3,
    ]
    .into_iter()
    .map(preset)
    .collect()
}

/// Resolve a preset by CLI name. Accepts `_` for `-`.
pub fn preset_by_name(name: &str) -> Option<CasePreset> {
    let canon = name.replace('_', "-");
    all_presets().into_iter().find(|p| p.name == canon)
}

/// Knobs for `run_case`.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub oracle: bool,
    pub oracle_n: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            oracle: false,
            oracle_n: 2600,
        }
    }
}

/// One arc in a summary, by label and time span.
#[derive(Debug, Clone, Serialize)]
pub struct ArcSummary {
    pub kind: String,
    pub t_enter: f64,
    pub t_exit: f64,
}

/// One junction in a summary.
#[derive(Debug, Clone, Serialize)]
pub struct JunctionSummary {
    pub time: f64,
    pub from: String,
    pub to: String,
    pub control_jump: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<f64>,
}

/// Oracle cross-check outcome attached to a summary.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OracleBlock {
    Compared {
        #[serde(flatten)]
        report: ComparisonReport,
    },
    Infeasible {
        certificate: String,
    },
    Failed {
        error: String,
    },
}

/// Serializable record of one solve.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRecord {
    pub name: String,
    pub scenario: Scenario,
    pub arcs: Vec<ArcSummary>,
    pub junctions: Vec<JunctionSummary>,
    pub total_cost: f64,
    pub min_margins: MarginReport,
    pub feasible: bool,
    pub terminal_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleBlock>,
}

/// A solve plus its summary.
#[derive(Debug, Clone)]
pub struct CaseRun {
    pub solution: Solution,
    pub summary: SummaryRecord,
}

/// Solve one scenario and package the outcome.
pub fn run_case(name: &str, scenario: &Scenario, opts: &RunOptions) -> Result<CaseRun, SolveError> {
    let solution = solve_trajectory(scenario)?;
    let traj = &solution.trajectory;
    let arcs = traj
        .arcs
        .iter()
        .map(|a| ArcSummary {
            kind: a.kind.label().to_string(),
            t_enter: a.t_enter,
            t_exit: a.t_exit,
        })
        .collect();
    let junctions = traj
        .junctions
        .iter()
        .map(|j| JunctionSummary {
            time: j.time,
            from: j.from_kind.label().to_string(),
            to: j.to_kind.label().to_string(),
            control_jump: j.control_jump,
            pi: j.pi,
        })
        .collect();
    let oracle = if opts.oracle {
        Some(run_oracle(traj, scenario, opts.oracle_n))
    } else {
        None
    };
    let summary = SummaryRecord {
        name: name.to_string(),
        scenario: scenario.clone(),
        arcs,
        junctions,
        total_cost: traj.total_cost,
        min_margins: traj.min_margins(1e-3),
        feasible: solution.feasible,
        terminal_residual: solution.terminal_residual,
        failure: solution.failure.clone(),
        oracle,
    };
    Ok(CaseRun { solution, summary })
}

fn run_oracle(
    traj: &crate::stitcher::Trajectory,
    scenario: &Scenario,
    n: usize,
) -> OracleBlock {
    match transcribe(scenario, n) {
        Ok(qp) => match solve_qp(&qp) {
            Ok(sol) => OracleBlock::Compared {
                report: compare(traj, &qp, &sol),
            },
            Err(QpError::Infeasible { certificate }) => OracleBlock::Infeasible { certificate },
            Err(e) => OracleBlock::Failed {
                error: e.to_string(),
            },
        },
        Err(e) => OracleBlock::Failed {
            error: e.to_string(),
        },
    }
}

/// Solve a platoon in file order: each vehicle after the first follows the
/// realized trajectory of its predecessor (the predecessor's own scenario
/// lead is replaced). A failed solve leaves the next vehicle with the lead
/// its scenario already declares, and the chain continues.
pub fn run_chain(
    scenarios: &[Scenario],
    opts: &RunOptions,
) -> Vec<Result<CaseRun, SolveError>> {
    let mut out = Vec::with_capacity(scenarios.len());
    let mut realized: Option<LeadProfile> = None;
    for (i, given) in scenarios.iter().enumerate() {
        let mut scenario = given.clone();
        if i > 0 {
            if let Some(lead) = realized.take() {
                scenario.lead = Some(lead);
            }
        }
        let name = format!("vehicle-{i}");
        let result = run_case(&name, &scenario, opts);
        realized = match &result {
            Ok(run) => Some(from_follower_trajectory(&run.solution.trajectory)),
            Err(_) => None,
        };
        out.push(result);
    }
    out
}
