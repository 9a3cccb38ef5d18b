//! Solve one scenario programmatically and walk its arc structure.
//!
//! Run with: cargo run --example quickstart

use zoneopt::domain::{BoundaryConditions, Scenario, VehicleParams};
use zoneopt::lead::LeadProfile;
use zoneopt::stitcher::solve_trajectory;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = Scenario {
        params: VehicleParams {
            gamma: 1.4,
            ..VehicleParams::default()
        },
        bc: BoundaryConditions {
            t0: 0.0,
            tf: 26.0,
            p0: 0.0,
            v0: 14.0,
            pf: 300.0,
        },
        lead: Some(LeadProfile::cruise(0.0, 20.0, 11.5)),
    };

    let sol = solve_trajectory(&scenario)?;
    println!(
        "feasible: {}, cost: {:.4}",
        sol.feasible, sol.trajectory.total_cost
    );
    for arc in &sol.trajectory.arcs {
        println!("{:?} on [{:.3}, {:.3}]", arc.kind, arc.t_enter, arc.t_exit);
    }

    let (p, v, u) = sol.trajectory.eval(13.0)?;
    println!("state at 13 s: p = {p:.2} m, v = {v:.2} m/s, u = {u:.3} m/s^2");
    Ok(())
}
