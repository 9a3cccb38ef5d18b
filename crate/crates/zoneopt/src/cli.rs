//! Command-line front end: solve presets or scenario files, export
//! trajectories as CSV, and emit JSON run summaries.
//!
//! Exit codes: 0 on success, 1 when any solve fails or ends best-effort,
//! 2 on bad input (unknown preset, malformed scenario file, invalid
//! parameters), 3 when writing an output file fails.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::domain::{validate_scenario, Scenario, VehicleParams};
use crate::sim::{all_presets, preset_by_name, run_case, CaseRun, RunOptions};
use crate::stitcher::{Side, SolveError, Trajectory};

#[derive(Parser)]
#[command(
    name = "zoneopt",
    version,
    about = "Energy-optimal vehicle trajectories through a control zone"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one preset or scenario file, or every scenario in a directory
    Solve(SolveArgs),
    /// List the built-in presets
    Presets,
}

#[derive(Args)]
struct SolveArgs {
    /// Preset name (see `presets`) or path to a scenario JSON file
    target: Option<String>,
    /// Solve every *.json file in this directory as independent runs
    #[arg(long, conflicts_with = "target", value_name = "DIR")]
    batch: Option<PathBuf>,
    /// Output directory for CSV and summary files
    #[arg(long, default_value = ".", value_name = "DIR")]
    out: PathBuf,
    /// Sampling step for the exported trajectory [s]
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Cross-check the solution against the transcription oracle
    #[arg(long)]
    oracle: bool,
    /// Number of transcription steps for the oracle
    #[arg(long, default_value_t = 2600, value_name = "N")]
    oracle_n: usize,
    /// Override the following-distance offset
    #[arg(long, value_name = "F")]
    gamma: Option<f64>,
    /// Override the following-distance slope
    #[arg(long, value_name = "F")]
    rho: Option<f64>,
    /// Override the headway scale
    #[arg(long, value_name = "F")]
    xi: Option<f64>,
    /// Override the minimum speed
    #[arg(long, value_name = "F")]
    vmin: Option<f64>,
    /// Override the maximum speed
    #[arg(long, value_name = "F")]
    vmax: Option<f64>,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_error = e.use_stderr();
            let _ = e.print();
            return if is_error { 2 } else { 0 };
        }
    };
    match cli.command {
        Command::Presets => {
            for p in all_presets() {
                println!("{:<12} {}", p.name, p.description);
            }
            0
        }
        Command::Solve(args) => run_solve(&args),
    }
}

fn run_solve(args: &SolveArgs) -> i32 {
    if !(args.dt > 0.0) {
        eprintln!("error: --dt must be positive");
        return 2;
    }
    let mut jobs: Vec<(String, Scenario)> = match gather_jobs(args) {
        Ok(jobs) => jobs,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    for (name, scenario) in &mut jobs {
        apply_overrides(&mut scenario.params, args);
        let errors = validate_scenario(scenario);
        if !errors.is_empty() {
            for e in errors {
                eprintln!("error: {name}: {e}");
            }
            return 2;
        }
    }
    if let Err(e) = fs::create_dir_all(&args.out) {
        eprintln!("error: cannot create {}: {e}", args.out.display());
        return 3;
    }
    let opts = RunOptions {
        oracle: args.oracle,
        oracle_n: args.oracle_n,
    };
    let results = run_jobs(&jobs, &opts);
    let mut worst = 0;
    for (name, result) in results {
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                eprintln!("error: {name}: {e}");
                worst = worst.max(1);
                continue;
            }
        };
        let csv_path = args.out.join(format!("{name}.csv"));
        let summary_path = args.out.join(format!("{name}_summary.json"));
        if let Err(e) = export_trajectory(&run.solution.trajectory, &csv_path, args.dt) {
            eprintln!("error: cannot write {}: {e}", csv_path.display());
            return 3;
        }
        if let Err(e) = emit_summary(&run.summary, &summary_path) {
            eprintln!("error: cannot write {}: {e}", summary_path.display());
            return 3;
        }
        let shape = run
            .summary
            .arcs
            .iter()
            .map(|a| a.kind.as_str())
            .collect::<Vec<_>>()
            .join(" -> ");
        if run.summary.feasible {
            println!(
                "{name}: [{shape}], cost {:.4} — wrote {} and {}",
                run.summary.total_cost,
                csv_path.display(),
                summary_path.display()
            );
        } else {
            println!(
                "{name}: best effort [{shape}], terminal residual {:.2} m ({}) — wrote {} and {}",
                run.summary.terminal_residual,
                run.summary.failure.as_deref().unwrap_or("infeasible"),
                csv_path.display(),
                summary_path.display()
            );
            worst = worst.max(1);
        }
    }
    worst
}

type JobResult = (String, Result<CaseRun, SolveError>);

/// Run every job and return the results in input order. Jobs are independent
/// of one another, so they are distributed over a small thread pool; output
/// files and status lines still follow the (sorted) input order.
fn run_jobs(jobs: &[(String, Scenario)], opts: &RunOptions) -> Vec<JobResult> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<JobResult>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, scenario)) = jobs.get(i) else {
                    break;
                };
                let result = run_case(name, scenario, opts);
                slots.lock().unwrap()[i] = Some((name.clone(), result));
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every job index was claimed by a worker"))
        .collect()
}

fn gather_jobs(args: &SolveArgs) -> Result<Vec<(String, Scenario)>, String> {
    if let Some(dir) = &args.batch {
        let entries = fs::read_dir(dir)
            .map_err(|e| format!("cannot read batch directory {}: {e}", dir.display()))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(format!(
                "no *.json scenario files in {}",
                dir.display()
            ));
        }
        files
            .iter()
            .map(|f| Ok((stem(f), load_scenario(f)?)))
            .collect()
    } else if let Some(target) = &args.target {
        if let Some(p) = preset_by_name(target) {
            Ok(vec![(p.name.to_string(), p.scenario)])
        } else if Path::new(target).exists() {
            let path = Path::new(target);
            Ok(vec![(stem(path), load_scenario(path)?)])
        } else {
            Err(format!(
                "`{target}` is neither a preset ({}) nor an existing scenario file",
                all_presets()
                    .iter()
                    .map(|p| p.name)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        }
    } else {
        Err("give a preset name, a scenario file, or --batch DIR".into())
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

fn apply_overrides(params: &mut VehicleParams, args: &SolveArgs) {
    if let Some(g) = args.gamma {
        params.gamma = g;
    }
    if let Some(r) = args.rho {
        params.rho = r;
    }
    if let Some(x) = args.xi {
        params.xi = x;
    }
    if let Some(v) = args.vmin {
        params.v_min = v;
    }
    if let Some(v) = args.vmax {
        params.v_max = v;
    }
}

/// Read a scenario from a JSON file. Error strings name the offending file
/// and, for malformed content, the missing or unexpected field.
pub fn load_scenario(path: &Path) -> Result<Scenario, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read scenario file {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("scenario file {}: {e}", path.display()))
}

/// Write the sampled trajectory as CSV. Junction times appear twice, once
/// per side, so discontinuous columns (control, arc kind) are captured
/// exactly; columns without a lead hold `NA`.
pub fn export_trajectory(traj: &Trajectory, path: &Path, dt: f64) -> io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_csv(traj, dt, &mut w)?;
    w.flush()
}

fn write_csv<W: Write>(traj: &Trajectory, dt: f64, w: &mut W) -> io::Result<()> {
    writeln!(w, "t,p,v,u,s,delta,arc_kind,lead_p,lead_v")?;
    let (t0, tf) = (traj.t0(), traj.tf());
    let junctions: Vec<f64> = traj.junctions.iter().map(|j| j.time).collect();
    let mut rows: Vec<(f64, Side)> = Vec::new();
    let steps = ((tf - t0) / dt).ceil() as usize;
    let mut prev = f64::NEG_INFINITY;
    for k in 0..=steps {
        let t = (t0 + k as f64 * dt).min(tf);
        if t <= prev {
            continue;
        }
        prev = t;
        if !junctions.iter().any(|&tau| (tau - t).abs() < 1e-9) {
            rows.push((t, Side::Plus));
        }
    }
    for &tau in &junctions {
        rows.push((tau, Side::Minus));
        rows.push((tau, Side::Plus));
    }
    rows.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then_with(|| side_order(a.1).cmp(&side_order(b.1)))
    });
    let params = &traj.scenario.params;
    let lead = traj.scenario.lead.as_ref();
    for (t, side) in rows {
        let (p, v, u) = traj
            .eval_side(t, side)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let kind = traj.arc_at(t, side).kind.label();
        match lead {
            Some(l) => {
                let (pk, vk, _) = l.eval(t);
                let s = params.xi * (pk - p);
                let delta = params.safe_distance(v);
                writeln!(w, "{t},{p},{v},{u},{s},{delta},{kind},{pk},{vk}")?;
            }
            None => writeln!(w, "{t},{p},{v},{u},NA,NA,{kind},NA,NA")?,
        }
    }
    Ok(())
}

/// Write a run summary as pretty-printed JSON.
pub fn emit_summary(summary: &crate::sim::SummaryRecord, path: &Path) -> io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, summary)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    writeln!(w)?;
    w.flush()
}

fn side_order(side: Side) -> u8 {
    match side {
        Side::Minus => 0,
        Side::Plus => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{preset, CaseId};

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("zoneopt-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn load_error_names_the_missing_field() {
        let dir = tmp_dir("load");
        let path = dir.join("broken.json");
        fs::write(&path, r#"{"bc": {"t0": 0.0, "tf": 26.0, "p0": 0.0, "v0": 14.0}}"#).unwrap();
        let err = load_scenario(&path).unwrap_err();
        assert!(err.contains("pf"), "error should name the field: {err}");
        assert!(err.contains("broken.json"));
    }

    #[test]
    fn scenario_json_round_trips() {
        let dir = tmp_dir("roundtrip");
        let scenario = preset(CaseId::Case2).scenario;
        let path = dir.join("case2.json");
        fs::write(&path, serde_json::to_string_pretty(&scenario).unwrap()).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded, scenario);
    }

    #[test]
    fn minimal_scenario_file_gets_default_params() {
        let dir = tmp_dir("defaults");
        let path = dir.join("minimal.json");
        fs::write(
            &path,
            r#"{"bc": {"t0": 0.0, "tf": 26.0, "p0": 0.0, "v0": 14.0, "pf": 300.0}}"#,
        )
        .unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded.params, VehicleParams::default());
        assert!(loaded.lead.is_none());
    }

    #[test]
    fn partial_params_keep_defaults_for_omitted_fields() {
        let dir = tmp_dir("partial");
        let path = dir.join("partial.json");
        fs::write(
            &path,
            r#"{"params": {"gamma": 1.4, "rho": 1.3},
                "bc": {"t0": 0.0, "tf": 26.0, "p0": 0.0, "v0": 14.0, "pf": 300.0}}"#,
        )
        .unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded.params.gamma, 1.4);
        assert_eq!(loaded.params.rho, 1.3);
        assert_eq!(loaded.params.u_min, VehicleParams::default().u_min);
        assert_eq!(loaded.params.v_max, VehicleParams::default().v_max);
    }

    #[test]
    fn csv_duplicates_junction_times_and_keeps_grid_sorted() {
        let p = preset(CaseId::Case1);
        let run = run_case(p.name, &p.scenario, &RunOptions::default()).unwrap();
        let dir = tmp_dir("csv");
        let path = dir.join("case1.csv");
        export_trajectory(&run.solution.trajectory, &path, 0.5).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,p,v,u,s,delta,arc_kind,lead_p,lead_v");
        let rows: Vec<Vec<String>> = lines
            .map(|l| l.split(',').map(|c| c.to_string()).collect())
            .collect();
        let times: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(times[0], 0.0);
        assert_eq!(*times.last().unwrap(), 26.0);
        assert!(times.windows(2).all(|w| w[1] >= w[0]));
        // Each junction time appears exactly twice, with the arc kind
        // switching between the two rows.
        for j in &run.solution.trajectory.junctions {
            let dup: Vec<&Vec<String>> = rows
                .iter()
                .filter(|r| (r[0].parse::<f64>().unwrap() - j.time).abs() < 1e-12)
                .collect();
            assert_eq!(dup.len(), 2, "junction at {} not duplicated", j.time);
            assert_ne!(dup[0][6], dup[1][6]);
        }
        // On safety rows the headway equals the safe distance.
        for r in &rows {
            if r[6] == "safety" {
                let s: f64 = r[4].parse().unwrap();
                let delta: f64 = r[5].parse().unwrap();
                assert!((s - delta).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lead_free_csv_uses_na_sentinels() {
        let p = preset(CaseId::LeadFree);
        let run = run_case(p.name, &p.scenario, &RunOptions::default()).unwrap();
        let dir = tmp_dir("na");
        let path = dir.join("lead-free.csv");
        export_trajectory(&run.solution.trajectory, &path, 1.0).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(&cols[4..6], ["NA", "NA"]);
            assert_eq!(&cols[7..9], ["NA", "NA"]);
        }
    }

    #[test]
    fn batch_runs_each_file_independently() {
        let dir = tmp_dir("batch");
        let batch = dir.join("in");
        fs::create_dir_all(&batch).unwrap();
        let first = preset(CaseId::LeadFree).scenario;
        let second = preset(CaseId::Case1).scenario;
        fs::write(
            batch.join("a_first.json"),
            serde_json::to_string(&first).unwrap(),
        )
        .unwrap();
        fs::write(
            batch.join("b_second.json"),
            serde_json::to_string(&second).unwrap(),
        )
        .unwrap();
        let out = dir.join("out");
        let args = SolveArgs {
            target: None,
            batch: Some(batch),
            out: out.clone(),
            dt: 0.5,
            oracle: false,
            oracle_n: 2600,
            gamma: None,
            rho: None,
            xi: None,
            vmin: None,
            vmax: None,
        };
        assert_eq!(run_solve(&args), 0);
        for name in ["a_first", "b_second"] {
            assert!(out.join(format!("{name}.csv")).exists());
            assert!(out.join(format!("{name}_summary.json")).exists());
        }
        // Each summary echoes the scenario exactly as its own file states
        // it: no run feeds its output into another run's input.
        let text = fs::read_to_string(out.join("b_second_summary.json")).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["name"], "b_second");
        let echoed: Scenario = serde_json::from_value(value["scenario"].clone()).unwrap();
        assert_eq!(echoed, second);
    }

    #[test]
    fn summary_json_is_valid_and_echoes_the_scenario() {
        let p = preset(CaseId::Case1);
        let run = run_case(p.name, &p.scenario, &RunOptions::default()).unwrap();
        let dir = tmp_dir("summary");
        let path = dir.join("case1_summary.json");
        emit_summary(&run.summary, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["name"], "case1");
        assert_eq!(value["feasible"], true);
        assert_eq!(value["arcs"].as_array().unwrap().len(), 3);
        let echoed: Scenario = serde_json::from_value(value["scenario"].clone()).unwrap();
        assert_eq!(echoed, p.scenario);
    }
}
