//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 infeasible problem, 2 usage or input error, 3 numerical or
//! solver failure. `MFSB_LOG` (error, info, debug) sets the log level.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::conic::Tolerances;
use crate::error::{Error, Result};
use crate::gaussmix::{Gaussian, GaussianMixture};
use crate::meanfield::{solve, Scenario, SolverOptions};
use crate::scenario_io::{
    parse_scenario, read_results, read_summary, write_manifest, write_results, write_summary, write_trajectories,
    GapSummary, SimulationSummary, Summary,
};
use crate::sim::{estimate_bound_check, estimate_metrics, simulate_swarm};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mfsb", version, about = "Mean-field Schrödinger bridges between Gaussian mixtures")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a scenario and write a result bundle.
    ///
    /// Without obstacles the mean-field decomposition is used; with obstacles the plan and
    /// the coupled policy program are alternated. The bundle holds summary.json, plan.csv
    /// (i,j,route,lambda,cost), policies/pair_I_J_R.csv (t, K row-major, v, mu, Sigma lower
    /// triangle), flow/knot_KKKK.csv, meanfield.csv, iterations.csv, scenario.json and
    /// manifest.json (SHA-256 of every file).
    Solve(SolveArgs),
    /// Simulate a swarm under a solved policy and add the metrics to the bundle.
    ///
    /// Writes trajectories.csv (knot,time,agent,x...,u...) for every THIN-th agent.
    Simulate(SimulateArgs),
    /// Estimate the tightness gap of a solved policy by Monte Carlo.
    Gap(GapArgs),
    /// Scale the component means of a scenario and report gap / bound per scale.
    SeparationStudy(SeparationArgs),
    /// Print the summary table of a bundle.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Knot count; overrides the scenario's grid (101 when the file has none).
    #[arg(long)]
    knots: Option<usize>,
    /// Conic solver tolerance (primal, dual and gap).
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Cap on plan/policy alternations.
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    /// Record wall-clock timings in summary.json (breaks byte-identical reruns).
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON file; its grid is replaced by the solution's.
    #[arg(long)]
    scenario: PathBuf,
    /// Bundle directory written by `solve`.
    #[arg(long)]
    solution: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    agents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Export every THIN-th agent to trajectories.csv.
    #[arg(long, default_value_t = 100)]
    thin: usize,
}

#[derive(Debug, Args)]
struct GapArgs {
    /// Bundle directory written by `solve`.
    #[arg(long)]
    solution: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SeparationArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated mean scales.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    scales: Vec<f64>,
    #[arg(long)]
    knots: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write separation.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible(_) | Error::Controllability(_) => EXIT_INFEASIBLE,
        Error::Solver { status, .. } if status == "infeasible" => EXIT_INFEASIBLE,
        Error::Config(_)
        | Error::Dimension { .. }
        | Error::Ordering { .. }
        | Error::Input(_)
        | Error::Lookup(_)
        | Error::Schema { .. }
        | Error::Io { .. } => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MFSB_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_NUMERICAL;
        }
    };
    let stdout = std::io::stdout();
    match pool.install(|| dispatch(cli.command, &mut stdout.lock())) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Solve(a) => cmd_solve(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Gap(a) => cmd_gap(a, out),
        Command::SeparationStudy(a) => cmd_separation(a, out),
        Command::Report(a) => cmd_report(&a.out, out),
    }
}

fn options(tol: f64, max_iterations: usize) -> Result<SolverOptions> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Input(format!("--tol must be in (0, 1), got {tol}")));
    }
    if max_iterations == 0 {
        return Err(Error::Input("--max-iters must be positive".into()));
    }
    Ok(SolverOptions {
        tolerances: Tolerances::uniform(tol),
        max_iterations,
        ..SolverOptions::default()
    })
}

fn load_scenario(path: &Path, knots: Option<usize>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let has_grid = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .is_some_and(|v| v.get("grid").is_some());
    let knots = knots.or(if has_grid { None } else { Some(101) });
    parse_scenario(path, knots)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn cmd_solve(a: SolveArgs, out: &mut dyn Write) -> Result<()> {
    let opts = options(a.tol, a.max_iters)?;
    let start = Instant::now();
    let scn = load_scenario(&a.scenario, a.knots)?;
    let parsed = start.elapsed().as_secs_f64();
    let result = solve(&scn, &opts)?;
    let solved = start.elapsed().as_secs_f64();
    let timings = a.timings.then(|| BTreeMap::from([("parse".to_string(), parsed), ("solve".to_string(), solved - parsed)]));
    write_results(&a.out, &scn, &result, timings)?;
    writeln!(
        out,
        "status {}  cost upper bound {:.6}  active pairs {}  iterations {}",
        result.status,
        result.solution.bound(),
        result.solution.active_count(),
        result.iterations.len().saturating_sub(1)
    )
    .map_err(io_err(&a.out))?;
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let bundle = read_results(&a.solution)?;
    let knots = bundle.scenario.grid.len();
    let scn = parse_scenario(&a.scenario, Some(knots))?;
    if scn.sys.n() != bundle.scenario.sys.n() || scn.rho1.len() != bundle.scenario.rho1.len() {
        return Err(Error::Input(format!(
            "scenario {} does not match the solution in {}",
            a.scenario.display(),
            a.solution.display()
        )));
    }
    let run = simulate_swarm(&scn, &bundle.solution, a.agents, a.seed)?;
    let metrics = estimate_metrics(&run, &scn)?;
    let check = estimate_bound_check(&metrics, &bundle.solution);
    write_trajectories(&a.solution, &run, &scn, a.thin)?;
    let summary = Summary {
        simulation: Some(SimulationSummary {
            agents: a.agents,
            seed: a.seed,
            total_cost: metrics.cost,
            total_cost_std_error: metrics.cost_std_error,
            max_violation: metrics.max_violation,
            max_violation_std_error: metrics.violation_std_error(a.agents),
            bound_holds: check.holds,
            terminal_mean_error: metrics.terminal_mean_error.clone(),
            terminal_frequency: metrics.terminal_frequency.clone(),
        }),
        ..bundle.summary
    };
    write_summary(&a.solution, &summary)?;
    write_manifest(&a.solution)?;
    writeln!(
        out,
        "realized cost {:.6} ± {:.6}  bound {:.6}  bound holds {}  max violation {:.4}",
        check.realized, check.std_error, check.bound, check.holds, metrics.max_violation
    )
    .map_err(io_err(&a.solution))?;
    Ok(())
}

fn cmd_gap(a: GapArgs, out: &mut dyn Write) -> Result<()> {
    let bundle = read_results(&a.solution)?;
    let est = bundle.solution.bound_and_gap(a.samples, a.seed)?;
    let summary = Summary {
        gap: Some(GapSummary {
            samples: a.samples,
            seed: a.seed,
            gap: est.gap,
            std_error: est.std_error,
            mixture_cost: est.mixture_cost(),
        }),
        ..bundle.summary
    };
    write_summary(&a.solution, &summary)?;
    write_manifest(&a.solution)?;
    writeln!(
        out,
        "bound {:.6}  gap {:.6} ± {:.6}  mixture cost {:.6}",
        est.bound,
        est.gap,
        est.std_error,
        est.mixture_cost()
    )
    .map_err(io_err(&a.solution))?;
    Ok(())
}

/// Multiplies every component mean by `scale`.
pub fn scale_means(scn: &Scenario, scale: f64) -> Result<Scenario> {
    let scaled = |rho: &GaussianMixture| -> Result<GaussianMixture> {
        let comps = rho
            .components()
            .iter()
            .map(|g| Gaussian::new(g.mean() * scale, g.cov().clone()))
            .collect::<Result<_>>()?;
        GaussianMixture::new(rho.weights().to_vec(), comps)
    };
    let mut out = scn.clone();
    out.rho0 = scaled(&scn.rho0)?;
    out.rho1 = scaled(&scn.rho1)?;
    out.validate()?;
    Ok(out)
}

fn cmd_separation(a: SeparationArgs, out: &mut dyn Write) -> Result<()> {
    let opts = options(a.tol, 20)?;
    let base = load_scenario(&a.scenario, a.knots)?;
    let mut rows = Vec::new();
    for &s in &a.scales {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Input(format!("scale {s} must be positive")));
        }
        let result = solve(&scale_means(&base, s)?, &opts)?;
        let est = result.solution.bound_and_gap(a.samples, a.seed)?;
        rows.push((s, est));
    }
    let mut text = String::from("scale,bound,gap,gap_std_error,ratio\n");
    for (s, e) in &rows {
        text += &format!("{s:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n", e.bound, e.gap, e.std_error, e.gap / e.bound);
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("separation.csv");
        std::fs::write(&path, &text).map_err(io_err(&path))?;
    }
    let mut table = format!("{:>8} {:>14} {:>14} {:>12}\n", "scale", "bound", "gap", "gap/bound");
    for (s, e) in &rows {
        table += &format!("{s:>8} {:>14.6} {:>14.6e} {:>12.4e}\n", e.bound, e.gap, e.gap / e.bound);
    }
    out.write_all(table.as_bytes()).map_err(io_err(&a.scenario))
}

/// Plain-text summary table of a bundle.
pub fn render_report(summary: &Summary) -> String {
    let mut rows: Vec<(&str, String)> = vec![
        ("Status", summary.status.clone()),
        ("Cost Upper Bound", format!("{:.2}", summary.cost_upper_bound)),
    ];
    match &summary.simulation {
        Some(s) => {
            rows.push(("Total Cost J", format!("{:.2} ± {:.2}", s.total_cost, s.total_cost_std_error)));
            rows.push(("max_t P(x_t not in X)", format!("{:.2} %", 100.0 * s.max_violation)));
            rows.push(("Agents", s.agents.to_string()));
            rows.push(("Bound holds", s.bound_holds.to_string()));
        }
        None => rows.push(("Total Cost J", "not simulated".into())),
    }
    rows.push(("Predicted max violation", format!("{:.2} %", 100.0 * summary.predicted_max_violation)));
    if let Some(g) = &summary.gap {
        rows.push(("Tightness gap", format!("{:.4} ± {:.4}", g.gap, g.std_error)));
        rows.push(("Mixture cost", format!("{:.2}", g.mixture_cost)));
    }
    rows.push(("Knots", summary.knots.to_string()));
    rows.push(("Iterations", summary.iterations.to_string()));
    rows.push(("Active pairs", summary.active_pairs.to_string()));
    let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<width$}  {v}\n"))
        .collect()
}

fn cmd_report(dir: &Path, out: &mut dyn Write) -> Result<()> {
    let summary = read_summary(dir)?;
    out.write_all(render_report(&summary).as_bytes()).map_err(io_err(dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        run(std::iter::once("mfsb").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(code(&["solve", "--bogus"]), EXIT_USAGE);
        assert_eq!(code(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(code(&["solve", "--scenario", "/nonexistent.json", "--out", "/tmp/x"]), EXIT_USAGE);
        assert_eq!(code(&["--help"]), EXIT_OK);
        assert_eq!(code(&["solve", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Infeasible("x".into())), EXIT_INFEASIBLE);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Schema { path: "system.B".into(), message: "missing".into() }), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Divergence { knot: 3, agent: 1 }), EXIT_NUMERICAL);
    }

    #[test]
    fn report_mirrors_table_rows() {
        let summary = Summary {
            status: "converged".into(),
            cost_upper_bound: 306.08,
            knots: 51,
            iterations: 3,
            active_pairs: 2,
            predicted_max_violation: 0.006,
            simulation: Some(SimulationSummary {
                agents: 10_000,
                seed: 1,
                total_cost: 153.89,
                total_cost_std_error: 0.5,
                max_violation: 0.003,
                max_violation_std_error: 0.0005,
                bound_holds: true,
                terminal_mean_error: vec![0.01],
                terminal_frequency: vec![1.0],
            }),
            gap: None,
            timings: None,
        };
        let text = render_report(&summary);
        for label in ["Total Cost J", "Cost Upper Bound", "max_t P(x_t not in X)"] {
            assert!(text.contains(label), "{text}");
        }
        assert!(text.contains("0.30 %"));
    }
}
