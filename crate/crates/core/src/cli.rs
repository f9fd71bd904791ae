//! Command-line front end: `solve`, `compare` and `simulate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backward::{period_duals_at, ValueFunctionStack};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::oracle::{repeated_myerson_revenue, solve_full_history_lp};
use crate::period::{payments_from_solution, period_checks};
use crate::simulator::{simulate_with_trace, MechanismPolicy, SimMode};
use crate::virtual_values::{check_maximizer, compute_virtual_values, ironing_report, to_csv, VirtualValueTable};
use crate::xi::{optimize_xi_with, XiOptimization, XiOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Tolerance for the ordering checks between solver, oracle and benchmark.
pub const ORDER_TOL: f64 = 1e-6;
const PERIOD_TOL: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "dynauc", version, about = "Revenue-optimal dynamic auctions with bank account mechanisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimise the promises, fit the value functions and report the revenue interval.
    Solve(SolveArgs),
    /// Compare the solver with the full-history oracle and repeated static auctions.
    Compare(RunConfig),
    /// Run a solved policy forward and check its incentive and balance properties.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunConfig {
    /// Instance JSON file.
    pub instance: PathBuf,
    /// Target multiplicative approximation, in (0, 1).
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Per-stage tolerance override (default epsilon / 2T).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Cap on promise ascent steps.
    #[arg(long, default_value_t = 100)]
    pub xi_steps: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    config: RunConfig,
    /// Also solve the full-history oracle and the repeated static benchmark.
    #[arg(long)]
    oracle: bool,
    /// Write the fitted value-function stack here.
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Write the virtual-value tables here as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the promise-search trace here as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    config: RunConfig,
    /// Previously written stack JSON.
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Solve the instance first instead of loading a stack.
    #[arg(long)]
    solve_inline: bool,
    /// Sample this many paths instead of enumerating all of them.
    #[arg(long)]
    paths: Option<usize>,
    /// Write one CSV row per simulated path here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Parses the arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Solve(a) => cmd_solve(&a.config, a.oracle, a.stack.as_deref(), a.csv.as_deref(), a.trace.as_deref()),
        Command::Compare(c) => cmd_compare(&c),
        Command::Simulate(a) => {
            cmd_simulate(&a.config, a.stack.as_deref(), a.solve_inline, a.paths, a.csv.as_deref())
        }
    };
    match outcome {
        Ok(passed) if passed => EXIT_OK,
        Ok(_) => EXIT_CHECK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Input(_) | Error::Json(_) | Error::Io(_) => EXIT_INPUT,
        _ => EXIT_SOLVER,
    }
}

fn read_instance(path: &Path) -> Result<Instance> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read instance {}: {e}", path.display())))?;
    Instance::from_json(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn check_config(config: &RunConfig) -> Result<()> {
    if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
        return Err(Error::Input(format!("epsilon must lie in (0, 1), got {}", config.epsilon)));
    }
    if let Some(k) = config.kappa {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Input(format!("kappa must be positive, got {k}")));
        }
    }
    Ok(())
}

fn optimise(instance: &Instance, config: &RunConfig) -> Result<XiOptimization> {
    let mut opts = XiOptions::new(config.epsilon);
    opts.kappa = config.kappa;
    opts.max_steps = config.xi_steps;
    optimize_xi_with(instance, &opts)
}

#[derive(Serialize)]
struct StageSummary {
    t: usize,
    lower_pieces: usize,
    upper_pieces: usize,
    max_gap: f64,
    target_gap: f64,
    samples: usize,
    converged: bool,
}

#[derive(Serialize, Default)]
struct SolveChecks {
    periods_checked: usize,
    maximizer_violations: usize,
    max_stationarity: f64,
    max_complementary_slackness: f64,
    ironing_failures: usize,
    ironed_periods: usize,
    max_ic: f64,
    max_bi: f64,
    max_bu: f64,
    max_revenue_identity: f64,
    promise_optimality: bool,
    max_promise_violation: f64,
    stages_converged: bool,
    oracle_contained: Option<bool>,
    passed: bool,
}

#[derive(Serialize)]
struct OracleSummary {
    revenue: Option<f64>,
    repeated_myerson: f64,
    note: Option<String>,
}

#[derive(Serialize)]
struct Counters {
    lp_solves: usize,
    simplex_pivots: usize,
    promise_evaluations: usize,
}

#[derive(Serialize)]
struct SolveReport {
    command: &'static str,
    buyers: usize,
    horizon: usize,
    epsilon: f64,
    kappa: f64,
    revenue_interval: [f64; 2],
    width: f64,
    xi: Vec<Vec<Vec<f64>>>,
    promise_search_converged: bool,
    warnings: Vec<String>,
    stages: Vec<StageSummary>,
    checks: SolveChecks,
    oracle: Option<OracleSummary>,
    timings: Counters,
    virtual_values: Vec<VirtualValueTable>,
}

fn cmd_solve(
    config: &RunConfig,
    with_oracle: bool,
    stack_out: Option<&Path>,
    csv_out: Option<&Path>,
    trace_out: Option<&Path>,
) -> Result<bool> {
    check_config(config)?;
    let instance = read_instance(&config.instance)?;
    let out = optimise(&instance, config)?;
    let stack = &out.stack;

    let mut checks = SolveChecks { stages_converged: stack.converged(), ..Default::default() };
    let mut tables = Vec::new();
    for (t0, per) in out.gradient.balances.iter().enumerate() {
        for (b, _) in per {
            let sol = period_duals_at(stack, &instance, &out.xi, t0 + 1, b)?;
            let table = compute_virtual_values(&sol);
            let maxim = check_maximizer(&sol, &table);
            let iron = ironing_report(&sol, &table);
            let pc = period_checks(&sol, &payments_from_solution(&sol, out.xi.slice(t0 + 1)));
            checks.periods_checked += 1;
            checks.maximizer_violations += maxim.violations.len();
            checks.max_stationarity = checks.max_stationarity.max(maxim.stationarity);
            checks.max_complementary_slackness =
                checks.max_complementary_slackness.max(maxim.cs_lambda).max(maxim.cs_mu).max(maxim.cs_eta);
            checks.ironing_failures += usize::from(!iron.passed());
            checks.ironed_periods += usize::from(iron.ironed());
            checks.max_ic = checks.max_ic.max(pc.ic);
            checks.max_bi = checks.max_bi.max(pc.bi);
            checks.max_bu = checks.max_bu.max(pc.bu);
            checks.max_revenue_identity = checks.max_revenue_identity.max(pc.revenue_identity);
            tables.push(table);
        }
    }
    checks.promise_optimality = out.kkt.passed();
    checks.max_promise_violation = out.kkt.max_violation;

    let interval = [stack.root_lower(), stack.root_upper()];
    let oracle = if with_oracle {
        let myerson = repeated_myerson_revenue(&instance)?;
        Some(match solve_full_history_lp(&instance) {
            Ok(o) => {
                checks.oracle_contained = Some(
                    interval[0] <= o.revenue + ORDER_TOL && interval[1] >= (1.0 - config.epsilon) * o.revenue - ORDER_TOL,
                );
                OracleSummary { revenue: Some(o.revenue), repeated_myerson: myerson, note: None }
            }
            Err(e @ Error::OracleGuard { .. }) => {
                OracleSummary { revenue: None, repeated_myerson: myerson, note: Some(e.to_string()) }
            }
            Err(e) => return Err(e),
        })
    } else {
        None
    };
    checks.passed = checks.maximizer_violations == 0
        && checks.ironing_failures == 0
        && checks.max_ic <= PERIOD_TOL
        && checks.max_bi <= PERIOD_TOL
        && checks.max_bu <= PERIOD_TOL
        && checks.max_revenue_identity <= PERIOD_TOL
        && checks.oracle_contained != Some(false);

    let mut warnings: Vec<String> = out.warning.iter().cloned().collect();
    if !checks.promise_optimality {
        warnings.push(format!("promise optimality violated by {:.3e}", out.kkt.max_violation));
    }
    if !checks.stages_converged {
        warnings.push("a stage fit hit its sample cap before reaching the target gap".into());
    }

    let report = SolveReport {
        command: "solve",
        buyers: instance.buyers(),
        horizon: instance.horizon(),
        epsilon: config.epsilon,
        kappa: stack.kappa,
        revenue_interval: interval,
        width: stack.width(),
        xi: out.xi.tables().to_vec(),
        promise_search_converged: out.converged,
        warnings,
        stages: stack
            .stages
            .iter()
            .map(|s| StageSummary {
                t: s.t,
                lower_pieces: s.lower.len(),
                upper_pieces: s.upper.len(),
                max_gap: s.max_gap,
                target_gap: s.target_gap,
                samples: s.samples,
                converged: s.converged,
            })
            .collect(),
        checks,
        oracle,
        timings: Counters {
            lp_solves: stack.lp_solves(),
            simplex_pivots: stack.stages.iter().map(|s| s.pivots).sum(),
            promise_evaluations: out.evaluations,
        },
        virtual_values: tables,
    };
    if let Some(p) = stack_out {
        write_output(Some(p), &stack.to_json())?;
    }
    if let Some(p) = csv_out {
        write_output(Some(p), &to_csv(&report.virtual_values))?;
    }
    if let Some(p) = trace_out {
        write_output(Some(p), &out.trace_jsonl())?;
    }
    write_output(config.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(report.checks.passed)
}

#[derive(Serialize)]
struct CompareReport {
    command: &'static str,
    epsilon: f64,
    solver_lower: f64,
    solver_upper: f64,
    oracle: Option<f64>,
    repeated_myerson: f64,
    oracle_omitted: Option<String>,
    violations: Vec<String>,
}

fn cmd_compare(config: &RunConfig) -> Result<bool> {
    check_config(config)?;
    let instance = read_instance(&config.instance)?;
    let out = optimise(&instance, config)?;
    let (lower, upper) = (out.stack.root_lower(), out.stack.root_upper());
    let myerson = repeated_myerson_revenue(&instance)?;
    let mut violations = Vec::new();
    let (oracle, omitted) = match solve_full_history_lp(&instance) {
        Ok(o) => (Some(o.revenue), None),
        Err(e @ Error::OracleGuard { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    if let Some(o) = oracle {
        if lower > o + ORDER_TOL {
            violations.push(format!("solver lower bound {lower} exceeds oracle {o}"));
        }
        if upper < (1.0 - config.epsilon) * o - ORDER_TOL {
            violations.push(format!("solver upper bound {upper} below (1 - epsilon) oracle {o}"));
        }
        if o < myerson - ORDER_TOL {
            violations.push(format!("oracle {o} below repeated static revenue {myerson}"));
        }
    }
    if lower < myerson - ORDER_TOL {
        violations.push(format!("solver lower bound {lower} below repeated static revenue {myerson}"));
    }
    let report = CompareReport {
        command: "compare",
        epsilon: config.epsilon,
        solver_lower: lower,
        solver_upper: upper,
        oracle,
        repeated_myerson: myerson,
        oracle_omitted: omitted,
        violations,
    };
    write_output(config.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(report.violations.is_empty())
}

fn cmd_simulate(
    config: &RunConfig,
    stack_in: Option<&Path>,
    solve_inline: bool,
    paths: Option<usize>,
    csv_out: Option<&Path>,
) -> Result<bool> {
    check_config(config)?;
    let instance = read_instance(&config.instance)?;
    let stack = match (stack_in, solve_inline) {
        (Some(p), _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("cannot read stack {}: {e}", p.display())))?;
            let s = ValueFunctionStack::from_json(&text).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            if !s.matches(&instance) {
                return Err(Error::Input(format!("stack {} does not match the instance", p.display())));
            }
            s
        }
        (None, true) => optimise(&instance, config)?.stack,
        (None, false) => return Err(Error::Input("simulate needs --stack or --solve-inline".into())),
    };
    let mut policy = MechanismPolicy::from_stack(instance, stack)?;
    let mode = match paths {
        Some(n) => SimMode::Sampled { paths: n, seed: config.seed },
        None => SimMode::Exhaustive,
    };
    let report = simulate_with_trace(&mut policy, mode, csv_out.is_some())?;
    if let Some(p) = csv_out {
        write_output(Some(p), &report.trace_csv())?;
    }
    write_output(config.out.as_deref(), &report.to_json())?;
    Ok(report.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "dynauc", "simulate", "inst.json", "--epsilon", "0.05", "--seed", "3", "--paths", "10", "--solve-inline",
        ])
        .unwrap();
        match cli.command {
            Command::Simulate(a) => {
                assert_eq!(a.config.epsilon, 0.05);
                assert_eq!(a.config.seed, 3);
                assert_eq!(a.paths, Some(10));
                assert!(a.solve_inline);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn bad_flags_are_input_errors() {
        assert_eq!(run(["dynauc", "solve"]), EXIT_INPUT);
        assert_eq!(run(["dynauc", "bogus"]), EXIT_INPUT);
        assert_eq!(run(["dynauc", "--help"]), EXIT_OK);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Input("x".into())), EXIT_INPUT);
        assert_eq!(exit_code(&Error::Solver("x".into())), EXIT_SOLVER);
        assert_eq!(exit_code(&Error::NonConcave("x".into())), EXIT_SOLVER);
    }
}
