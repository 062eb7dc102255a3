//! `emtsim` command line: run, compare and validate-weights.
//!
//! Exit codes: 0 success, 1 runtime or solver failure, 2 usage or
//! configuration error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::control::{PllMode, PllStepper, NEWTON_TOL};
use crate::engine::{
    compare, random_events, simulate_with, ErrorNorms, Metrics, Scenario, SimError, SimOptions, SimResult,
    REPORT_SIGNALS,
};
use crate::pinn::{load_weights, MlpParams, PinnError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "emtsim", version, about = "EMT simulation of a type-4 wind turbine with swappable PLL solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write traces.csv and metrics.json.
    Run(RunArgs),
    /// Run two solver modes on the same scenario(s) and report errors and speedup.
    Compare(CompareArgs),
    /// Load a surrogate weights file and print its architecture.
    ValidateWeights {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file (TOML). Without it a seeded random scenario is used.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Surrogate weights (JSON), required by the pinn mode.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Timing repetitions.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub reps: u32,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "iterative")]
    pub mode: PllMode,
    /// Check the nodal residual at every step and report the worst.
    #[arg(long)]
    pub check_kcl: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Mode under test.
    #[arg(long, default_value = "pinn")]
    pub mode: PllMode,
    /// Reference mode.
    #[arg(long, default_value = "iterative")]
    pub baseline: PllMode,
    /// Randomized benchmark over `--n` seeded scenarios.
    #[arg(long)]
    pub bench: bool,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: u32,
}

/// A failed command: exit code and message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidScenario(_) | SimError::ModeMismatch(_) | SimError::Model(_) | SimError::Weights(_) => {
                Failure::usage(e.to_string())
            }
            _ => Failure::runtime(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

/// Parses `std::env::args` and runs the command.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    execute(cli)
}

pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::ValidateWeights { path } => cmd_validate_weights(&path),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn read_scenario(common: &Common) -> Result<Scenario, Failure> {
    match &common.scenario {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            Scenario::from_toml(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
        }
        None => Ok(random_events(common.seed, 1).remove(0)),
    }
}

fn read_weights(common: &Common, needed: bool) -> Result<Option<MlpParams>, Failure> {
    match (&common.weights, needed) {
        (None, true) => Err(Failure::usage("mode 'pinn' requires --weights <path>")),
        (None, false) => Ok(None),
        (Some(path), _) => {
            let file = File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let w = load_weights(std::io::BufReader::new(file))
                .and_then(|w| w.check_pll_layout().map(|_| w))
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            Ok(Some(w))
        }
    }
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| io_failure(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_failure(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub mean: f64,
    /// Standard deviation over the mean.
    pub rel_spread: f64,
    pub reps: usize,
}

impl Timing {
    fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            rel_spread: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
            reps: samples.len(),
        }
    }
}

/// Runs `reps` times; returns the first result and the wall-time statistics.
/// Every repetition must reproduce the first trace exactly.
fn timed_runs(
    scenario: &Scenario,
    mode: PllMode,
    weights: Option<&MlpParams>,
    reps: u32,
    options: SimOptions,
) -> Result<(SimResult, Timing), Failure> {
    let sys = scenario.system()?;
    let stepper = PllStepper::from_mode(mode, weights).ok_or(SimError::ModeMismatch(mode))?;
    let first = simulate_with(&sys, scenario, &stepper, options)?;
    let mut times = vec![first.wall_time];
    for _ in 1..reps {
        let again = simulate_with(&sys, scenario, &stepper, options)?;
        if again.traces != first.traces {
            return Err(Failure::runtime(format!("{mode} run is not reproducible")));
        }
        times.push(again.wall_time);
    }
    Ok((first, Timing::of(&times)))
}

#[derive(Debug, Serialize)]
struct RunReport {
    mode: PllMode,
    scenario: Option<PathBuf>,
    seed: Option<u64>,
    steps: usize,
    dt: f64,
    t_end: f64,
    wall_time: Timing,
    pll_iterations_total: usize,
    pll_iterations_per_step: f64,
    max_kcl_residual: Option<f64>,
}

pub fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let c = &args.common;
    let scenario = read_scenario(c)?;
    let weights = read_weights(c, args.mode == PllMode::Pinn)?;
    // fail on configuration before touching the output directory
    scenario.system()?;
    prepare_out(&c.out)?;

    let options = SimOptions {
        check_kcl: args.check_kcl,
    };
    let (result, timing) = timed_runs(&scenario, args.mode, weights.as_ref(), c.reps, options)?;

    let csv_path = c.out.join("traces.csv");
    let file = File::create(&csv_path).map_err(|e| io_failure(&csv_path, e))?;
    result
        .traces
        .write_csv(BufWriter::new(file))
        .map_err(|e| io_failure(&csv_path, e))?;

    let report = RunReport {
        mode: args.mode,
        scenario: c.scenario.clone(),
        seed: if c.scenario.is_none() { Some(c.seed) } else { scenario.seed },
        steps: result.steps,
        dt: scenario.dt,
        t_end: scenario.t_end,
        wall_time: timing,
        pll_iterations_total: result.pll_iterations_total,
        pll_iterations_per_step: result.pll_iterations_total as f64 / result.steps.max(1) as f64,
        max_kcl_residual: result.max_kcl_residual,
    };
    write_json(&c.out.join("metrics.json"), &report)?;
    println!(
        "{}: {} steps in {:.3} s ({} PLL iterations), traces in {}",
        args.mode,
        result.steps,
        timing.mean,
        result.pll_iterations_total,
        csv_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareReport {
    #[serde(flatten)]
    metrics: Metrics,
    baseline_time: Timing,
    candidate_time: Timing,
}

/// Per-step solver cost of each mode.
#[derive(Debug, Serialize)]
struct CostBreakdown {
    newton_tol: f64,
    newton_iterations_per_step: f64,
    pinn_multiply_adds_per_step: Option<usize>,
    ns_per_step: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
struct BenchScenario {
    index: usize,
    scenario: Scenario,
    signals: BTreeMap<String, ErrorNorms>,
    wall_time: BTreeMap<String, Timing>,
    speedup: f64,
    speedup_vs_delayed: f64,
}

#[derive(Debug, Serialize)]
struct BenchAverage {
    /// Mean over scenarios of each norm; `max_abs` is the worst case.
    signals: BTreeMap<String, ErrorNorms>,
    speedup: Timing,
    speedup_vs_delayed: Timing,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    seed: u64,
    n: usize,
    reps: u32,
    baseline: PllMode,
    candidate: PllMode,
    average: BenchAverage,
    cost: CostBreakdown,
    scenarios: Vec<BenchScenario>,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(), Failure> {
    let c = &args.common;
    let needs = args.mode == PllMode::Pinn || args.baseline == PllMode::Pinn;
    let weights = read_weights(c, needs)?;
    if args.bench {
        if c.scenario.is_some() {
            return Err(Failure::usage("--bench draws its own scenarios; drop --scenario"));
        }
        return bench(args, weights.as_ref());
    }
    let scenario = read_scenario(c)?;
    scenario.system()?;
    prepare_out(&c.out)?;

    let opts = SimOptions::default();
    let (base, base_t) = timed_runs(&scenario, args.baseline, weights.as_ref(), c.reps, opts)?;
    let (cand, cand_t) = timed_runs(&scenario, args.mode, weights.as_ref(), c.reps, opts)?;
    let mut metrics = compare(&base, &cand, &REPORT_SIGNALS)?;
    metrics.baseline.wall_time = base_t.mean;
    metrics.candidate.wall_time = cand_t.mean;
    metrics.speedup = base_t.mean / cand_t.mean;

    print_norms(&metrics.signals);
    println!(
        "speedup {} / {}: {:.3}x ({} reps)",
        args.baseline, args.mode, metrics.speedup, c.reps
    );
    write_json(
        &c.out.join("metrics.json"),
        &CompareReport {
            metrics,
            baseline_time: base_t,
            candidate_time: cand_t,
        },
    )
}

fn print_norms(signals: &BTreeMap<String, ErrorNorms>) {
    for (name, e) in signals {
        println!("{name:>10}  mean |e| {:.3e}  max |e| {:.3e}", e.mean_abs, e.max_abs);
    }
}

fn bench(args: &CompareArgs, weights: Option<&MlpParams>) -> Result<(), Failure> {
    let c = &args.common;
    let scenarios = random_events(c.seed, args.n as usize);
    prepare_out(&c.out)?;
    let opts = SimOptions::default();

    let mut rows = Vec::with_capacity(scenarios.len());
    let mut norms: BTreeMap<String, Vec<ErrorNorms>> = BTreeMap::new();
    let (mut iterations, mut steps) = (0usize, 0usize);
    let mut step_time: BTreeMap<String, f64> = BTreeMap::new();
    let mut speedups = Vec::new();
    let mut speedups_delayed = Vec::new();

    for (index, scenario) in scenarios.into_iter().enumerate() {
        let (base, base_t) = timed_runs(&scenario, args.baseline, weights, c.reps, opts)?;
        let (cand, cand_t) = timed_runs(&scenario, args.mode, weights, c.reps, opts)?;
        let (delayed, delayed_t) = timed_runs(&scenario, PllMode::Delayed, weights, c.reps, opts)?;
        let m = compare(&base, &cand, &REPORT_SIGNALS)?;

        let iterative = [(&base, args.baseline), (&cand, args.mode)]
            .into_iter()
            .find(|(_, mode)| *mode == PllMode::Iterative);
        if let Some((r, _)) = iterative {
            iterations += r.pll_iterations_total;
            steps += r.steps;
        }
        for (mode, t, r) in [
            (args.baseline, base_t, &base),
            (args.mode, cand_t, &cand),
            (PllMode::Delayed, delayed_t, &delayed),
        ] {
            *step_time.entry(mode.to_string()).or_default() += t.mean / r.steps as f64;
        }
        for (k, e) in &m.signals {
            norms.entry(k.clone()).or_default().push(*e);
        }
        let speedup = base_t.mean / cand_t.mean;
        let speedup_vs_delayed = delayed_t.mean / cand_t.mean;
        speedups.push(speedup);
        speedups_delayed.push(speedup_vs_delayed);
        println!(
            "scenario {index:>2}: {} events, speedup {speedup:.3}x, max |e(i_a)| {:.3e}",
            scenario.events.len(),
            m.signals["i_a"].max_abs
        );
        let mut wall_time = BTreeMap::new();
        wall_time.insert(args.baseline.to_string(), base_t);
        wall_time.insert(args.mode.to_string(), cand_t);
        wall_time.insert(PllMode::Delayed.to_string(), delayed_t);
        rows.push(BenchScenario {
            index,
            scenario,
            signals: m.signals,
            wall_time,
            speedup,
            speedup_vs_delayed,
        });
    }

    let n = rows.len() as f64;
    let signals = norms
        .into_iter()
        .map(|(k, v)| {
            let mean_abs = v.iter().map(|e| e.mean_abs).sum::<f64>() / n;
            let max_abs = v.iter().map(|e| e.max_abs).fold(0.0, f64::max);
            (k, ErrorNorms { mean_abs, max_abs })
        })
        .collect();
    let ns_per_step = step_time.into_iter().map(|(k, v)| (k, v / n * 1e9)).collect();
    let report = BenchReport {
        seed: c.seed,
        n: rows.len(),
        reps: c.reps,
        baseline: args.baseline,
        candidate: args.mode,
        average: BenchAverage {
            signals,
            speedup: Timing::of(&speedups),
            speedup_vs_delayed: Timing::of(&speedups_delayed),
        },
        cost: CostBreakdown {
            newton_tol: NEWTON_TOL,
            newton_iterations_per_step: if steps > 0 { iterations as f64 / steps as f64 } else { 0.0 },
            pinn_multiply_adds_per_step: weights.map(MlpParams::multiply_adds),
            ns_per_step,
        },
        scenarios: rows,
    };
    print_norms(&report.average.signals);
    println!(
        "average speedup {} / {}: {:.3}x (rel. spread {:.2}); vs delayed {:.3}x",
        args.baseline,
        args.mode,
        report.average.speedup.mean,
        report.average.speedup.rel_spread,
        report.average.speedup_vs_delayed.mean
    );
    write_json(&c.out.join("bench.json"), &report)
}

pub fn cmd_validate_weights(path: &Path) -> Result<(), Failure> {
    let file = File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let w = load_weights(std::io::BufReader::new(file)).map_err(|e| Failure::runtime(describe(path, &e)))?;
    println!("{}, {}", w.arch(), w.activation.as_str());
    for f in &w.input_spec {
        println!("  in  {:<12} [{}, {}]", f.name, f.lo, f.hi);
    }
    for o in &w.output_spec {
        println!("  out {:<12} offset {} scale {}", o.name, o.offset, o.scale);
    }
    match w.check_pll_layout() {
        Ok(()) => println!("PLL layout: ok ({} multiply-adds per step)", w.multiply_adds()),
        Err(e) => println!("PLL layout: not usable in pinn mode ({e})"),
    }
    Ok(())
}

fn describe(path: &Path, e: &PinnError) -> String {
    let kind = match e {
        PinnError::Parse(_) => "ParseError",
        PinnError::ShapeMismatch { .. } => "ShapeMismatch",
        PinnError::UnknownActivation(_) => "UnknownActivation",
        _ => "InvalidWeights",
    };
    format!("{}: {kind}: {e}", path.display())
}
