//! `wip`: plan, simulate, benchmark and export for the wheeled inverted pendulum.
//!
//! Exit codes: 0 ok, 2 bad input, 3 plant divergence, 4 solver failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wip_core::ocp::{
    self, build_ocp, check_bounds, initial_guess, make_eight_knot_spec, make_full_spec, make_hover_spec,
    make_translation_spec, make_zigzag_spec, read_plan_csv, resimulation_error, run_benchmark, CurrentModel, Method,
    PathSpec, SolveStatus, SolverOptions, Transcription,
};
use wip_core::params::{load_params, ParamSet};
use wip_core::sim::{run_closed_loop, tracking_metrics, write_log_csv, ScenarioConfig};
use wip_core::tracking::LqrDesign;

const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_SOLVER: u8 = 4;

struct Failure {
    code: u8,
    msg: String,
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure { code: EXIT_INPUT, msg: e.to_string() }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "wip", version, about = "Trajectory planning and tracking for a wheeled inverted pendulum")]
struct Cli {
    /// Parameter file (flat `key = value`); defaults to the built-in set.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the optimal control problem for a path spec and write the plan CSV.
    Plan {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "varint")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "dynamic")]
        current: CurrentArg,
        /// KKT and feasibility tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        /// Print one line per solver iteration to stderr.
        #[arg(long)]
        verbose: bool,
        #[arg(long, default_value = "plan.csv")]
        out: PathBuf,
    },
    /// Track a plan in closed loop and write the log CSV; metrics go to stdout.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        /// Scenario file; without one the default noise and delays apply.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Feedback design from `export design`; computed from the params otherwise.
        #[arg(long)]
        design: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "log.csv")]
        out: PathBuf,
    },
    /// Time all eight transcriptions on one spec.
    Benchmark {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a built-in spec, the parameter set or the feedback design.
    Export {
        #[arg(value_enum)]
        what: ExportArg,
        /// Distance for `translation`, m.
        #[arg(long, default_value_t = 1.0)]
        distance: f64,
        /// Horizon for `translation` and `hover`.
        #[arg(long, default_value_t = 250)]
        horizon: usize,
        /// Step for `translation` and `hover`, s.
        #[arg(long, default_value_t = 0.02)]
        step: f64,
        /// Destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Varint,
    Rk1,
    Rk2,
    Rk4,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Varint => Method::Varint,
            MethodArg::Rk1 => Method::Rk1,
            MethodArg::Rk2 => Method::Rk2,
            MethodArg::Rk4 => Method::Rk4,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CurrentArg {
    Dynamic,
    Algebraic,
}

impl From<CurrentArg> for CurrentModel {
    fn from(c: CurrentArg) -> Self {
        match c {
            CurrentArg::Dynamic => CurrentModel::Dynamic,
            CurrentArg::Algebraic => CurrentModel::Algebraic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportArg {
    Params,
    Design,
    Translation,
    Hover,
    EightKnot,
    Zigzag,
    Full,
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn load_spec(path: &Path, p: &ParamSet) -> Result<PathSpec, Failure> {
    PathSpec::from_toml(&read(path)?, p.bounds).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn solver_opts(tol: f64, max_iter: usize, verbose: bool) -> Result<SolverOptions, Failure> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(input(format!("--tol must be positive, got {tol}")));
    }
    Ok(SolverOptions {
        tol,
        feas_tol: tol,
        max_iter,
        verbose,
        ..SolverOptions::default()
    })
}

fn cmd_plan(p: &ParamSet, spec: &Path, tr: Transcription, opts: SolverOptions, out: &Path) -> Outcome {
    let spec = load_spec(spec, p)?;
    let prob = build_ocp(&spec, p, tr).map_err(input)?;
    let sol = ocp::solve(&prob, &initial_guess(&prob), &opts).map_err(|e| Failure {
        code: EXIT_SOLVER,
        msg: format!("status: error ({e})"),
    })?;

    let mut buf = Vec::new();
    sol.write_csv(&mut buf).map_err(input)?;
    write(out, &buf)?;

    let z = prob.pack(&sol.states, &sol.controls).map_err(input)?;
    let v = check_bounds(&sol.states, &sol.controls, sol.step, &spec.bounds);
    println!("transcription {} {}", tr.method.name(), tr.current.name());
    println!("status {:?} after {} iterations, {:.2} s", sol.status, sol.iterations, sol.solve_seconds);
    println!("cost {:.9}", sol.cost);
    println!("kkt stationarity {:.3e} feasibility {:.3e}", sol.stationarity, sol.feasibility);
    println!("max defect {:.3e}", prob.max_violation(&z));
    println!(
        "bound violation voltage {:.3e} rate {:.3e} current {:.3e} tilt {:.3e} heading_rate {:.3e}",
        v.voltage, v.voltage_rate, v.current, v.tilt, v.heading_rate
    );
    match resimulation_error(&sol, p) {
        Ok(e) => println!("resimulation error {e:.3e}"),
        Err(e) => println!("resimulation failed: {e}"),
    }
    println!("wrote {} ({} nodes)", out.display(), sol.states.len());
    if sol.status != SolveStatus::Converged {
        return Err(Failure {
            code: EXIT_SOLVER,
            msg: format!("status: {:?}", sol.status),
        });
    }
    Ok(())
}

fn cmd_simulate(
    p: &ParamSet,
    plan: &Path,
    scenario: Option<&Path>,
    design: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Outcome {
    let table = read_plan_csv(read(plan)?.as_bytes()).map_err(|e| input(format!("{}: {e}", plan.display())))?;
    let mut cfg = match scenario {
        Some(path) => {
            ScenarioConfig::from_toml(&read(path)?, table).map_err(|e| input(format!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::new(table),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let design = match design {
        Some(path) => LqrDesign::from_toml(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?,
        None => LqrDesign::default_for(p).map_err(input)?,
    };
    let log = run_closed_loop(&cfg, p, &design).map_err(input)?;

    let mut buf = Vec::new();
    write_log_csv(&log, &mut buf).map_err(input)?;
    write(out, &buf)?;
    print!("{}", tracking_metrics(&log.records).to_toml());
    println!("pose_fixes = {}", log.pose_fixes);
    println!("stale_fixes = {}", log.stale_fixes);
    if let Some(t) = log.diverged_at {
        return Err(Failure {
            code: EXIT_DIVERGED,
            msg: format!("plant diverged at t = {t:.3} s"),
        });
    }
    Ok(())
}

fn cmd_benchmark(p: &ParamSet, spec: &Path, reps: usize, opts: SolverOptions, out: Option<&Path>) -> Outcome {
    let spec = load_spec(spec, p)?;
    println!("{} repetitions, medians in seconds", reps.max(1));
    println!(
        "{:<8}{:<11}{:>8}{:>8}{:>10}{:>10}{:>7}  flag",
        "method", "current", "vars", "rows", "build", "solve", "iters"
    );
    let report = run_benchmark(&spec, p, reps, &opts, |r| {
        let flag = if r.usable() {
            ""
        } else if r.converged {
            "infeasible, excluded"
        } else {
            "not converged, excluded"
        };
        println!(
            "{:<8}{:<11}{:>8}{:>8}{:>10.3}{:>10.3}{:>7}  {flag}",
            r.transcription.method.name(),
            r.transcription.current.name(),
            r.num_vars,
            r.num_rows,
            r.build_seconds,
            r.solve_seconds,
            r.iterations
        );
        let _ = io::stdout().flush();
    })
    .map_err(input)?;
    for current in [CurrentModel::Dynamic, CurrentModel::Algebraic] {
        for (other, limit) in [(Method::Rk1, 1.15), (Method::Rk4, 1.05)] {
            match report.ratio(Method::Varint, other, current) {
                Some(r) => println!(
                    "{} varint/{} = {r:.3} (trend limit {limit})",
                    current.name(),
                    other.name()
                ),
                None => println!("{} varint/{}: no usable pair", current.name(), other.name()),
            }
        }
    }
    if let Some(path) = out {
        write(path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_export(p: &ParamSet, what: ExportArg, distance: f64, horizon: usize, step: f64, out: Option<&Path>) -> Outcome {
    let text = match what {
        ExportArg::Params => p.to_config_string(),
        ExportArg::Design => LqrDesign::default_for(p).map_err(input)?.to_toml(),
        ExportArg::Translation => make_translation_spec(distance, horizon, step, p.bounds).to_toml(),
        ExportArg::Hover => make_hover_spec(horizon, step, p.bounds).to_toml(),
        ExportArg::EightKnot => make_eight_knot_spec(p.bounds).to_toml(),
        ExportArg::Zigzag => make_zigzag_spec(p.bounds).to_toml(),
        ExportArg::Full => make_full_spec(p.bounds).to_toml(),
    };
    match out {
        Some(path) => write(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let p = match &cli.params {
        Some(path) => load_params(&read(path)?).map_err(|e| input(format!("{}: {e}", path.display())))?,
        None => ParamSet::default(),
    };
    match cli.cmd {
        Cmd::Plan {
            spec,
            method,
            current,
            tol,
            max_iter,
            verbose,
            out,
        } => {
            let tr = Transcription {
                method: method.into(),
                current: current.into(),
            };
            cmd_plan(&p, &spec, tr, solver_opts(tol, max_iter, verbose)?, &out)
        }
        Cmd::Simulate {
            plan,
            scenario,
            design,
            seed,
            out,
        } => cmd_simulate(&p, &plan, scenario.as_deref(), design.as_deref(), seed, &out),
        Cmd::Benchmark { spec, reps, tol, out } => {
            cmd_benchmark(&p, &spec, reps, solver_opts(tol, 500, false)?, out.as_deref())
        }
        Cmd::Export {
            what,
            distance,
            horizon,
            step,
            out,
        } => cmd_export(&p, what, distance, horizon, step, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wip: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
