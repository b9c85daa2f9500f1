//! Solve-time comparison of the eight transcriptions on one path.

use std::time::Instant;

use super::{
    build_ocp, check_bounds, initial_guess, solve, CurrentModel, Method, OcpError, PathSpec, SolveStatus, SolverOptions,
    Transcription,
};
use crate::params::ParamSet;

/// Largest bound or defect violation a timed run may show.
const FEASIBILITY_CHECK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub transcription: Transcription,
    pub num_vars: usize,
    pub num_rows: usize,
    /// Median over repetitions, s.
    pub build_seconds: f64,
    /// Median over repetitions, s.
    pub solve_seconds: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Limits and defects re-evaluated on the returned point.
    pub max_violation: f64,
    pub cost: f64,
}

impl BenchRow {
    /// Converged and re-checked; only these rows enter comparisons.
    pub fn usable(&self) -> bool {
        self.converged && self.max_violation <= FEASIBILITY_CHECK
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl BenchmarkReport {
    pub fn row(&self, method: Method, current: CurrentModel) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.transcription.method == method && r.transcription.current == current)
    }

    /// Median solve time of `a` over that of `b`, when both are usable.
    pub fn ratio(&self, a: Method, b: Method, current: CurrentModel) -> Option<f64> {
        let (ra, rb) = (self.row(a, current)?, self.row(b, current)?);
        (ra.usable() && rb.usable()).then(|| ra.solve_seconds / rb.solve_seconds)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,current,num_vars,num_rows,build_s,solve_s,iterations,converged,max_violation,cost\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.transcription.method.name(),
                r.transcription.current.name(),
                r.num_vars,
                r.num_rows,
                r.build_seconds,
                r.solve_seconds,
                r.iterations,
                r.converged,
                r.max_violation,
                r.cost
            ));
        }
        out
    }
}

/// Builds and solves every transcription `reps` times from its own initial
/// guess. `progress` sees each row as it completes.
pub fn run_benchmark(
    spec: &PathSpec,
    p: &ParamSet,
    reps: usize,
    opts: &SolverOptions,
    mut progress: impl FnMut(&BenchRow),
) -> Result<BenchmarkReport, OcpError> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for current in [CurrentModel::Dynamic, CurrentModel::Algebraic] {
        for method in Method::ALL {
            let tr = Transcription { method, current };
            let (mut build, mut solve_t) = (Vec::new(), Vec::new());
            let mut last = None;
            for _ in 0..reps {
                let t0 = Instant::now();
                let prob = build_ocp(spec, p, tr)?;
                let z0 = initial_guess(&prob);
                build.push(t0.elapsed().as_secs_f64());
                let res = solve(&prob, &z0, opts);
                match res {
                    Ok(sol) => {
                        solve_t.push(sol.solve_seconds);
                        last = Some((prob, Ok(sol)));
                    }
                    Err(e) => {
                        last = Some((prob, Err(e)));
                        break;
                    }
                }
            }
            let (prob, res) = last.expect("at least one repetition");
            let row = match res {
                Ok(sol) => {
                    let z = prob.pack(&sol.states, &sol.controls)?;
                    let bounds = check_bounds(&sol.states, &sol.controls, sol.step, &spec.bounds).max();
                    BenchRow {
                        transcription: tr,
                        num_vars: prob.layout.num_vars(),
                        num_rows: super::NlpProblem::num_rows(&prob),
                        build_seconds: median(build),
                        solve_seconds: median(solve_t),
                        iterations: sol.iterations,
                        converged: sol.status == SolveStatus::Converged,
                        max_violation: prob.max_violation(&z).max(bounds),
                        cost: sol.cost,
                    }
                }
                Err(_) => BenchRow {
                    transcription: tr,
                    num_vars: prob.layout.num_vars(),
                    num_rows: super::NlpProblem::num_rows(&prob),
                    build_seconds: median(build),
                    solve_seconds: f64::NAN,
                    iterations: 0,
                    converged: false,
                    max_violation: f64::INFINITY,
                    cost: f64::NAN,
                },
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(BenchmarkReport { repetitions: reps, rows })
}
