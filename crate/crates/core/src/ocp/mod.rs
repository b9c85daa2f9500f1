//! Energy-optimal trajectories by direct transcription.
//!
//! States and controls of every step are stacked into one decision vector and the
//! discrete dynamics enter as equality constraints. The dynamics can be the
//! variational integrator or an explicit Runge-Kutta step of the continuous
//! model, with or without the motor-current states.
//!
//! Decision vector, per step `k < N`: the node `(x, y, theta, alpha, v_alpha, v_d,
//! v_theta[, i_r, i_l])` followed by `(u_r, u_l)`; then the final node. Heading is
//! kept unwrapped.

mod bench;
mod blocks;
mod paths;
pub mod solver;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ControlInput, ReducedState, RkOrder};
use crate::params::{ConstraintBounds, ParamSet};
use crate::se2::{wrap_angle, GroupPose};
use crate::varint::{self, BaseState, BaseVelocity, DiscreteNode, Forcing, NewtonOptions};

pub use bench::{run_benchmark, BenchRow, BenchmarkReport};
use blocks::*;
pub use paths::{make_eight_knot_spec, make_full_spec, make_zigzag_spec, path_spec_from_points};
pub use solver::{InteriorPoint, NlpProblem, NlpSolver, SolveStatus, SolverError, SolverOptions, SolverResult, Triplets};

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("waypoint step {k} must lie strictly inside (0, {horizon}) and increase")]
    WaypointIndex { k: usize, horizon: usize },
    #[error("invalid path spec: {0}")]
    Spec(String),
    #[error("expected {want} entries, got {got}")]
    Length { want: usize, got: usize },
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("CSV: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Varint,
    Rk1,
    Rk2,
    Rk4,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rk1, Method::Rk2, Method::Rk4, Method::Varint];

    pub fn name(self) -> &'static str {
        match self {
            Method::Varint => "varint",
            Method::Rk1 => "rk1",
            Method::Rk2 => "rk2",
            Method::Rk4 => "rk4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn rk_order(self) -> Option<RkOrder> {
        match self {
            Method::Varint => None,
            Method::Rk1 => Some(RkOrder::One),
            Method::Rk2 => Some(RkOrder::Two),
            Method::Rk4 => Some(RkOrder::Four),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurrentModel {
    /// Currents are states with inductive dynamics.
    Dynamic,
    /// Currents follow from voltage and speed with the inductance neglected.
    Algebraic,
}

impl CurrentModel {
    pub fn name(self) -> &'static str {
        match self {
            CurrentModel::Dynamic => "dynamic",
            CurrentModel::Algebraic => "algebraic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dynamic" => Some(CurrentModel::Dynamic),
            "algebraic" => Some(CurrentModel::Algebraic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transcription {
    pub method: Method,
    pub current: CurrentModel,
}

impl Default for Transcription {
    fn default() -> Self {
        Self {
            method: Method::Varint,
            current: CurrentModel::Dynamic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryState {
    pub pose: GroupPose,
    pub tilt: f64,
    pub velocity: BaseVelocity,
}

impl BoundaryState {
    pub fn at_rest(pose: GroupPose) -> Self {
        Self {
            pose,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub k: usize,
    pub pose: GroupPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub start: BoundaryState,
    pub end: BoundaryState,
    pub waypoints: Vec<Waypoint>,
    pub horizon: usize,
    pub step: f64,
    pub bounds: ConstraintBounds,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundaryFile {
    pose: [f64; 3],
    #[serde(default)]
    tilt: f64,
    #[serde(default)]
    velocity: [f64; 5],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointFile {
    k: usize,
    pose: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    voltage: f64,
    voltage_rate: f64,
    current: f64,
    tilt: f64,
    heading_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    horizon: usize,
    step: f64,
    start: BoundaryFile,
    end: BoundaryFile,
    #[serde(default)]
    waypoint: Vec<WaypointFile>,
    bounds: Option<BoundsFile>,
}

impl PathSpec {
    /// Checks index ordering and positivity of the step.
    pub fn validate(&self) -> Result<(), OcpError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(OcpError::Spec(format!("step must be positive, got {}", self.step)));
        }
        if self.horizon == 0 {
            return Err(OcpError::Spec("horizon must be at least 1".into()));
        }
        let mut last = 0;
        for w in &self.waypoints {
            if w.k <= last || w.k >= self.horizon {
                return Err(OcpError::WaypointIndex {
                    k: w.k,
                    horizon: self.horizon,
                });
            }
            last = w.k;
        }
        Ok(())
    }

    /// Parses the TOML form; `bounds` falls back to `default_bounds`.
    pub fn from_toml(src: &str, default_bounds: ConstraintBounds) -> Result<Self, OcpError> {
        let f: SpecFile = toml::from_str(src).map_err(|e| OcpError::Spec(e.to_string()))?;
        let boundary = |b: &BoundaryFile| BoundaryState {
            pose: GroupPose::new(b.pose[0], b.pose[1], b.pose[2]),
            tilt: b.tilt,
            velocity: BaseVelocity::from_array(b.velocity),
        };
        let spec = PathSpec {
            start: boundary(&f.start),
            end: boundary(&f.end),
            waypoints: f
                .waypoint
                .iter()
                .map(|w| Waypoint {
                    k: w.k,
                    pose: GroupPose::new(w.pose[0], w.pose[1], w.pose[2]),
                })
                .collect(),
            horizon: f.horizon,
            step: f.step,
            bounds: f.bounds.map_or(default_bounds, |b| ConstraintBounds {
                voltage: b.voltage,
                voltage_rate: b.voltage_rate,
                current: b.current,
                tilt: b.tilt,
                heading_rate: b.heading_rate,
            }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        let boundary = |b: &BoundaryState| BoundaryFile {
            pose: b.pose.as_array(),
            tilt: b.tilt,
            velocity: b.velocity.to_array(),
        };
        let f = SpecFile {
            horizon: self.horizon,
            step: self.step,
            start: boundary(&self.start),
            end: boundary(&self.end),
            waypoint: self
                .waypoints
                .iter()
                .map(|w| WaypointFile {
                    k: w.k,
                    pose: w.pose.as_array(),
                })
                .collect(),
            bounds: Some(BoundsFile {
                voltage: self.bounds.voltage,
                voltage_rate: self.bounds.voltage_rate,
                current: self.bounds.current,
                tilt: self.bounds.tilt,
                heading_rate: self.bounds.heading_rate,
            }),
        };
        toml::to_string(&f).expect("spec serializes")
    }

    /// Knot indices and unwrapped knot headings: start, waypoints, end.
    fn knots(&self) -> Vec<(usize, GroupPose)> {
        let mut out = vec![(0, self.start.pose)];
        out.extend(self.waypoints.iter().map(|w| (w.k, w.pose)));
        out.push((self.horizon, self.end.pose));
        let mut prev = out[0].1.theta;
        for (_, g) in out.iter_mut().skip(1) {
            let th = prev + wrap_angle(g.theta - prev);
            g.theta = th;
            prev = th;
        }
        out
    }
}

/// Desk-scale problem: drive `distance` straight ahead through a waypoint halfway.
pub fn make_translation_spec(distance: f64, horizon: usize, step: f64, bounds: ConstraintBounds) -> PathSpec {
    PathSpec {
        start: BoundaryState::default(),
        end: BoundaryState::at_rest(GroupPose::new(distance, 0.0, 0.0)),
        waypoints: vec![Waypoint {
            k: horizon / 2,
            pose: GroupPose::new(0.5 * distance, 0.0, 0.0),
        }],
        horizon,
        step,
        bounds,
    }
}

/// Stay upright at the origin.
pub fn make_hover_spec(horizon: usize, step: f64, bounds: ConstraintBounds) -> PathSpec {
    PathSpec {
        start: BoundaryState::default(),
        end: BoundaryState::default(),
        waypoints: Vec::new(),
        horizon,
        step,
        bounds,
    }
}

/// Row and variable counts by constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConstraintCounts {
    pub variables: usize,
    /// Equality rows of the discrete dynamics.
    pub dynamics: usize,
    /// Variables fixed by the start and end states.
    pub boundary: usize,
    /// Variables fixed by waypoint poses.
    pub waypoint: usize,
    /// Variables with finite, non-fixed bounds.
    pub box_bounds: usize,
    /// Voltage-rate rows.
    pub rate: usize,
    /// Current-limit rows (algebraic current only).
    pub current_rows: usize,
}

enum Kind {
    Group,
    DelDyn,
    DelAlg,
    RkDyn,
    RkAlg,
    AlgCurrent,
    CostDyn,
    CostAlg,
    /// `(local row, local var, coefficient)`
    Linear(Vec<(usize, usize, f64)>),
}

struct Block {
    kind: Kind,
    vars: Vec<usize>,
    row: usize,
}

fn gather<const N: usize>(vars: &[usize], z: &[f64]) -> [f64; N] {
    std::array::from_fn(|i| z[vars[i]])
}

fn add_values<F: LocalFn<N, M>, const N: usize, const M: usize>(f: &F, b: &Block, z: &[f64], out: &mut [f64]) {
    let v = value(f, &gather::<N>(&b.vars, z));
    for i in 0..M {
        out[b.row + i] += v[i];
    }
}

fn add_jac<F: LocalFn<N, M>, const N: usize, const M: usize>(f: &F, b: &Block, z: &[f64], out: &mut Triplets) {
    let j = jac(f, &gather::<N>(&b.vars, z));
    for i in 0..M {
        for k in 0..N {
            out.push((b.row + i, b.vars[k], j[i][k]));
        }
    }
}

fn add_hess<F: LocalFn<N, M>, const N: usize, const M: usize>(f: &F, b: &Block, z: &[f64], w: &[f64; M], out: &mut Triplets) {
    let h = weighted_hessian(f, &gather::<N>(&b.vars, z), w);
    for a in 0..N {
        for c in 0..=a {
            let (i, j) = (b.vars[a].max(b.vars[c]), b.vars[a].min(b.vars[c]));
            out.push((i, j, h[a][c]));
        }
    }
}

/// Position of the decision variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Variables per node: 9 with current states, 7 without.
    pub node: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn stride(&self) -> usize {
        self.node + 2
    }
    pub fn node_index(&self, k: usize) -> usize {
        k * self.stride()
    }
    pub fn control_index(&self, k: usize) -> usize {
        k * self.stride() + self.node
    }
    pub fn num_vars(&self) -> usize {
        self.horizon * self.stride() + self.node
    }
}

/// A built transcription; implements [`NlpProblem`].
pub struct OcpProblem {
    pub spec: PathSpec,
    pub params: ParamSet,
    pub transcription: Transcription,
    pub layout: Layout,
    pub counts: ConstraintCounts,
    lz: Vec<f64>,
    uz: Vec<f64>,
    lg: Vec<f64>,
    ug: Vec<f64>,
    blocks: Vec<Block>,
    cost_blocks: Vec<Block>,
    cost_scale: f64,
    del_pre5: [[f64; 5]; 5],
    del_pre3: [[f64; 3]; 3],
    rk_scale9: [[f64; 9]; 9],
    rk_scale7: [[f64; 7]; 7],
}

fn invert<const M: usize>(a: [[f64; M]; M]) -> [[f64; M]; M] {
    let m = nalgebra::DMatrix::from_fn(M, M, |i, j| a[i][j]);
    let inv = m.try_inverse().expect("preconditioner block is invertible");
    std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)]))
}

fn identity<const M: usize>() -> [[f64; M]; M] {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }))
}

impl OcpProblem {
    /// Rescales the objective; the minimizer does not change.
    pub fn with_cost_scale(mut self, s: f64) -> Self {
        self.cost_scale = s;
        self
    }

    fn boundary_node(&self, b: &BoundaryState, theta: f64) -> Vec<f64> {
        let nu = b.velocity.body_rates(&self.params);
        let mut v = vec![b.pose.x, b.pose.y, theta, b.tilt, nu[0], nu[1], nu[2], nu[3], nu[4]];
        v.truncate(self.layout.node);
        v
    }

    fn block_values(&self, b: &Block, z: &[f64], out: &mut [f64]) {
        let (h, p) = (self.spec.step, &self.params);
        let order = self.transcription.method.rk_order().unwrap_or(RkOrder::One);
        match &b.kind {
            Kind::Group => add_values(&GroupDefect { h }, b, z, out),
            Kind::DelDyn => add_values(&DelDynamic { h, p, pre: self.del_pre5 }, b, z, out),
            Kind::DelAlg => add_values(&DelAlgebraic { h, p, pre: self.del_pre3 }, b, z, out),
            Kind::RkDyn => add_values(&RkDynamic { h, order, p, scale: self.rk_scale9 }, b, z, out),
            Kind::RkAlg => add_values(&RkAlgebraic { h, order, p, scale: self.rk_scale7 }, b, z, out),
            Kind::AlgCurrent => add_values(&AlgCurrent { p }, b, z, out),
            Kind::CostDyn => add_values(&CostDynamic { weight: self.cost_scale }, b, z, out),
            Kind::CostAlg => add_values(&CostAlgebraic { p, weight: self.cost_scale }, b, z, out),
            Kind::Linear(t) => {
                for &(r, v, c) in t {
                    out[b.row + r] += c * z[b.vars[v]];
                }
            }
        }
    }

    fn block_jac(&self, b: &Block, z: &[f64], out: &mut Triplets) {
        let (h, p) = (self.spec.step, &self.params);
        let order = self.transcription.method.rk_order().unwrap_or(RkOrder::One);
        match &b.kind {
            Kind::Group => add_jac(&GroupDefect { h }, b, z, out),
            Kind::DelDyn => add_jac(&DelDynamic { h, p, pre: self.del_pre5 }, b, z, out),
            Kind::DelAlg => add_jac(&DelAlgebraic { h, p, pre: self.del_pre3 }, b, z, out),
            Kind::RkDyn => add_jac(&RkDynamic { h, order, p, scale: self.rk_scale9 }, b, z, out),
            Kind::RkAlg => add_jac(&RkAlgebraic { h, order, p, scale: self.rk_scale7 }, b, z, out),
            Kind::AlgCurrent => add_jac(&AlgCurrent { p }, b, z, out),
            Kind::CostDyn => add_jac(&CostDynamic { weight: self.cost_scale }, b, z, out),
            Kind::CostAlg => add_jac(&CostAlgebraic { p, weight: self.cost_scale }, b, z, out),
            Kind::Linear(t) => {
                for &(r, v, c) in t {
                    out.push((b.row + r, b.vars[v], c));
                }
            }
        }
    }

    fn block_hess(&self, b: &Block, z: &[f64], w: &[f64], out: &mut Triplets) {
        let (h, p) = (self.spec.step, &self.params);
        let order = self.transcription.method.rk_order().unwrap_or(RkOrder::One);
        let r = b.row;
        match &b.kind {
            Kind::Group => add_hess(&GroupDefect { h }, b, z, &gather::<3>(&[r, r + 1, r + 2], w), out),
            Kind::DelDyn => add_hess(&DelDynamic { h, p, pre: self.del_pre5 }, b, z, &std::array::from_fn(|i| w[r + i]), out),
            Kind::DelAlg => add_hess(&DelAlgebraic { h, p, pre: self.del_pre3 }, b, z, &std::array::from_fn(|i| w[r + i]), out),
            Kind::RkDyn => add_hess(&RkDynamic { h, order, p, scale: self.rk_scale9 }, b, z, &std::array::from_fn(|i| w[r + i]), out),
            Kind::RkAlg => add_hess(&RkAlgebraic { h, order, p, scale: self.rk_scale7 }, b, z, &std::array::from_fn(|i| w[r + i]), out),
            Kind::AlgCurrent => add_hess(&AlgCurrent { p }, b, z, &[w[r], w[r + 1]], out),
            Kind::CostDyn => add_hess(&CostDynamic { weight: self.cost_scale }, b, z, &[w[0]], out),
            Kind::CostAlg => add_hess(&CostAlgebraic { p, weight: self.cost_scale }, b, z, &[w[0]], out),
            Kind::Linear(_) => {}
        }
    }

    /// Decision vector to states and controls.
    pub fn unpack(&self, z: &[f64]) -> (Vec<ReducedState>, Vec<ControlInput>) {
        let l = self.layout;
        let controls: Vec<ControlInput> = (0..l.horizon)
            .map(|k| ControlInput::new(z[l.control_index(k)], z[l.control_index(k) + 1]))
            .collect();
        let states = (0..=l.horizon)
            .map(|k| {
                let b = l.node_index(k);
                let mut a = [0.0; 9];
                a[..l.node].copy_from_slice(&z[b..b + l.node]);
                if self.transcription.current == CurrentModel::Algebraic {
                    let u = controls[k.min(l.horizon - 1)].to_array();
                    let i = model::algebraic_currents(&[a[4], a[5], a[6]], &u, &self.params);
                    a[7] = i[0];
                    a[8] = i[1];
                }
                ReducedState::from_array(a)
            })
            .collect();
        (states, controls)
    }

    /// Inverse of [`Self::unpack`]; algebraic currents are dropped.
    pub fn pack(&self, states: &[ReducedState], controls: &[ControlInput]) -> Result<Vec<f64>, OcpError> {
        let l = self.layout;
        if states.len() != l.horizon + 1 || controls.len() != l.horizon {
            return Err(OcpError::Length {
                want: l.horizon,
                got: controls.len(),
            });
        }
        let mut z = vec![0.0; l.num_vars()];
        for (k, s) in states.iter().enumerate() {
            let b = l.node_index(k);
            z[b..b + l.node].copy_from_slice(&s.to_array()[..l.node]);
        }
        for (k, u) in controls.iter().enumerate() {
            z[l.control_index(k)..l.control_index(k) + 2].copy_from_slice(&u.to_array());
        }
        Ok(z)
    }

    /// Largest violation of any row or variable bound at `z`, recomputed from
    /// scratch.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let mut g = vec![0.0; self.num_rows()];
        self.constraints(z, &mut g);
        let over = |v: f64, l: f64, u: f64| (l - v).max(v - u).max(0.0);
        let rows = (0..g.len()).map(|r| over(g[r], self.lg[r], self.ug[r]));
        let vars = (0..z.len()).map(|i| over(z[i], self.lz[i], self.uz[i]));
        rows.chain(vars).fold(0.0, f64::max)
    }

    /// Objective value without the scale factor.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let (states, controls) = self.unpack(z);
        let currents: Vec<[f64; 2]> = states[..controls.len()].iter().map(|s| [s.v_qr, s.v_ql]).collect();
        evaluate_cost(&controls, &currents).expect("lengths agree")
    }
}

/// Builds the stacked problem. `Method::Varint` uses the variational integrator as
/// the dynamics; the RK methods use one explicit step of the continuous model.
pub fn build_ocp(spec: &PathSpec, p: &ParamSet, tr: Transcription) -> Result<OcpProblem, OcpError> {
    spec.validate()?;
    let h = spec.step;
    let n_steps = spec.horizon;
    let node = match tr.current {
        CurrentModel::Dynamic => 9,
        CurrentModel::Algebraic => 7,
    };
    let layout = Layout {
        node,
        horizon: n_steps,
    };
    let nv = layout.num_vars();
    let inf = f64::INFINITY;
    let mut prob = OcpProblem {
        spec: spec.clone(),
        params: *p,
        transcription: tr,
        layout,
        counts: ConstraintCounts {
            variables: nv,
            ..Default::default()
        },
        lz: vec![-inf; nv],
        uz: vec![inf; nv],
        lg: Vec::new(),
        ug: Vec::new(),
        blocks: Vec::new(),
        cost_blocks: Vec::new(),
        cost_scale: 1.0,
        del_pre5: identity(),
        del_pre3: identity(),
        rk_scale9: identity(),
        rk_scale7: identity(),
    };

    // Row preconditioners from the linearization at rest.
    match tr.method {
        Method::Varint => {
            let j5 = jac(&DelDynamic { h, p, pre: identity() }, &[0.0; 14]);
            prob.del_pre5 = invert(std::array::from_fn(|i| std::array::from_fn(|k| j5[i][7 + k])));
            let j3 = jac(&DelAlgebraic { h, p, pre: identity() }, &[0.0; 10]);
            prob.del_pre3 = invert(std::array::from_fn(|i| std::array::from_fn(|k| j3[i][5 + k])));
        }
        m => {
            let order = m.rk_order().unwrap();
            let j9 = jac(&RkDynamic { h, order, p, scale: identity() }, &[0.0; 11]);
            prob.rk_scale9 = rk_scale::<9>(std::array::from_fn(|i| std::array::from_fn(|k| j9[i][k])), h);
            let j7 = jac(&RkAlgebraic { h, order, p, scale: identity() }, &[0.0; 9]);
            prob.rk_scale7 = rk_scale::<7>(std::array::from_fn(|i| std::array::from_fn(|k| j7[i][k])), h);
        }
    }

    let mut row = 0;
    let mut push_rows = |prob: &mut OcpProblem, count: usize, lo: f64, hi: f64| {
        let r = row;
        for _ in 0..count {
            prob.lg.push(lo);
            prob.ug.push(hi);
        }
        row += count;
        r
    };
    for k in 0..n_steps {
        let a = layout.node_index(k);
        let b = layout.node_index(k + 1);
        let u = layout.control_index(k);
        match tr.method {
            Method::Varint => {
                let r = push_rows(&mut prob, 3, 0.0, 0.0);
                prob.blocks.push(Block {
                    kind: Kind::Group,
                    vars: vec![a, a + 1, a + 2, b, b + 1, b + 2, a + 5, a + 6],
                    row: r,
                });
                let r = push_rows(&mut prob, 1, 0.0, 0.0);
                prob.blocks.push(Block {
                    kind: Kind::Linear(vec![(0, 0, -1.0 / h), (0, 1, 1.0 / h), (0, 2, -1.0)]),
                    vars: vec![a + 3, b + 3, a + 4],
                    row: r,
                });
                let mech = node - 4;
                let r = push_rows(&mut prob, if node == 9 { 5 } else { 3 }, 0.0, 0.0);
                let mut vars: Vec<usize> = (a + 3..a + 4 + mech).collect();
                vars.extend(b + 3..b + 4 + mech);
                vars.extend([u, u + 1]);
                prob.blocks.push(Block {
                    kind: if node == 9 { Kind::DelDyn } else { Kind::DelAlg },
                    vars,
                    row: r,
                });
                prob.counts.dynamics += if node == 9 { 9 } else { 7 };
            }
            _ => {
                let r = push_rows(&mut prob, node, 0.0, 0.0);
                let mut vars: Vec<usize> = (a..a + node).collect();
                vars.extend([u, u + 1]);
                prob.blocks.push(Block {
                    kind: if node == 9 { Kind::RkDyn } else { Kind::RkAlg },
                    vars,
                    row: r,
                });
                let mut lin = Vec::new();
                for i in 0..node {
                    for j in 0..node {
                        let s = if node == 9 { prob.rk_scale9[i][j] } else { prob.rk_scale7[i][j] };
                        if s != 0.0 {
                            lin.push((i, j, -s));
                        }
                    }
                }
                prob.blocks.push(Block {
                    kind: Kind::Linear(lin),
                    vars: (b..b + node).collect(),
                    row: r,
                });
                prob.counts.dynamics += node;
            }
        }
        if k >= 1 {
            let prev = layout.control_index(k - 1);
            let lim = spec.bounds.voltage_rate * h;
            let r = push_rows(&mut prob, 2, -lim, lim);
            prob.blocks.push(Block {
                kind: Kind::Linear(vec![(0, 0, 1.0), (0, 2, -1.0), (1, 1, 1.0), (1, 3, -1.0)]),
                vars: vec![prev, prev + 1, u, u + 1],
                row: r,
            });
            prob.counts.rate += 2;
        }
        if node == 7 {
            let lim = spec.bounds.current;
            let r = push_rows(&mut prob, 2, -lim, lim);
            prob.blocks.push(Block {
                kind: Kind::AlgCurrent,
                vars: vec![a + 4, a + 5, a + 6, u, u + 1],
                row: r,
            });
            prob.counts.current_rows += 2;
            prob.cost_blocks.push(Block {
                kind: Kind::CostAlg,
                vars: vec![a + 4, a + 5, a + 6, u, u + 1],
                row: 0,
            });
        } else {
            prob.cost_blocks.push(Block {
                kind: Kind::CostDyn,
                vars: vec![a + 7, a + 8, u, u + 1],
                row: 0,
            });
        }
    }

    // Boxes.
    let bd = spec.bounds;
    for k in 0..n_steps {
        let u = layout.control_index(k);
        for i in [u, u + 1] {
            prob.lz[i] = -bd.voltage;
            prob.uz[i] = bd.voltage;
        }
    }
    for k in 1..n_steps {
        let a = layout.node_index(k);
        prob.lz[a + 3] = -bd.tilt;
        prob.uz[a + 3] = bd.tilt;
        prob.lz[a + 6] = -bd.heading_rate;
        prob.uz[a + 6] = bd.heading_rate;
        if node == 9 {
            for i in [a + 7, a + 8] {
                prob.lz[i] = -bd.current;
                prob.uz[i] = bd.current;
            }
        }
    }
    // Fixed start, end and waypoint poses.
    let knots = spec.knots();
    let fix = |prob: &mut OcpProblem, i: usize, v: f64| {
        prob.lz[i] = v;
        prob.uz[i] = v;
    };
    let start = prob.boundary_node(&spec.start, knots[0].1.theta);
    let end = prob.boundary_node(&spec.end, knots.last().unwrap().1.theta);
    for i in 0..node {
        fix(&mut prob, layout.node_index(0) + i, start[i]);
        fix(&mut prob, layout.node_index(n_steps) + i, end[i]);
    }
    prob.counts.boundary = 2 * node;
    for (k, g) in &knots[1..knots.len() - 1] {
        let a = layout.node_index(*k);
        fix(&mut prob, a, g.x);
        fix(&mut prob, a + 1, g.y);
        fix(&mut prob, a + 2, g.theta);
        prob.counts.waypoint += 3;
    }
    prob.counts.box_bounds = (0..nv)
        .filter(|&i| prob.lz[i] != prob.uz[i] && (prob.lz[i].is_finite() || prob.uz[i].is_finite()))
        .count();

    Ok(prob)
}

/// Row scaling for an explicit step: pose rows by `1/h`, velocity rows by the
/// inverse of the step's velocity Jacobian at rest, which tames the stiff circuit.
fn rk_scale<const M: usize>(j: [[f64; M]; M], h: f64) -> [[f64; M]; M] {
    let nv = M - 4;
    let mut out = [[0.0; M]; M];
    for i in 0..4 {
        out[i][i] = 1.0 / h;
    }
    let m = nalgebra::DMatrix::from_fn(nv, nv, |a, b| j[4 + a][4 + b]);
    let inv = m.try_inverse().expect("step Jacobian at rest is invertible");
    for a in 0..nv {
        for b in 0..nv {
            out[4 + a][4 + b] = inv[(a, b)];
        }
    }
    out
}

impl NlpProblem for OcpProblem {
    fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }
    fn num_rows(&self) -> usize {
        self.lg.len()
    }
    fn var_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lz, &self.uz)
    }
    fn row_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lg, &self.ug)
    }
    fn cost(&self, z: &[f64]) -> f64 {
        let mut acc = [0.0];
        let mut total = 0.0;
        for b in &self.cost_blocks {
            acc[0] = 0.0;
            self.block_values(b, z, &mut acc);
            total += acc[0];
        }
        total
    }
    fn cost_gradient(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut t = Triplets::new();
        for b in &self.cost_blocks {
            self.block_jac(b, z, &mut t);
        }
        for (_, c, v) in t {
            out[c] += v;
        }
    }
    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for b in &self.blocks {
            self.block_values(b, z, out);
        }
    }
    fn jacobian(&self, z: &[f64], out: &mut Triplets) {
        for b in &self.blocks {
            self.block_jac(b, z, out);
        }
    }
    fn hessian(&self, z: &[f64], sigma: f64, w: &[f64], out: &mut Triplets) {
        for b in &self.blocks {
            self.block_hess(b, z, w, out);
        }
        if sigma != 0.0 {
            for b in &self.cost_blocks {
                self.block_hess(b, z, &[sigma], out);
            }
        }
    }
}

/// `1/2 sum_k u_k . i_k`
pub fn evaluate_cost(controls: &[ControlInput], currents: &[[f64; 2]]) -> Result<f64, OcpError> {
    if controls.len() != currents.len() {
        return Err(OcpError::Length {
            want: controls.len(),
            got: currents.len(),
        });
    }
    Ok(controls
        .iter()
        .zip(currents)
        .map(|(u, i)| 0.5 * (u.u_r * i[0] + u.u_l * i[1]))
        .sum())
}

/// Piecewise-linear poses through the knots, rates by forward differences,
/// zero tilt, current and voltage.
pub fn initial_guess(problem: &OcpProblem) -> Vec<f64> {
    let spec = &problem.spec;
    let l = problem.layout;
    let h = spec.step;
    let knots = spec.knots();
    let n = spec.horizon;
    let mut poses = vec![[0.0; 3]; n + 1];
    for w in knots.windows(2) {
        let (k0, g0) = w[0];
        let (k1, g1) = w[1];
        for k in k0..=k1 {
            let s = (k - k0) as f64 / (k1 - k0) as f64;
            poses[k] = [
                g0.x + s * (g1.x - g0.x),
                g0.y + s * (g1.y - g0.y),
                g0.theta + s * (g1.theta - g0.theta),
            ];
        }
    }
    let mut z = vec![0.0; l.num_vars()];
    for k in 0..=n {
        let a = l.node_index(k);
        z[a..a + 3].copy_from_slice(&poses[k]);
        if k < n {
            let [x, y, th] = poses[k];
            let [x1, y1, th1] = poses[k + 1];
            z[a + 5] = ((x1 - x) * th.cos() + (y1 - y) * th.sin()) / h;
            z[a + 6] = (th1 - th) / h;
        }
    }
    let (lz, uz) = problem.var_bounds();
    for i in 0..z.len() {
        if lz[i] == uz[i] {
            z[i] = lz[i];
        }
        z[i] = z[i].clamp(lz[i], uz[i]);
    }
    z
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub step: f64,
    pub transcription: Transcription,
    /// `N + 1` nodes, heading unwrapped. With algebraic currents the current
    /// fields hold the algebraic map evaluated with the node's own control.
    pub states: Vec<ReducedState>,
    pub controls: Vec<ControlInput>,
    pub cost: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub solve_seconds: f64,
}

impl OcpSolution {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Nodes of the variational integrator; wheel angles and charges are
    /// accumulated from the rates.
    pub fn nodes(&self, p: &ParamSet) -> Vec<DiscreteNode> {
        let mut s = BaseState::default();
        self.states
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let v = BaseVelocity::from_body_rates([x.v_alpha, x.v_d, x.v_theta, x.v_qr, x.v_ql], p);
                s.alpha = x.alpha;
                let node = DiscreteNode {
                    g: GroupPose::new(x.x, x.y, x.theta),
                    s,
                    v_s: v,
                    t_index: k,
                };
                s = varint::base_update(&s, &v, self.step);
                node
            })
            .collect()
    }

    /// Control held at time `t`; zero outside the horizon.
    pub fn control_at(&self, t: f64) -> ControlInput {
        let k = (t / self.step + 1e-9).floor();
        if k < 0.0 || k as usize >= self.controls.len() {
            return ControlInput::default();
        }
        self.controls[k as usize]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), OcpError> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| OcpError::Csv(e.to_string());
        wr.write_record(CSV_HEADER).map_err(err)?;
        for (k, x) in self.states.iter().enumerate() {
            let u = self.controls[k.min(self.controls.len().saturating_sub(1))];
            let mut rec: Vec<String> = vec![format!("{}", k as f64 * self.step)];
            rec.extend(x.to_array().iter().map(|v| format!("{v}")));
            rec.push(format!("{}", u.u_r));
            rec.push(format!("{}", u.u_l));
            wr.write_record(&rec).map_err(err)?;
        }
        wr.flush().map_err(|e| OcpError::Csv(e.to_string()))?;
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 12] = ["t", "x", "y", "theta", "alpha", "v_alpha", "v_d", "v_theta", "i_R", "i_L", "u_R", "u_L"];

/// A plan read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTable {
    pub step: f64,
    pub states: Vec<ReducedState>,
    /// One fewer than `states`; the last row's voltage repeats the one before.
    pub controls: Vec<ControlInput>,
}

impl PlanTable {
    pub fn control_at(&self, t: f64) -> ControlInput {
        let k = (t / self.step + 1e-9).floor();
        if k < 0.0 || k as usize >= self.controls.len() {
            return ControlInput::default();
        }
        self.controls[k as usize]
    }
}

impl From<&OcpSolution> for PlanTable {
    fn from(s: &OcpSolution) -> Self {
        Self {
            step: s.step,
            states: s.states.clone(),
            controls: s.controls.clone(),
        }
    }
}

pub fn read_plan_csv<R: Read>(r: R) -> Result<PlanTable, OcpError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| OcpError::Csv(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(OcpError::Csv(format!("unexpected header {:?}", header)));
    }
    let mut t = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| OcpError::Csv(e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| OcpError::Csv(format!("row {}: {e}", line + 2)))?;
        if v.len() != 12 {
            return Err(OcpError::Csv(format!("row {}: {} columns", line + 2, v.len())));
        }
        t.push(v[0]);
        states.push(ReducedState::from_array(std::array::from_fn(|i| v[1 + i])));
        controls.push(ControlInput::new(v[10], v[11]));
    }
    if states.len() < 2 {
        return Err(OcpError::Csv("need at least two rows".into()));
    }
    controls.pop();
    Ok(PlanTable {
        step: t[1] - t[0],
        states,
        controls,
    })
}

/// Largest violation of each limit, re-evaluated from the solution itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundViolations {
    pub voltage: f64,
    pub voltage_rate: f64,
    pub current: f64,
    pub tilt: f64,
    pub heading_rate: f64,
}

impl BoundViolations {
    pub fn max(&self) -> f64 {
        self.voltage
            .max(self.voltage_rate)
            .max(self.current)
            .max(self.tilt)
            .max(self.heading_rate)
    }
}

pub fn check_bounds(states: &[ReducedState], controls: &[ControlInput], step: f64, b: &ConstraintBounds) -> BoundViolations {
    let over = |v: f64, lim: f64| (v.abs() - lim).max(0.0);
    let mut out = BoundViolations::default();
    for u in controls {
        out.voltage = out.voltage.max(over(u.u_r, b.voltage)).max(over(u.u_l, b.voltage));
    }
    for w in controls.windows(2) {
        let lim = b.voltage_rate * step;
        out.voltage_rate = out
            .voltage_rate
            .max(over(w[0].u_r - w[1].u_r, lim))
            .max(over(w[0].u_l - w[1].u_l, lim));
    }
    for x in &states[..controls.len()] {
        out.current = out.current.max(over(x.v_qr, b.current)).max(over(x.v_ql, b.current));
        out.tilt = out.tilt.max(over(x.alpha, b.tilt));
        out.heading_rate = out.heading_rate.max(over(x.v_theta, b.heading_rate));
    }
    out
}

/// Largest state mismatch when each solved node is advanced one step by the
/// variational integrator with the solved voltage.
pub fn resimulation_error(sol: &OcpSolution, p: &ParamSet) -> Result<f64, varint::VarintError> {
    let nodes = sol.nodes(p);
    let opts = NewtonOptions {
        tol: 1e-12,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for k in 0..sol.horizon() {
        let next = varint::varint_step(&nodes[k], &Forcing::Control(sol.controls[k]), sol.step, p, &opts)?;
        let a = next.reduced_state(p).to_array();
        let b = sol.states[k + 1].to_array();
        for i in 0..9 {
            let d = if i == 2 { wrap_angle(a[i] - b[i]) } else { a[i] - b[i] };
            worst = worst.max(d.abs());
        }
    }
    Ok(worst)
}

/// Builds, solves and unpacks with the bundled solver.
pub fn solve(problem: &OcpProblem, z0: &[f64], opts: &SolverOptions) -> Result<OcpSolution, OcpError> {
    solve_with(&InteriorPoint, problem, z0, opts)
}

pub fn solve_with(solver: &dyn NlpSolver, problem: &OcpProblem, z0: &[f64], opts: &SolverOptions) -> Result<OcpSolution, OcpError> {
    let r = solver.solve(problem, z0, opts)?;
    let (states, controls) = problem.unpack(&r.z);
    Ok(OcpSolution {
        step: problem.spec.step,
        transcription: problem.transcription,
        cost: problem.objective(&r.z),
        states,
        controls,
        stationarity: r.stationarity,
        feasibility: r.feasibility,
        iterations: r.iterations,
        status: r.status,
        solve_seconds: r.seconds,
    })
}
