//! Linear design model, discrete LQR, guidance errors and the pose observer.
//!
//! The design model is the reduced state linearized at rest with the linear
//! damping overrides. `y` drops out at zero heading and `x` becomes the
//! travelled distance `d`, leaving eight states:
//!
//! ```text
//! index  0  1      2      3        4    5        6    7
//! state  d  theta  alpha  v_alpha  v_d  v_theta  i_R  i_L
//! ```
//!
//! `Q_Y` weights are attached positionally in that order.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{c, jac, Real};
use crate::model::{reduced_rhs, ControlInput, ReducedState};
use crate::params::ParamSet;
use crate::se2::{wrap_angle, GroupPose};

pub const LIN_DIM: usize = 8;
/// Reduced-state index of each linear state.
pub const LIN_FROM_REDUCED: [usize; LIN_DIM] = [0, 2, 3, 4, 5, 6, 7, 8];
pub const CONTROL_PERIOD: f64 = 0.005;
/// Diagonal of `Q_Y` in the state order above.
pub const Q_Y: [f64; LIN_DIM] = [1500.0, 350.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0];

pub type LinMatrix = SMatrix<f64, LIN_DIM, LIN_DIM>;
pub type LinInput = SMatrix<f64, LIN_DIM, 2>;
pub type Gain = SMatrix<f64, 2, LIN_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("Riccati iteration did not converge after {0} doublings (pair not stabilizable?)")]
    NotStabilizable(usize),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("design file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a_c: LinMatrix,
    pub b_c: LinInput,
    pub a_d: LinMatrix,
    pub b_d: LinInput,
    pub step: f64,
}

impl LinearModel {
    pub fn new(p: &ParamSet, step: f64) -> Self {
        let (a_c, b_c) = linearize(p);
        let (ad, bd) = c2d_zoh(&DMatrix::from_fn(8, 8, |i, k| a_c[(i, k)]), &DMatrix::from_fn(8, 2, |i, k| b_c[(i, k)]), step);
        Self {
            a_c,
            b_c,
            a_d: LinMatrix::from_fn(|i, k| ad[(i, k)]),
            b_d: LinInput::from_fn(|i, k| bd[(i, k)]),
            step,
        }
    }
}

/// Jacobians of the reduced dynamics at the upright rest state, with the damping
/// taken from `p.linear`.
pub fn linearize(p: &ParamSet) -> (LinMatrix, LinInput) {
    let lp = p.with_linear_damping();
    let (_, j) = jac::<11, 9, _>(
        |z| {
            let x: [_; 9] = std::array::from_fn(|i| z[i]);
            reduced_rhs(&x, &[z[9], z[10]], &lp).expect("mass matrix is regular at rest")
        },
        &[0.0; 11],
    );
    let a = LinMatrix::from_fn(|i, k| j[LIN_FROM_REDUCED[i]][LIN_FROM_REDUCED[k]]);
    let b = LinInput::from_fn(|i, k| j[LIN_FROM_REDUCED[i]][9 + k]);
    (a, b)
}

/// Exact zero-order-hold pair from the exponential of `[[A, B], [0, 0]] h`.
pub fn c2d_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * h));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Stabilizing solution of the discrete algebraic Riccati equation by the
/// structure-preserving doubling algorithm. Tolerates a semidefinite `Q`.
pub fn dare_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, TrackingError> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or(TrackingError::Singular("R"))?;
    let mut ak = a.clone();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    const MAX_DOUBLINGS: usize = 60;
    for _ in 0..MAX_DOUBLINGS {
        let w = (&eye + &gk * &hk).try_inverse().ok_or(TrackingError::Singular("I + G H"))?;
        let wa = &w * &ak;
        let a_next = &ak * &wa;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &wa;
        let change = (&h_next - &hk).amax();
        let scale = h_next.amax().max(1.0);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(TrackingError::NotStabilizable(MAX_DOUBLINGS));
        }
        if change <= 1e-15 * scale {
            let p = (&hk + hk.transpose()) * 0.5;
            return Ok(polish(a, b, q, r, p));
        }
    }
    Err(TrackingError::NotStabilizable(MAX_DOUBLINGS))
}

/// A few plain Riccati recursions to shave roundoff left by the doubling.
fn polish(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, mut p: DMatrix<f64>) -> DMatrix<f64> {
    for _ in 0..3 {
        let next = q + riccati_map(a, b, r, &p);
        p = (&next + next.transpose()) * 0.5;
    }
    p
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let k = s.lu().solve(&(&bt_p * a)).unwrap_or_else(|| DMatrix::zeros(b.ncols(), a.ncols()));
    a.transpose() * p * a - a.transpose() * p * b * k
}

/// `P - A'PA + A'PB (R + B'PB)^-1 B'PA - Q`, max-abs.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (p - riccati_map(a, b, r, p) - q).amax()
}

pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), TrackingError> {
    let p = dare_solve(a, b, q, r)?;
    let bt_p = b.transpose() * &p;
    let k = (r + &bt_p * b)
        .lu()
        .solve(&(&bt_p * a))
        .ok_or(TrackingError::Singular("R + B'PB"))?;
    Ok((k, p))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub q_diag: [f64; LIN_DIM],
    pub r_diag: [f64; 2],
    pub k: Gain,
    pub p: LinMatrix,
    pub step: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignFile {
    step: f64,
    q_diag: Vec<f64>,
    r_diag: Vec<f64>,
    k: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
}

impl LqrDesign {
    pub fn new(model: &LinearModel, q_diag: [f64; LIN_DIM], r_diag: [f64; 2]) -> Result<Self, TrackingError> {
        let a = DMatrix::from_fn(8, 8, |i, k| model.a_d[(i, k)]);
        let b = DMatrix::from_fn(8, 2, |i, k| model.b_d[(i, k)]);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&q_diag));
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&r_diag));
        let (k, p) = lqr_gain(&a, &b, &q, &r)?;
        Ok(Self {
            q_diag,
            r_diag,
            k: Gain::from_fn(|i, j| k[(i, j)]),
            p: LinMatrix::from_fn(|i, j| p[(i, j)]),
            step: model.step,
        })
    }

    /// `Q_Y`, `R = I` on the 5 ms model.
    pub fn default_for(p: &ParamSet) -> Result<Self, TrackingError> {
        Self::new(&LinearModel::new(p, CONTROL_PERIOD), Q_Y, [1.0, 1.0])
    }

    pub fn closed_loop_radius(&self, model: &LinearModel) -> f64 {
        let acl = model.a_d - model.b_d * self.k;
        spectral_radius(&DMatrix::from_fn(8, 8, |i, k| acl[(i, k)]))
    }

    /// `u_hat = K e`, with `e` the reference minus the estimate in linear
    /// coordinates and the first two entries replaced by the guidance errors.
    pub fn feedback(&self, estimate: &ReducedState, reference: &ReducedState) -> ControlInput {
        let u = self.k * linear_error(estimate, reference);
        ControlInput::new(u[0], u[1])
    }

    pub fn to_toml(&self) -> String {
        let rows = |m: &dyn Fn(usize, usize) -> f64, r: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..r).map(|i| (0..cols).map(|j| m(i, j)).collect()).collect()
        };
        let f = DesignFile {
            step: self.step,
            q_diag: self.q_diag.to_vec(),
            r_diag: self.r_diag.to_vec(),
            k: rows(&|i, j| self.k[(i, j)], 2, LIN_DIM),
            p: rows(&|i, j| self.p[(i, j)], LIN_DIM, LIN_DIM),
        };
        toml::to_string(&f).expect("design serializes")
    }

    pub fn from_toml(src: &str) -> Result<Self, TrackingError> {
        let f: DesignFile = toml::from_str(src).map_err(|e| TrackingError::Format(e.to_string()))?;
        let bad = |what: &str| TrackingError::Format(format!("`{what}` has the wrong shape"));
        if f.q_diag.len() != LIN_DIM {
            return Err(bad("q_diag"));
        }
        if f.r_diag.len() != 2 {
            return Err(bad("r_diag"));
        }
        if f.k.len() != 2 || f.k.iter().any(|r| r.len() != LIN_DIM) {
            return Err(bad("k"));
        }
        if f.p.len() != LIN_DIM || f.p.iter().any(|r| r.len() != LIN_DIM) {
            return Err(bad("p"));
        }
        Ok(Self {
            q_diag: std::array::from_fn(|i| f.q_diag[i]),
            r_diag: [f.r_diag[0], f.r_diag[1]],
            k: Gain::from_fn(|i, j| f.k[i][j]),
            p: LinMatrix::from_fn(|i, j| f.p[i][j]),
            step: f.step,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GuidanceError {
    pub e_d: f64,
    pub e_theta: f64,
}

/// Along-track distance to the reference in the robot frame and the wrapped
/// heading difference.
pub fn guidance_error(pose: GroupPose, reference: GroupPose) -> GuidanceError {
    let (s, c) = pose.theta.sin_cos();
    GuidanceError {
        e_d: c * (reference.x - pose.x) + s * (reference.y - pose.y),
        e_theta: wrap_angle(reference.theta - pose.theta),
    }
}

fn pose_of(s: &ReducedState) -> GroupPose {
    GroupPose::new(s.x, s.y, s.theta)
}

pub fn linear_error(estimate: &ReducedState, reference: &ReducedState) -> SVector<f64, LIN_DIM> {
    let g = guidance_error(pose_of(estimate), pose_of(reference));
    let e = estimate.to_array();
    let r = reference.to_array();
    let mut out = SVector::<f64, LIN_DIM>::zeros();
    out[0] = g.e_d;
    out[1] = g.e_theta;
    for i in 2..LIN_DIM {
        let j = LIN_FROM_REDUCED[i];
        out[i] = r[j] - e[j];
    }
    out
}

// ---------------------------------------------------------------------------
// Observer

/// Standard deviations of the observer's noise model. Measurement entries are
/// per sample; process entries are per 5 ms tick on the reduced state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverNoise {
    pub pose_position: f64,
    pub pose_heading: f64,
    pub tilt: f64,
    pub tilt_rate: f64,
    pub speed: f64,
    pub heading_rate: f64,
    pub process: [f64; 9],
}

impl Default for ObserverNoise {
    fn default() -> Self {
        Self {
            pose_position: 2e-3,
            pose_heading: 1e-2,
            tilt: 5e-3,
            tilt_rate: 2e-2,
            speed: 1e-2,
            heading_rate: 2e-2,
            process: [2e-4, 2e-4, 2e-4, 2e-4, 2e-2, 1e-2, 2e-2, 5e-2, 5e-2],
        }
    }
}

/// Onboard measurement available every tick: tilt, tilt rate, forward speed
/// and heading rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastMeasurement {
    pub alpha: f64,
    pub v_alpha: f64,
    pub v_d: f64,
    pub v_theta: f64,
}

/// External pose fix stamped with the time it was taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMeasurement {
    pub time: f64,
    pub pose: GroupPose,
}

type Cov = SMatrix<f64, 9, 9>;
type State = SVector<f64, 9>;

#[derive(Debug, Clone)]
struct Record {
    time: f64,
    prior: State,
    prior_cov: Cov,
    fast: Option<FastMeasurement>,
    poses: Vec<PoseMeasurement>,
    post: State,
    post_cov: Cov,
    /// Input applied from this tick to the next; set once known.
    u_out: Option<ControlInput>,
}

/// One prediction tick of the linear model: the linear states advance with
/// `(A_d, B_d)` and the distance increment is laid along the mid-step heading.
fn predict_generic<D: Real>(s: &[D; 9], u: &[D; 2], model: &LinearModel) -> [D; 9] {
    let mut lin = [c::<D>(0.0); LIN_DIM];
    for i in 1..LIN_DIM {
        lin[i] = s[LIN_FROM_REDUCED[i]];
    }
    let mut next = [c::<D>(0.0); LIN_DIM];
    for i in 0..LIN_DIM {
        let mut acc = u[0] * model.b_d[(i, 0)] + u[1] * model.b_d[(i, 1)];
        for k in 1..LIN_DIM {
            acc += lin[k] * model.a_d[(i, k)];
        }
        next[i] = acc;
    }
    let th_mid = (s[2] + next[1]) * 0.5;
    let mut out = *s;
    out[0] = s[0] + next[0] * th_mid.cos();
    out[1] = s[1] + next[0] * th_mid.sin();
    for i in 1..LIN_DIM {
        out[LIN_FROM_REDUCED[i]] = next[i];
    }
    out
}

/// Model the observer uses between measurements.
pub fn predict_state(s: &ReducedState, u: &ControlInput, model: &LinearModel) -> ReducedState {
    ReducedState::from_array(predict_generic(&s.to_array(), &u.to_array(), model))
}

#[derive(Debug, Clone)]
pub struct Observer {
    model: LinearModel,
    noise: ObserverNoise,
    history: VecDeque<Record>,
    horizon: usize,
    pub stale_dropped: usize,
}

impl Observer {
    /// `buffer_seconds` bounds how far back a delayed fix can be replayed.
    pub fn new(model: LinearModel, noise: ObserverNoise, start: ReducedState, start_cov: [f64; 9], buffer_seconds: f64) -> Self {
        let s = State::from_column_slice(&start.to_array());
        let p = Cov::from_diagonal(&SVector::from(start_cov.map(|v| v * v)));
        let horizon = (buffer_seconds / model.step).ceil() as usize + 1;
        let rec = Record {
            time: 0.0,
            prior: s,
            prior_cov: p,
            fast: None,
            poses: Vec::new(),
            post: s,
            post_cov: p,
            u_out: None,
        };
        Self {
            model,
            noise,
            history: VecDeque::from([rec]),
            horizon,
            stale_dropped: 0,
        }
    }

    pub fn time(&self) -> f64 {
        self.current().time
    }

    fn current(&self) -> &Record {
        self.history.back().expect("history never empty")
    }

    pub fn estimate(&self) -> ReducedState {
        ReducedState::from_array(self.current().post.into())
    }

    pub fn covariance(&self) -> [[f64; 9]; 9] {
        let p = self.current().post_cov;
        std::array::from_fn(|i| std::array::from_fn(|k| p[(i, k)]))
    }

    fn predict(&self, s: &State, p: &Cov, u: &ControlInput) -> (State, Cov) {
        let x: [f64; 11] = std::array::from_fn(|i| if i < 9 { s[i] } else { u.to_array()[i - 9] });
        let model = &self.model;
        let (v, j) = jac::<11, 9, _>(
            |z| {
                let st: [_; 9] = std::array::from_fn(|i| z[i]);
                predict_generic(&st, &[z[9], z[10]], model)
            },
            &x,
        );
        let f = Cov::from_fn(|i, k| j[i][k]);
        let qd = SVector::<f64, 9>::from(self.noise.process.map(|v| v * v));
        let p_next = f * p * f.transpose() + Cov::from_diagonal(&qd);
        (State::from(v), symmetric(p_next))
    }

    fn update<const M: usize>(
        s: &State,
        p: &Cov,
        idx: [usize; M],
        y: [f64; M],
        std: [f64; M],
        wrap: [bool; M],
    ) -> (State, Cov) {
        let h = SMatrix::<f64, M, 9>::from_fn(|i, k| if idx[i] == k { 1.0 } else { 0.0 });
        let r = SMatrix::<f64, M, M>::from_diagonal(&SVector::from(std.map(|v| v * v)));
        let innov = SVector::<f64, M>::from_fn(|i, _| {
            let d = y[i] - s[idx[i]];
            if wrap[i] {
                wrap_angle(d)
            } else {
                d
            }
        });
        let s_mat = h * p * h.transpose() + r;
        let Some(s_inv) = s_mat.try_inverse() else {
            return (*s, *p);
        };
        let k = p * h.transpose() * s_inv;
        let ikh = Cov::identity() - k * h;
        // Joseph form keeps the covariance symmetric positive semidefinite.
        let p_new = ikh * p * ikh.transpose() + k * r * k.transpose();
        (s + k * innov, symmetric(p_new))
    }

    fn correct(&self, s: &State, p: &Cov, fast: Option<&FastMeasurement>, poses: &[PoseMeasurement]) -> (State, Cov) {
        let (mut s, mut p) = (*s, *p);
        let n = &self.noise;
        if let Some(f) = fast {
            (s, p) = Self::update(
                &s,
                &p,
                [3, 4, 5, 6],
                [f.alpha, f.v_alpha, f.v_d, f.v_theta],
                [n.tilt, n.tilt_rate, n.speed, n.heading_rate],
                [false; 4],
            );
        }
        for m in poses {
            (s, p) = Self::update(
                &s,
                &p,
                [0, 1, 2],
                [m.pose.x, m.pose.y, m.pose.theta],
                [n.pose_position, n.pose_position, n.pose_heading],
                [false, false, true],
            );
        }
        (s, p)
    }

    /// Advances one tick with the input applied over it, then folds in the
    /// onboard measurement taken at the new time.
    pub fn tick(&mut self, u: ControlInput, fast: Option<FastMeasurement>) {
        let (s, p, t) = {
            let cur = self.current();
            (cur.post, cur.post_cov, cur.time)
        };
        self.history.back_mut().expect("history never empty").u_out = Some(u);
        let (prior, prior_cov) = self.predict(&s, &p, &u);
        let (post, post_cov) = self.correct(&prior, &prior_cov, fast.as_ref(), &[]);
        self.history.push_back(Record {
            time: t + self.model.step,
            prior,
            prior_cov,
            fast,
            poses: Vec::new(),
            post,
            post_cov,
            u_out: None,
        });
        while self.history.len() > self.horizon {
            self.history.pop_front();
        }
    }

    /// Applies a pose fix at the tick it was taken and replays everything since.
    /// Returns `false` when the fix is older than the buffer (or stamped in the
    /// future) and was dropped.
    pub fn inject_pose(&mut self, m: PoseMeasurement) -> bool {
        let step = self.model.step;
        let t0 = self.history.front().expect("history never empty").time;
        let pos = ((m.time - t0) / step).round();
        if pos < 0.0 || pos as usize >= self.history.len() || ((t0 + pos * step) - m.time).abs() > 0.25 * step {
            self.stale_dropped += 1;
            return false;
        }
        let j = pos as usize;
        self.history[j].poses.push(m);
        for i in j..self.history.len() {
            if i > j {
                let prev = &self.history[i - 1];
                let u = prev.u_out.expect("input recorded before the next tick");
                let (prior, prior_cov) = self.predict(&prev.post, &prev.post_cov, &u);
                self.history[i].prior = prior;
                self.history[i].prior_cov = prior_cov;
            }
            let rec = &self.history[i];
            let (post, post_cov) = self.correct(&rec.prior, &rec.prior_cov, rec.fast.as_ref(), &rec.poses);
            self.history[i].post = post;
            self.history[i].post_cov = post_cov;
        }
        true
    }
}

fn symmetric(p: Cov) -> Cov {
    (p + p.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_dare_closed_form() {
        // Clearing the denominator of P = 1 + P/4 - (P/2)^2 / (1 + P) leaves P^2 - P/4 - 1 = 0.
        let one = DMatrix::from_element(1, 1, 1.0);
        let (k, p) = lqr_gain(&DMatrix::from_element(1, 1, 0.5), &one, &one, &one).unwrap();
        let exact = (0.25 + (0.25f64 * 0.25 + 4.0).sqrt()) / 2.0;
        assert!((p[(0, 0)] - exact).abs() < 1e-12);
        assert!((k[(0, 0)] - 0.5 * exact / (1.0 + exact)).abs() < 1e-12);
    }

    #[test]
    fn guidance_basic() {
        let g = guidance_error(GroupPose::default(), GroupPose::new(1.0, 0.0, 0.0));
        assert_eq!(g, GuidanceError { e_d: 1.0, e_theta: 0.0 });
    }
}
