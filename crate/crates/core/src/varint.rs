//! Discrete variational integrator on `SE(2) x M`.
//!
//! A node carries the pose `g_k`, the base coordinates
//! `s_k = (alpha, phi_r, phi_l, q_r, q_l)` and the base velocity `v_k` that moves
//! the node to the next one:
//!
//! ```text
//! g_{k+1} = g_k exp(-h A v_k)
//! s_{k+1} = s_k + h v_k
//! ```
//!
//! `v_{k+1}` then solves the discrete Euler-Lagrange equation
//!
//! ```text
//! p_{k+1} - h sigma_{k+1} - A^T D(h xi_{k+1})^T mu_{k+1}
//!     = p_k - A^T D(-h xi_k)^T mu_k + h F_k
//! ```
//!
//! with `p`, `sigma`, `mu` the partials of the reduced Lagrangian in `v`, `s` and
//! `xi`, `xi_k = -A v_k`, and `D(zeta)` the matrix of [`dexpinv_rt`].
//!
//! [`dexpinv_rt`]: crate::se2::dexpinv_rt

use num_dual::DualSVec64;
use thiserror::Error;

use crate::ad::{c, jac, solve_dense, Real};
use crate::model::{self, ControlInput, FullConfiguration, FullVelocity, ReducedState};
use crate::params::ParamSet;
use crate::se2::{self, compose, dexpinv_matrix, AlgebraVector, GroupPose};

#[derive(Debug, Error, PartialEq)]
pub enum VarintError {
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Newton Jacobian at iteration {0}")]
    SingularJacobian(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseState {
    pub alpha: f64,
    pub phi_r: f64,
    pub phi_l: f64,
    pub q_r: f64,
    pub q_l: f64,
}

/// Rates of the [`BaseState`] fields.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseVelocity {
    pub alpha: f64,
    pub phi_r: f64,
    pub phi_l: f64,
    pub q_r: f64,
    pub q_l: f64,
}

macro_rules! base_arrays {
    ($t:ty) => {
        impl $t {
            pub fn to_array(&self) -> [f64; 5] {
                [self.alpha, self.phi_r, self.phi_l, self.q_r, self.q_l]
            }
            pub fn from_array(a: [f64; 5]) -> Self {
                Self {
                    alpha: a[0],
                    phi_r: a[1],
                    phi_l: a[2],
                    q_r: a[3],
                    q_l: a[4],
                }
            }
        }
    };
}
base_arrays!(BaseState);
base_arrays!(BaseVelocity);

impl BaseVelocity {
    /// From `(v_alpha, v_d, v_theta, i_r, i_l)`.
    pub fn from_body_rates(nu: [f64; 5], p: &ParamSet) -> Self {
        Self::from_array(model::base_rates_from_nu(&nu, p))
    }

    /// `(v_alpha, v_d, v_theta, i_r, i_l)`
    pub fn body_rates(&self, p: &ParamSet) -> [f64; 5] {
        model::nu_from_base_rates(&self.to_array(), p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteNode {
    pub g: GroupPose,
    pub s: BaseState,
    pub v_s: BaseVelocity,
    pub t_index: usize,
}

impl DiscreteNode {
    pub fn at_rest(g: GroupPose, alpha: f64) -> Self {
        Self {
            g,
            s: BaseState {
                alpha,
                ..Default::default()
            },
            v_s: BaseVelocity::default(),
            t_index: 0,
        }
    }

    /// Continuous-model state with the same pose, tilt and rates.
    pub fn reduced_state(&self, p: &ParamSet) -> ReducedState {
        let nu = self.v_s.body_rates(p);
        ReducedState {
            x: self.g.x,
            y: self.g.y,
            theta: self.g.theta,
            alpha: self.s.alpha,
            v_alpha: nu[0],
            v_d: nu[1],
            v_theta: nu[2],
            v_qr: nu[3],
            v_ql: nu[4],
        }
    }
}

/// Where the dissipative part of the forcing is evaluated in the update for `v_{k+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForcingScheme {
    /// Friction and resistive losses at the new velocity `v_{k+1}`, voltage `u_k`.
    /// Stable for the stiff circuit at any step.
    #[default]
    ImplicitDissipation,
    /// All forcing at `(v_k, u_k)`. The circuit update then has the amplification
    /// factor `1 - h R / L`, which is unstable for `h > 2 L / R`.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: ForcingScheme,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            scheme: ForcingScheme::default(),
        }
    }
}

/// External forcing for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Forcing {
    /// Fixed covector on `(alpha, phi_r, phi_l, q_r, q_l)`.
    Covector([f64; 5]),
    /// Voltages; friction and losses follow [`NewtonOptions::scheme`].
    Control(ControlInput),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NewtonReport {
    /// Residual infinity norm before each iteration and after the last one.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// `xi = -A v`
pub(crate) fn body_velocity<D: Real>(v: &[D; 5], p: &ParamSet) -> [D; 3] {
    let r = p.wheel_radius;
    let d = p.half_track;
    [(v[1] + v[2]) * (0.5 * r), c(0.0), (v[1] - v[2]) * (0.5 * r / d)]
}

/// `A^T y`
fn connection_transpose<D: Real>(y: &[D; 3], p: &ParamSet) -> [D; 5] {
    let r = p.wheel_radius;
    let d = p.half_track;
    let zero = c::<D>(0.0);
    [
        zero,
        -(y[0] * (0.5 * r)) - y[2] * (0.5 * r / d),
        -(y[0] * (0.5 * r)) + y[2] * (0.5 * r / d),
        zero,
        zero,
    ]
}

pub fn connection_local_form(p: &ParamSet) -> [[f64; 5]; 3] {
    let r = p.wheel_radius;
    let d = p.half_track;
    [
        [0.0, -0.5 * r, -0.5 * r, 0.0, 0.0],
        [0.0; 5],
        [0.0, -0.5 * r / d, 0.5 * r / d, 0.0, 0.0],
    ]
}

/// Reduced Lagrangian: the Lagrangian at the group identity with planar body
/// velocity `xi`.
pub fn reduced_lagrangian(s: &BaseState, v_s: &BaseVelocity, xi: &AlgebraVector, p: &ParamSet) -> f64 {
    let q = FullConfiguration {
        alpha: s.alpha,
        phi_r: s.phi_r,
        phi_l: s.phi_l,
        q_r: s.q_r,
        q_l: s.q_l,
        ..Default::default()
    };
    let v = FullVelocity {
        x: xi.v1,
        y: xi.v2,
        theta: xi.omega,
        alpha: v_s.alpha,
        phi_r: v_s.phi_r,
        phi_l: v_s.phi_l,
        q_r: v_s.q_r,
        q_l: v_s.q_l,
    };
    model::lagrangian(&q, &v, p)
}

/// `(dl/dv_s, dl/ds, dl/dxi)` of the reduced Lagrangian.
pub(crate) fn lagrangian_partials<D: Real>(s: &[D; 5], v: &[D; 5], xi: &[D; 3], p: &ParamSet) -> ([D; 5], [D; 5], [D; 3]) {
    let zero = c::<D>(0.0);
    let m = model::mass_matrix(zero, s[0], p);
    let (_, ma) = model::mass_matrix_partials(zero, s[0], p);
    let w = [xi[0], xi[1], xi[2], v[0], v[1], v[2], v[3], v[4]];
    let mut mw = [zero; 8];
    let mut quad = zero;
    for i in 0..8 {
        let mut acc = zero;
        let mut acc_a = zero;
        for j in 0..8 {
            acc += m[i][j] * w[j];
            acc_a += ma[i][j] * w[j];
        }
        mw[i] = acc;
        quad += w[i] * acc_a;
    }
    let k = p.emf_const * p.ratio_total;
    let pv = [
        mw[3] + (s[3] + s[4]) * k,
        mw[4] - s[3] * k,
        mw[5] - s[4] * k,
        mw[6],
        mw[7],
    ];
    let sigma = [
        quad * 0.5 + s[0].sin() * (p.body_mass * p.gravity * p.com_height),
        zero,
        zero,
        -(v[1] - v[0]) * k,
        -(v[2] - v[0]) * k,
    ];
    (pv, sigma, [mw[0], mw[1], mw[2]])
}

/// `A^T D(zeta)^T mu`
fn lifted_momentum<D: Real>(zeta: [D; 3], mu: &[D; 3], p: &ParamSet) -> [D; 5] {
    let dm = dexpinv_matrix(zeta);
    let y: [D; 3] = std::array::from_fn(|j| dm[0][j] * mu[0] + dm[1][j] * mu[1] + dm[2][j] * mu[2]);
    connection_transpose(&y, p)
}

/// Discrete Euler-Lagrange residual for the step `(s_k, v_k) -> (s_{k+1}, v_{k+1})`
/// with forcing `f` acting over the interval `[t_k, t_{k+1}]`.
pub(crate) fn del_generic<D: Real>(
    s_k: &[D; 5],
    v_k: &[D; 5],
    s_k1: &[D; 5],
    v_k1: &[D; 5],
    f: &[D; 5],
    h: f64,
    p: &ParamSet,
) -> [D; 5] {
    let xi_k = body_velocity(v_k, p);
    let xi_k1 = body_velocity(v_k1, p);
    let (pk, _, muk) = lagrangian_partials(s_k, v_k, &xi_k, p);
    let (pk1, sk1, muk1) = lagrangian_partials(s_k1, v_k1, &xi_k1, p);
    let lift_k = lifted_momentum(xi_k.map(|x| -x * h), &muk, p);
    let lift_k1 = lifted_momentum(xi_k1.map(|x| x * h), &muk1, p);
    std::array::from_fn(|i| (pk1[i] - sk1[i] * h - lift_k1[i]) - (pk[i] - lift_k[i]) - f[i] * h)
}

/// Left minus right side of the discrete Euler-Lagrange equation that determines
/// the velocity at `node`. `node_prev` supplies `(s_{k-1}, v_{k-1})`; only `node.s`
/// is read from `node`; `v_s_next` is the candidate velocity at `node`.
pub fn del_residual(
    node_prev: &DiscreteNode,
    node: &DiscreteNode,
    v_s_next: &BaseVelocity,
    force_prev: &[f64; 5],
    h: f64,
    p: &ParamSet,
) -> [f64; 5] {
    del_generic(
        &node_prev.s.to_array(),
        &node_prev.v_s.to_array(),
        &node.s.to_array(),
        &v_s_next.to_array(),
        force_prev,
        h,
        p,
    )
}

/// Jacobian of [`del_residual`] with respect to `v_s_next`.
pub fn del_residual_jacobian(
    node_prev: &DiscreteNode,
    node: &DiscreteNode,
    v_s_next: &BaseVelocity,
    force_prev: &[f64; 5],
    h: f64,
    p: &ParamSet,
) -> [[f64; 5]; 5] {
    let s_k = node_prev.s.to_array().map(c);
    let v_k = node_prev.v_s.to_array().map(c);
    let s_k1 = node.s.to_array().map(c);
    let f = force_prev.map(c);
    jac::<5, 5, _>(
        |z: &[DualSVec64<5>]| del_generic(&s_k, &v_k, &s_k1, &[z[0], z[1], z[2], z[3], z[4]], &f, h, p),
        &v_s_next.to_array(),
    )
    .1
}

/// The connection does not depend on the base point for this system, so `_s_k` is
/// only there to keep the signature general.
pub fn group_update(g_k: GroupPose, _s_k: &BaseState, v_sk: &BaseVelocity, h: f64, p: &ParamSet) -> GroupPose {
    let xi = body_velocity(&v_sk.to_array(), p);
    compose(g_k, se2::exp(AlgebraVector::from_array(xi), h))
}

pub fn base_update(s_k: &BaseState, v_sk: &BaseVelocity, h: f64) -> BaseState {
    let s = s_k.to_array();
    let v = v_sk.to_array();
    BaseState::from_array(std::array::from_fn(|i| s[i] + h * v[i]))
}

/// `log(g_k^{-1} g_{k+1}) / h + A v_k`, the discrete rolling constraint.
pub fn constraint_residual(node: &DiscreteNode, next: &DiscreteNode, h: f64, p: &ParamSet) -> Result<[f64; 3], se2::Se2Error> {
    let zeta = se2::log(se2::between(node.g, next.g))?.as_array();
    let xi = body_velocity(&node.v_s.to_array(), p);
    Ok(std::array::from_fn(|i| zeta[i] / h - xi[i]))
}

fn forcing_at<D: Real>(forcing: &Forcing, scheme: ForcingScheme, v_k: &[f64; 5], v_next: &[D; 5], p: &ParamSet) -> [D; 5] {
    match forcing {
        Forcing::Covector(f) => f.map(c),
        Forcing::Control(u) => {
            let ua = [c(u.u_r), c(u.u_l)];
            match scheme {
                ForcingScheme::ImplicitDissipation => model::base_forces(v_next, &ua, p),
                ForcingScheme::Explicit => model::base_forces(&v_k.map(c), &ua, p),
            }
        }
    }
}

fn inf_norm(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Advances one node, returning the Newton history as well.
pub fn varint_step_report(
    node: &DiscreteNode,
    forcing: &Forcing,
    h: f64,
    p: &ParamSet,
    opts: &NewtonOptions,
) -> Result<(DiscreteNode, NewtonReport), VarintError> {
    let g_next = group_update(node.g, &node.s, &node.v_s, h, p);
    let s_next = base_update(&node.s, &node.v_s, h);
    let s_k = node.s.to_array();
    let v_k = node.v_s.to_array();
    let s_k1 = s_next.to_array();

    let residual_jac = |v: &[f64; 5]| {
        jac::<5, 5, _>(
            |z: &[DualSVec64<5>]| {
                let vn = [z[0], z[1], z[2], z[3], z[4]];
                let f = forcing_at(forcing, opts.scheme, &v_k, &vn, p);
                del_generic(&s_k.map(c), &v_k.map(c), &s_k1.map(c), &vn, &f, h, p)
            },
            v,
        )
    };
    let residual = |v: &[f64; 5]| {
        let f = forcing_at(forcing, opts.scheme, &v_k, v, p);
        del_generic(&s_k, &v_k, &s_k1, v, &f, h, p)
    };

    let mut v = v_k;
    let mut report = NewtonReport::default();
    let (mut r, mut j) = residual_jac(&v);
    let mut norm = inf_norm(&r);
    report.residuals.push(norm);
    let mut it = 0;
    while norm > opts.tol || !norm.is_finite() {
        if it >= opts.max_iter || !norm.is_finite() {
            return Err(VarintError::NoConvergence {
                iterations: it,
                residual: norm,
            });
        }
        let mut a: Vec<f64> = j.iter().flat_map(|row| row.iter().copied()).collect();
        let mut dx = r.map(|x| -x);
        solve_dense(&mut a, &mut dx, 5).ok_or(VarintError::SingularJacobian(it))?;
        let mut step = 1.0;
        let mut trial: [f64; 5] = std::array::from_fn(|i| v[i] + dx[i]);
        let mut trial_norm = inf_norm(&residual(&trial));
        while trial_norm > norm && step > 1e-4 {
            step *= 0.5;
            trial = std::array::from_fn(|i| v[i] + step * dx[i]);
            trial_norm = inf_norm(&residual(&trial));
        }
        v = trial;
        it += 1;
        (r, j) = residual_jac(&v);
        norm = inf_norm(&r);
        report.residuals.push(norm);
    }
    report.iterations = it;
    Ok((
        DiscreteNode {
            g: g_next,
            s: s_next,
            v_s: BaseVelocity::from_array(v),
            t_index: node.t_index + 1,
        },
        report,
    ))
}

pub fn varint_step(
    node: &DiscreteNode,
    forcing: &Forcing,
    h: f64,
    p: &ParamSet,
    opts: &NewtonOptions,
) -> Result<DiscreteNode, VarintError> {
    varint_step_report(node, forcing, h, p, opts).map(|(n, _)| n)
}

/// Rolls the integrator over a control sequence; returns `controls.len() + 1` nodes.
pub fn rollout(
    start: &DiscreteNode,
    controls: &[ControlInput],
    h: f64,
    p: &ParamSet,
    opts: &NewtonOptions,
) -> Result<Vec<DiscreteNode>, VarintError> {
    let mut nodes = Vec::with_capacity(controls.len() + 1);
    nodes.push(*start);
    for u in controls {
        let next = varint_step(nodes.last().unwrap(), &Forcing::Control(*u), h, p, opts)?;
        nodes.push(next);
    }
    Ok(nodes)
}

/// Kinetic plus gravitational energy at a node; the back-EMF term is left out.
pub fn discrete_energy(node: &DiscreteNode, p: &ParamSet) -> f64 {
    let xi = body_velocity(&node.v_s.to_array(), p);
    let l = reduced_lagrangian(
        &BaseState {
            q_r: 0.0,
            q_l: 0.0,
            ..node.s
        },
        &node.v_s,
        &AlgebraVector::from_array(xi),
        p,
    );
    let v = p.body_mass * p.gravity * p.com_height * node.s.alpha.cos();
    l + 2.0 * v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn connection_examples() {
        let p = ParamSet::default();
        let xi: [f64; 3] = body_velocity(&[0.0, 1.0, 1.0, 0.0, 0.0], &p);
        assert_eq!(xi, [0.033, 0.0, 0.0]);
        let xi: [f64; 3] = body_velocity(&[0.0, 1.0, -1.0, 0.0, 0.0], &p);
        assert!(xi[0].abs() < 1e-18 && (xi[2] - 0.033 / 0.049).abs() < 1e-15);
        let a = connection_local_form(&p);
        let v = [0.3, -0.7, 1.9, 2.0, 5.0];
        let xi: [f64; 3] = body_velocity(&v, &p);
        for i in 0..3 {
            let av: f64 = (0..5).map(|k| a[i][k] * v[k]).sum();
            assert!((av + xi[i]).abs() < 1e-16);
        }
    }

    #[test]
    fn group_update_examples() {
        let p = ParamSet::default();
        let g = GroupPose::new(0.4, 0.1, 1.0);
        assert_eq!(group_update(g, &BaseState::default(), &BaseVelocity::default(), 0.01, &p), g);
        let v = BaseVelocity {
            phi_r: 1.0,
            phi_l: 1.0,
            ..Default::default()
        };
        let g1 = group_update(GroupPose::IDENTITY, &BaseState::default(), &v, 1.0, &p);
        assert!((g1.x - 0.033).abs() < 1e-16 && g1.y == 0.0 && g1.theta == 0.0);
    }

    #[test]
    fn base_update_examples() {
        let v = BaseVelocity {
            alpha: 1.0,
            ..Default::default()
        };
        assert_eq!(base_update(&BaseState::default(), &v, 0.005).alpha, 0.005);
        let s = BaseState::from_array([0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(base_update(&s, &BaseVelocity::default(), 0.1), s);
    }

    #[test]
    fn rest_chain_has_zero_residual() {
        let p = ParamSet::default();
        let n = DiscreteNode::at_rest(GroupPose::IDENTITY, 0.0);
        let r = del_residual(&n, &n, &BaseVelocity::default(), &[0.0; 5], 0.005, &p);
        assert_eq!(r, [0.0; 5]);
    }

    #[test]
    fn reduced_lagrangian_at_rest() {
        let p = ParamSet::default();
        let l = reduced_lagrangian(&BaseState::default(), &BaseVelocity::default(), &AlgebraVector::default(), &p);
        assert!((l + 0.277 * 9.81 * 0.04867).abs() < 1e-15);
    }
}
