//! Continuous-time model: energies, forcing, and the reduced state space obtained
//! by projecting the constrained Euler-Lagrange equations onto the null space of
//! the rolling constraints.
//!
//! Generalized coordinates are ordered `(x, y, theta, alpha, phi_r, phi_l, q_r, q_l)`.
//! Wheel angles are absolute; the gearbox sees `phi - alpha`.
//!
//! The reduced state is `(x, y, theta, alpha, v_alpha, v_d, v_theta, i_r, i_l)`
//! where `v_d` is the forward speed of the axle midpoint and the currents are the
//! charge rates.

use thiserror::Error;

use crate::ad::{c, solve_dense, Real};
use crate::params::ParamSet;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("reduced mass matrix is singular; check the inertial parameters")]
    SingularMassMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FullConfiguration {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub alpha: f64,
    pub phi_r: f64,
    pub phi_l: f64,
    pub q_r: f64,
    pub q_l: f64,
}

/// Rates of the [`FullConfiguration`] fields, same order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FullVelocity {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub alpha: f64,
    pub phi_r: f64,
    pub phi_l: f64,
    pub q_r: f64,
    pub q_l: f64,
}

macro_rules! array_conv {
    ($t:ty, $n:expr, [$($f:ident),*]) => {
        impl $t {
            pub fn to_array(&self) -> [f64; $n] {
                [$(self.$f),*]
            }
            pub fn from_array(a: [f64; $n]) -> Self {
                let [$($f),*] = a;
                Self { $($f),* }
            }
        }
    };
}

array_conv!(FullConfiguration, 8, [x, y, theta, alpha, phi_r, phi_l, q_r, q_l]);
array_conv!(FullVelocity, 8, [x, y, theta, alpha, phi_r, phi_l, q_r, q_l]);

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReducedState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub alpha: f64,
    pub v_alpha: f64,
    pub v_d: f64,
    pub v_theta: f64,
    pub v_qr: f64,
    pub v_ql: f64,
}

array_conv!(ReducedState, 9, [x, y, theta, alpha, v_alpha, v_d, v_theta, v_qr, v_ql]);

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub u_r: f64,
    pub u_l: f64,
}

impl ControlInput {
    pub fn new(u_r: f64, u_l: f64) -> Self {
        Self { u_r, u_l }
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.u_r, self.u_l]
    }
}

/// Kinetic energy assembled term by term from body, wheel, gear/rotor and
/// circuit contributions.
pub fn kinetic_energy(q: &FullConfiguration, v: &FullVelocity, p: &ParamSet) -> f64 {
    let (st, ct) = q.theta.sin_cos();
    let (sa, ca) = q.alpha.sin_cos();
    let l = p.com_height;
    let d = p.half_track;

    let vb = [
        v.x + l * v.alpha * ca * ct - l * v.theta * sa * st,
        v.y + l * v.alpha * ca * st + l * v.theta * sa * ct,
        -l * v.alpha * sa,
    ];
    let wb = [-v.theta * sa, v.alpha, v.theta * ca];
    let body = 0.5 * p.body_mass * (vb[0] * vb[0] + vb[1] * vb[1] + vb[2] * vb[2])
        + 0.5
            * (p.body_inertia_xx * wb[0] * wb[0]
                + p.body_inertia_yy * wb[1] * wb[1]
                + p.body_inertia_zz * wb[2] * wb[2]);

    let vr = [v.x + d * v.theta * ct, v.y + d * v.theta * st];
    let vl = [v.x - d * v.theta * ct, v.y - d * v.theta * st];
    // Each wheel spins about its axle and yaws with the chassis.
    let wheel = |spin: f64| 0.5 * (p.wheel_inertia_yy * spin * spin + p.wheel_inertia_zz * v.theta * v.theta);
    let wheels = 0.5 * p.wheel_mass * (vr[0] * vr[0] + vr[1] * vr[1] + vl[0] * vl[0] + vl[1] * vl[1])
        + wheel(v.phi_r)
        + wheel(v.phi_l);

    let gear = |phi_dot: f64| {
        let rel = phi_dot - v.alpha;
        let rotor = v.alpha + p.ratio_total * rel;
        let stage = v.alpha - p.ratio_gear * rel;
        0.5 * p.motor_inertia * rotor * rotor + 0.5 * p.gear_inertia * stage * stage
    };
    let circuits = 0.5 * p.inductance * (v.q_r * v.q_r + v.q_l * v.q_l);

    body + wheels + gear(v.phi_r) + gear(v.phi_l) + circuits
}

pub fn potential_energy(q: &FullConfiguration, v: &FullVelocity, p: &ParamSet) -> f64 {
    p.body_mass * p.gravity * p.com_height * q.alpha.cos()
        + p.emf_const * p.ratio_total * ((v.phi_r - v.alpha) * q.q_r + (v.phi_l - v.alpha) * q.q_l)
}

pub fn lagrangian(q: &FullConfiguration, v: &FullVelocity, p: &ParamSet) -> f64 {
    kinetic_energy(q, v, p) - potential_energy(q, v, p)
}

/// Friction torque of one gearbox for relative rate `rel = phi_dot - alpha_dot`.
pub(crate) fn friction<D: Real>(rel: D, p: &ParamSet) -> D {
    rel * p.visc_damping + (rel * p.damping_slope).tanh() * p.coulomb_damping
}

/// Forcing on `(alpha, phi_r, phi_l, q_r, q_l)` from base rates
/// `(alpha_dot, phi_r_dot, phi_l_dot, i_r, i_l)`.
pub(crate) fn base_forces<D: Real>(vs: &[D; 5], u: &[D; 2], p: &ParamSet) -> [D; 5] {
    let fr = friction(vs[1] - vs[0], p);
    let fl = friction(vs[2] - vs[0], p);
    [
        fr + fl,
        -fr,
        -fl,
        u[0] - vs[3] * p.resistance,
        u[1] - vs[4] * p.resistance,
    ]
}

pub fn generalized_forces(_q: &FullConfiguration, v: &FullVelocity, u: &ControlInput, p: &ParamSet) -> [f64; 5] {
    base_forces(&[v.alpha, v.phi_r, v.phi_l, v.q_r, v.q_l], &u.to_array(), p)
}

/// Constant inertia entries of the gear train.
pub(crate) struct GearInertia {
    /// coefficient of alpha_dot^2 per side (times two for both sides)
    pub aa: f64,
    /// cross coefficient alpha_dot * phi_dot per side
    pub ap: f64,
    /// coefficient of phi_dot^2 per side
    pub pp: f64,
}

pub(crate) fn gear_inertia(p: &ParamSet) -> GearInertia {
    let (it, ig) = (p.ratio_total, p.ratio_gear);
    GearInertia {
        aa: p.motor_inertia * (1.0 - it) * (1.0 - it) + p.gear_inertia * (1.0 + ig) * (1.0 + ig),
        ap: p.motor_inertia * (1.0 - it) * it - p.gear_inertia * (1.0 + ig) * ig,
        pp: p.motor_inertia * it * it + p.gear_inertia * ig * ig,
    }
}

/// Mass matrix `M(theta, alpha)` with `T = 1/2 v^T M v`, and its partials with
/// respect to `theta` and `alpha`.
pub(crate) fn mass_matrix<D: Real>(theta: D, alpha: D, p: &ParamSet) -> [[D; 8]; 8] {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    let g = gear_inertia(p);
    let mb = p.body_mass;
    let l = p.com_height;
    let mbl = mb * l;
    let mut m = [[c::<D>(0.0); 8]; 8];
    let mt = mb + 2.0 * p.wheel_mass;
    m[0][0] = c(mt);
    m[1][1] = c(mt);
    m[0][3] = ca * ct * mbl;
    m[1][3] = ca * st * mbl;
    m[0][2] = -(sa * st) * mbl;
    m[1][2] = sa * ct * mbl;
    m[3][3] = c(mb * l * l + p.body_inertia_yy + 2.0 * g.aa);
    m[2][2] = sa * sa * (mb * l * l + p.body_inertia_xx)
        + ca * ca * p.body_inertia_zz
        + 2.0 * (p.wheel_mass * p.half_track * p.half_track + p.wheel_inertia_zz);
    m[3][4] = c(g.ap);
    m[3][5] = c(g.ap);
    m[4][4] = c(p.wheel_inertia_yy + g.pp);
    m[5][5] = c(p.wheel_inertia_yy + g.pp);
    m[6][6] = c(p.inductance);
    m[7][7] = c(p.inductance);
    for i in 0..8 {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    m
}

pub(crate) fn mass_matrix_partials<D: Real>(theta: D, alpha: D, p: &ParamSet) -> ([[D; 8]; 8], [[D; 8]; 8]) {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    let mbl = p.body_mass * p.com_height;
    let zero = c::<D>(0.0);
    let mut mt = [[zero; 8]; 8];
    let mut ma = [[zero; 8]; 8];
    // theta
    mt[0][3] = -(ca * st) * mbl;
    mt[1][3] = ca * ct * mbl;
    mt[0][2] = -(sa * ct) * mbl;
    mt[1][2] = -(sa * st) * mbl;
    // alpha
    ma[0][3] = -(sa * ct) * mbl;
    ma[1][3] = -(sa * st) * mbl;
    ma[0][2] = -(ca * st) * mbl;
    ma[1][2] = ca * ct * mbl;
    ma[2][2] = sa * ca * (2.0 * (p.body_mass * p.com_height * p.com_height + p.body_inertia_xx - p.body_inertia_zz));
    for m in [&mut mt, &mut ma] {
        for i in 0..8 {
            for j in 0..i {
                m[i][j] = m[j][i];
            }
        }
    }
    (mt, ma)
}

/// `M(theta, alpha)` such that `T = 1/2 v^T M v`.
pub fn mass_matrix_at(theta: f64, alpha: f64, p: &ParamSet) -> [[f64; 8]; 8] {
    mass_matrix(theta, alpha, p)
}

/// `(dM/dtheta, dM/dalpha)`
pub fn mass_matrix_partials_at(theta: f64, alpha: f64, p: &ParamSet) -> ([[f64; 8]; 8], [[f64; 8]; 8]) {
    mass_matrix_partials(theta, alpha, p)
}

/// `S(theta)` with `q_dot = S nu`, `nu = (v_alpha, v_d, v_theta, i_r, i_l)`.
pub fn nullspace_at(theta: f64, p: &ParamSet) -> [[f64; 5]; 8] {
    nullspace(theta, p)
}

/// Null-space basis of the rolling constraints, `q_dot = S(theta) nu`.
pub(crate) fn nullspace<D: Real>(theta: D, p: &ParamSet) -> [[D; 5]; 8] {
    let (st, ct) = theta.sin_cos();
    let zero = c::<D>(0.0);
    let one = c::<D>(1.0);
    let r = p.wheel_radius;
    let d = p.half_track;
    let mut s = [[zero; 5]; 8];
    s[0][1] = ct;
    s[1][1] = st;
    s[2][2] = one;
    s[3][0] = one;
    s[4][1] = c(1.0 / r);
    s[4][2] = c(d / r);
    s[5][1] = c(1.0 / r);
    s[5][2] = c(-d / r);
    s[6][3] = one;
    s[7][4] = one;
    s
}

/// Constraint matrix `A(theta)` with `A q_dot = 0`.
pub fn constraint_matrix(theta: f64, p: &ParamSet) -> [[f64; 8]; 3] {
    let (st, ct) = theta.sin_cos();
    let (r, d) = (p.wheel_radius, p.half_track);
    [
        [-st, ct, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [ct, st, d, 0.0, -r, 0.0, 0.0, 0.0],
        [ct, st, -d, 0.0, 0.0, -r, 0.0, 0.0],
    ]
}

/// Full velocity `S(theta) nu` of a reduced state.
pub fn full_velocity(x: &ReducedState, p: &ParamSet) -> FullVelocity {
    let s = nullspace(x.theta, p);
    let nu = [x.v_alpha, x.v_d, x.v_theta, x.v_qr, x.v_ql];
    let mut v = [0.0; 8];
    for i in 0..8 {
        v[i] = (0..5).map(|k| s[i][k] * nu[k]).sum();
    }
    FullVelocity::from_array(v)
}

/// Base rates `(alpha_dot, phi_r_dot, phi_l_dot, i_r, i_l)` from
/// `nu = (v_alpha, v_d, v_theta, i_r, i_l)`.
pub(crate) fn base_rates_from_nu<D: Real>(nu: &[D], p: &ParamSet) -> [D; 5] {
    let (r, d) = (p.wheel_radius, p.half_track);
    [
        nu[0],
        (nu[1] + nu[2] * d) / r,
        (nu[1] - nu[2] * d) / r,
        nu[3],
        nu[4],
    ]
}

/// Inverse of [`base_rates_from_nu`].
pub(crate) fn nu_from_base_rates<D: Real>(vs: &[D; 5], p: &ParamSet) -> [D; 5] {
    let (r, d) = (p.wheel_radius, p.half_track);
    [
        vs[0],
        (vs[1] + vs[2]) * (0.5 * r),
        (vs[1] - vs[2]) * (0.5 * r / d),
        vs[3],
        vs[4],
    ]
}

/// Steady-state motor current when the inductive term is dropped.
pub(crate) fn algebraic_current<D: Real>(u: D, phi_dot: D, alpha_dot: D, p: &ParamSet) -> D {
    (u - (phi_dot - alpha_dot) * (p.emf_const * p.ratio_total)) / p.resistance
}

/// Terms of the projected equations at state `x`: returns `(S^T M S, S^T (M S_dot nu + K + P - F))`.
fn projected_terms<D: Real>(x: &[D; 9], u: &[D; 2], p: &ParamSet) -> ([D; 25], [D; 5]) {
    let theta = x[2];
    let alpha = x[3];
    let nu = [x[4], x[5], x[6], x[7], x[8]];
    let m = mass_matrix(theta, alpha, p);
    let (mth, mal) = mass_matrix_partials(theta, alpha, p);
    let s = nullspace(theta, p);
    let zero = c::<D>(0.0);

    let mut qd = [zero; 8];
    for i in 0..8 {
        for k in 0..5 {
            qd[i] += s[i][k] * nu[k];
        }
    }
    let (st, ct) = theta.sin_cos();
    let th_dot = qd[2];
    let al_dot = qd[3];
    // S_dot nu: only the planar rows depend on theta.
    let mut sdn = [zero; 8];
    sdn[0] = -(st * th_dot) * nu[1];
    sdn[1] = ct * th_dot * nu[1];

    let mut h = [zero; 8];
    for i in 0..8 {
        let mut acc = zero;
        for j in 0..8 {
            let mdot = mth[i][j] * th_dot + mal[i][j] * al_dot;
            acc += m[i][j] * sdn[j] + mdot * qd[j];
        }
        h[i] = acc;
    }
    let quad = |mm: &[[D; 8]; 8]| {
        let mut acc = zero;
        for i in 0..8 {
            for j in 0..8 {
                acc += qd[i] * mm[i][j] * qd[j];
            }
        }
        acc
    };
    h[2] -= quad(&mth) * 0.5;
    h[3] -= quad(&mal) * 0.5;

    // P: gravity and back-EMF coupling.
    let ke = p.emf_const * p.ratio_total;
    h[3] += (qd[6] + qd[7]) * ke - alpha.sin() * (p.body_mass * p.gravity * p.com_height);
    h[4] -= qd[6] * ke;
    h[5] -= qd[7] * ke;
    h[6] += (qd[4] - qd[3]) * ke;
    h[7] += (qd[5] - qd[3]) * ke;

    let f = base_forces(&[qd[3], qd[4], qd[5], qd[6], qd[7]], u, p);
    for k in 0..5 {
        h[3 + k] -= f[k];
    }

    let mut mr = [zero; 25];
    let mut rhs = [zero; 5];
    let mut ms = [[zero; 5]; 8];
    for i in 0..8 {
        for k in 0..5 {
            let mut acc = zero;
            for j in 0..8 {
                acc += m[i][j] * s[j][k];
            }
            ms[i][k] = acc;
        }
    }
    for a in 0..5 {
        for b in 0..5 {
            let mut acc = zero;
            for i in 0..8 {
                acc += s[i][a] * ms[i][b];
            }
            mr[a * 5 + b] = acc;
        }
        let mut acc = zero;
        for i in 0..8 {
            acc += s[i][a] * h[i];
        }
        rhs[a] = acc;
    }
    (mr, rhs)
}

/// Generic right-hand side of the reduced equations.
pub(crate) fn reduced_rhs<D: Real>(x: &[D; 9], u: &[D; 2], p: &ParamSet) -> Result<[D; 9], ModelError> {
    let (mut mr, rhs) = projected_terms(x, u, p);
    let mut acc = rhs.map(|v| -v);
    solve_dense(&mut mr, &mut acc, 5).ok_or(ModelError::SingularMassMatrix)?;
    let (st, ct) = x[2].sin_cos();
    Ok([
        ct * x[5],
        st * x[5],
        x[6],
        x[4],
        acc[0],
        acc[1],
        acc[2],
        acc[3],
        acc[4],
    ])
}

/// Reduced equations with the currents replaced by their algebraic map. State is
/// `(x, y, theta, alpha, v_alpha, v_d, v_theta)`.
pub(crate) fn reduced_rhs_algebraic<D: Real>(x: &[D; 7], u: &[D; 2], p: &ParamSet) -> Result<[D; 7], ModelError> {
    let i = algebraic_currents(&[x[4], x[5], x[6]], u, p);
    let full = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], i[0], i[1]];
    let d = reduced_rhs(&full, u, p)?;
    Ok([d[0], d[1], d[2], d[3], d[4], d[5], d[6]])
}

/// Currents from `(v_alpha, v_d, v_theta)` and voltages with the inductance neglected.
pub(crate) fn algebraic_currents<D: Real>(mech: &[D; 3], u: &[D; 2], p: &ParamSet) -> [D; 2] {
    let vs = base_rates_from_nu(&[mech[0], mech[1], mech[2], c(0.0), c(0.0)], p);
    [
        algebraic_current(u[0], vs[1], vs[0], p),
        algebraic_current(u[1], vs[2], vs[0], p),
    ]
}

pub fn reduced_dynamics(x: &ReducedState, u: &ControlInput, p: &ParamSet) -> Result<ReducedState, ModelError> {
    reduced_rhs(&x.to_array(), &u.to_array(), p).map(ReducedState::from_array)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkOrder {
    One,
    Two,
    Four,
}

impl RkOrder {
    pub fn from_order(n: u32) -> Option<Self> {
        match n {
            1 => Some(RkOrder::One),
            2 => Some(RkOrder::Two),
            4 => Some(RkOrder::Four),
            _ => None,
        }
    }
}

/// One explicit Runge-Kutta step of a vector field. RK2 is the midpoint rule.
pub(crate) fn rk_generic<D: Real, const N: usize, F>(x: &[D; N], h: f64, order: RkOrder, f: F) -> Result<[D; N], ModelError>
where
    F: Fn(&[D; N]) -> Result<[D; N], ModelError>,
{
    let axpy = |a: &[D; N], s: f64, b: &[D; N]| -> [D; N] { std::array::from_fn(|i| a[i] + b[i] * s) };
    match order {
        RkOrder::One => Ok(axpy(x, h, &f(x)?)),
        RkOrder::Two => {
            let k1 = f(x)?;
            let k2 = f(&axpy(x, 0.5 * h, &k1))?;
            Ok(axpy(x, h, &k2))
        }
        RkOrder::Four => {
            let k1 = f(x)?;
            let k2 = f(&axpy(x, 0.5 * h, &k1))?;
            let k3 = f(&axpy(x, 0.5 * h, &k2))?;
            let k4 = f(&axpy(x, h, &k3))?;
            Ok(std::array::from_fn(|i| {
                x[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0)
            }))
        }
    }
}

pub fn rk_step(x: &ReducedState, u: &ControlInput, h: f64, order: RkOrder, p: &ParamSet) -> Result<ReducedState, ModelError> {
    let ua = u.to_array();
    rk_generic(&x.to_array(), h, order, |s| reduced_rhs(s, &ua, p)).map(ReducedState::from_array)
}

/// Kinetic plus gravitational energy of a reduced state (charges taken as zero).
pub fn total_energy(x: &ReducedState, p: &ParamSet) -> f64 {
    let q = FullConfiguration {
        x: x.x,
        y: x.y,
        theta: x.theta,
        alpha: x.alpha,
        ..Default::default()
    };
    let v = full_velocity(x, p);
    kinetic_energy(&q, &v, p) + p.body_mass * p.gravity * p.com_height * x.alpha.cos()
}

/// Multipliers of the rolling constraints, recovered from the unreduced
/// equations by least squares. Only used to check the reduction.
pub fn constraint_multipliers(x: &ReducedState, u: &ControlInput, p: &ParamSet) -> Result<([f64; 3], f64), ModelError> {
    let xd = reduced_dynamics(x, u, p)?;
    let xa = x.to_array();
    let ua = u.to_array();
    // Generalized force balance residual M q_dd + K + P - F for the accelerations
    // the reduced equations predict.
    let nu_dot = [xd.v_alpha, xd.v_d, xd.v_theta, xd.v_qr, xd.v_ql];
    let s = nullspace(x.theta, p);
    let m = mass_matrix(x.theta, x.alpha, p);
    let (st, ct) = x.theta.sin_cos();
    let v = full_velocity(x, p).to_array();
    let mut qdd = [0.0; 8];
    for i in 0..8 {
        qdd[i] = (0..5).map(|k| s[i][k] * nu_dot[k]).sum();
    }
    qdd[0] += -st * v[2] * xa[5];
    qdd[1] += ct * v[2] * xa[5];
    let bal = generalized_balance(&xa, &ua, p);
    let mut e = [0.0; 8];
    for i in 0..8 {
        e[i] = (0..8).map(|j| m[i][j] * qdd[j]).sum::<f64>() + bal[i];
    }
    let a = constraint_matrix(x.theta, p);
    let mut aat = [0.0; 9];
    let mut rhs = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            aat[i * 3 + j] = (0..8).map(|k| a[i][k] * a[j][k]).sum();
        }
        rhs[i] = (0..8).map(|k| a[i][k] * e[k]).sum();
    }
    solve_dense(&mut aat, &mut rhs, 3).ok_or(ModelError::SingularMassMatrix)?;
    let mut resid: f64 = 0.0;
    for k in 0..8 {
        let at: f64 = (0..3).map(|i| a[i][k] * rhs[i]).sum();
        resid = resid.max((e[k] - at).abs());
    }
    Ok((rhs, resid))
}

/// `K + P - F` of the unreduced equations (everything except `M q_dd`).
fn generalized_balance(x: &[f64; 9], u: &[f64; 2], p: &ParamSet) -> [f64; 8] {
    let rs = ReducedState::from_array(*x);
    let qd = full_velocity(&rs, p).to_array();
    let (mth, mal) = mass_matrix_partials(x[2], x[3], p);
    let mut h = [0.0; 8];
    for i in 0..8 {
        h[i] = (0..8).map(|j| (mth[i][j] * qd[2] + mal[i][j] * qd[3]) * qd[j]).sum();
    }
    let quad = |mm: &[[f64; 8]; 8]| -> f64 { (0..8).map(|i| (0..8).map(|j| qd[i] * mm[i][j] * qd[j]).sum::<f64>()).sum() };
    h[2] -= 0.5 * quad(&mth);
    h[3] -= 0.5 * quad(&mal);
    let ke = p.emf_const * p.ratio_total;
    h[3] += ke * (qd[6] + qd[7]) - p.body_mass * p.gravity * p.com_height * x[3].sin();
    h[4] -= ke * qd[6];
    h[5] -= ke * qd[7];
    h[6] += ke * (qd[4] - qd[3]);
    h[7] += ke * (qd[5] - qd[3]);
    let f = base_forces(&[qd[3], qd[4], qd[5], qd[6], qd[7]], u, p);
    for k in 0..5 {
        h[3 + k] -= f[k];
    }
    h
}
