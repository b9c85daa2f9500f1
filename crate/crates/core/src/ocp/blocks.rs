//! Small dense constraint and cost pieces of the transcription. Each one maps a
//! handful of decision variables to a few rows and is differentiated with dual
//! numbers.

use nalgebra::SVector;
use num_dual::{hessian, jacobian, Dual2SVec64, DualSVec64};

use crate::ad::{c, Real};
use crate::model::{self, RkOrder};
use crate::params::ParamSet;
use crate::se2::log_between;
use crate::varint::del_generic;

pub(crate) trait LocalFn<const N: usize, const M: usize> {
    fn eval<D: Real>(&self, z: &[D; N]) -> [D; M];
}

pub(crate) fn value<F: LocalFn<N, M>, const N: usize, const M: usize>(f: &F, z: &[f64; N]) -> [f64; M] {
    f.eval(z)
}

pub(crate) fn jac<F: LocalFn<N, M>, const N: usize, const M: usize>(f: &F, z: &[f64; N]) -> [[f64; N]; M] {
    let x = SVector::<f64, N>::from_column_slice(z);
    let (_, j) = jacobian(
        |v: SVector<DualSVec64<N>, N>| {
            let a: [DualSVec64<N>; N] = std::array::from_fn(|i| v[i]);
            SVector::<DualSVec64<N>, M>::from(f.eval(&a))
        },
        &x,
    );
    std::array::from_fn(|i| std::array::from_fn(|k| j[(i, k)]))
}

/// Hessian of `sum_i w_i f_i`.
pub(crate) fn weighted_hessian<F: LocalFn<N, M>, const N: usize, const M: usize>(
    f: &F,
    z: &[f64; N],
    w: &[f64; M],
) -> [[f64; N]; N] {
    let x = SVector::<f64, N>::from_column_slice(z);
    let (_, _, h) = hessian(
        |v: SVector<Dual2SVec64<N>, N>| {
            let a: [Dual2SVec64<N>; N] = std::array::from_fn(|i| v[i]);
            let r = f.eval(&a);
            let mut acc = Dual2SVec64::<N>::from(0.0);
            for i in 0..M {
                if w[i] != 0.0 {
                    acc += r[i] * w[i];
                }
            }
            acc
        },
        &x,
    );
    std::array::from_fn(|i| std::array::from_fn(|k| h[(i, k)]))
}

fn mat_vec<D: Real, const M: usize>(a: &[[f64; M]; M], x: &[D; M]) -> [D; M] {
    std::array::from_fn(|i| {
        let mut acc = c::<D>(0.0);
        for k in 0..M {
            if a[i][k] != 0.0 {
                acc += x[k] * a[i][k];
            }
        }
        acc
    })
}

/// `log(g_k^{-1} g_{k+1}) / h - xi(v_k)` over `(x0, y0, th0, x1, y1, th1, v_d, v_theta)`.
pub(crate) struct GroupDefect {
    pub h: f64,
}

impl LocalFn<8, 3> for GroupDefect {
    fn eval<D: Real>(&self, z: &[D; 8]) -> [D; 3] {
        let l = log_between([z[0], z[1], z[2]], [z[3], z[4], z[5]]);
        [l[0] / self.h - z[6], l[1] / self.h, l[2] / self.h - z[7]]
    }
}

/// Discrete Euler-Lagrange rows over `(alpha0, nu0[5], alpha1, nu1[5], u[2])`,
/// left-multiplied by `pre`.
pub(crate) struct DelDynamic<'a> {
    pub h: f64,
    pub p: &'a ParamSet,
    pub pre: [[f64; 5]; 5],
}

impl LocalFn<14, 5> for DelDynamic<'_> {
    fn eval<D: Real>(&self, z: &[D; 14]) -> [D; 5] {
        let (h, p) = (self.h, self.p);
        let zero = c::<D>(0.0);
        let v0 = model::base_rates_from_nu(&z[1..6], p);
        let v1 = model::base_rates_from_nu(&z[7..12], p);
        let s0 = [z[0], zero, zero, zero, zero];
        let s1 = [z[6], v0[1] * h, v0[2] * h, v0[3] * h, v0[4] * h];
        let f = model::base_forces(&v1, &[z[12], z[13]], p);
        mat_vec(&self.pre, &del_generic(&s0, &v0, &s1, &v1, &f, h, p))
    }
}

/// Mechanical rows only, currents from the algebraic map. Variables
/// `(alpha0, nu0[3], alpha1, nu1[3], u[2])`.
pub(crate) struct DelAlgebraic<'a> {
    pub h: f64,
    pub p: &'a ParamSet,
    pub pre: [[f64; 3]; 3],
}

impl LocalFn<10, 3> for DelAlgebraic<'_> {
    fn eval<D: Real>(&self, z: &[D; 10]) -> [D; 3] {
        let (h, p) = (self.h, self.p);
        let zero = c::<D>(0.0);
        let u = [z[8], z[9]];
        let i0 = model::algebraic_currents(&[z[1], z[2], z[3]], &u, p);
        let v0 = model::base_rates_from_nu(&[z[1], z[2], z[3], i0[0], i0[1]], p);
        let v1 = model::base_rates_from_nu(&[z[5], z[6], z[7], zero, zero], p);
        let s0 = [z[0], zero, zero, zero, zero];
        let s1 = [z[4], v0[1] * h, v0[2] * h, v0[3] * h, v0[4] * h];
        let f = model::base_forces(&v1, &u, p);
        let r = del_generic(&s0, &v0, &s1, &v1, &f, h, p);
        mat_vec(&self.pre, &[r[0], r[1], r[2]])
    }
}

/// One explicit Runge-Kutta step `scale * Phi(z, u)` over `(z[9], u[2])`.
pub(crate) struct RkDynamic<'a> {
    pub h: f64,
    pub order: RkOrder,
    pub p: &'a ParamSet,
    pub scale: [[f64; 9]; 9],
}

impl LocalFn<11, 9> for RkDynamic<'_> {
    fn eval<D: Real>(&self, z: &[D; 11]) -> [D; 9] {
        let x: [D; 9] = std::array::from_fn(|i| z[i]);
        let u = [z[9], z[10]];
        let next = model::rk_generic(&x, self.h, self.order, |s| model::reduced_rhs(s, &u, self.p))
            .unwrap_or([c(f64::NAN); 9]);
        mat_vec(&self.scale, &next)
    }
}

/// As [`RkDynamic`] for the seven-state model, over `(z[7], u[2])`.
pub(crate) struct RkAlgebraic<'a> {
    pub h: f64,
    pub order: RkOrder,
    pub p: &'a ParamSet,
    pub scale: [[f64; 7]; 7],
}

impl LocalFn<9, 7> for RkAlgebraic<'_> {
    fn eval<D: Real>(&self, z: &[D; 9]) -> [D; 7] {
        let x: [D; 7] = std::array::from_fn(|i| z[i]);
        let u = [z[7], z[8]];
        let next = model::rk_generic(&x, self.h, self.order, |s| model::reduced_rhs_algebraic(s, &u, self.p))
            .unwrap_or([c(f64::NAN); 7]);
        mat_vec(&self.scale, &next)
    }
}

/// Algebraic currents over `(v_alpha, v_d, v_theta, u_r, u_l)`.
pub(crate) struct AlgCurrent<'a> {
    pub p: &'a ParamSet,
}

impl LocalFn<5, 2> for AlgCurrent<'_> {
    fn eval<D: Real>(&self, z: &[D; 5]) -> [D; 2] {
        model::algebraic_currents(&[z[0], z[1], z[2]], &[z[3], z[4]], self.p)
    }
}

/// `1/2 (u_r i_r + u_l i_l)` over `(i_r, i_l, u_r, u_l)`.
pub(crate) struct CostDynamic {
    pub weight: f64,
}

impl LocalFn<4, 1> for CostDynamic {
    fn eval<D: Real>(&self, z: &[D; 4]) -> [D; 1] {
        [(z[0] * z[2] + z[1] * z[3]) * (0.5 * self.weight)]
    }
}

/// Same cost with algebraic currents, over `(v_alpha, v_d, v_theta, u_r, u_l)`.
pub(crate) struct CostAlgebraic<'a> {
    pub p: &'a ParamSet,
    pub weight: f64,
}

impl LocalFn<5, 1> for CostAlgebraic<'_> {
    fn eval<D: Real>(&self, z: &[D; 5]) -> [D; 1] {
        let i = model::algebraic_currents(&[z[0], z[1], z[2]], &[z[3], z[4]], self.p);
        [(z[3] * i[0] + z[4] * i[1]) * (0.5 * self.weight)]
    }
}
