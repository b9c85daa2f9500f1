//! Scalar abstraction shared by the model code so the same formulas run on `f64`
//! and on forward-mode dual numbers.

use nalgebra::{DMatrix, SVector};
use num_dual::{hessian, jacobian, Dual2SVec64, DualNum, DualSVec64};

pub trait Real: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Real for T {}

#[inline]
pub fn c<D: Real>(v: f64) -> D {
    D::from(v)
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting on the
/// real parts. `a` is row-major `n x n`. Returns `None` when a pivot vanishes
/// relative to the largest entry.
pub fn solve_dense<D: Real>(a: &mut [D], b: &mut [D], n: usize) -> Option<()> {
    let scale = a.iter().map(|v| v.re().abs()).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].re().abs() > a[piv * n + col].re().abs() {
                piv = row;
            }
        }
        if a[piv * n + col].re().abs() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let inv = a[col * n + col].recip();
        for row in col + 1..n {
            let f = a[row * n + col] * inv;
            for k in col..n {
                let t = a[col * n + k];
                a[row * n + k] -= f * t;
            }
            let t = b[col];
            b[row] -= f * t;
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    Some(())
}

/// Value and Jacobian of a slice function with `N` inputs and `M` outputs.
pub fn jac<const N: usize, const M: usize, F>(f: F, x: &[f64]) -> ([f64; M], [[f64; N]; M])
where
    F: FnOnce(&[DualSVec64<N>]) -> [DualSVec64<N>; M],
{
    let x = SVector::<f64, N>::from_column_slice(x);
    let (v, j) = jacobian(
        |z: SVector<DualSVec64<N>, N>| SVector::<DualSVec64<N>, M>::from(f(z.as_slice())),
        &x,
    );
    let mut val = [0.0; M];
    let mut out = [[0.0; N]; M];
    for i in 0..M {
        val[i] = v[i];
        for k in 0..N {
            out[i][k] = j[(i, k)];
        }
    }
    (val, out)
}

/// Hessian of a scalar slice function with `N` inputs, as a dense matrix.
pub fn hess<const N: usize, F>(f: F, x: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[Dual2SVec64<N>]) -> Dual2SVec64<N>,
{
    let x = SVector::<f64, N>::from_column_slice(x);
    let (_, _, h) = hessian(|z: SVector<Dual2SVec64<N>, N>| f(z.as_slice()), &x);
    DMatrix::from_fn(N, N, |i, k| h[(i, k)])
}
