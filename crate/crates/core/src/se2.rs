//! Planar rigid motions SE(2) in `(x, y, theta)` coordinates.
//!
//! Algebra elements are ordered `(v1, v2, omega)`: forward rate, lateral rate and
//! turn rate in the body frame. The closed forms are written once over
//! [`Real`] so the transcription code can differentiate through them.

use std::f64::consts::PI;

use thiserror::Error;

use crate::ad::{c, Real};

/// Below this |theta| the V-matrix coefficients switch to their Taylor series.
///
/// The series are kept to eighth order, so they are exact in double precision
/// here. The threshold is large enough that first and second derivatives of the
/// closed forms never hit the cancellation region either.
pub const SERIES_THRESHOLD: f64 = 1e-2;

/// Half-width of the guard band around theta = ±pi where `log` refuses to work.
pub const CUT_LOCUS_GUARD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum Se2Error {
    #[error("log undefined near the cut locus (theta = {0})")]
    CutLocus(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlgebraVector {
    pub v1: f64,
    pub v2: f64,
    pub omega: f64,
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

impl GroupPose {
    pub const IDENTITY: GroupPose = GroupPose {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn inverse(&self) -> Self {
        let (s, co) = self.theta.sin_cos();
        GroupPose::new(
            -(co * self.x + s * self.y),
            s * self.x - co * self.y,
            -self.theta,
        )
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

impl AlgebraVector {
    pub fn new(v1: f64, v2: f64, omega: f64) -> Self {
        Self { v1, v2, omega }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.v1, self.v2, self.omega]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

pub fn compose(g1: GroupPose, g2: GroupPose) -> GroupPose {
    let (s, co) = g1.theta.sin_cos();
    GroupPose::new(
        g1.x + co * g2.x - s * g2.y,
        g1.y + s * g2.x + co * g2.y,
        g1.theta + g2.theta,
    )
}

/// `g1^{-1} g2`
pub fn between(g1: GroupPose, g2: GroupPose) -> GroupPose {
    compose(g1.inverse(), g2)
}

/// `exp(t xi)`
pub fn exp(xi: AlgebraVector, t: f64) -> GroupPose {
    let [x, y, th] = exp_coords(c(t * xi.v1), c(t * xi.v2), c(t * xi.omega));
    GroupPose::new(x, y, th)
}

pub fn log(g: GroupPose) -> Result<AlgebraVector, Se2Error> {
    let th = wrap_angle(g.theta);
    if (th.abs() - PI).abs() < CUT_LOCUS_GUARD {
        return Err(Se2Error::CutLocus(g.theta));
    }
    Ok(AlgebraVector::from_array(log_coords(g.x, g.y, th)))
}

/// `d/de log(exp(e chi) exp(zeta))` at `e = 0`, i.e. the inverse left Jacobian of
/// `exp` at `zeta` applied to `chi`.
pub fn dexpinv_rt(zeta: AlgebraVector, chi: AlgebraVector) -> AlgebraVector {
    let m = dexpinv_matrix(zeta.as_array());
    let x = chi.as_array();
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = row[0] * x[0] + row[1] * x[1] + row[2] * x[2];
    }
    AlgebraVector::from_array(out)
}

/// `(sin t / t, (1 - cos t) / t)`
pub(crate) fn v_coeffs<D: Real>(t: D) -> (D, D) {
    if t.re().abs() < SERIES_THRESHOLD {
        let t2 = t * t;
        let a = c::<D>(1.0)
            - t2 * (c::<D>(1.0 / 6.0)
                - t2 * (c::<D>(1.0 / 120.0) - t2 * (c::<D>(1.0 / 5040.0) - t2 * (1.0 / 362_880.0))));
        let b = t
            * (c::<D>(0.5)
                - t2 * (c::<D>(1.0 / 24.0)
                    - t2 * (c::<D>(1.0 / 720.0) - t2 * (c::<D>(1.0 / 40_320.0) - t2 * (1.0 / 3_628_800.0)))));
        (a, b)
    } else {
        let (s, co) = t.sin_cos();
        (s / t, (c::<D>(1.0) - co) / t)
    }
}

/// `((t - sin t) / t^2, (1 - cos t) / t^2)`
pub(crate) fn w_coeffs<D: Real>(t: D) -> (D, D) {
    if t.re().abs() < SERIES_THRESHOLD {
        let t2 = t * t;
        let p = t
            * (c::<D>(1.0 / 6.0)
                - t2 * (c::<D>(1.0 / 120.0) - t2 * (c::<D>(1.0 / 5040.0) - t2 * (1.0 / 362_880.0))));
        let q = c::<D>(0.5)
            - t2 * (c::<D>(1.0 / 24.0)
                - t2 * (c::<D>(1.0 / 720.0) - t2 * (c::<D>(1.0 / 40_320.0) - t2 * (1.0 / 3_628_800.0))));
        (p, q)
    } else {
        let (s, co) = t.sin_cos();
        let t2 = t * t;
        ((t - s) / t2, (c::<D>(1.0) - co) / t2)
    }
}

pub(crate) fn exp_coords<D: Real>(v1: D, v2: D, w: D) -> [D; 3] {
    let (a, b) = v_coeffs(w);
    [a * v1 - b * v2, b * v1 + a * v2, w]
}

/// Log of `(x, y, theta)` without wrapping `theta`.
pub(crate) fn log_coords<D: Real>(x: D, y: D, th: D) -> [D; 3] {
    let (a, b) = v_coeffs(th);
    let det = a * a + b * b;
    [(a * x + b * y) / det, (a * y - b * x) / det, th]
}

/// Log of `g1^{-1} g2` with the heading difference taken literally, so that the
/// result stays smooth in unwrapped heading coordinates.
pub(crate) fn log_between<D: Real>(g1: [D; 3], g2: [D; 3]) -> [D; 3] {
    let (s, co) = g1[2].sin_cos();
    let dx = g2[0] - g1[0];
    let dy = g2[1] - g1[1];
    log_coords(co * dx + s * dy, co * dy - s * dx, g2[2] - g1[2])
}

/// Row-major matrix of `chi -> dexpinv_rt(zeta, chi)`.
pub(crate) fn dexpinv_matrix<D: Real>(zeta: [D; 3]) -> [[D; 3]; 3] {
    let th = zeta[2];
    let (a, b) = v_coeffs(th);
    let (p, q) = w_coeffs(th);
    let det = a * a + b * b;
    // V^{-1} = [[a, b], [-b, a]] / det
    let vi = [[a / det, b / det], [-b / det, a / det]];
    let w0 = p * zeta[0] + q * zeta[1];
    let w1 = p * zeta[1] - q * zeta[0];
    let zero = c::<D>(0.0);
    [
        [vi[0][0], vi[0][1], -(vi[0][0] * w0 + vi[0][1] * w1)],
        [vi[1][0], vi[1][1], -(vi[1][0] * w0 + vi[1][1] * w1)],
        [zero, zero, c(1.0)],
    ]
}
