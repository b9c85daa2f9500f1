//! Solver contract and the bundled primal-dual interior-point solver.
//!
//! Problem form: minimize `f(z)` subject to `lz <= z <= uz` and `lg <= g(z) <= ug`.
//! Inequality rows get a slack, bounds get a log barrier, and each Newton step
//! solves the regularized KKT system with a banded LU factorization; a banded
//! LDL^T of the same matrix supplies the inertia that steers regularization. Unknowns
//! are interleaved (each constraint row sits right after the last variable it
//! touches) so that a stage-wise transcription stays narrow-banded. The line
//! search is a filter on (constraint violation, barrier objective) with one
//! second-order correction and an l1 merit fallback.

use std::time::Instant;

use thiserror::Error;

pub type Triplets = Vec<(usize, usize, f64)>;

/// What a nonlinear program must provide to be solved.
///
/// The sparsity of [`jacobian`](NlpProblem::jacobian) and
/// [`hessian`](NlpProblem::hessian) must not depend on `z`; entries that happen
/// to be zero are still reported.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_rows(&self) -> usize;
    fn var_bounds(&self) -> (&[f64], &[f64]);
    fn row_bounds(&self) -> (&[f64], &[f64]);
    fn cost(&self, z: &[f64]) -> f64;
    fn cost_gradient(&self, z: &[f64], out: &mut [f64]);
    fn constraints(&self, z: &[f64], out: &mut [f64]);
    /// `(row, col, value)`; duplicates are summed.
    fn jacobian(&self, z: &[f64], out: &mut Triplets);
    /// Lower triangle (`row >= col`) of `sigma * hess f + sum_i w_i hess g_i`;
    /// duplicates are summed.
    fn hessian(&self, z: &[f64], sigma: f64, w: &[f64], out: &mut Triplets);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// The line search could not make progress.
    Stalled,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("starting point has {got} entries, problem has {want}")]
    Dimension { got: usize, want: usize },
    #[error("non-finite values at iteration {0}")]
    NonFinite(usize),
    #[error("KKT system could not be factorized at iteration {iter} (regularization {reg:e})")]
    Factorization { iter: usize, reg: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Dual infeasibility and complementarity of the scaled problem.
    pub tol: f64,
    /// Max constraint violation in the problem's own units.
    pub feas_tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            feas_tol: 1e-6,
            max_iter: 500,
            mu_init: 0.1,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub z: Vec<f64>,
    /// Row multipliers in the problem's own scaling.
    pub multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub cost: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub iterations: usize,
    pub seconds: f64,
}

pub trait NlpSolver {
    fn solve(&self, problem: &dyn NlpProblem, z0: &[f64], opts: &SolverOptions) -> Result<SolverResult, SolverError>;
}

/// Symmetric band matrix, lower part stored row by row, factorized in place as
/// `L D L^T` without pivoting.
pub(crate) struct Band {
    n: usize,
    bw: usize,
    a: Vec<f64>,
}

impl Band {
    pub fn new(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            a: vec![0.0; n * (bw + 1)],
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    pub fn clear(&mut self) {
        self.a.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds to `(i, j)` with `i >= j`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.bw, "({i},{j}) outside band {}", self.bw);
        let k = self.idx(i, j);
        self.a[k] += v;
    }

    /// Returns `(positive, negative)` pivot counts, or `None` on a zero or
    /// non-finite pivot.
    pub fn factor(&mut self) -> Option<(usize, usize)> {
        let (n, bw) = (self.n, self.bw);
        let mut pos = 0;
        let mut neg = 0;
        let mut w = vec![0.0; bw + 1];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let ri = self.idx(i, j0);
            // w[t] = L[i][j0 + t] * D[j0 + t], built up as the row is solved
            for j in j0..i {
                let k0 = j0.max(j.saturating_sub(bw));
                let rj = self.idx(j, k0);
                let mut s = self.a[ri + (j - j0)];
                for k in k0..j {
                    s -= w[k - j0] * self.a[rj + (k - k0)];
                }
                w[j - j0] = s;
                self.a[ri + (j - j0)] = s / self.a[self.idx(j, j)];
            }
            let mut d = self.a[ri + (i - j0)];
            for k in j0..i {
                d -= w[k - j0] * self.a[ri + (k - j0)];
            }
            if !d.is_finite() || d.abs() < 1e-300 {
                return None;
            }
            if d > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            self.a[ri + (i - j0)] = d;
        }
        Some((pos, neg))
    }

    /// Solves with the factor from [`Band::factor`].
    #[cfg(test)]
    pub fn solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let mut s = b[i];
            for j in j0..i {
                s -= self.a[self.idx(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in 0..n {
            b[i] /= self.a[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..(i + bw + 1).min(n) {
                s -= self.a[self.idx(j, i)] * b[j];
            }
            b[i] = s;
        }
    }
}

/// General band matrix with equal lower and upper bandwidth `b`, factorized as
/// `P A = L U` with partial pivoting. Row `i` keeps columns `i - b ..= i + 2b`
/// so that row swaps within the band never leave the window.
pub(crate) struct BandLu {
    n: usize,
    b: usize,
    w: usize,
    a: Vec<f64>,
    l: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn new(n: usize, b: usize) -> Self {
        let w = 3 * b + 1;
        Self {
            n,
            b,
            w,
            a: vec![0.0; n * w],
            l: vec![0.0; n * b],
            piv: vec![0; n],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.w + (j + self.b - i)
    }

    pub fn clear(&mut self) {
        self.a.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `v` to `(i, j)` and, off the diagonal, to `(j, i)`.
    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i.abs_diff(j) <= self.b, "({i},{j}) outside band {}", self.b);
        let k = self.idx(i, j);
        self.a[k] += v;
        if i != j {
            let k = self.idx(j, i);
            self.a[k] += v;
        }
    }

    /// `false` on an exactly singular or non-finite pivot.
    pub fn factor(&mut self) -> bool {
        let (n, b) = (self.n, self.b);
        if self.a.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for k in 0..n {
            let last = (k + b).min(n - 1);
            let right = (k + 2 * b).min(n - 1);
            let mut p = k;
            let mut best = self.a[self.idx(k, k)].abs();
            for i in k + 1..=last {
                let v = self.a[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > 1e-300) {
                return false;
            }
            self.piv[k] = p;
            if p != k {
                for j in k..=right {
                    let (x, y) = (self.idx(k, j), self.idx(p, j));
                    self.a.swap(x, y);
                }
            }
            let inv = 1.0 / self.a[self.idx(k, k)];
            let rk = self.idx(k, k);
            for i in k + 1..=last {
                let ik = self.idx(i, k);
                let f = self.a[ik] * inv;
                self.l[k * b + (i - k - 1)] = f;
                self.a[ik] = 0.0;
                if f != 0.0 {
                    let ri = self.idx(i, k);
                    for t in 1..=right - k {
                        self.a[ri + t] -= f * self.a[rk + t];
                    }
                }
            }
        }
        true
    }

    pub fn solve(&self, x: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + b).min(n - 1) {
                    x[i] -= self.l[k * b + (i - k - 1)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let rk = self.idx(k, k);
            let mut s = x[k];
            for j in k + 1..=(k + 2 * b).min(n - 1) {
                s -= self.a[rk + (j - k)] * x[j];
            }
            x[k] = s / self.a[rk];
        }
    }
}

/// Primal-dual interior-point solver.
#[derive(Debug, Default, Clone, Copy)]
pub struct InteriorPoint;

/// The problem seen through free variables, slacks, scaling and the
/// interleaved ordering of the KKT unknowns.
struct Reform<'a> {
    prob: &'a dyn NlpProblem,
    n: usize,
    m: usize,
    /// Problem index of each free variable.
    free: Vec<usize>,
    /// Free-variable position of each problem variable.
    col_of: Vec<Option<usize>>,
    /// Slack position (after the free variables) of each inequality row.
    slack_of: Vec<Option<usize>>,
    nx: usize,
    xl: Vec<f64>,
    xu: Vec<f64>,
    lg: Vec<f64>,
    zfix: Vec<f64>,
    fscale: f64,
    rscale: Vec<f64>,
    /// KKT position of each primal unknown and each row.
    pos_x: Vec<usize>,
    pos_r: Vec<usize>,
    bw: usize,
}

impl Reform<'_> {
    fn full_z(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.zfix.clone();
        for (k, &i) in self.free.iter().enumerate() {
            z[i] = x[k];
        }
        z
    }

    /// Scaled cost and residuals `c(x)`.
    fn eval(&self, x: &[f64], g: &mut [f64], c: &mut [f64]) -> f64 {
        let z = self.full_z(x);
        self.prob.constraints(&z, g);
        for r in 0..self.m {
            let target = match self.slack_of[r] {
                Some(s) => x[s],
                None => self.lg[r],
            };
            c[r] = self.rscale[r] * (g[r] - target);
        }
        self.fscale * self.prob.cost(&z)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let z = self.full_z(x);
        let mut gz = vec![0.0; self.n];
        self.prob.cost_gradient(&z, &mut gz);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &i) in self.free.iter().enumerate() {
            out[k] = self.fscale * gz[i];
        }
    }

    /// Scaled Jacobian as `(row, primal unknown, value)`.
    fn jacobian(&self, x: &[f64], out: &mut Triplets) {
        out.clear();
        let z = self.full_z(x);
        let mut t = Triplets::new();
        self.prob.jacobian(&z, &mut t);
        for (r, i, v) in t {
            if let Some(k) = self.col_of[i] {
                out.push((r, k, self.rscale[r] * v));
            }
        }
        for r in 0..self.m {
            if let Some(s) = self.slack_of[r] {
                out.push((r, s, -self.rscale[r]));
            }
        }
    }

    /// Lower triangle of the scaled Lagrangian Hessian over primal unknowns.
    fn hessian(&self, x: &[f64], lam: &[f64], out: &mut Triplets) {
        out.clear();
        let z = self.full_z(x);
        let w: Vec<f64> = (0..self.m).map(|r| lam[r] * self.rscale[r]).collect();
        let mut t = Triplets::new();
        self.prob.hessian(&z, self.fscale, &w, &mut t);
        for (i, j, v) in t {
            if let (Some(a), Some(b)) = (self.col_of[i], self.col_of[j]) {
                out.push((a.max(b), a.min(b), v));
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const BOUND_RELAX: f64 = 1e-8;

fn build<'a>(prob: &'a dyn NlpProblem, z0: &[f64]) -> Reform<'a> {
    let n = prob.num_vars();
    let m = prob.num_rows();
    let (lz, uz) = prob.var_bounds();
    let (lg, ug) = prob.row_bounds();
    let mut free = Vec::new();
    let mut col_of = vec![None; n];
    let mut zfix = vec![0.0; n];
    for i in 0..n {
        if lz[i] == uz[i] {
            zfix[i] = lz[i];
        } else {
            col_of[i] = Some(free.len());
            free.push(i);
            zfix[i] = z0[i];
        }
    }
    let nf = free.len();
    let mut slack_of = vec![None; m];
    let mut nx = nf;
    for r in 0..m {
        if lg[r] != ug[r] {
            slack_of[r] = Some(nx);
            nx += 1;
        }
    }
    let mut xl = vec![f64::NEG_INFINITY; nx];
    let mut xu = vec![f64::INFINITY; nx];
    for (k, &i) in free.iter().enumerate() {
        xl[k] = lz[i];
        xu[k] = uz[i];
    }
    for r in 0..m {
        if let Some(s) = slack_of[r] {
            xl[s] = lg[r];
            xu[s] = ug[r];
        }
    }
    // Relaxed slightly so that active bounds do not pin iterates to roundoff
    // distance from the boundary.
    for k in 0..nx {
        xl[k] -= BOUND_RELAX * xl[k].abs().max(1.0);
        xu[k] += BOUND_RELAX * xu[k].abs().max(1.0);
    }

    // Gradient-based scaling at the starting point.
    let mut gz = vec![0.0; n];
    prob.cost_gradient(z0, &mut gz);
    let gmax = free.iter().fold(0.0_f64, |a, &i| a.max(gz[i].abs()));
    let fscale = if gmax > 100.0 { 100.0 / gmax } else { 1.0 };
    let mut t = Triplets::new();
    prob.jacobian(z0, &mut t);
    let mut rmax = vec![0.0_f64; m];
    let mut anchor = vec![None::<usize>; m];
    for &(r, i, v) in &t {
        if let Some(k) = col_of[i] {
            rmax[r] = rmax[r].max(v.abs());
            anchor[r] = Some(anchor[r].map_or(k, |a: usize| a.max(k)));
        }
    }
    let rscale: Vec<f64> = rmax.iter().map(|&v| if v > 100.0 { 100.0 / v } else { 1.0 }).collect();

    // Interleaved ordering: (key, tiebreak, kind, index)
    let mut keys: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(nx + m);
    for k in 0..nf {
        keys.push((k, 0, 0, k));
    }
    for r in 0..m {
        let a = anchor[r].unwrap_or(0);
        if let Some(s) = slack_of[r] {
            keys.push((a, 1, 0, s));
        }
        keys.push((a, 2, 1, r));
    }
    keys.sort_unstable();
    let mut pos_x = vec![0; nx];
    let mut pos_r = vec![0; m];
    for (p, &(_, _, kind, idx)) in keys.iter().enumerate() {
        if kind == 0 {
            pos_x[idx] = p;
        } else {
            pos_r[idx] = p;
        }
    }
    let mut bw = 0;
    for &(r, i, _) in &t {
        if let Some(k) = col_of[i] {
            bw = bw.max(pos_x[k].abs_diff(pos_r[r]));
        }
    }
    for r in 0..m {
        if let Some(s) = slack_of[r] {
            bw = bw.max(pos_x[s].abs_diff(pos_r[r]));
        }
    }
    let mut h = Triplets::new();
    prob.hessian(z0, 1.0, &vec![1.0; m], &mut h);
    for &(i, j, _) in &h {
        if let (Some(a), Some(b)) = (col_of[i], col_of[j]) {
            bw = bw.max(pos_x[a].abs_diff(pos_x[b]));
        }
    }

    Reform {
        prob,
        n,
        m,
        free,
        col_of,
        slack_of,
        nx,
        xl,
        xu,
        lg: lg.to_vec(),
        zfix,
        fscale,
        rscale,
        pos_x,
        pos_r,
        bw,
    }
}

/// Moves `v` strictly inside `[l, u]`.
fn push_inside(v: f64, l: f64, u: f64) -> f64 {
    let k = 1e-2;
    let mut pl = if l.is_finite() { k * l.abs().max(1.0) } else { 0.0 };
    let mut pu = if u.is_finite() { k * u.abs().max(1.0) } else { 0.0 };
    if l.is_finite() && u.is_finite() {
        pl = pl.min(k * (u - l));
        pu = pu.min(k * (u - l));
    }
    v.max(l + pl).min(u - pu)
}

/// Largest step in (0, 1] keeping `v + a dv` at least `(1 - tau)` of the way
/// from its bound.
fn max_step(v: &[f64], dv: &[f64], l: &[f64], u: &[f64], tau: f64) -> f64 {
    let mut a: f64 = 1.0;
    for i in 0..v.len() {
        if dv[i] < 0.0 && l[i].is_finite() {
            a = a.min(-tau * (v[i] - l[i]) / dv[i]);
        }
        if dv[i] > 0.0 && u[i].is_finite() {
            a = a.min(tau * (u[i] - v[i]) / dv[i]);
        }
    }
    a
}

fn max_step_dual(z: &[f64], dz: &[f64], tau: f64) -> f64 {
    let mut a: f64 = 1.0;
    for i in 0..z.len() {
        if dz[i] < 0.0 && z[i] > 0.0 {
            a = a.min(-tau * z[i] / dz[i]);
        }
    }
    a
}

fn barrier(x: &[f64], xl: &[f64], xu: &[f64], mu: f64) -> f64 {
    let mut b = 0.0;
    for i in 0..x.len() {
        if xl[i].is_finite() {
            b -= mu * (x[i] - xl[i]).ln();
        }
        if xu[i].is_finite() {
            b -= mu * (xu[i] - x[i]).ln();
        }
    }
    b
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

impl NlpSolver for InteriorPoint {
    fn solve(&self, prob: &dyn NlpProblem, z0: &[f64], opts: &SolverOptions) -> Result<SolverResult, SolverError> {
        let clock = Instant::now();
        let n = prob.num_vars();
        if z0.len() != n {
            return Err(SolverError::Dimension { got: z0.len(), want: n });
        }
        let (lz, uz) = prob.var_bounds();
        let zc: Vec<f64> = (0..n).map(|i| z0[i].max(lz[i]).min(uz[i])).collect();
        let rf = build(prob, &zc);
        let (nx, m) = (rf.nx, rf.m);
        let nf = rf.free.len();
        let (xl, xu) = (&rf.xl, &rf.xu);

        let mut x = vec![0.0; nx];
        for k in 0..nf {
            x[k] = push_inside(zc[rf.free[k]], xl[k], xu[k]);
        }
        let mut g = vec![0.0; m];
        let mut c = vec![0.0; m];
        rf.eval(&x, &mut g, &mut c);
        for r in 0..m {
            if let Some(s) = rf.slack_of[r] {
                x[s] = push_inside(g[r], xl[s], xu[s]);
            }
        }
        let mut lam = vec![0.0; m];
        let mut zl: Vec<f64> = xl.iter().map(|l| if l.is_finite() { 1.0 } else { 0.0 }).collect();
        let mut zu: Vec<f64> = xu.iter().map(|u| if u.is_finite() { 1.0 } else { 0.0 }).collect();
        let mut mu = opts.mu_init;
        let mut filter: Vec<(f64, f64)> = Vec::new();
        let mut delta_w_last: f64 = 0.0;

        let dim = nx + m;
        let mut lu = BandLu::new(dim, rf.bw);
        let mut band = Band::new(dim, rf.bw);
        let mut grad = vec![0.0; nx];
        let mut jt = Triplets::new();
        let mut ht = Triplets::new();
        let mut dx = vec![0.0; nx];
        let mut dl = vec![0.0; m];
        let mut dzl = vec![0.0; nx];
        let mut dzu = vec![0.0; nx];
        let mut xt = vec![0.0; nx];
        let mut gt = vec![0.0; m];
        let mut ct = vec![0.0; m];
        let mut jtl = vec![0.0; nx];
        let mut status = SolveStatus::MaxIterations;
        let mut iter = 0;
        let mut stalls = 0;
        let (mut dual_inf, mut primal_inf, mut compl);

        let mut last_alpha = 0.0;
        let mut f = rf.eval(&x, &mut g, &mut c);
        let theta_ref = l1(&c).max(1.0);
        loop {
            if !f.is_finite() || c.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NonFinite(iter));
            }
            rf.gradient(&x, &mut grad);
            rf.jacobian(&x, &mut jt);
            jtl.iter_mut().for_each(|v| *v = 0.0);
            for &(r, k, v) in &jt {
                jtl[k] += v * lam[r];
            }

            // optimality measures
            let s_max = 100.0;
            let zsum = l1(&zl) + l1(&zu);
            let s_d = ((l1(&lam) + zsum) / (m + 2 * nx).max(1) as f64 / s_max).max(1.0);
            let s_c = (zsum / (2 * nx).max(1) as f64 / s_max).max(1.0);
            let mut rd: f64 = 0.0;
            for k in 0..nx {
                rd = rd.max((grad[k] + jtl[k] - zl[k] + zu[k]).abs());
            }
            dual_inf = rd / s_d;
            primal_inf = (0..m).fold(0.0_f64, |a, r| a.max((c[r] / rf.rscale[r]).abs()));
            let comp = |target: f64| {
                let mut e: f64 = 0.0;
                for k in 0..nx {
                    if xl[k].is_finite() {
                        e = e.max(((x[k] - xl[k]) * zl[k] - target).abs());
                    }
                    if xu[k].is_finite() {
                        e = e.max(((xu[k] - x[k]) * zu[k] - target).abs());
                    }
                }
                e / s_c
            };
            compl = comp(0.0);
            if opts.verbose {
                eprintln!(
                    "iter {iter:3} f {:+.8e} inf_pr {primal_inf:.2e} inf_du {dual_inf:.2e} compl {compl:.2e} mu {mu:.1e} reg {delta_w_last:.1e} step {last_alpha:.1e}",
                    f / rf.fscale
                );
            }
            if dual_inf <= opts.tol && primal_inf <= opts.feas_tol && compl <= opts.tol {
                status = SolveStatus::Converged;
                break;
            }
            if iter >= opts.max_iter {
                break;
            }
            // barrier update
            let c_inf = inf_norm(&c);
            while mu > opts.tol / 10.0 && dual_inf.max(c_inf).max(comp(mu)) <= 10.0 * mu {
                mu = (opts.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
                filter.clear();
            }
            iter += 1;

            // assemble, factorize and solve the KKT system
            rf.hessian(&x, &lam, &mut ht);
            let mut sigma = vec![0.0; nx];
            for k in 0..nx {
                if xl[k].is_finite() {
                    sigma[k] += zl[k] / (x[k] - xl[k]);
                }
                if xu[k].is_finite() {
                    sigma[k] += zu[k] / (xu[k] - x[k]);
                }
            }
            let grad_phi: Vec<f64> = (0..nx)
                .map(|k| {
                    let mut v = grad[k];
                    if xl[k].is_finite() {
                        v -= mu / (x[k] - xl[k]);
                    }
                    if xu[k].is_finite() {
                        v += mu / (xu[k] - x[k]);
                    }
                    v
                })
                .collect();
            // K d with the matrix that was factored, in band ordering
            let kkt_mult = |d: &[f64], out: &mut [f64], dw: f64, dc: f64| {
                out.iter_mut().for_each(|v| *v = 0.0);
                for &(i, j, v) in &ht {
                    let (a, b) = (rf.pos_x[i], rf.pos_x[j]);
                    out[a] += v * d[b];
                    if a != b {
                        out[b] += v * d[a];
                    }
                }
                for k in 0..nx {
                    let p = rf.pos_x[k];
                    out[p] += (sigma[k] + dw) * d[p];
                }
                for &(r, k, v) in &jt {
                    let (a, b) = (rf.pos_r[r], rf.pos_x[k]);
                    out[a] += v * d[b];
                    out[b] += v * d[a];
                }
                for r in 0..m {
                    let p = rf.pos_r[r];
                    out[p] -= dc * d[p];
                }
            };
            let solve_kkt = |lu: &BandLu, rc: &[f64], dw: f64, dc: f64, dx: &mut [f64], dl: &mut [f64]| {
                let mut b = vec![0.0; dim];
                for k in 0..nx {
                    b[rf.pos_x[k]] = -(grad_phi[k] + jtl[k]);
                }
                for r in 0..m {
                    b[rf.pos_r[r]] = -rc[r];
                }
                let mut sol = b.clone();
                lu.solve(&mut sol);
                // iterative refinement, keeping the best iterate
                let bn = inf_norm(&b).max(1e-300);
                let mut res = vec![0.0; dim];
                let mut best = f64::INFINITY;
                for _ in 0..4 {
                    kkt_mult(&sol, &mut res, dw, dc);
                    for i in 0..dim {
                        res[i] = b[i] - res[i];
                    }
                    let rn = inf_norm(&res) / bn;
                    if !(rn < 0.5 * best) || rn <= 1e-13 {
                        break;
                    }
                    best = rn;
                    lu.solve(&mut res);
                    for i in 0..dim {
                        sol[i] += res[i];
                    }
                }
                for k in 0..nx {
                    dx[k] = sol[rf.pos_x[k]];
                }
                for r in 0..m {
                    dl[r] = sol[rf.pos_r[r]];
                }
            };
            let mut delta_w: f64 = 0.0;
            let mut delta_c = 0.0;
            let mut attempt = 0;
            loop {
                lu.clear();
                for &(i, j, v) in &ht {
                    lu.add_sym(rf.pos_x[i], rf.pos_x[j], v);
                }
                for k in 0..nx {
                    let p = rf.pos_x[k];
                    lu.add_sym(p, p, sigma[k] + delta_w);
                }
                for &(r, k, v) in &jt {
                    lu.add_sym(rf.pos_r[r], rf.pos_x[k], v);
                }
                for r in 0..m {
                    let p = rf.pos_r[r];
                    lu.add_sym(p, p, -delta_c);
                }
                // The unpivoted LDL^T only supplies the inertia; the step
                // comes from the pivoted LU.
                band.clear();
                for &(i, j, v) in &ht {
                    let (a, b) = (rf.pos_x[i], rf.pos_x[j]);
                    band.add(a.max(b), a.min(b), v);
                }
                for k in 0..nx {
                    let p = rf.pos_x[k];
                    band.add(p, p, sigma[k] + delta_w);
                }
                for &(r, k, v) in &jt {
                    let (a, b) = (rf.pos_r[r], rf.pos_x[k]);
                    band.add(a.max(b), a.min(b), v);
                }
                for r in 0..m {
                    let p = rf.pos_r[r];
                    band.add(p, p, -delta_c);
                }
                let inertia = band.factor();
                let singular = inertia.is_none() || !lu.factor();
                let wrong_inertia = inertia.is_some_and(|(pos, neg)| pos != nx || neg != m);
                if !singular && !wrong_inertia {
                    solve_kkt(&lu, &c, delta_w, delta_c, &mut dx, &mut dl);
                    if dx.iter().chain(dl.iter()).all(|v| v.is_finite()) {
                        break;
                    }
                }
                if singular {
                    // a rank-deficient Jacobian shows up as a zero pivot
                    delta_c = 1e-8 * mu.powf(0.25);
                }
                if opts.verbose {
                    eprintln!("  retry: singular {singular} inertia {inertia:?} dw {delta_w:.1e}");
                }
                attempt += 1;
                let first_singular = singular && attempt == 1;
                delta_w = if first_singular {
                    0.0
                } else if delta_w == 0.0 {
                    if delta_w_last == 0.0 {
                        1e-4
                    } else {
                        (delta_w_last / 3.0).max(1e-20)
                    }
                } else if delta_w_last == 0.0 {
                    delta_w * 100.0
                } else {
                    delta_w * 8.0
                };
                if delta_w > 1e40 || attempt > 60 {
                    return Err(SolverError::Factorization { iter, reg: delta_w });
                }
            }
            if delta_w > 0.0 {
                delta_w_last = delta_w;
            }
            if dx.iter().chain(dl.iter()).any(|v| !v.is_finite()) {
                return Err(SolverError::NonFinite(iter));
            }
            for k in 0..nx {
                dzl[k] = if xl[k].is_finite() {
                    mu / (x[k] - xl[k]) - zl[k] - zl[k] / (x[k] - xl[k]) * dx[k]
                } else {
                    0.0
                };
                dzu[k] = if xu[k].is_finite() {
                    mu / (xu[k] - x[k]) - zu[k] + zu[k] / (xu[k] - x[k]) * dx[k]
                } else {
                    0.0
                };
            }

            // Filter line search on (theta, phi) = (|c|_1, barrier objective).
            let theta0 = l1(&c);
            let phi = |f: f64, x: &[f64]| f + barrier(x, xl, xu, mu);
            let phi0 = phi(f, &x);
            let slope: f64 = (0..nx).map(|k| grad_phi[k] * dx[k]).sum();
            let (gamma_t, gamma_f, eta): (f64, f64, f64) = (1e-5, 1e-8, 1e-4);
            let theta_min = 1e-4 * theta_ref;
            let theta_max = 1e4 * theta_ref;
            let acceptable = |th: f64, ph: f64, filter: &[(f64, f64)]| {
                th <= theta_max && filter.iter().all(|&(tf, pf)| th < tf || ph < pf)
            };
            let switching = |alpha: f64| slope < 0.0 && alpha * (-slope).powf(2.3) > theta0.powf(1.1);
            let tau = (1.0 - mu).max(0.99);
            let amax = max_step(&x, &dx, xl, xu, tau);
            let alpha_min = {
                let mut a = gamma_t;
                if slope < 0.0 {
                    a = a.min(gamma_f * theta0 / -slope);
                    if theta0 <= theta_min {
                        a = a.min(theta0.powf(1.1) / (-slope).powf(2.3));
                    }
                }
                0.05 * a
            };
            let mut alpha = amax;
            let mut accepted = false;
            let mut f_type = false;
            let mut ft = 0.0;
            let mut tried_soc = false;
            while alpha >= alpha_min {
                for k in 0..nx {
                    xt[k] = x[k] + alpha * dx[k];
                }
                ft = rf.eval(&xt, &mut gt, &mut ct);
                let (tht, pht) = (l1(&ct), phi(ft, &xt));
                let check = |tht: f64, pht: f64, alpha: f64| -> Option<bool> {
                    if !(pht.is_finite() && tht.is_finite()) || !acceptable(tht, pht, &filter) {
                        return None;
                    }
                    if theta0 <= theta_min && switching(alpha) {
                        // objective-type step needs Armijo decrease
                        (pht <= phi0 + eta * alpha * slope + 1e-13 * phi0.abs().max(1.0)).then_some(true)
                    } else {
                        (tht <= (1.0 - gamma_t) * theta0 || pht <= phi0 - gamma_f * theta0).then_some(false)
                    }
                };
                if let Some(ft_kind) = check(tht, pht, alpha) {
                    f_type = ft_kind;
                    accepted = true;
                    break;
                }
                if !tried_soc && alpha == amax && tht >= theta0 {
                    tried_soc = true;
                    // second-order correction for the curvature of c
                    let csoc: Vec<f64> = (0..m).map(|r| alpha * c[r] + ct[r]).collect();
                    let mut dxs = vec![0.0; nx];
                    let mut dls = vec![0.0; m];
                    solve_kkt(&lu, &csoc, delta_w, delta_c, &mut dxs, &mut dls);
                    let asoc = max_step(&x, &dxs, xl, xu, tau);
                    let mut xs = vec![0.0; nx];
                    for k in 0..nx {
                        xs[k] = x[k] + asoc * dxs[k];
                    }
                    let fs = rf.eval(&xs, &mut gt, &mut ct);
                    if let Some(ft_kind) = check(l1(&ct), phi(fs, &xs), alpha) {
                        dx.copy_from_slice(&dxs);
                        dl.copy_from_slice(&dls);
                        xt.copy_from_slice(&xs);
                        alpha = asoc;
                        ft = fs;
                        f_type = ft_kind;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted && !f_type {
                filter.push(((1.0 - gamma_t) * theta0, phi0 - gamma_f * theta0));
            }
            if !accepted {
                // No acceptable point: fall back to a feasibility-weighted l1
                // merit and reset the filter around the new iterate.
                let cn = theta0;
                let nu = if cn > 0.0 { (slope.max(0.0) / (0.5 * cn) + 1.0).max(1.0) } else { 1.0 };
                let dphi = slope - nu * cn;
                alpha = amax;
                for _ in 0..40 {
                    for k in 0..nx {
                        xt[k] = x[k] + alpha * dx[k];
                    }
                    ft = rf.eval(&xt, &mut gt, &mut ct);
                    let m1 = phi(ft, &xt) + nu * l1(&ct);
                    if m1.is_finite() && m1 <= phi0 + nu * cn + 1e-4 * alpha * dphi {
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    stalls += 1;
                    if stalls > 5 {
                        status = SolveStatus::Stalled;
                        break;
                    }
                    alpha = amax * 1e-2;
                    for k in 0..nx {
                        xt[k] = x[k] + alpha * dx[k];
                    }
                    ft = rf.eval(&xt, &mut gt, &mut ct);
                }
                filter.clear();
            }
            if accepted {
                stalls = 0;
            }
            last_alpha = alpha;
            let az = max_step_dual(&zl, &dzl, tau).min(max_step_dual(&zu, &dzu, tau));
            x.copy_from_slice(&xt);
            std::mem::swap(&mut g, &mut gt);
            std::mem::swap(&mut c, &mut ct);
            f = ft;
            for r in 0..m {
                lam[r] += alpha * dl[r];
            }
            let kappa = 1e10;
            for k in 0..nx {
                if xl[k].is_finite() {
                    let s = x[k] - xl[k];
                    zl[k] = (zl[k] + az * dzl[k]).clamp(mu / (kappa * s), kappa * mu / s);
                }
                if xu[k].is_finite() {
                    let s = xu[k] - x[k];
                    zu[k] = (zu[k] + az * dzu[k]).clamp(mu / (kappa * s), kappa * mu / s);
                }
            }
        }

        let z = rf.full_z(&x);
        let multipliers = (0..m).map(|r| lam[r] * rf.rscale[r] / rf.fscale).collect();
        Ok(SolverResult {
            cost: prob.cost(&z),
            z,
            multipliers,
            status,
            stationarity: dual_inf,
            feasibility: primal_inf,
            complementarity: compl,
            iterations: iter,
            seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_lu_matches_dense_solve_on_saddle_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, b) = (40, 4);
        let mut lu = BandLu::new(n, b);
        let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(b)..=i {
                // zero diagonal on odd rows forces pivoting
                let v = if i == j && i % 2 == 1 { 0.0 } else { rng.random_range(-1.0..1.0) };
                lu.add_sym(i, j, v);
                dense[(i, j)] += v;
                if i != j {
                    dense[(j, i)] += v;
                }
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = dense.clone().lu().solve(&nalgebra::DVector::from_vec(rhs.clone())).unwrap();
        assert!(lu.factor());
        let mut x = rhs;
        lu.solve(&mut x);
        for i in 0..n {
            assert!((x[i] - want[i]).abs() < 1e-9 * (1.0 + want[i].abs()), "{i}: {} vs {}", x[i], want[i]);
        }
    }

    #[test]
    fn band_ldlt_matches_closed_form() {
        // tridiagonal 2 -1
        let n = 6;
        let mut b = Band::new(n, 1);
        for i in 0..n {
            b.add(i, i, 2.0);
            if i > 0 {
                b.add(i, i - 1, -1.0);
            }
        }
        assert_eq!(b.factor(), Some((n, 0)));
        let mut x = vec![1.0; n];
        b.solve(&mut x);
        // x_i = (i+1)(n-i)/2
        for (i, v) in x.iter().enumerate() {
            let want = ((i + 1) * (n - i)) as f64 / 2.0;
            assert!((v - want).abs() < 1e-12, "{i}: {v} vs {want}");
        }
    }

    #[test]
    fn band_reports_inertia_of_saddle_matrix() {
        // [[2, 1], [1, -1]] has one positive and one negative eigenvalue
        let mut b = Band::new(2, 1);
        b.add(0, 0, 2.0);
        b.add(1, 0, 1.0);
        b.add(1, 1, -1.0);
        assert_eq!(b.factor(), Some((1, 1)));
        let mut x = vec![3.0, 0.0];
        b.solve(&mut x);
        // 2a + b = 3, a - b = 0
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    /// min (z0 - 1)^2 + (z1 - 2)^2 s.t. z0 + z1 = 1, z1 <= 0.5, z in [-10, 10]
    struct Toy;

    impl NlpProblem for Toy {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_rows(&self) -> usize {
            2
        }
        fn var_bounds(&self) -> (&[f64], &[f64]) {
            (&[-10.0, -10.0], &[10.0, 10.0])
        }
        fn row_bounds(&self) -> (&[f64], &[f64]) {
            (&[1.0, f64::NEG_INFINITY], &[1.0, 0.5])
        }
        fn cost(&self, z: &[f64]) -> f64 {
            (z[0] - 1.0).powi(2) + (z[1] - 2.0).powi(2)
        }
        fn cost_gradient(&self, z: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * (z[0] - 1.0);
            out[1] = 2.0 * (z[1] - 2.0);
        }
        fn constraints(&self, z: &[f64], out: &mut [f64]) {
            out[0] = z[0] + z[1];
            out[1] = z[1];
        }
        fn jacobian(&self, _z: &[f64], out: &mut Triplets) {
            out.extend([(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]);
        }
        fn hessian(&self, _z: &[f64], sigma: f64, _w: &[f64], out: &mut Triplets) {
            out.extend([(0, 0, 2.0 * sigma), (1, 1, 2.0 * sigma)]);
        }
    }

    #[test]
    fn toy_problem_reaches_kkt_point() {
        // without z1 <= 0.5 the optimum is (0, 1); the bound moves it to (0.5, 0.5)
        let opts = SolverOptions {
            tol: 1e-10,
            feas_tol: 1e-10,
            ..Default::default()
        };
        let r = InteriorPoint.solve(&Toy, &[0.0, 0.0], &opts).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((r.z[0] - 0.5).abs() < 1e-8 && (r.z[1] - 0.5).abs() < 1e-8, "{:?}", r.z);
        // 2(z0-1) + y0 = 0 -> y0 = 1; 2(z1-2) + y0 + y1 = 0 -> y1 = 2
        assert!((r.multipliers[0] - 1.0).abs() < 1e-6, "{:?}", r.multipliers);
        assert!((r.multipliers[1] - 2.0).abs() < 1e-6, "{:?}", r.multipliers);
    }

    /// Nonconvex: min -z0 z1 on the unit circle, z >= 0. Optimum at 45 degrees.
    struct Circle;

    impl NlpProblem for Circle {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_rows(&self) -> usize {
            1
        }
        fn var_bounds(&self) -> (&[f64], &[f64]) {
            (&[0.0, 0.0], &[f64::INFINITY, f64::INFINITY])
        }
        fn row_bounds(&self) -> (&[f64], &[f64]) {
            (&[1.0], &[1.0])
        }
        fn cost(&self, z: &[f64]) -> f64 {
            -z[0] * z[1]
        }
        fn cost_gradient(&self, z: &[f64], out: &mut [f64]) {
            out[0] = -z[1];
            out[1] = -z[0];
        }
        fn constraints(&self, z: &[f64], out: &mut [f64]) {
            out[0] = z[0] * z[0] + z[1] * z[1];
        }
        fn jacobian(&self, z: &[f64], out: &mut Triplets) {
            out.extend([(0, 0, 2.0 * z[0]), (0, 1, 2.0 * z[1])]);
        }
        fn hessian(&self, _z: &[f64], sigma: f64, w: &[f64], out: &mut Triplets) {
            out.extend([(0, 0, 2.0 * w[0]), (1, 0, -sigma), (1, 1, 2.0 * w[0])]);
        }
    }

    #[test]
    fn nonconvex_problem_needs_inertia_correction() {
        let r = InteriorPoint.solve(&Circle, &[1.0, 0.1], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        let h = 0.5_f64.sqrt();
        assert!((r.z[0] - h).abs() < 1e-6 && (r.z[1] - h).abs() < 1e-6, "{:?}", r.z);
    }
}
