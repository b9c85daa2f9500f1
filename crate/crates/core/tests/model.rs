use proptest::prelude::*;
use wip_core::model::*;
use wip_core::params::ParamSet;

fn config(x: &ReducedState) -> FullConfiguration {
    FullConfiguration {
        x: x.x,
        y: x.y,
        theta: x.theta,
        alpha: x.alpha,
        ..Default::default()
    }
}

fn sample_state(seed: u64) -> ReducedState {
    // small deterministic generator, enough for spot checks
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    ReducedState {
        x: next(),
        y: next(),
        theta: 3.0 * next(),
        alpha: 0.8 * next(),
        v_alpha: 2.0 * next(),
        v_d: next(),
        v_theta: 2.0 * next(),
        v_qr: next(),
        v_ql: next(),
    }
}

#[test]
fn mass_matrix_is_hessian_of_kinetic_energy() {
    let p = ParamSet::default();
    for seed in 0..20 {
        let xs = sample_state(seed);
        let mut q = config(&xs);
        q.phi_r = 0.7;
        q.q_l = -0.2;
        let m = mass_matrix_at(q.theta, q.alpha, &p);
        let t = |v: [f64; 8]| kinetic_energy(&q, &FullVelocity::from_array(v), &p);
        for i in 0..8 {
            for j in 0..8 {
                let mut ei = [0.0; 8];
                let mut ej = [0.0; 8];
                let mut eij = [0.0; 8];
                ei[i] = 1.0;
                ej[j] = 1.0;
                eij[i] += 1.0;
                eij[j] += 1.0;
                // exact polarization for a quadratic form
                let fd = if i == j { 2.0 * t(ei) } else { t(eij) - t(ei) - t(ej) };
                assert!((fd - m[i][j]).abs() < 1e-12 * (1.0 + m[i][j].abs()), "M[{i}][{j}] {fd} vs {}", m[i][j]);
            }
        }
    }
}

#[test]
fn mass_matrix_partials_match_central_differences() {
    let p = ParamSet::default();
    let e = 1e-6;
    for seed in 0..20 {
        let xs = sample_state(seed);
        let (mt, ma) = mass_matrix_partials_at(xs.theta, xs.alpha, &p);
        let mp = mass_matrix_at(xs.theta + e, xs.alpha, &p);
        let mm = mass_matrix_at(xs.theta - e, xs.alpha, &p);
        let ap = mass_matrix_at(xs.theta, xs.alpha + e, &p);
        let am = mass_matrix_at(xs.theta, xs.alpha - e, &p);
        for i in 0..8 {
            for j in 0..8 {
                assert!(((mp[i][j] - mm[i][j]) / (2.0 * e) - mt[i][j]).abs() < 1e-9);
                assert!(((ap[i][j] - am[i][j]) / (2.0 * e) - ma[i][j]).abs() < 1e-9);
            }
        }
    }
}

/// Euler-Lagrange residual built only from finite differences of `lagrangian`:
/// `d/dt dL/dv - dL/dq - F` must lie in the span of the constraint rows.
#[test]
fn reduced_dynamics_satisfy_unreduced_equations() {
    let p = ParamSet::default();
    for seed in 0..15 {
        let xs = sample_state(100 + seed);
        let u = ControlInput::new(1.3, -0.4);
        let xd = reduced_dynamics(&xs, &u, &p).unwrap();
        let s = nullspace_at(xs.theta, &p);
        let v = full_velocity(&xs, &p).to_array();
        let nu_dot = [xd.v_alpha, xd.v_d, xd.v_theta, xd.v_qr, xd.v_ql];
        let mut a = [0.0; 8];
        for i in 0..8 {
            a[i] = (0..5).map(|k| s[i][k] * nu_dot[k]).sum();
        }
        let (st, ct) = xs.theta.sin_cos();
        a[0] -= st * xs.v_theta * xs.v_d;
        a[1] += ct * xs.v_theta * xs.v_d;

        let mut q = config(&xs).to_array();
        q[4] = 0.3;
        q[5] = -1.1;
        q[6] = 0.05;
        q[7] = -0.02;

        let lag = |q: [f64; 8], v: [f64; 8]| lagrangian(&FullConfiguration::from_array(q), &FullVelocity::from_array(v), &p);
        let hv = 1e-3;
        let dl_dv = |q: [f64; 8], v: [f64; 8]| -> [f64; 8] {
            std::array::from_fn(|i| {
                let mut vp = v;
                let mut vm = v;
                vp[i] += hv;
                vm[i] -= hv;
                (lag(q, vp) - lag(q, vm)) / (2.0 * hv)
            })
        };
        let ht = 1e-5;
        let qp: [f64; 8] = std::array::from_fn(|i| q[i] + ht * v[i]);
        let qm: [f64; 8] = std::array::from_fn(|i| q[i] - ht * v[i]);
        let vp: [f64; 8] = std::array::from_fn(|i| v[i] + ht * a[i]);
        let vm: [f64; 8] = std::array::from_fn(|i| v[i] - ht * a[i]);
        let pp = dl_dv(qp, vp);
        let pm = dl_dv(qm, vm);
        let hq = 1e-6;
        let mut e = [0.0; 8];
        for i in 0..8 {
            let mut qa = q;
            let mut qb = q;
            qa[i] += hq;
            qb[i] -= hq;
            let dl_dq = (lag(qa, v) - lag(qb, v)) / (2.0 * hq);
            e[i] = (pp[i] - pm[i]) / (2.0 * ht) - dl_dq;
        }
        let f = generalized_forces(
            &FullConfiguration::from_array(q),
            &FullVelocity::from_array(v),
            &u,
            &p,
        );
        for k in 0..5 {
            e[3 + k] -= f[k];
        }
        // remove the constraint-force component
        let am = constraint_matrix(xs.theta, &p);
        let mut g = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = (0..8).map(|k| am[i][k] * am[j][k]).sum();
            }
            b[i] = (0..8).map(|k| am[i][k] * e[k]).sum();
        }
        let lam = solve3(g, b);
        let scale = e.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
        for k in 0..8 {
            let r = e[k] - (0..3).map(|i| am[i][k] * lam[i]).sum::<f64>();
            assert!(r.abs() < 1e-6 * scale.max(1.0), "seed {seed} row {k}: {r} (scale {scale})");
        }
    }
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    std::array::from_fn(|c| {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = b[r];
        }
        det(mc) / d
    })
}

#[test]
fn multiplier_reconstruction_is_consistent() {
    let p = ParamSet::default();
    for seed in 0..10 {
        let xs = sample_state(300 + seed);
        let (_, resid) = constraint_multipliers(&xs, &ControlInput::new(0.5, 2.0), &p).unwrap();
        assert!(resid < 1e-10, "{resid}");
    }
}

#[test]
fn conservative_energy_is_preserved_by_fine_rk4() {
    let mut p = ParamSet::default();
    p.visc_damping = 0.0;
    p.coulomb_damping = 0.0;
    p.resistance = 0.0;
    p.emf_const = 0.0;
    let mut x = ReducedState {
        alpha: 0.1,
        v_alpha: 0.5,
        v_d: 0.2,
        v_theta: 1.0,
        ..Default::default()
    };
    let e0 = total_energy(&x, &p);
    let u = ControlInput::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        x = rk_step(&x, &u, 1e-5, RkOrder::Four, &p).unwrap();
        worst = worst.max((total_energy(&x, &p) - e0).abs());
    }
    assert!(worst < 1e-6, "energy drift {worst}");
}

fn integrate(x0: ReducedState, h: f64, t_end: f64, order: RkOrder, p: &ParamSet) -> ReducedState {
    let n = (t_end / h).round() as usize;
    let mut x = x0;
    for _ in 0..n {
        x = rk_step(&x, &ControlInput::new(0.4, 0.1), h, order, p).unwrap();
    }
    x
}

fn max_err(a: &ReducedState, b: &ReducedState) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    (0..9).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

#[test]
fn rk_orders_observed() {
    let p = ParamSet::default();
    let x0 = ReducedState {
        alpha: 0.05,
        ..Default::default()
    };
    let t_end = 0.1;
    let reference = integrate(x0, 1e-5, t_end, RkOrder::Four, &p);
    let e1a = max_err(&integrate(x0, 2e-4, t_end, RkOrder::One, &p), &reference);
    let e1b = max_err(&integrate(x0, 1e-4, t_end, RkOrder::One, &p), &reference);
    let e4a = max_err(&integrate(x0, 4e-4, t_end, RkOrder::Four, &p), &reference);
    let e4b = max_err(&integrate(x0, 2e-4, t_end, RkOrder::Four, &p), &reference);
    let o1 = (e1a / e1b).log2();
    let o4 = (e4a / e4b).log2();
    assert!((0.8..1.3).contains(&o1), "rk1 order {o1}");
    assert!(o4 > 3.5, "rk4 order {o4}");
    let e2a = max_err(&integrate(x0, 2e-4, t_end, RkOrder::Two, &p), &reference);
    let e2b = max_err(&integrate(x0, 1e-4, t_end, RkOrder::Two, &p), &reference);
    let o2 = (e2a / e2b).log2();
    assert!((1.7..2.5).contains(&o2), "rk2 order {o2}");
}

#[test]
fn rk_keeps_equilibrium() {
    let p = ParamSet::default();
    for order in [RkOrder::One, RkOrder::Two, RkOrder::Four] {
        let x = rk_step(&ReducedState::default(), &ControlInput::default(), 0.3, order, &p).unwrap();
        assert_eq!(x, ReducedState::default());
    }
}

#[test]
fn singular_inertia_reported() {
    let mut p = ParamSet::default();
    p.inductance = 0.0;
    let r = reduced_dynamics(&ReducedState::default(), &ControlInput::default(), &p);
    assert_eq!(r, Err(ModelError::SingularMassMatrix));
}

fn state_strategy() -> impl Strategy<Value = ReducedState> {
    (
        prop::array::uniform9(-1.0f64..1.0),
        -3.0f64..3.0,
    )
        .prop_map(|(a, th)| ReducedState {
            x: a[0],
            y: a[1],
            theta: th,
            alpha: a[2],
            v_alpha: 2.0 * a[3],
            v_d: a[4],
            v_theta: 2.0 * a[5],
            v_qr: a[6],
            v_ql: a[7],
        })
}

proptest! {
    #[test]
    fn kinetic_energy_is_quadratic(xs in state_strategy(), scale in -3.0f64..3.0) {
        let p = ParamSet::default();
        let q = config(&xs);
        let v = full_velocity(&xs, &p);
        let vs = FullVelocity::from_array(v.to_array().map(|c| c * scale));
        let t1 = kinetic_energy(&q, &v, &p);
        prop_assert!(t1 >= 0.0);
        prop_assert!((kinetic_energy(&q, &vs, &p) - scale * scale * t1).abs() < 1e-12 * (1.0 + t1 * scale * scale));
    }

    #[test]
    fn velocity_stays_in_constraint_kernel(xs in state_strategy(), u in prop::array::uniform2(-5.0f64..5.0)) {
        let p = ParamSet::default();
        let v = full_velocity(&xs, &p).to_array();
        let a = constraint_matrix(xs.theta, &p);
        for row in a {
            let r: f64 = (0..8).map(|k| row[k] * v[k]).sum();
            prop_assert!(r.abs() < 1e-13);
        }
        let d = reduced_dynamics(&xs, &ControlInput::new(u[0], u[1]), &p).unwrap();
        prop_assert!((-d.x * xs.theta.sin() + d.y * xs.theta.cos()).abs() < 1e-13);
    }

    #[test]
    fn reduced_dynamics_equivariant(xs in state_strategy(), g in prop::array::uniform3(-2.0f64..2.0)) {
        let p = ParamSet::default();
        let u = ControlInput::new(0.7, -1.2);
        let d0 = reduced_dynamics(&xs, &u, &p).unwrap();
        let (s, c) = g[2].sin_cos();
        let moved = ReducedState {
            x: g[0] + c * xs.x - s * xs.y,
            y: g[1] + s * xs.x + c * xs.y,
            theta: xs.theta + g[2],
            ..xs
        };
        let d1 = reduced_dynamics(&moved, &u, &p).unwrap();
        prop_assert!((d1.x - (c * d0.x - s * d0.y)).abs() < 1e-12);
        prop_assert!((d1.y - (s * d0.x + c * d0.y)).abs() < 1e-12);
        let (a, b) = (d0.to_array(), d1.to_array());
        for i in 2..9 {
            prop_assert!((a[i] - b[i]).abs() < 1e-9 * (1.0 + a[i].abs()), "component {}: {} vs {}", i, a[i], b[i]);
        }
    }
}
