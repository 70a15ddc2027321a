use frge_core::flow::{
    frge_first_form_check, initial_grid, initial_vertex, integrate, rhs_grid, rhs_vertex, second_derivative, Controller,
    GridAction, InitMode, SymmetricTensor4, VertexAction,
};
use frge_core::functionals::FunctionalContext;
use frge_core::model::{Interaction, Model, ModelSpec, Window};
use frge_core::regulator::Regulator;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single(r: f64, c4: f64) -> FunctionalContext {
    let model = Model::new(ModelSpec::single_mode(1.0, r, Interaction::quartic(c4))).unwrap();
    FunctionalContext::new(model, Regulator::litim()).unwrap()
}

fn v(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[test]
fn grid_rhs_matches_k_derivative_of_exact_action() {
    let ctx = single(1.0, 0.1);
    let k = 1.0;
    let init = initial_grid(&ctx, InitMode::Exact, k).unwrap().action;
    let rhs = rhs_grid(&init, &Regulator::litim()).unwrap();
    let h = 1e-3;
    for (i, &phi) in init.phi.iter().enumerate().filter(|(_, p)| p.abs() <= 2.0).step_by(20) {
        let fd = (ctx.gamma_bar(k + h, &v(phi)).unwrap() - ctx.gamma_bar(k - h, &v(phi)).unwrap()) / (2.0 * h);
        assert!((rhs[i] - fd).abs() < 1e-4, "φ={phi}: {} vs {fd}", rhs[i]);
    }
}

/// `∂_kγ²` and `∂_kγ⁴` are the Taylor coefficients of the grid right-hand
/// side of the quartic polynomial action.
#[test]
fn vertex_rhs_is_taylor_expansion_of_grid_rhs() {
    let (g2, g4, k) = (1.3, 0.6, 0.8);
    let phi: Vec<f64> = (-100..=100).map(|i| 0.01 * i as f64).collect();
    let values = phi.iter().map(|p| 0.5 * g2 * p * p + g4 * p.powi(4) / 24.0).collect();
    let grid = GridAction::new(k, phi, values, 0.0).unwrap();
    let rhs = rhs_grid(&grid, &Regulator::litim()).unwrap();
    let d2 = second_derivative(&rhs, 0.01);
    let d4 = second_derivative(&d2, 0.01);

    let vertex = VertexAction {
        k,
        gamma2: DMatrix::from_element(1, 1, g2),
        gamma4: SymmetricTensor4::from_dense(1, &[g4]),
        even: true,
        momenta: vec![0.0],
        momentum_weights: vec![1.0],
    };
    let (dg2, dg4) = rhs_vertex(&vertex, &Regulator::litim()).unwrap();
    let dg4 = dg4.get(0, 0, 0, 0);
    assert!((d2[100] - dg2[(0, 0)]).abs() < 1e-6 * dg2[(0, 0)].abs(), "{} vs {}", d2[100], dg2[(0, 0)]);
    assert!((d4[100] - dg4).abs() < 1e-4 * dg4.abs(), "{} vs {dg4}", d4[100]);
}

/// Brute force: `g(φ) = ½Tr[Ḟ(Γ''(φ) + F)⁻¹]` for the quartic action,
/// expanded along a direction by fitting its even Taylor coefficients.
fn directional_coefficients(state: &VertexAction, regulator: &Regulator, u: &DVector<f64>) -> (f64, f64) {
    let m = state.modes();
    let f = DVector::from_fn(m, |j, _| regulator.value(state.k, state.momenta[j]) * state.momentum_weights[j]);
    let fdot = DVector::from_fn(m, |j, _| regulator.dk(state.k, state.momenta[j]) * state.momentum_weights[j]);
    let g = |t: f64| {
        let phi = t * u;
        let mut hess = &state.gamma2 + DMatrix::from_diagonal(&f);
        for x in 0..m {
            for y in 0..m {
                let mut s = 0.0;
                for c in 0..m {
                    for d in 0..m {
                        s += state.gamma4.get(x, y, c, d) * phi[c] * phi[d];
                    }
                }
                hess[(x, y)] += 0.5 * s;
            }
        }
        let inv = hess.try_inverse().unwrap();
        0.5 * (0..m).map(|j| fdot[j] * inv[(j, j)]).sum::<f64>()
    };
    let h = 0.05;
    let g0 = g(0.0);
    // g(t) − g(0) = a t² + b t⁴ + c t⁶ + d t⁸ + O(t¹⁰)
    let mut sys = DMatrix::zeros(4, 4);
    let mut rhs = DVector::zeros(4);
    for i in 0..4 {
        let t = h * (i + 1) as f64;
        for j in 0..4 {
            sys[(i, j)] = t.powi(2 * (j as i32 + 1));
        }
        rhs[i] = g(t) - g0;
    }
    let c = sys.lu().solve(&rhs).unwrap();
    // second directional derivative is 2a, fourth is 24b
    (2.0 * c[0], 24.0 * c[1])
}

#[test]
fn three_mode_vertex_rhs_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = 3;
    let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.3..0.3));
    let gamma2 = DMatrix::identity(m, m) * 1.5 + &b * b.transpose();
    let mut dense = vec![0.0; m.pow(4)];
    for _ in 0..4 {
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let s = rng.random_range(0.1..0.4);
        for (idx, d) in dense.iter_mut().enumerate() {
            let (a, bb, c, e) = (idx / 27, (idx / 9) % 3, (idx / 3) % 3, idx % 3);
            *d += s * w[a] * w[bb] * w[c] * w[e];
        }
    }
    let state = VertexAction {
        k: 1.5,
        gamma2,
        gamma4: SymmetricTensor4::from_dense(m, &dense),
        even: true,
        momenta: vec![-1.0, 0.0, 1.0],
        momentum_weights: vec![1.0; 3],
    };
    let reg = Regulator::litim();
    let (dg2, dg4) = rhs_vertex(&state, &reg).unwrap();
    assert_eq!((&dg2 - dg2.transpose()).amax(), 0.0);
    for _ in 0..8 {
        let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let (second, fourth) = directional_coefficients(&state, &reg, &u);
        let quad = u.dot(&(&dg2 * &u));
        let mut quart = 0.0;
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        quart += dg4.get(a, b, c, d) * u[a] * u[b] * u[c] * u[d];
                    }
                }
            }
        }
        assert!((quad - second).abs() < 1e-7 * (1.0 + second.abs()), "{quad} vs {second}");
        assert!((quart - fourth).abs() < 1e-5 * (1.0 + fourth.abs()), "{quart} vs {fourth}");
    }
}

#[test]
fn exact_vertex_initial_matches_gamma_derivatives() {
    let ctx = single(1.0, 0.1);
    let k = 5.0;
    let init = initial_vertex(&ctx, InitMode::Exact, k).unwrap().action;
    let g = |p: f64| ctx.gamma(k, &v(p)).unwrap();
    let d2 = |h: f64| (g(h) - 2.0 * g(0.0) + g(-h)) / (h * h);
    let d4 = |h: f64| (g(2.0 * h) - 4.0 * g(h) + 6.0 * g(0.0) - 4.0 * g(-h) + g(-2.0 * h)) / h.powi(4);
    let second = (4.0 * d2(0.025) - d2(0.05)) / 3.0;
    let fourth = (4.0 * d4(0.05) - d4(0.1)) / 3.0;
    assert!((init.gamma2[(0, 0)] - second).abs() < 1e-6, "{} vs {second}", init.gamma2[(0, 0)]);
    assert!((init.gamma4.get(0, 0, 0, 0) - fourth).abs() < 1e-3, "{} vs {fourth}", init.gamma4.get(0, 0, 0, 0));
}

#[test]
fn initial_discrepancy_shrinks_with_scale() {
    let ctx = single(1.0, 0.1);
    let g10 = initial_grid(&ctx, InitMode::Classical, 10.0).unwrap().discrepancy;
    let g100 = initial_grid(&ctx, InitMode::Classical, 100.0).unwrap().discrepancy;
    assert!(g100 < g10 && g100 < 1e-3, "{g10} {g100}");
    let v10 = initial_vertex(&ctx, InitMode::Classical, 10.0).unwrap().discrepancy;
    let v100 = initial_vertex(&ctx, InitMode::Classical, 100.0).unwrap().discrepancy;
    assert!(v100 < v10, "{v10} {v100}");
}

#[test]
fn even_theory_flows_symmetrically() {
    let ctx = single(1.0, 0.1);
    let init = initial_grid(&ctx, InitMode::Exact, 10.0).unwrap().action;
    let traj = integrate(&init, 1.0, &[5.0], &Regulator::litim(), &Controller::default()).unwrap();
    // mirrored stencils agree up to summation order
    for cp in &traj.checkpoints {
        assert!(cp.action.asymmetry() < 1e-9, "{} vs {}", cp.action.asymmetry(), init.asymmetry());
    }
    assert_eq!(traj.final_action().k, 1.0);
}

#[test]
fn flow_tracks_exact_action() {
    let ctx = single(1.0, 0.1);
    let init = initial_grid(&ctx, InitMode::Exact, 10.0).unwrap().action;
    let traj = integrate(&init, 0.0, &[1.0], &Regulator::litim(), &Controller::default()).unwrap();
    for &k in &[1.0, 0.0] {
        let state = traj.at(k).unwrap();
        let dev = state.max_deviation(|p| ctx.gamma_bar(k, &v(p)).unwrap(), 2.0);
        assert!(dev < 1e-6, "k={k}: {dev}");
    }
}

#[test]
fn first_form_check_examples() {
    let free = single(0.7, 0.0);
    let probes = vec![(0.5, v(0.0)), (1.0, v(1.0)), (2.0, v(-0.5))];
    assert!(frge_first_form_check(&free, &probes).unwrap().max_difference < 1e-8);

    let ctx = single(1.0, 0.1);
    let report = frge_first_form_check(&ctx, &[(-1.0, v(0.3)), (1.0, v(1.0))]).unwrap();
    assert_eq!(report.rows[0].lhs, 0.0);
    assert_eq!(report.rows[0].rhs, 0.0);
    assert!(report.max_difference < 1e-6);
}

#[test]
fn lattice_first_form_check() {
    let spec = ModelSpec::lattice_1d(3, 1.0, 1.0, Window::Gaussian { k: 4.0, lambda: 2.0, n: 1.0 }, Interaction::quartic(0.1));
    let ctx = FunctionalContext::new(Model::new(spec).unwrap(), Regulator::exponential()).unwrap();
    let phi = DVector::from_vec(vec![0.3, 0.0, -0.2]);
    let report = frge_first_form_check(&ctx, &[(0.7, phi)]).unwrap();
    assert!(report.max_difference < 1e-6, "{}", report.max_difference);
}
