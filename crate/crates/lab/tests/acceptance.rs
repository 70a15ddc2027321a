//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Criteria that exercise the command line run
//! the real binary in a scratch directory.

use frge_core::convex::{biconjugate_check, conjugate, conjugate_at, Axis, GridFunction};
use frge_core::flow::{initial_grid, initial_vertex, integrate, Controller, GridAction, InitMode};
use frge_core::functionals::{Budget, FunctionalContext};
use frge_core::measure::{DualVector, Field};
use frge_core::model::{Interaction, Model, ModelSpec};
use frge_core::regulator::Regulator;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn single(r: f64, c4: f64) -> FunctionalContext {
    let model = Model::new(ModelSpec::single_mode(1.0, r, Interaction::quartic(c4))).unwrap();
    FunctionalContext::new(model, Regulator::litim()).unwrap()
}

fn v(x: f64) -> Field {
    DVector::from_element(1, x)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lab(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_frge-lab"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn frge-lab");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

/// Tool output appended to a detail line when the run failed.
fn tail(code: i32, text: &str) -> String {
    if code == 0 {
        String::new()
    } else {
        format!(": {}", text.trim())
    }
}

fn summary(dir: &Path, sub: &str) -> serde_json::Map<String, Value> {
    let text = std::fs::read_to_string(dir.join(format!("{sub}.manifest.json"))).unwrap();
    let m: Value = serde_json::from_str(&text).unwrap();
    m["summary"].as_object().unwrap().clone()
}

fn grid_flow(ctx: &FunctionalContext, k_uv: f64, checkpoints: &[f64]) -> Vec<GridAction> {
    let init = initial_grid(ctx, InitMode::Exact, k_uv).unwrap().action;
    let traj = integrate(&init, 0.0, checkpoints, ctx.regulator(), &Controller::default()).unwrap();
    checkpoints.iter().map(|&k| traj.at(k).unwrap().clone()).collect()
}

fn regulator_admissibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let (code, text) = lab(dir.path(), &["validate-regulator", "--regulator", "litim", "--regulator", "exponential", "--samples", "10000"]);
    let secs = t.elapsed().as_secs_f64();
    let s = summary(dir.path(), "validate-regulator");
    let passed = ["litim", "exponential"].iter().all(|r| s[&format!("{r}.all_passed")] == Value::Bool(true));
    check(code == 0 && passed && secs < 5.0, format!("exit {code}, both regulators pass 5 checks on 1e4 samples, {secs:.2} s{}", tail(code, &text)))
}

fn free_stationarity() -> Outcome {
    let ctx = single(0.7, 0.0);
    let half_precision = 0.5 * ctx.model().precision()[(0, 0)];
    let t = Instant::now();
    let states = grid_flow(&ctx, 10.0, &[10.0, 5.0, 1.0, 0.5, 0.0]);
    let secs = t.elapsed().as_secs_f64();
    let worst = states
        .iter()
        .flat_map(|s| s.phi.iter().zip(&s.values).map(|(p, g)| (g - half_precision * p * p).abs()))
        .fold(0.0, f64::max);
    check(worst <= 1e-8 && secs < 1.0, format!("max |Γ̄ − ½C⁻¹φ²| = {worst:.2e} over all nodes and checkpoints, {secs:.2} s"))
}

fn exact_flow_agreement() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"model":{"dimension":0,"modes":1,"mass":1.0,"window":{"r":1.0},"interaction":{"c4":0.1}}}"#).unwrap();
    let cfg = config.to_str().unwrap();
    let t = Instant::now();
    let (c1, e1) = lab(dir.path(), &["--config", cfg, "flow", "--init", "exact", "--kuv", "100", "--checkpoints", "10,1,0"]);
    let secs = t.elapsed().as_secs_f64();
    let (c2, e2) = lab(dir.path(), &["--config", cfg, "exact", "--k", "10,1,0"]);
    let (c3, e3) = lab(dir.path(), &["report"]);
    if c1 != 0 || c2 != 0 || c3 != 0 {
        return Err(format!("exit codes {c1} {c2} {c3}: {e1}{e2}{e3}"));
    }
    let flow = summary(dir.path(), "flow")["max_deviation"].as_f64().unwrap();
    let merged = summary(dir.path(), "report")["flow_vs_exact_max_deviation"].as_f64().unwrap();
    check(
        flow <= 1e-4 && merged <= 1e-4 && secs < 60.0,
        format!("max_{{|φ|≤2}} |flow − exact| = {flow:.2e} (report merge {merged:.2e}), flow {secs:.2} s"),
    )
}

fn zero_scale_boundary() -> Outcome {
    let ctx = single(1.0, 0.1);
    let state = grid_flow(&ctx, 100.0, &[0.0]).remove(0);
    let source = Axis::symmetric(6.0, 201);
    let w = GridFunction::new(vec![source], source.points().iter().map(|&t| ctx.w(0.0, &DualVector::scalar(t)).unwrap()).collect()).unwrap();
    let at_zero = conjugate_at(&w, &[0.0]);
    let worst = state
        .phi
        .iter()
        .zip(&state.values)
        .filter(|(p, _)| p.abs() <= 2.0)
        .map(|(&p, g)| (g - (conjugate_at(&w, &[p]) - at_zero)).abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-3, format!("max_{{|φ|≤2}} |Γ̄₀ − (W₀* − W₀*(0))| = {worst:.2e} with 201 source nodes"))
}

fn classical_limit() -> Outcome {
    let ctx = single(0.5, 0.1);
    let disc = |k: f64| {
        (-20..=20)
            .map(|i| {
                let phi = 0.1 * i as f64;
                (ctx.gamma_bar(k, &v(phi)).unwrap() - ctx.model().classical_asymptote_scalar(phi)).abs()
            })
            .fold(0.0, f64::max)
    };
    let d = [disc(10.0), disc(30.0), disc(100.0)];
    // the quadratic part of the asymptote, with the interaction removed
    let quadratic = ctx.model().classical_asymptote_scalar(1.0) - ctx.model().interaction_value(&v(1.0));
    check(
        d[0] > d[1] && d[1] > d[2] && (quadratic - 2.0).abs() < 1e-12,
        format!("discrepancy {:.2e} > {:.2e} > {:.2e}, quadratic coefficient {quadratic}", d[0], d[1], d[2]),
    )
}

fn dirac_approximation() -> Outcome {
    let ctx = single(1.0, 0.1);
    let gap: Vec<f64> = [5.0, 10.0, 50.0].iter().map(|&k| (ctx.dirac_ratio(|p| p[0].cos(), k).unwrap() - 1.0).abs()).collect();
    check(
        gap[0] > gap[1] && gap[1] > gap[2] && gap[2] <= 1e-2,
        format!("|ratio − 1| = {:.2e}, {:.2e}, {:.2e} at k = 5, 10, 50", gap[0], gap[1], gap[2]),
    )
}

fn hessian_inverse() -> Outcome {
    let ctx = single(1.0, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let k = rng.random_range(0.0..5.0);
        let phi = v(rng.random_range(-2.0..2.0));
        let hess = ctx.gamma_hessian_fd(k, &phi).unwrap();
        let f = DMatrix::from_diagonal(&ctx.regulator_matrix(k).f);
        let sol = ctx.invert_mean_field(k, &phi, None).unwrap();
        let cov = ctx.connected_cov(k, &sol.source).unwrap();
        let prod = (hess + f) * cov;
        worst = worst.max((prod - DMatrix::identity(1, 1)).abs().max());
    }
    check(worst <= 1e-6, format!("max |(D²Γ + F)·D²W − I| = {worst:.2e} over 10 probes"))
}

fn first_form() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = lab(dir.path(), &["frge-check"]);
    let s = summary(dir.path(), "frge-check");
    let diff = s["max_difference"].as_f64().unwrap_or(f64::NAN);
    let probes = s["probes"].as_u64().unwrap_or(0);
    check(code == 0 && probes == 5 && diff <= 1e-6, format!("exit {code}, {probes} probes, max difference {diff:.2e}{}", tail(code, &text)))
}

fn vertex_vs_grid() -> Outcome {
    let curvatures = |c4: f64| {
        let ctx = single(1.0, c4);
        let grid = grid_flow(&ctx, 100.0, &[0.0]).remove(0);
        let grid_curv = grid.second_derivative()[grid.centre()];
        let init = initial_vertex(&ctx, InitMode::Exact, 100.0).unwrap().action;
        let traj = integrate(&init, 0.0, &[0.0], ctx.regulator(), &Controller::default()).unwrap();
        (traj.final_action().gamma2[(0, 0)], grid_curv)
    };
    let (v1, g1) = curvatures(0.01);
    let rel = ((v1 - g1) / g1).abs();
    let (v2, g2) = curvatures(0.1);
    check(
        rel <= 1e-2,
        format!(
            "c4=0.01: γ²={v1:.6} vs Γ̄₀''={g1:.6}, rel {rel:.2e}; c4=0.1 (truncation, no bound): {v2:.4} vs {g2:.4}, rel {:.2e}",
            ((v2 - g2) / g2).abs()
        ),
    )
}

fn normalization() -> Outcome {
    let ctx = single(1.0, 0.1);
    let tolerance = Budget::default().tolerance;
    let states = grid_flow(&ctx, 100.0, &[1.0, 0.0]);
    let mut worst: f64 = 0.0;
    for s in &states {
        let zero = ctx.gamma(s.k, &v(0.0)).unwrap();
        worst = worst.max((zero + s.min_value()).abs());
    }
    check(worst <= tolerance, format!("max |Γ_k(0) + min Γ̄_k| = {worst:.2e} at k = 1, 0 (tolerance {tolerance:.0e})"))
}

fn convergence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let (code, text) = lab(dir.path(), &["converge"]);
    let secs = t.elapsed().as_secs_f64();
    if code != 0 {
        return Err(format!("exit {code}: {text}"));
    }
    let s = summary(dir.path(), "converge");
    let flag = |k: &str| s.get(k) == Some(&Value::Bool(true));
    let ok = flag("uniform_decreasing") && flag("aw_decreasing.rho=6") && flag("probe_decreasing");
    check(
        ok && secs < 300.0,
        format!(
            "uniform {}, AW(ρ=6) {}, probe {} decreasing over n=1..6, {secs:.2} s",
            flag("uniform_decreasing"),
            flag("aw_decreasing.rho=6"),
            flag("probe_decreasing")
        ),
    )
}

fn convex_toolkit() -> Outcome {
    let axis = Axis::symmetric(10.0, 2001);
    let half = GridFunction::one_d(axis, |x| 0.5 * x * x).unwrap();
    let dual = Axis::symmetric(5.0, 501);
    let star = conjugate(&half, &[dual]).unwrap();
    let self_err = star.values().iter().zip(dual.points()).map(|(s, p)| (s - 0.5 * p * p).abs()).fold(0.0, f64::max);
    let self_bound = axis.spacing().powi(2) / 8.0;

    let grid = Axis::symmetric(4.0, 512);
    let convex: [fn(f64) -> f64; 4] = [|x| 0.5 * x * x, |x| x.abs(), |x| (1.0 + x * x).sqrt() + 0.3 * x, |x| x.exp() + 0.1 * x.powi(4)];
    let defect = convex
        .iter()
        .map(|f| biconjugate_check(&GridFunction::one_d(grid, f).unwrap()).unwrap())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = Axis::symmetric(3.0, 121);
    let dual = [Axis::symmetric(4.0, 81)];
    let mut violations = 0;
    for _ in 0..100 {
        let (a, b, c) = (rng.random_range(0.1..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (d, e, s) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let f = GridFunction::one_d(base, |x| a * x * x + b * x + c).unwrap();
        let g = GridFunction::one_d(base, |x| a * x * x + b * x + c + d * x * x + e * x.abs() + s).unwrap();
        let (fs, gs) = (conjugate(&f, &dual).unwrap(), conjugate(&g, &dual).unwrap());
        if fs.values().iter().zip(gs.values()).any(|(x, y)| x + 1e-12 < *y) {
            violations += 1;
        }
    }
    check(
        self_err <= self_bound && defect <= 1e-6 && violations == 0,
        format!("self-conjugacy {self_err:.2e} (bound {self_bound:.1e}), biconjugate defect {defect:.2e} at 512 nodes, {violations}/100 order violations"),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("regulator admissibility", regulator_admissibility),
        ("free-theory stationarity", free_stationarity),
        ("exact-flow agreement", exact_flow_agreement),
        ("boundary k -> 0", zero_scale_boundary),
        ("boundary k -> infinity", classical_limit),
        ("dirac approximation", dirac_approximation),
        ("hessian-inverse identity", hessian_inverse),
        ("first-form consistency", first_form),
        ("vertex/grid cross-validation", vertex_vs_grid),
        ("normalization identity", normalization),
        ("convergence suite", convergence),
        ("convex toolkit", convex_toolkit),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
