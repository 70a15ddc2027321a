use frge_core::convex::convergence_suite;
use frge_core::flow::{
    frge_first_form_check, initial_grid, initial_vertex, integrate, Action, FlowError, FlowTrajectory, GridAction,
    Interrupted, VertexAction,
};
use frge_core::functionals::FunctionalContext;
use frge_core::measure::Field;
use frge_core::model::{BuildOptions, Model};
use frge_core::regulator::Regulator;
use nalgebra::DVector;
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::config::{LabConfig, Representation};
use crate::output::{num, RunManifest, Table};
use crate::LabError;

/// What a subcommand leaves behind for its manifest.
struct Run<'a> {
    config: &'a LabConfig,
    hash: String,
    out: &'a Path,
    outputs: Vec<String>,
    seeds: BTreeMap<String, u64>,
    tolerances: BTreeMap<String, f64>,
    statistics: Value,
    summary: BTreeMap<String, Value>,
}

impl Run<'_> {
    fn write_table(&mut self, name: &str, table: &Table) -> Result<(), LabError> {
        table.write(&self.out.join(name))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn note(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.summary.insert(key.into(), value.into());
    }
}

pub fn execute(name: &str, config: &LabConfig, out: &Path, threads: usize) -> Result<(), LabError> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let mut run = Run {
        config,
        hash: config.hash(),
        out,
        outputs: Vec::new(),
        seeds: BTreeMap::new(),
        tolerances: BTreeMap::new(),
        statistics: Value::Null,
        summary: BTreeMap::new(),
    };
    let result = match name {
        "validate-regulator" => validate_regulator(&mut run),
        "exact" => exact(&mut run),
        "flow" => flow(&mut run),
        "frge-check" => frge_check(&mut run),
        "converge" => converge(&mut run),
        other => Err(LabError::Validation(format!("unknown subcommand {other}"))),
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        config_hash: run.hash.clone(),
        config: serde_json::to_value(config).map_err(|e| LabError::Io(e.to_string()))?,
        status: if result.is_ok() { "ok" } else { "failed" }.into(),
        exit_code: result.as_ref().map(|_| 0).unwrap_or_else(|e| e.code() as i32),
        error: result.as_ref().err().map(|e| e.to_string()),
        seeds: run.seeds,
        tolerances: run.tolerances,
        threads,
        outputs: run.outputs,
        statistics: run.statistics,
        summary: run.summary,
        started_unix: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    for (k, v) in &manifest.summary {
        println!("{k} = {v}");
    }
    result
}

fn context(config: &LabConfig) -> Result<FunctionalContext, LabError> {
    let options = BuildOptions { allow_unbounded: config.allow_unbounded, ..BuildOptions::default() };
    let model = Model::with_options(config.model.clone(), &options)?;
    let regulator = Regulator::from_str(&config.regulator)?;
    Ok(FunctionalContext::with_budget(model, regulator, config.budget.budget())?)
}

/// Unit vector on the zero-momentum mode: a constant field in position space.
fn sweep_direction(model: &Model) -> Field {
    let m = model.modes();
    let zero = model.momenta().iter().position(|p| *p == 0.0).unwrap_or(m / 2);
    let mut d = DVector::zeros(m);
    d[zero] = 1.0;
    d
}

fn budget_tolerances(run: &mut Run) {
    let b = run.config.budget;
    run.tolerances.insert("quadrature".into(), b.tolerance);
    run.tolerances.insert("newton".into(), b.newton_tolerance);
}

fn validate_regulator(run: &mut Run) -> Result<(), LabError> {
    let check = &run.config.regulator_check;
    let names = if check.regulators.is_empty() { vec![run.config.regulator.clone()] } else { check.regulators.clone() };
    let plan = check.plan();
    run.seeds.insert("sample_plan".into(), plan.seed);
    run.tolerances.insert("fd_rel_tol".into(), plan.fd_rel_tol);
    let mut table = Table::new(&run.hash, &["regulator", "condition", "passed", "evaluated", "worst", "witness_k", "witness_p"]);
    let mut failure = None;
    for name in &names {
        let regulator = Regulator::from_str(name)?;
        let report = regulator.check_conditions(&plan);
        for c in &report.checks {
            let (wk, wp) = c.witness.map(|(k, p)| (num(k), num(p))).unwrap_or_default();
            table.push(vec![
                name.clone(),
                c.condition.to_string(),
                c.passed.to_string(),
                c.evaluated.to_string(),
                num(c.worst),
                wk,
                wp,
            ]);
        }
        run.note(format!("{name}.all_passed"), report.all_passed());
        run.note(format!("{name}.min_asymptotic_ratio"), report.min_asymptotic_ratio);
        if failure.is_none() {
            failure = report.ensure_all_passed().err().map(|e| format!("{name}: {e}"));
        }
    }
    run.write_table("regulator.csv", &table)?;
    match failure {
        Some(msg) => Err(LabError::Validation(msg)),
        None => Ok(()),
    }
}

fn exact(run: &mut Run) -> Result<(), LabError> {
    let ctx = context(run.config)?;
    budget_tolerances(run);
    let dir = sweep_direction(ctx.model());
    let amplitudes = ctx.model().field_grid().points();
    let fields: Vec<Field> = amplitudes.iter().map(|a| *a * &dir).collect();
    // φ = phi·dir; the source is written per mode
    let modes = ctx.modes();
    let mut columns: Vec<String> = ["k", "phi", "Gamma", "GammaBar"].iter().map(|c| c.to_string()).collect();
    if modes == 1 {
        columns.push("J".into());
    } else {
        columns.extend((0..modes).map(|i| format!("J_{i}")));
    }
    columns.extend(["W", "residual", "budget"].iter().map(|c| c.to_string()));
    let mut table = Table::with_columns(&run.hash, columns);
    let tolerance = run.config.budget.tolerance;
    let mut worst_residual: f64 = 0.0;
    let mut result = Ok(());
    for &k in &run.config.exact.ks {
        let step = (|| -> Result<(), LabError> {
            let zero = ctx.gamma(k, &DVector::zeros(ctx.modes()))?;
            let points = ctx.gamma_batch(k, &fields)?;
            for (a, p) in amplitudes.iter().zip(&points) {
                worst_residual = worst_residual.max(p.residual);
                let mut row = vec![num(k), num(*a), num(p.gamma), num(p.gamma - zero)];
                row.extend(p.source.as_vector().iter().map(|j| num(*j)));
                row.extend([num(p.w), num(p.residual), num(tolerance)]);
                table.push(row);
            }
            let min = points.iter().map(|p| p.gamma - zero).fold(f64::INFINITY, f64::min);
            run.note(format!("gamma_at_zero.k={k}"), zero);
            run.note(format!("min_gamma_bar.k={k}"), min);
            Ok(())
        })();
        if let Err(e) = step {
            result = Err(e);
            break;
        }
    }
    run.note("max_residual", worst_residual);
    run.write_table("exact.csv", &table)?;
    result
}

fn flow(run: &mut Run) -> Result<(), LabError> {
    let ctx = context(run.config)?;
    budget_tolerances(run);
    let fc = run.config.flow.clone();
    run.tolerances.insert("rtol".into(), fc.rtol);
    run.tolerances.insert("atol".into(), fc.atol);
    let regulator = ctx.regulator().clone();
    let controller = fc.controller();
    match fc.representation {
        Representation::Grid => {
            let init = initial_grid(&ctx, fc.init, fc.k_uv)?;
            run.note("initial_discrepancy", init.discrepancy);
            let action = init.action.with_frozen_boundary(fc.freeze_boundary);
            let outcome = integrate(&action, fc.k_to, &fc.checkpoints, &regulator, &controller);
            let (trajectory, error) = split(outcome);
            let mut table = Table::new(&run.hash, &["k", "phi", "GammaBar", "exact_GammaBar", "deviation"]);
            let mut overall: f64 = 0.0;
            let mut compare_error = None;
            for cp in &trajectory.checkpoints {
                let exact = if fc.compare && compare_error.is_none() {
                    match exact_on_grid(&ctx, &cp.action, fc.compare_radius) {
                        Ok(e) => Some(e),
                        Err(e) => {
                            compare_error = Some(e);
                            None
                        }
                    }
                } else {
                    None
                };
                let mut worst: f64 = 0.0;
                for (i, (p, v)) in cp.action.phi.iter().zip(&cp.action.values).enumerate() {
                    let (e, d) = match exact.as_ref().and_then(|e| e[i]) {
                        Some(e) => {
                            worst = worst.max((v - e).abs());
                            (num(e), num((v - e).abs()))
                        }
                        None => (String::new(), String::new()),
                    };
                    table.push(vec![num(cp.k), num(*p), num(*v), e, d]);
                }
                let c = cp.action.centre();
                let curvature = cp.action.second_derivative()[c];
                run.note(format!("curvature_at_zero.k={}", cp.k), curvature);
                run.note(format!("min_gamma_bar.k={}", cp.k), cp.action.min_value());
                if exact.is_some() {
                    run.note(format!("max_deviation.k={}", cp.k), worst);
                    overall = overall.max(worst);
                }
            }
            if fc.compare && compare_error.is_none() {
                run.note("max_deviation", overall);
            }
            run.statistics = json!({ "steps": trajectory.stats, "checkpoints": trajectory.checkpoints.iter().map(|c| json!({"k": c.k, "steps": c.stats})).collect::<Vec<_>>() });
            run.write_table("flow.csv", &table)?;
            if let Some(e) = error {
                return Err(e.into());
            }
            if let Some(e) = compare_error {
                return Err(e);
            }
        }
        Representation::Vertex => {
            let init = initial_vertex(&ctx, fc.init, fc.k_uv)?;
            run.note("initial_discrepancy", init.discrepancy);
            let outcome = integrate(&init.action, fc.k_to, &fc.checkpoints, &regulator, &controller);
            let (trajectory, error) = split(outcome);
            let mut table = Table::new(&run.hash, &["k", "tensor", "indices", "value"]);
            for cp in &trajectory.checkpoints {
                push_vertex(&mut table, cp.k, &cp.action);
                run.note(format!("gamma2_00.k={}", cp.k), cp.action.gamma2[(0, 0)]);
                run.note(format!("gamma4_0000.k={}", cp.k), cp.action.gamma4.get(0, 0, 0, 0));
            }
            run.statistics = json!({ "steps": trajectory.stats });
            run.write_table("flow_vertex.csv", &table)?;
            if let Some(e) = error {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

fn split<A: Action>(outcome: Result<FlowTrajectory<A>, Interrupted<A>>) -> (FlowTrajectory<A>, Option<FlowError>) {
    match outcome {
        Ok(t) => (t, None),
        Err(i) => (i.partial, Some(i.error)),
    }
}

/// Exact `Γ̄_k` at the grid nodes inside `radius`.
fn exact_on_grid(ctx: &FunctionalContext, action: &GridAction, radius: f64) -> Result<Vec<Option<f64>>, LabError> {
    let k = action.k;
    let inside: Vec<usize> = (0..action.phi.len()).filter(|&i| action.phi[i].abs() <= radius + 1e-12).collect();
    let fields: Vec<Field> = inside.iter().map(|&i| DVector::from_element(1, action.phi[i])).collect();
    let zero = ctx.gamma(k, &DVector::zeros(1))?;
    let points = ctx.gamma_batch(k, &fields)?;
    let mut out = vec![None; action.phi.len()];
    for (&i, p) in inside.iter().zip(points) {
        out[i] = Some(p.gamma - zero);
    }
    Ok(out)
}

fn push_vertex(table: &mut Table, k: f64, v: &VertexAction) {
    let m = v.modes();
    for a in 0..m {
        for b in a..m {
            table.push(vec![num(k), "gamma2".into(), format!("{a}-{b}"), num(v.gamma2[(a, b)])]);
        }
    }
    for a in 0..m {
        for b in a..m {
            for c in b..m {
                for d in c..m {
                    table.push(vec![num(k), "gamma4".into(), format!("{a}-{b}-{c}-{d}"), num(v.gamma4.get(a, b, c, d))]);
                }
            }
        }
    }
}

fn frge_check(run: &mut Run) -> Result<(), LabError> {
    let ctx = context(run.config)?;
    budget_tolerances(run);
    let check = &run.config.frge_check;
    run.tolerances.insert("agreement".into(), check.tolerance);
    let probes: Vec<(f64, Field)> = if check.probes.is_empty() {
        let dir = sweep_direction(ctx.model());
        [(0.5, 0.0), (1.0, 0.0), (1.0, 1.0), (2.0, -0.5), (5.0, 1.5)].iter().map(|&(k, a)| (k, a * &dir)).collect()
    } else {
        check
            .probes
            .iter()
            .map(|p| {
                if p.phi.len() != ctx.modes() {
                    Err(LabError::Validation(format!("probe at k = {} has {} components, model has {} modes", p.k, p.phi.len(), ctx.modes())))
                } else {
                    Ok((p.k, DVector::from_vec(p.phi.clone())))
                }
            })
            .collect::<Result<_, _>>()?
    };
    let report = frge_first_form_check(&ctx, &probes)?;
    let mut table = Table::new(&run.hash, &["k", "phi", "lhs", "rhs", "difference"]);
    for r in &report.rows {
        let phi: Vec<String> = r.phi.iter().map(|x| num(*x)).collect();
        table.push(vec![num(r.k), phi.join(";"), num(r.lhs), num(r.rhs), num(r.difference)]);
    }
    run.note("max_difference", report.max_difference);
    run.note("probes", report.rows.len());
    run.write_table("frge_check.csv", &table)?;
    if report.max_difference > check.tolerance {
        return Err(LabError::Validation(format!(
            "flow equation check failed: max difference {:.3e} exceeds {:.3e}",
            report.max_difference, check.tolerance
        )));
    }
    Ok(())
}

fn converge(run: &mut Run) -> Result<(), LabError> {
    let cc = run.config.converge.clone();
    budget_tolerances(run);
    run.seeds.insert("probe".into(), cc.seed);
    let limit = run.config.model.clone();
    let sequence = cc.sequence(&limit);
    let probe = cc.probe();
    let report = convergence_suite(&sequence, &limit, &probe, &run.config.budget.budget())?;
    let mut columns = vec!["index".to_string(), "r".to_string(), "uniform".to_string()];
    columns.extend(probe.aw_radii.iter().map(|r| format!("aw_{r}")));
    columns.push("probe".into());
    columns.extend(probe.aw_radii.iter().map(|r| format!("cauchy_aw_{r}")));
    columns.push("cauchy_probe".into());
    let mut table = Table::with_columns(&run.hash, columns);
    for (row, r) in report.rows.iter().zip(&cc.r) {
        let mut cells = vec![row.index.to_string(), num(*r), num(row.uniform)];
        cells.extend(row.aw.iter().map(|(_, d)| num(*d)));
        cells.push(num(row.probe));
        match &row.cauchy_aw {
            Some(c) => cells.extend(c.iter().map(|(_, d)| num(*d))),
            None => cells.extend(probe.aw_radii.iter().map(|_| String::new())),
        }
        cells.push(row.cauchy_probe.map(num).unwrap_or_default());
        table.push(cells);
    }
    run.note("uniform_decreasing", report.uniform_decreasing);
    for (rho, ok) in &report.aw_decreasing {
        run.note(format!("aw_decreasing.rho={rho}"), *ok);
    }
    run.note("probe_decreasing", report.probe_decreasing);
    run.note("non_cauchy", report.non_cauchy);
    run.write_table("converge.csv", &table)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), LabError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| LabError::Io(e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    Ok((header, rows))
}

/// `(k, φ) → Γ̄` from a flow or exact table.
fn gamma_bar_map(path: &Path, hash: &str, force: bool) -> Result<HashMap<(String, String), f64>, LabError> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Validation(format!("{}: missing column {name}", path.display())))
    };
    let (ch, ck, cp, cg) = (col("config_hash")?, col("k")?, col("phi")?, col("GammaBar")?);
    let mut out = HashMap::new();
    for r in rows {
        if r[ch] != hash && !force {
            return Err(LabError::Validation(format!("{}: row hash {} differs from manifest hash {hash}", path.display(), r[ch])));
        }
        let v: f64 = r[cg].parse().map_err(|_| LabError::Validation(format!("{}: bad value {}", path.display(), r[cg])))?;
        out.insert((r[ck].clone(), r[cp].clone()), v);
    }
    Ok(out)
}

pub fn report(out: &Path, inputs: &[PathBuf], force: bool) -> Result<(), LabError> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let mut manifests: Vec<(PathBuf, RunManifest)> = Vec::new();
    for dir in inputs {
        let entries = std::fs::read_dir(dir).map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
        let mut names: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(".manifest.json") && n != RunManifest::file_name("report"))
            })
            .collect();
        names.sort();
        for p in names {
            let m = RunManifest::read(&p)?;
            manifests.push((dir.clone(), m));
        }
    }
    if manifests.is_empty() {
        return Err(LabError::Validation("no manifests found to report on".into()));
    }
    let hashes: BTreeSet<&str> = manifests.iter().map(|(_, m)| m.config_hash.as_str()).collect();
    if hashes.len() > 1 && !force {
        return Err(LabError::Validation(format!(
            "refusing to merge runs with different config hashes ({}); pass --force to override",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let hash = if hashes.len() == 1 { hashes.into_iter().next().unwrap().to_string() } else { "mixed".to_string() };

    let mut table = Table::new(&hash, &["run_hash", "subcommand", "status", "metric", "value"]);
    let mut summary = BTreeMap::new();
    for (_, m) in &manifests {
        for (k, v) in &m.summary {
            let value = match v {
                Value::Number(n) => n.as_f64().map(num).unwrap_or_else(|| n.to_string()),
                other => other.to_string(),
            };
            table.push(vec![m.config_hash.clone(), m.subcommand.clone(), m.status.clone(), k.clone(), value]);
        }
    }
    // cross-check flow against exact where both ran in the same directory
    for dir in inputs {
        let flow = manifests.iter().find(|(d, m)| d == dir && m.subcommand == "flow");
        let exact = manifests.iter().find(|(d, m)| d == dir && m.subcommand == "exact");
        let (Some((_, fm)), Some((_, em))) = (flow, exact) else { continue };
        let (fp, ep) = (dir.join("flow.csv"), dir.join("exact.csv"));
        if !fp.exists() || !ep.exists() {
            continue;
        }
        let radius = fm.config.pointer("/flow/compare_radius").and_then(Value::as_f64).unwrap_or(2.0);
        let fmap = gamma_bar_map(&fp, &fm.config_hash, force)?;
        let emap = gamma_bar_map(&ep, &em.config_hash, force)?;
        let mut worst: f64 = 0.0;
        let mut matched = 0usize;
        for (key, v) in &fmap {
            let Some(e) = emap.get(key) else { continue };
            let phi: f64 = key.1.parse().unwrap_or(f64::INFINITY);
            if phi.abs() <= radius + 1e-12 {
                worst = worst.max((v - e).abs());
                matched += 1;
            }
        }
        if matched > 0 {
            table.push(vec![fm.config_hash.clone(), "report".into(), "ok".into(), "flow_vs_exact_max_deviation".into(), num(worst)]);
            table.push(vec![fm.config_hash.clone(), "report".into(), "ok".into(), "flow_vs_exact_points".into(), matched.to_string()]);
            summary.insert("flow_vs_exact_max_deviation".to_string(), json!(worst));
            summary.insert("flow_vs_exact_points".to_string(), json!(matched));
        }
    }
    table.write(&out.join("summary.csv"))?;
    summary.insert("runs".into(), json!(manifests.len()));
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: "report".into(),
        config_hash: hash,
        config: json!({ "inputs": inputs, "force": force }),
        status: "ok".into(),
        exit_code: 0,
        error: None,
        seeds: BTreeMap::new(),
        tolerances: BTreeMap::new(),
        threads: rayon::current_num_threads(),
        outputs: vec!["summary.csv".into()],
        statistics: Value::Null,
        summary,
        started_unix: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    print!("{}", String::from_utf8_lossy(&table.to_bytes()?));
    Ok(())
}
