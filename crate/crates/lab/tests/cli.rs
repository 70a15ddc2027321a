use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn lab(dir: &Path, args: &[&str]) -> Output {
    lab_env(dir, args, &[])
}

fn lab_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_frge-lab"));
    cmd.arg("--out").arg(dir).args(args).env_remove("FRGE_LAB_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn frge-lab")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path, sub: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{sub}.manifest.json"))).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_regulator_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["validate-regulator", "--regulator", "litim", "--regulator", "exponential", "--samples", "500"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("regulator.csv")).unwrap();
    assert!(csv.starts_with("config_hash,regulator,condition,"));
    assert!(!csv.contains('\r'));
    // five conditions per regulator
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    let m = manifest(dir.path(), "validate-regulator");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"flow":{"kuv":3}}"#);
    let out = lab(dir.path(), &["--config", &cfg, "exact"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("kuv"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = lab(&blocker.join("sub"), &["validate-regulator", "--samples", "10"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn flow_exact_report_pipeline_agrees() {
    let dir = tempfile::tempdir().unwrap();
    // flags feed the config hash, so both runs use the defaults to stay mergeable
    for args in [&["flow"][..], &["exact"], &["report"]] {
        let out = lab(dir.path(), args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let report = manifest(dir.path(), "report");
    let dev = report["summary"]["flow_vs_exact_max_deviation"].as_f64().unwrap();
    assert!(dev <= 1e-4, "{dev}");
    assert!(report["summary"]["flow_vs_exact_points"].as_u64().unwrap() > 100);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("config_hash,run_hash,subcommand,status,metric,value\n"));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        assert_eq!(code(&lab(dir, &["exact", "--k", "2,0"])), 0);
        assert_eq!(code(&lab(dir, &["flow", "--kuv", "10", "--checkpoints", "1"])), 0);
        assert_eq!(code(&lab(dir, &["converge", "--samples", "2000"])), 0);
        assert_eq!(code(&lab(dir, &["report", "--force"])), 0);
    }
    for file in ["exact.csv", "flow.csv", "converge.csv", "summary.csv"] {
        assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    for sub in ["exact", "flow", "converge", "report"] {
        let strip = |mut m: Value| {
            let obj = m.as_object_mut().unwrap();
            obj.remove("started_unix");
            obj.remove("wall_clock_seconds");
            // the report records its input directories, which differ here by construction
            obj.get_mut("config").and_then(|c| c.as_object_mut()).map(|c| c.remove("inputs"));
            m
        };
        assert_eq!(strip(manifest(a.path(), sub)), strip(manifest(b.path(), sub)), "{sub}");
    }
}

#[test]
fn report_refuses_mixed_configs_unless_forced() {
    let (a, b, out) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&lab(a.path(), &["exact", "--k", "1"])), 0);
    assert_eq!(code(&lab(b.path(), &["exact", "--k", "2"])), 0);
    let inputs = [a.path().to_str().unwrap(), b.path().to_str().unwrap()];
    let refused = lab(out.path(), &["report", inputs[0], inputs[1]]);
    assert_eq!(code(&refused), 2);
    assert!(stderr(&refused).contains("hash"), "{}", stderr(&refused));
    let forced = lab(out.path(), &["report", "--force", inputs[0], inputs[1]]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(manifest(out.path(), "report")["config_hash"], "mixed");
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab_env(dir.path(), &["exact", "--k", "1"], &[("FRGE_LAB_THREADS", "2")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(manifest(dir.path(), "exact")["threads"], 2);
    // the flag wins over the environment
    let out = lab_env(dir.path(), &["--threads", "3", "exact", "--k", "1"], &[("FRGE_LAB_THREADS", "2")]);
    assert_eq!(code(&out), 0);
    assert_eq!(manifest(dir.path(), "exact")["threads"], 3);
    assert_eq!(code(&lab_env(dir.path(), &["exact"], &[("FRGE_LAB_THREADS", "many")])), 2);
    assert_eq!(code(&lab(dir.path(), &["--threads", "0", "exact"])), 2);
}

#[test]
fn vertex_flow_reports_couplings() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["flow", "--rep", "vertex", "--kuv", "50", "--checkpoints", "1,0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = &manifest(dir.path(), "flow")["summary"];
    let g2 = summary["gamma2_00.k=0"].as_f64().unwrap();
    // the grid flow gives Γ̄₀''(0) ≈ 1.62 for this fixture; the truncation sits a few percent off
    assert!((g2 - 1.62).abs() < 0.1, "{g2}");
    let csv = std::fs::read_to_string(dir.path().join("flow_vertex.csv")).unwrap();
    assert!(csv.starts_with("config_hash,k,tensor,indices,value\n"));
}

#[test]
fn failed_newton_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"budget":{"newton_max_iterations":1}}"#);
    let out = lab(dir.path(), &["--config", &cfg, "exact", "--k", "1"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let m = manifest(dir.path(), "exact");
    assert_eq!(m["status"], "failed");
    assert_eq!(m["exit_code"], 3);
}

#[test]
fn frge_check_failure_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["frge-check"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = write_config(dir.path(), "c.json", r#"{"frge_check":{"tolerance":1e-30}}"#);
    assert_eq!(code(&lab(dir.path(), &["--config", &cfg, "frge-check"])), 2);
}

#[test]
fn small_converge_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"converge":{"r":[0.5,0.75,0.875],"samples":4000,"aw_radii":[6.0]}}"#);
    let out = lab(dir.path(), &["--config", &cfg, "converge"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("converge.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let summary = &manifest(dir.path(), "converge")["summary"];
    assert_eq!(summary["uniform_decreasing"], true);
    assert_eq!(summary["aw_decreasing.rho=6"], true);
}

#[test]
fn lattice_exact_writes_one_source_column_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"model":{"dimension":1,"modes":3,"mass":1.0,"momentum_spacing":1.0,"window":{"K":4.0,"Lambda":2.0,"n":1.0},"interaction":{"c4":0.1}},"exact":{"ks":[1.0]}}"#,
    );
    let out = lab(dir.path(), &["--config", &cfg, "exact"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("exact.csv")).unwrap();
    assert!(csv.starts_with("config_hash,k,phi,Gamma,GammaBar,J_0,J_1,J_2,W,residual,budget\n"));
    let missing = write_config(dir.path(), "m.json", r#"{"model":{"dimension":1,"modes":3,"mass":1.0,"window":{"K":4.0,"Lambda":2.0,"n":1.0}}}"#);
    assert_eq!(code(&lab(dir.path(), &["--config", &missing, "exact"])), 2);
}
