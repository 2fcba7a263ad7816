//! End-to-end runs of the `diqre` binary on desk-scale configurations.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const DESK: &str = r#"
[paths]
dir = "."

[simulate]
trials = 10000000
q = 0.5
seed = 1

[protocol]
q = 0.99
eps_b = 0.0
k = 0.0
k0 = 0.0
eps_s = 0.05
eps_x = 1e-6
gamma = 0.99
gamma_bar = 0.993
mode = "fixed"
n_max = 1000000
checkpoint_interval = 10000

[optimizer]
betas = ["5e-3"]
rescale = false

[run]
seed_prng = 3

[extract]
seed_prng = 4

[audit]
soundness_samples = 200
extractor_samples = 12
"#;

struct Outcome {
    code: i32,
    json: Value,
    stderr: String,
}

fn diqre(config: &Path, args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_diqre"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    Outcome {
        code: out.status.code().expect("exit code"),
        json: serde_json::from_str(&stdout).unwrap_or(Value::Null),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(config: &Path, args: &[&str]) -> Value {
    let o = diqre(config, args);
    assert_eq!(o.code, 0, "{args:?} failed: {}", o.stderr);
    o.json
}

fn workspace(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diqre.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn f(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {v}"))
}

#[test]
fn desk_pipeline_end_to_end() {
    let (dir, cfg) = workspace(DESK);
    let sim = ok(&cfg, &["simulate"]);
    let n00 = sim["class_totals"][0].as_f64().unwrap();
    let p = f(&sim, "model_p00_given_00");
    assert!((f(&sim, "p00_given_00") - p).abs() < 4.0 * (p * (1.0 - p) / n00).sqrt());

    let train = ok(&cfg, &["train"]);
    assert!(f(&train, "pef_rate") > 0.0);
    ok(&cfg, &["plan"]);

    // a long budget keeps the stop close to N, so the slope is not dominated by the stopping rule
    let long = ["--set", "protocol.n_max=10000000", "--set", "protocol.checkpoint_interval=100000"];
    let plan = ok(&cfg, &[&long[..], &["plan"]].concat());
    let run = ok(&cfg, &[&long[..], &["run"]].concat());
    assert_eq!(run["success"], Value::Bool(true));
    let report = ok(&cfg, &["report"]);
    let (r_nu, r_in, sigma) = (f(&plan, "r_nu"), f(&plan, "r_in"), f(&plan, "sigma_nu"));
    assert!((f(&report, "consumed_slope") - r_in).abs() < 1e-9 * r_in);
    let n = f(&report, "n_stop");
    assert!((f(&report, "generated_slope") - r_nu).abs() < 4.0 * sigma / n.sqrt(), "{report}");
    assert_eq!(report["extraction_allowed"], Value::Bool(true));
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.starts_with("n,generated,consumed,net,expected,region\n"));

    let ex = ok(&cfg, &["extract"]);
    let m = ex["report"]["m"].as_u64().unwrap();
    assert!(m > 0);
    let bits = std::fs::read(dir.path().join("extracted.bin")).unwrap();
    assert_eq!(u64::from_le_bytes(bits[..8].try_into().unwrap()), m);

    let audit = ok(&cfg, &["audit"]);
    assert_eq!(audit["passed"], Value::Bool(true));
    for name in ["behavior.json", "nu.json", "pef.json", "plan.json", "transcript.json", "certificate.json", "extraction.json"] {
        let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join(name)).unwrap()).unwrap();
        assert_eq!(v["provenance"]["tool"], "diqre", "{name}");
    }
    assert!(dir.path().join("counts.csv.provenance.json").exists());
    let lines = std::fs::read_to_string(dir.path().join("checkpoints.jsonl")).unwrap();
    assert!(lines.lines().next().unwrap().contains("provenance"));
}

#[test]
fn stages_are_reproducible() {
    let digests = || {
        let (dir, cfg) = workspace(DESK);
        ok(&cfg, &["--set", "simulate.trials=200000", "simulate"]);
        ok(&cfg, &["train"]);
        ["counts.csv", "nu.json", "pef.json"].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(digests(), digests());
}

#[test]
fn parameter_errors_exit_2() {
    let (_dir, cfg) = workspace(DESK);
    assert_eq!(diqre(&cfg, &["--set", "simulate.trials=0", "simulate"]).code, 2);
    assert_eq!(diqre(&cfg, &["--set", "protocol.qq=1", "plan"]).code, 2);
    assert_eq!(diqre(&cfg, &["plan"]).code, 2, "missing artifacts");
    assert_eq!(diqre(Path::new("/nonexistent/diqre.toml"), &["plan"]).code, 2);
}

#[test]
fn deterministic_counts_make_the_plan_infeasible() {
    let (dir, cfg) = workspace(DESK);
    let mut csv = String::from("a,b,x,y,count\n");
    for i in 0..16 {
        let (a, b, x, y) = ((i >> 3) & 1, (i >> 2) & 1, (i >> 1) & 1, i & 1);
        let count = if a == 0 && b == 0 { 1000 } else { 0 };
        csv.push_str(&format!("{a},{b},{x},{y},{count}\n"));
    }
    std::fs::write(dir.path().join("counts.csv"), csv).unwrap();
    // the projection of a deterministic behavior sits on the polytope boundary, where the
    // Newton decrement bottoms out near 4e-10 in f64 (certified gap 1e-19)
    let train = diqre(&cfg, &["--set", "optimizer.mle_tol=1e-8", "train"]);
    assert_eq!(train.code, 3, "{}", train.stderr);
    assert!(train.stderr.contains("certified rate bound"), "{}", train.stderr);
    assert!(!dir.path().join("pef.json").exists());
}

#[test]
fn failed_run_issues_no_certificate() {
    let (dir, cfg) = workspace(DESK);
    ok(&cfg, &["--set", "simulate.trials=2000000", "simulate"]);
    ok(&cfg, &["train"]);
    ok(&cfg, &["--set", "protocol.n_max=200000", "plan"]);
    // a certificate left over from an earlier success must not survive a failed run
    ok(&cfg, &["run"]);
    assert!(dir.path().join("certificate.json").exists());
    let run = diqre(&cfg, &["--set", "run.local_strategy=5", "run"]);
    assert_eq!(run.code, 4, "{}", run.stderr);
    assert!(!dir.path().join("certificate.json").exists());
    let ex = diqre(&cfg, &["extract"]);
    assert_eq!(ex.code, 4, "{}", ex.stderr);
    let report = ok(&cfg, &["report"]);
    assert_eq!(report["success"], Value::Bool(false));
    assert_eq!(report["extraction_allowed"], Value::Bool(false));
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(curve.lines().skip(1).all(|l| l.ends_with(",protocol_fails")));
}

#[test]
fn seed_file_underflow_is_a_protocol_failure() {
    let (dir, cfg) = workspace(&DESK.replace("seed_prng = 3\n", ""));
    ok(&cfg, &["--set", "simulate.trials=2000000", "simulate"]);
    ok(&cfg, &["train"]);
    ok(&cfg, &["plan"]);
    assert_eq!(diqre(&cfg, &["run"]).code, 2, "seed file missing");
    let mut seed = 16u64.to_le_bytes().to_vec();
    seed.extend([0xa5, 0x3c]);
    std::fs::write(dir.path().join("protocol_seed.bin"), seed).unwrap();
    let run = diqre(&cfg, &["run"]);
    assert_eq!(run.code, 4, "{}", run.stderr);
    assert!(run.stderr.contains("seed exhausted"));
    let t: Value = serde_json::from_slice(&std::fs::read(dir.path().join("transcript.json")).unwrap()).unwrap();
    assert_eq!(t["body"]["stop_reason"], "ABORTED");
    assert!(!dir.path().join("certificate.json").exists());
}

#[test]
fn reference_arithmetic_dry_run() {
    let config = r#"
[paths]
dir = "."

[optimizer]
source = "reference"
rescale = true
assumed_rescale_bound = "1.00000000112"
"#;
    let (_dir, cfg) = workspace(config);
    let train = ok(&cfg, &["train"]);
    assert!((f(&train, "qef_rate") - 0.00289).abs() < 5e-5);
    let plan = ok(&cfg, &["plan"]);
    assert!((f(&plan, "n_max") / 2.35e11 - 1.0).abs() < 0.05, "{plan}");
    let dry = ok(&cfg, &["report", "--dry-run", "--stop", "1.8e11"]);
    assert!((f(&dry, "consumed") / 4.39e8 - 1.0).abs() < 2e-3, "{dry}");
    assert!((f(&dry, "total_soundness") - 4.66e-10).abs() < 5e-13);
    // the appointed N is 0.8% below the reported one, which moves the net expansion by 3.3%
    assert!((f(&dry, "net_expansion") / 1.08e8 - 1.0).abs() < 0.05, "{dry}");
    let edge = ok(&cfg, &["--set", "protocol.gamma=0.993", "plan"]);
    assert!(f(&edge, "n_max") > 0.0);
    // the printed table violates a constraint and its rescaling bound is assumed, not certified
    let audit = diqre(&cfg, &["audit"]);
    assert_eq!(audit.code, 5, "{}", audit.stderr);
    assert!(audit.stderr.contains("pef_feasibility") && audit.stderr.contains("grid_certificates"));
}
