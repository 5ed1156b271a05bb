use std::path::Path;
use std::process::{Command, Output};

use coserve_core::pcg::{build_lora_block, AttachPoint, GraphBuilder, OpKind, PeftModel};

fn coserve(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coserve"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn summary(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Linear layer with a LoRA bypass reading its input and adding to its output.
fn write_graph(path: &Path) {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[8, 16]);
    let w = b.weight("w", &[16, 16]);
    let y = b.matmul(&x, &w, "y", false);
    b.op(OpKind::Loss, &[&y], "loss", false);
    let mut m = PeftModel::new(b.finish());
    let at = AttachPoint {
        reads: "x".into(),
        adds_to: "y".into(),
    };
    m.attach(build_lora_block(16, 4, 8, &at).unwrap()).unwrap();
    std::fs::write(path, m.to_json().unwrap()).unwrap();
}

#[test]
fn generated_trace_runs_and_writes_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = coserve(&["gen-trace", "--out", "t.csv", "--seed", "5", "--rate", "4", "--duration", "20", "--ft-sequences", "5"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = coserve(&["run", "--seed", "5", "--trace", "t.csv", "--policy", "coserve", "--out-dir", "out"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    for f in ["metrics.csv", "timeline.csv", "summary.json"] {
        assert!(p.join("out").join(f).is_file(), "{f}");
    }
    let s = summary(&p.join("out/summary.json"));
    assert_eq!(s["config"]["sim"]["seed"], 5);
    assert_eq!(s["config"]["sim"]["policy"], "coserve");
    assert!(s["summary"]["requests"].as_u64().unwrap() > 0);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "run", "--seed", "9", "--policy", "vtc", "--tenants", "2", "--rate", "6", "--duration", "20", "--ft-sequences",
            "10", "--out-dir", out,
        ]
    };
    assert_eq!(code(&coserve(&args("a"), d.path())), 0);
    assert_eq!(code(&coserve(&args("b"), d.path())), 0);
    for f in ["metrics.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(d.path().join("a").join(f)).unwrap(),
            std::fs::read(d.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("cfg.json"),
        r#"{"sim": {"policy": "temporal:64", "total_pages": 3000}, "trace": {"duration_s": 10, "rate_rps": 3}}"#,
    )
    .unwrap();
    let o = coserve(
        &["run", "--seed", "1", "--config", "cfg.json", "--policy", "dts", "--growth", "full", "--out-dir", "o"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let s = summary(&d.path().join("o/summary.json"));
    assert_eq!(s["config"]["sim"]["policy"], "dts");
    assert_eq!(s["config"]["sim"]["total_pages"], 3000);
    assert_eq!(s["config"]["sim"]["growth_reservation_tokens"], 1024);
    assert_eq!(s["config"]["trace"]["duration_s"], 10.0);
}

#[test]
fn validation_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let missing = coserve(&["run", "--seed", "1", "--trace", "nope.csv", "--out-dir", "o"], p);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.csv"));
    assert_eq!(code(&coserve(&["frobnicate"], p)), 1);
    assert_eq!(code(&coserve(&["run", "--policy", "coserve", "--out-dir", "o"], p)), 1, "--seed is mandatory");
    assert_eq!(code(&coserve(&["run", "--seed", "1", "--policy", "spatial:1.5", "--out-dir", "o"], p)), 1);
    std::fs::write(p.join("bad.json"), r#"{"sim": {"scheduler": {"max_batch": 0}}}"#).unwrap();
    assert_eq!(code(&coserve(&["run", "--seed", "1", "--config", "bad.json", "--out-dir", "o"], p)), 1);
    std::fs::write(p.join("typo.json"), r#"{"sim": {"max_batch": 8}}"#).unwrap();
    assert_eq!(code(&coserve(&["run", "--seed", "1", "--config", "typo.json", "--out-dir", "o"], p)), 1);
    assert_eq!(code(&coserve(&["--help"], p)), 0);
}

#[test]
fn verify_grad_reports_every_window_class() {
    let d = tempfile::tempdir().unwrap();
    let o = coserve(&["verify-grad", "--depth", "2", "--hidden", "16", "--seqlen", "32", "--trials", "5"], d.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let out = stdout(&o);
    for class in ["uniform-1", "uniform-32", "random", "max relative error"] {
        assert!(out.contains(class), "{class}");
    }
}

#[test]
fn parallelize_and_prune_read_a_graph_file() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write_graph(&p.join("g.json"));
    std::fs::write(p.join("m.json"), r#"{"degree": 2, "flops_per_ms": 1e9, "bytes_per_ms": 1e7}"#).unwrap();
    let o = coserve(&["parallelize", "--graph", "g.json", "--machine", "m.json", "--budget", "2", "--out", "par.json"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("par.json")).unwrap()).unwrap();
    let first = &v[0];
    assert!(first["candidates"].as_array().unwrap().len() >= 2);
    assert!(first["chosen"]["cost_ms"].as_f64().unwrap() > 0.0);

    let o = coserve(&["prune", "--graph", "g.json", "--seqlen", "8", "--out-dir", "pr"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    let csv = std::fs::read_to_string(p.join("pr/memory.csv")).unwrap();
    assert!(csv.starts_with("category,bytes,percent\n"));
    assert!(p.join("pr/plan.json").is_file());
}

#[test]
fn compare_writes_one_row_per_rate_seed_and_policy() {
    let d = tempfile::tempdir().unwrap();
    let o = coserve(
        &[
            "compare", "--seed", "2", "--seeds", "3", "--policies", "coserve,isolate:0.75", "--rates", "2,6", "--duration",
            "15", "--ft-sequences", "20", "--out", "sweep/c.csv",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let mut rd = csv::Reader::from_path(d.path().join("sweep/c.csv")).unwrap();
    assert_eq!(rd.records().count(), 2 * 2 * 2);
}
