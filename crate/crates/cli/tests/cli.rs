use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cognimap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cognimap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cognimap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn run_then_eval_writes_finite_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "seq", "--seed", "2", "--frames", "12"]);
    ok(d, &["run", "--seq", "seq", "--out", "out", "--bank", "bank"]);
    for f in ["trajectory.tum", "run.json", "metrics.json", "masks/000011.pgm"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    fs::remove_file(d.join("out/metrics.json")).unwrap();
    ok(d, &["eval", "--run", "out", "--seq", "seq"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/metrics.json")).unwrap()).unwrap();
    for key in ["ate_rmse", "rpe_trans", "rpe_rot", "mask_iou"] {
        let v = m[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
    }
    assert!(m["timings"]["segment"].as_f64().is_some());
}

#[test]
fn eval_rejects_length_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("a.tum"), "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n2 2 0 0 0 0 0 1\n").unwrap();
    fs::write(d.join("b.tum"), "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n").unwrap();
    let out = cognimap(d, &["eval", "--est", "a.tum", "--gt", "b.tum"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("length mismatch"));
    assert!(!d.join("metrics.json").exists());
}

#[test]
fn bank_inspect_lists_three_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for seed in ["11", "12", "13"] {
        let seq = format!("seq{seed}");
        ok(d, &["synth", "--out", &seq, "--seed", seed, "--frames", "10", "--movers", "0"]);
        ok(d, &["run", "--seq", &seq, "--out", &format!("out{seed}"), "--bank", "bank"]);
    }
    let v: serde_json::Value = serde_json::from_str(&ok(d, &["bank", "inspect", "--bank", "bank", "--json"])).unwrap();
    let maps = v["maps"].as_array().unwrap();
    assert_eq!(maps.len(), 3);
    assert!(maps.iter().all(|m| m["points"].as_u64().unwrap() > 0));
    let table = ok(d, &["bank", "inspect", "--bank", "bank"]);
    assert!(table.contains("3 maps"), "{table}");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(cognimap(d, &["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cognimap(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(cognimap(d, &["--cadence", "0", "bank", "inspect", "--bank", "b"]).status.code(), Some(2));
    assert_eq!(cognimap(d, &["--set", "nope=1", "bank", "inspect", "--bank", "b"]).status.code(), Some(2));
    fs::write(d.join("bad.cfg"), "graph.solve.max_iter = many\n").unwrap();
    let out = cognimap(d, &["--config", "bad.cfg", "bank", "inspect", "--bank", "b"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph.solve.max_iter"));
    assert_eq!(cognimap(d, &["run", "--out", "o", "--bank", "b"]).status.code(), Some(2));
}

#[test]
fn config_file_supplies_paths_and_runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "seq", "--seed", "5", "--frames", "6"]);
    fs::write(d.join("run.cfg"), "paths.sequence=seq\npaths.out=out\npaths.bank=bank\ncadence=3\n").unwrap();
    ok(d, &["--config", "run.cfg", "run"]);
    assert!(d.join("out/trajectory.tum").exists());
    assert!(d.join("bank/manifest.json").exists());

    fs::remove_file(d.join("seq/000003.depth.f32")).unwrap();
    let out = cognimap(d, &["--config", "run.cfg", "run", "--out", "out2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("000003.depth.f32"));
    assert!(!d.join("out2").exists());
}
