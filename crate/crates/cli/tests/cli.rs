use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn rkesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rkesim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn simulate(name: &str, dir: &Path, extra: &[&str]) -> Output {
    let scn = scenarios().join(format!("{name}.scn"));
    let mut args = vec!["simulate", scn.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    rkesim(&args)
}

#[test]
fn happy_scenario_writes_a_clean_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate("unlock_happy", dir.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = dir.path().join("unlock_happy.trace");
    let text = fs::read_to_string(&trace).unwrap();
    for act in ["UNLOCK_DOORS", "OPEN_BOOT", "LOCK_DOORS", "START_ENGINE"] {
        assert!(text.contains(&format!("ACT car {act}")), "{act}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("unlock_happy.json")).unwrap()).unwrap();
    assert_eq!(report["violations"], 0);

    let o = rkesim(&["audit", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
}

#[test]
fn hand_edited_trace_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    simulate("unlock_happy", dir.path(), &[]);
    let path = dir.path().join("unlock_happy.trace");
    let text = fs::read_to_string(&path).unwrap();
    // An unlock out of nowhere, long after the last session.
    let forged = format!("{text}5900 ACT car UNLOCK_DOORS\n");
    let forged_path = dir.path().join("forged.trace");
    fs::write(&forged_path, forged).unwrap();
    let o = rkesim(&["audit", forged_path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Safety"));

    let o = rkesim(&["audit", "--json", forged_path.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["clean"], false);
}

#[test]
fn malformed_trace_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.trace");
    fs::write(&path, "10 TX car zz\n").unwrap();
    let o = rkesim(&["audit", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_list_every_field_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.scn");
    fs::write(
        &path,
        "name = \"b\"\ntechnique = \"x\"\n[timing]\nblock_ms = 0\n[attack]\nkind = \"teleport\"\n",
    )
    .unwrap();
    let o = rkesim(&["simulate", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["technique", "timing.block_ms", "attack.kind"] {
        assert!(err.contains(field), "{field} missing in {err}");
    }
    let o = rkesim(&["simulate", "/nonexistent.scn"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn no_trace_skips_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate("relay_proposed", dir.path(), &["--no-trace"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("relay_proposed.json").exists());
    assert!(!dir.path().join("relay_proposed.trace").exists());
}

#[test]
fn same_seed_same_bytes_other_seed_differs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    simulate("unlock_happy", a.path(), &[]);
    simulate("unlock_happy", b.path(), &[]);
    simulate("unlock_happy", c.path(), &["--seed", "99"]);
    let read = |d: &Path| fs::read(d.join("unlock_happy.trace")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn matrix_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    fs::write(
        &cfg,
        "[budgets]\nscan_attempts = 500\nplayback_record = 3\nplayback_replay = 20\nforward_runs = 3\n",
    )
    .unwrap();
    let o = rkesim(&["matrix", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert!(csv.starts_with("attack,technique,attempts,successes,rate"));
    assert_eq!(csv.lines().count(), 13);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("matrix.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn provision_demo_reports_every_outcome_honestly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("provision.toml");
    let o = rkesim(&[
        "provision-demo",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("INCONSISTENT"));
    assert!(out.contains("unreported divergence 0"));
    assert!(dir.path().join("provision.transcript").exists());
}

#[test]
fn violating_scenario_exits_1() {
    // A block shorter than the auditor expects cannot be produced through a
    // scenario, so feed the auditor a trace whose block lifts early.
    let dir = tempfile::tempdir().unwrap();
    simulate("lockout", dir.path(), &[]);
    let text = fs::read_to_string(dir.path().join("lockout.trace")).unwrap();
    let edited = text.replace("# param block_ms 180000", "# param block_ms 200000");
    let path = dir.path().join("edited.trace");
    fs::write(&path, edited).unwrap();
    let o = rkesim(&["audit", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Lockout"));
}
