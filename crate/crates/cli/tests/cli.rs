use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bms-sim"));
    c.env_remove("BMS_SIM_OUT");
    c
}

fn scenario(name: &str) -> String {
    format!("{}/../../scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn run_twice_gives_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let status = bin()
            .args(["run", &scenario("join_leave.json"), "--seed", "3", "--out"])
            .arg(tmp.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = read_all(&tmp.path().join("a"));
    let b = read_all(&tmp.path().join("b"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["blocks.csv", "configs.csv", "joins.csv", "updates.csv", "votes.csv"]);
    assert_eq!(a, b);
    let joins = String::from_utf8(a[2].1.clone()).unwrap();
    assert!(joins.starts_with(
        "size,t,tx_latency_s,confirm_latency_s,ordering_latency_s,checkpoint_latency_s\n"
    ));
}

#[test]
fn env_var_sets_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .env("BMS_SIM_OUT", tmp.path())
        .args(["sweep", "--policy", "t1", "--from", "4", "--to", "6", "--skip-confirmation"])
        .status()
        .unwrap();
    assert!(status.success());
    let updates = fs::read_to_string(tmp.path().join("updates.csv")).unwrap();
    let mut lines = updates.lines();
    assert_eq!(lines.next(), Some("size,joiners,total_gas,gas_per_join,usd_per_join"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn invalid_scenario_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.json");
    fs::write(&file, r#"{"initial_size": 4, "churn": [{"op": "leave", "node": 12}]}"#).unwrap();
    let out = bin().arg("run").arg(&file).arg("--out").arg(tmp.path()).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("churn[0]"), "{err}");
}

#[test]
fn calibration_needs_enough_anchors() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("anchors.csv");
    fs::write(&file, "size,gas_per_join\n25,113314\n").unwrap();
    let out = bin()
        .args(["calibrate-gas", "--anchors"])
        .arg(&file)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("under-determined"));
}

#[test]
fn attack_demo_reports_forgeries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["attack-demo", "--mode", "control", "--seeds", "3", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("in 3/3 runs"), "{text}");
}
