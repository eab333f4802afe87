//! End-to-end checks of the `magflow` binary: subcommands on shipped fixtures,
//! exit codes, output files, and byte-level determinism of reruns.

use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_fixture(cmd: &str, name: &str, extra: &[&str]) -> Output {
    let cfg = fixture(name);
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn williamson_passes_on_fixture() {
    let report = stdout_json(&run_fixture("williamson", "flat-t2.json", &[]));
    assert_eq!(report["pass"], true);
    assert!(report["fibre"]["max_j_residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(report["clustered_instance_flagged"], true);
}

#[test]
fn grc_reports_classes_and_bounds() {
    let report = stdout_json(&run_fixture("grc", "t4-ratio-2.json", &[]));
    assert_eq!(report["spectrum_field"]["partition"]["q"], 1);
    assert_eq!(report["bound_report"]["bound_main"], 6);

    let report = stdout_json(&run_fixture("grc", "t4-ratio-sqrt2.json", &[]));
    assert_eq!(report["spectrum_field"]["partition"]["q"], 2);
    assert_eq!(report["bound_report"]["bound_main"], 10);
}

#[test]
fn grc_reruns_are_byte_identical() {
    let a = run_fixture("grc", "perturbed-t2.json", &["--seed", "7"]);
    let b = run_fixture("grc", "perturbed-t2.json", &["--seed", "7"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn converge_table_is_monotone() {
    let report = stdout_json(&run_fixture("converge", "flat-t2.json", &[]));
    assert_eq!(report["monotone"], true);
    assert_eq!(report["ratios_ok"], true);
    assert!(report["sanity_eps1_gap"].as_f64().unwrap() > 0.0);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn simulate_writes_trajectory_with_header() {
    let dir = std::env::temp_dir().join("magflow-test-simulate");
    let _ = std::fs::remove_dir_all(&dir);
    let out = run_fixture(
        "simulate",
        "flat-t2.json",
        &["--out", dir.to_str().unwrap()],
    );
    let report = stdout_json(&out);
    assert_eq!(report["pass"], true);
    assert!(report["energy_drift"].as_f64().unwrap() <= 1e-8);

    let csv = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# {"), "JSON header line");
    serde_json::from_str::<serde_json::Value>(&header[2..]).expect("header parses");
    assert_eq!(lines.next().unwrap(), "t,q1,q2,p1,p2,H");
    assert!(std::fs::read_to_string(dir.join("simulate.json")).is_ok());
}

#[test]
fn census_small_fixture_passes_and_dumps_orbits() {
    let dir = std::env::temp_dir().join("magflow-test-census");
    let _ = std::fs::remove_dir_all(&dir);
    let out = run_fixture("census", "flat-t2.json", &["--out", dir.to_str().unwrap(), "--jobs", "2"]);
    let report = stdout_json(&out);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows[0]["bound"], 3);
    assert_eq!(rows[0]["pass"], true);
    let n_csv = std::fs::read_dir(&dir)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            name.to_string_lossy().starts_with("orbit_eps")
        })
        .count();
    assert!(n_csv >= 3, "orbit CSV dumps present");
}

#[test]
fn exit_codes_signal_config_and_bound_failures() {
    // missing config: 2
    let out = run(&["grc", "--config", "/nonexistent/nope.json"]);
    assert_eq!(out.status.code(), Some(2));

    // malformed config: 2
    let dir = std::env::temp_dir().join("magflow-test-exitcodes");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(&["grc", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // fixture without the needed section: 2
    let out = run_fixture("simulate", "t4-ratio-2.json", &[]);
    assert_eq!(out.status.code(), Some(2));

    // unreachable bound: clean run, failed assertion, exit 1
    let template = std::fs::read_to_string(fixture("flat-t2.json")).unwrap();
    let hopeless = template.replace("\"cuplength\": 2", "\"cuplength\": 50");
    let path = dir.join("hopeless.json");
    std::fs::write(&path, hopeless).unwrap();
    let out = run(&["census", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rows"][0]["pass"], false);
    assert_eq!(report["rows"][0]["bound"], 51);
}
