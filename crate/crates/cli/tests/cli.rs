use std::path::Path;
use std::process::{Command, Output};

fn iptm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iptm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// 90 s urban snippet: two accelerations, a cruise and stops.
fn write_cycle(dir: &Path) -> String {
    let mut s = String::from("time_s,speed_mps\n");
    for t in 0..90 {
        let v = match t {
            0..=4 => 0.0,
            5..=19 => (t - 4) as f64 * 0.8,
            20..=34 => 12.0,
            35..=44 => 12.0 - (t - 34) as f64 * 1.2,
            45..=54 => 0.0,
            55..=69 => (t - 54) as f64 * 0.6,
            70..=79 => 9.0 - (t - 69) as f64 * 0.9,
            _ => 0.0,
        };
        s += &format!("{t},{v}\n");
    }
    std::fs::write(dir.join("snippet.csv"), s).unwrap();
    "snippet.csv".into()
}

fn small_dp_config(dir: &Path) -> String {
    std::fs::write(
        dir.join("exp.toml"),
        "[dp]\nn_soc = 41\nn_tcl = 11\nn_control = 21\nterminal_band = 0.02\n",
    )
    .unwrap();
    "exp.toml".into()
}

#[test]
fn missing_cycle_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = iptm(dir.path(), &["--cycle", "no/such/cycle.csv", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/cycle.csv"));
}

#[test]
fn bad_config_and_usage_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "controller = \"fuzzy\"\n").unwrap();
    assert_eq!(iptm(dir.path(), &["--config", "bad.toml", "run"]).status.code(), Some(1));
    assert_eq!(iptm(dir.path(), &["--config", "absent.toml", "run"]).status.code(), Some(1));
    assert_eq!(iptm(dir.path(), &["launch"]).status.code(), Some(1));
    assert_eq!(iptm(dir.path(), &["run", "--controller", "fuzzy"]).status.code(), Some(1));
    assert_eq!(iptm(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn dp_solve_then_run_reuses_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = write_cycle(dir.path());
    let cfg = small_dp_config(dir.path());
    let base = ["--config", &cfg, "--cycle", &cycle, "--out", "out"];
    let solve = iptm(dir.path(), &[&base[..], &["dp-solve"]].concat());
    assert!(solve.status.success(), "{}", String::from_utf8_lossy(&solve.stderr));
    let policy = dir.path().join("out/dp-snippet.bin");
    let stamp = std::fs::metadata(&policy).unwrap().modified().unwrap();

    let run = iptm(dir.path(), &[&base[..], &["run", "--controller", "dp"]].concat());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/dp-snippet.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["dp_cache_hit"], serde_json::Value::Bool(true));
    assert_eq!(std::fs::metadata(&policy).unwrap().modified().unwrap(), stamp);

    // a different grid invalidates the cache
    std::fs::write(dir.path().join(&cfg), "[dp]\nn_soc = 21\nn_tcl = 11\nn_control = 11\nterminal_band = 0.02\n").unwrap();
    let run = iptm(dir.path(), &[&base[..], &["run", "--controller", "dp"]].concat());
    assert!(run.status.success());
    let summary = std::fs::read_to_string(dir.path().join("out/dp-snippet.json")).unwrap();
    assert!(summary.contains("\"dp_cache_hit\": false"));
}

#[test]
fn repeated_runs_write_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = write_cycle(dir.path());
    std::fs::write(dir.path().join("noisy.toml"), "[preview]\nnoise_std = 1.0\n").unwrap();
    let mut files = Vec::new();
    for out in ["a", "b"] {
        let r = iptm(
            dir.path(),
            &["--config", "noisy.toml", "--cycle", &cycle, "--out", out, "--seed", "11", "run", "--controller", "mh-mpc"],
        );
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        files.push(std::fs::read(dir.path().join(out).join("mh-mpc-snippet.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0].iter().filter(|&&b| b == b'\n').count(), 92);
}

#[test]
fn compare_runs_all_controllers() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = write_cycle(dir.path());
    let cfg = small_dp_config(dir.path());
    let out = iptm(dir.path(), &["--config", &cfg, "--cycle", &cycle, "--out", "out", "compare"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("out/comparison.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["rule-based-snippet", "baseline-mpc-snippet", "mh-mpc-snippet", "dp-snippet"]);
    let reference: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(reference[2], "0");
    assert!(dir.path().join("out/comparison.json").exists());

    // comparing saved summaries gives the same table
    let again = iptm(
        dir.path(),
        &["--out", "out2", "compare", "out/rule-based-snippet.json", "out/dp-snippet.json"],
    );
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let t2 = std::fs::read_to_string(dir.path().join("out2/comparison.csv")).unwrap();
    assert_eq!(t2.lines().nth(2), table.lines().nth(4));
}

#[test]
fn horizon_sweep_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = write_cycle(dir.path());
    let out = iptm(
        dir.path(),
        &["--cycle", &cycle, "--out", "out", "sweep", "--controller", "baseline-mpc", "--param", "h", "--values", "5,10,20"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep-baseline-mpc-snippet-h.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for h in [5, 10, 20] {
        assert!(dir.path().join(format!("out/baseline-mpc-snippet-h={h}.csv")).exists());
    }
    let wrong = iptm(dir.path(), &["--cycle", &cycle, "sweep", "--controller", "mh-mpc", "--param", "h", "--values", "5"]);
    assert_eq!(wrong.status.code(), Some(1));
}
