use iptm::controllers::{RuleBased, RuleBasedConfig};
use iptm::cycle::{DriveCycle, PreviewModel};
use iptm::harness::{
    read_trajectory, run_in_memory, simulate, write_trajectory, ControllerKind, ExperimentConfig,
    RunReport, TRAJECTORY_HEADER,
};
use iptm::nlp::StateBounds;
use iptm::plant::PlantState;
use iptm::powertrain::VehicleParams;

fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let out = run_in_memory(cfg).unwrap();
    let mut buf = Vec::new();
    write_trajectory(&mut buf, &out.trajectory.rows, cfg.record_timing).unwrap();
    buf
}

#[test]
fn same_seed_gives_identical_bytes() {
    let mut cfg = ExperimentConfig {
        controller: ControllerKind::BaselineMpc,
        cycle: "nycc-like".into(),
        seed: 5,
        ..Default::default()
    };
    cfg.baseline_mpc.horizon = 10;
    let a = csv_bytes(&cfg);
    assert_eq!(a, csv_bytes(&cfg));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some(TRAJECTORY_HEADER));
}

#[test]
fn noise_depends_on_the_seed_only() {
    let mut cfg = ExperimentConfig {
        controller: ControllerKind::MhMpc,
        cycle: "nycc-like".into(),
        seed: 1,
        ..Default::default()
    };
    cfg.preview.noise_std = 2.0;
    let a = csv_bytes(&cfg);
    assert_eq!(a, csv_bytes(&cfg));
    cfg.seed = 2;
    assert_ne!(a, csv_bytes(&cfg));
}

#[test]
fn audit_residuals_are_at_rounding_level() {
    let v = VehicleParams::default();
    for kind in [ControllerKind::RuleBased, ControllerKind::MhMpc] {
        for cycle in ["nycc-like", "nedc-like"] {
            let cfg = ExperimentConfig {
                controller: kind,
                cycle: cycle.into(),
                ..Default::default()
            };
            let r = run_in_memory(&cfg).unwrap().report;
            let worst = r.audit.worst_relative(v.battery.capacity_coulombs);
            assert!(worst < 1e-9, "{kind} on {cycle}: {:?}", r.audit);
            assert!(r.audit.fuel_energy > r.audit.engine_work);
            assert!(r.audit.battery_loss > 0.0);
        }
    }
}

#[test]
fn rule_based_heats_a_cold_parked_car() {
    let v = VehicleParams::default();
    let cycle = DriveCycle::new("parked", vec![0.0; 300]).unwrap();
    let mut rb = RuleBased::new(RuleBasedConfig::default(), v.clone());
    let traj = simulate(
        &cycle,
        &mut rb,
        &v,
        PlantState::new(0.6, 50.0),
        &PreviewModel::default(),
        &RuleBasedConfig::default(),
    )
    .unwrap();
    assert!(traj.total_fuel() > 0.0);
    assert!(traj.rows[1..].iter().all(|r| r.t_cl >= 50.0), "coolant fell below 50 °C");
    let r = RunReport::from_trajectory(&traj, &v, &StateBounds::default(), 0);
    assert_eq!(r.t_cl_violation, 0.0);
    assert_eq!(r.soc_violation, 0.0);
}

#[test]
fn written_trajectory_reproduces_the_report() {
    let cfg = ExperimentConfig {
        controller: ControllerKind::RuleBased,
        cycle: "nedc-like".into(),
        ..Default::default()
    };
    let out = run_in_memory(&cfg).unwrap();
    let mut buf = Vec::new();
    write_trajectory(&mut buf, &out.trajectory.rows, false).unwrap();
    let rows = read_trajectory(buf.as_slice()).unwrap();
    out.report.check_rows(&rows).unwrap();
    let back = RunReport::from_json(&out.report.to_json()).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn files_land_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        controller: ControllerKind::RuleBased,
        cycle: "nycc-like".into(),
        out_dir: dir.path().join("nested"),
        label: Some("probe".into()),
        ..Default::default()
    };
    let out = iptm::harness::run(&cfg).unwrap();
    assert_eq!(out.report.trajectory_file.as_deref(), Some("probe.csv"));
    let json = std::fs::read_to_string(dir.path().join("nested/probe.json")).unwrap();
    assert_eq!(RunReport::from_json(&json).unwrap(), out.report);
    let file = std::fs::File::open(dir.path().join("nested/probe.csv")).unwrap();
    let rows = read_trajectory(std::io::BufReader::new(file)).unwrap();
    out.report.check_rows(&rows).unwrap();
}
