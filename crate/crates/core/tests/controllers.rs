mod common;

use common::enumerate_grid;
use iptm::controllers::{
    BaselineMpc, BaselineMpcConfig, Controller, MhMpc, MhMpcConfig, RuleBasedConfig, StepInput,
};
use iptm::cycle::{preview, DriveCycle, PreviewModel};
use iptm::harness::simulate;
use iptm::horizon::{self, HorizonParams};
use iptm::maps::power_demand;
use iptm::nlp::{solve, transcribe, OcpSpec, SolverOptions, StateBounds, Terminal};
use iptm::plant::PlantState;
use iptm::powertrain::{PredictionModel, VehicleParams};

/// Launch, cruise, brake, a short stop and a second hop.
fn toy_cycle(len: usize) -> DriveCycle {
    let speeds = (0..len)
        .map(|t| {
            let s = t % 60;
            match s {
                0..=2 => 0.0,
                3..=17 => (s - 2) as f64 * 0.9,
                18..=39 => 13.5,
                40..=51 => 13.5 - (s - 39) as f64 * 1.125,
                _ => 0.0,
            }
        })
        .collect();
    DriveCycle::new("toy", speeds).unwrap()
}

fn first_step(c: &mut dyn Controller, cycle: &DriveCycle, x0: PlantState) -> f64 {
    let (w, cs) = c.preview_window();
    let pm = PreviewModel {
        accurate_window: w,
        coarse_step: cs,
        ..Default::default()
    };
    let v = VehicleParams::default();
    let pv = preview(cycle, 0, &pm).unwrap();
    let demand = power_demand(cycle.speeds[0], cycle.accels()[0], &v.road_load);
    c.step(&StepInput {
        t: 0,
        t_end: cycle.len(),
        state: x0,
        demand,
        preview: &pv,
    })
    .unwrap()
    .p_trac
}

#[test]
fn all_fine_multi_horizon_is_single_rate_shrinking_mpc() {
    let v = VehicleParams::default();
    let cycle = toy_cycle(60);
    let x0 = PlantState::new(0.6, 70.0);
    let mut mh = MhMpc::new(
        MhMpcConfig {
            n_fine: 20,
            dt2: 1.0,
            ..Default::default()
        },
        v.clone(),
    )
    .unwrap();
    let u_mh = first_step(&mut mh, &cycle, x0);

    // one fine node per remaining second, same terminal interval
    let params = HorizonParams {
        n_fine: 60,
        dt1: 1.0,
        dt2: 1.0,
    };
    let h = horizon::build_from_speeds(0.0, 60.0, &params, &cycle.speeds, &cycle.accels(), &[], &v.road_load)
        .unwrap();
    let m = PredictionModel::new(&v);
    let nlp = transcribe(OcpSpec {
        nodes: h.nodes,
        initial_state: x0,
        model: &m,
        state_bounds: StateBounds::default(),
        terminal: Terminal::SocInterval {
            lo: 0.6 * 0.99,
            hi: 0.6 * 1.01,
        },
    });
    let s = solve(&nlp, None, &SolverOptions::default()).unwrap();
    assert!(
        (u_mh - s.p_bat_sequence[0]).abs() < 1.0,
        "multi-horizon {u_mh} W vs single-rate {} W",
        s.p_bat_sequence[0]
    );
}

#[test]
fn zero_lambda_baseline_matches_enumeration() {
    let v = VehicleParams::default();
    let cycle = toy_cycle(30);
    let cycle = DriveCycle::new("hop", cycle.speeds[8..13].to_vec()).unwrap();
    let x0 = PlantState::new(0.6, 70.0);
    let mut b = BaselineMpc::new(
        BaselineMpcConfig {
            horizon: 5,
            lambda: 0.0,
            ..Default::default()
        },
        v.clone(),
    )
    .unwrap();
    let u_b = first_step(&mut b, &cycle, x0);

    let params = HorizonParams {
        n_fine: 5,
        dt1: 1.0,
        dt2: 1.0,
    };
    let h = horizon::build_from_speeds(0.0, 5.0, &params, &cycle.speeds, &cycle.accels(), &[], &v.road_load)
        .unwrap();
    let m = PredictionModel::new(&v);
    let nlp = transcribe(OcpSpec {
        nodes: h.nodes,
        initial_state: x0,
        model: &m,
        state_bounds: StateBounds::default(),
        terminal: Terminal::SocPenalty {
            weight: 0.0,
            reference: 0.6,
        },
    });
    let s = solve(&nlp, None, &SolverOptions::default()).unwrap();
    let (best, seq) = enumerate_grid(&nlp, 21).unwrap();
    assert!(s.objective <= best + 1e-6, "solver {} vs grid {best}", s.objective);
    // without a terminal price every node runs electrically
    for (u, hi) in seq.iter().zip(nlp.upper()) {
        assert!((u - hi).abs() < 1e-9, "{seq:?}");
    }
    assert!((u_b - nlp.upper()[0]).abs() < 1e-6, "{u_b} vs {}", nlp.upper()[0]);
}

#[test]
fn closed_loop_mpc_sustains_charge() {
    let v = VehicleParams::default();
    let cycle = toy_cycle(240);
    let x0 = PlantState::new(0.6, 60.0);
    let run = |c: &mut dyn Controller| {
        simulate(&cycle, c, &v, x0, &PreviewModel::default(), &RuleBasedConfig::default())
            .unwrap()
            .final_state()
            .soc
    };
    let mut mh = MhMpc::new(MhMpcConfig::default(), v.clone()).unwrap();
    let end = run(&mut mh);
    assert!((end - 0.6).abs() <= 0.006 + 1e-4, "MH-MPC ended at {end}");

    let baseline = |lambda| {
        BaselineMpc::new(
            BaselineMpcConfig {
                lambda,
                ..Default::default()
            },
            v.clone(),
        )
        .unwrap()
    };
    let weighted = run(&mut baseline(100.0));
    let free = run(&mut baseline(0.0));
    assert!(
        (weighted - 0.6).abs() < (free - 0.6).abs(),
        "lambda 100 ended at {weighted}, lambda 0 at {free}"
    );
}
