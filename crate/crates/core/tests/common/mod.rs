#![allow(dead_code)]

pub mod lattice;

use iptm::horizon::{HorizonNode, Segment};
use iptm::nlp::Nlp;
use iptm::plant::PlantState;

pub fn fine_nodes(demands: &[f64], dt: f64, speed: f64) -> Vec<HorizonNode> {
    demands
        .iter()
        .enumerate()
        .map(|(i, &d)| HorizonNode {
            start_time: i as f64 * dt,
            duration: dt,
            speed,
            accel: 0.0,
            power_demand: d,
            segment: Segment::Fine,
        })
        .collect()
}

/// Exhaustive search over `points` evenly spaced controls per node.
/// Returns the best feasible objective and its sequence.
pub fn enumerate_grid(nlp: &Nlp, points: usize) -> Option<(f64, Vec<f64>)> {
    let n = nlp.n_vars();
    let grids: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let (l, h) = (nlp.lower()[k], nlp.upper()[k]);
            (0..points)
                .map(|i| l + (h - l) * i as f64 / (points - 1) as f64)
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut u = vec![0.0; n];
    fn dfs(
        nlp: &Nlp,
        grids: &[Vec<f64>],
        k: usize,
        x: PlantState,
        u: &mut Vec<f64>,
        best: &mut Option<(f64, Vec<f64>)>,
    ) {
        let n = grids.len();
        if k == n {
            // objective and constraints from the full rollout
            let r = nlp.rollout(u).expect("bounded controls");
            if nlp.max_violation(&r) > 0.0 {
                return;
            }
            if best.as_ref().is_none_or(|b| r.objective < b.0) {
                *best = Some((r.objective, u.clone()));
            }
            return;
        }
        let b = nlp.spec().state_bounds;
        for &c in &grids[k] {
            let e = nlp.spec().model.evaluate(&nlp.nodes()[k], &x, c).expect("bounded");
            let s = e.next;
            if s.soc < b.soc_min || s.soc > b.soc_max || s.t_cl < b.t_cl_min || s.t_cl > b.t_cl_max {
                continue;
            }
            u[k] = c;
            dfs(nlp, grids, k + 1, s, u, best);
        }
    }
    dfs(nlp, &grids, 0, nlp.spec().initial_state, &mut u, &mut best);
    best
}
