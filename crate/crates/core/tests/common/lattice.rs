use iptm::dp::{rollout_policy, solve_dp, DpGrid, DpModel};
use iptm::plant::PlantState;
use iptm::powertrain::VehicleParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SOC lattice where control `u` moves exactly `u` nodes, so the recursion
/// never interpolates. Stage costs come from the real corrected fuel map.
pub struct Lattice {
    vehicle: VehicleParams,
    soc: Vec<f64>,
    demands: Vec<f64>,
    /// Traction power per node of movement at each step, W. Varying it
    /// keeps the affine fuel line from making many sequences tie.
    unit: Vec<f64>,
    t_cl: f64,
}

impl Lattice {
    fn node(&self, x: &PlantState) -> usize {
        self.soc.iter().position(|&s| s == x.soc).expect("state on the lattice")
    }

    fn stage(&self, k: usize, u: f64) -> f64 {
        let p_eng = (self.demands[k] - u * self.unit[k]).max(0.0);
        self.vehicle.fuel_rate(p_eng, self.t_cl).unwrap()
    }
}

impl DpModel for Lattice {
    fn n_steps(&self) -> usize {
        self.demands.len()
    }

    fn controls(&self, _k: usize) -> Vec<f64> {
        vec![-1.0, 0.0, 1.0]
    }

    fn transition(&self, k: usize, x: &PlantState, u: f64) -> Option<(PlantState, f64)> {
        let j = self.node(x) as i64 - u as i64;
        if j < 0 || j >= self.soc.len() as i64 {
            return None;
        }
        Some((PlantState::new(self.soc[j as usize], self.t_cl), self.stage(k, u)))
    }
}

pub fn terminal(soc: f64, band: (f64, f64), penalty: f64) -> f64 {
    penalty * (band.0 - soc).max(soc - band.1).max(0.0)
}

/// Cheapest feasible control sequence by brute force, summed back to front
/// like the recursion.
pub fn enumerate(m: &Lattice, start: usize, band: (f64, f64), penalty: f64) -> Option<(f64, Vec<f64>)> {
    let n = m.n_steps();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let seq: Vec<f64> = (0..n).map(|k| (code / 3usize.pow(k as u32) % 3) as f64 - 1.0).collect();
        let mut x = PlantState::new(m.soc[start], m.t_cl);
        let mut stages = Vec::with_capacity(n);
        let mut ok = true;
        for (k, &u) in seq.iter().enumerate() {
            match m.transition(k, &x, u) {
                Some((y, c)) => {
                    stages.push(c);
                    x = y;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let total = stages.iter().rev().fold(terminal(x.soc, band, penalty), |acc, c| c + acc);
        let better = match &best {
            None => true,
            Some((b, bs)) => {
                total < *b || (total == *b && magnitude(&seq) < magnitude(bs))
            }
        };
        if better {
            best = Some((total, seq));
        }
    }
    best
}

/// Tie order of the recursion: step by step from the front, smaller
/// magnitude first, then the earlier control.
fn magnitude(seq: &[f64]) -> Vec<(u64, i64)> {
    seq.iter().map(|u| (u.abs() as u64, *u as i64)).collect()
}

pub fn lattice_case(rng: &mut ChaCha8Rng, n_steps: usize) -> (Lattice, DpGrid, f64, f64) {
    let soc = vec![0.5, 0.6, 0.7];
    let t_cl = rng.random_range(45.0..85.0);
    let m = Lattice {
        vehicle: VehicleParams::default(),
        soc: soc.clone(),
        demands: (0..n_steps).map(|_| rng.random_range(-5_000.0..30_000.0)).collect(),
        unit: (0..n_steps).map(|_| rng.random_range(2_000.0..15_000.0)).collect(),
        t_cl,
    };
    let grid = DpGrid {
        soc_points: soc,
        t_cl_points: vec![t_cl],
        n_control: 3,
        dt: 1.0,
    };
    let band = rng.random_range(0.01..0.2);
    let penalty = rng.random_range(1e-4..1e-1);
    (m, grid, band, penalty)
}

/// DP value and rollout against brute force from every lattice node.
pub fn compare_with_enumeration(m: &Lattice, grid: &DpGrid, band: f64, penalty: f64) -> Result<(), String> {
    let soc_init = 0.6;
    let policy = solve_dp(m, grid, soc_init, band, penalty, String::new());
    let b = (soc_init * (1.0 - band), soc_init * (1.0 + band));
    for start in 0..3 {
        let x0 = PlantState::new(m.soc[start], m.t_cl);
        let (best, seq) = enumerate(m, start, b, penalty).expect("staying put is always feasible");
        let v0 = policy.value(0, &x0);
        if v0 != best {
            return Err(format!("start {start}: value {v0} vs enumeration {best}"));
        }
        let r = rollout_policy(&policy, m, x0);
        if r.controls != seq {
            return Err(format!("start {start}: rollout {:?} vs enumeration {seq:?}", r.controls));
        }
        let total = r.fuel + terminal(r.states.last().unwrap().soc, b, penalty);
        if (total - best).abs() > 1e-15 * best.abs().max(1.0) {
            return Err(format!("start {start}: rollout cost {total} vs {best}"));
        }
    }
    Ok(())
}

/// The fixed three-step instance.
pub fn three_step_toy() -> (Lattice, DpGrid, f64, f64) {
    lattice_case(&mut ChaCha8Rng::seed_from_u64(7), 3)
}
