//! Initial guess from a SOC price: each node independently minimizes
//! `cost - mu * delta_soc` over a control scan, with `mu` tuned so the
//! terminal condition is met.

use super::{Nlp, Terminal};
use crate::plant::{PlantError, PlantState};

const SCAN_POINTS: usize = 25;
const BISECTIONS: usize = 40;
const PRICE_RANGE: f64 = 20.0;

/// Best scanned control at node `k` from state `x` under price `mu`.
///
/// Candidates leaving the state boxes lose to any candidate that stays
/// inside; ties go to the smaller magnitude.
fn node_choice(nlp: &Nlp, k: usize, x: &PlantState, mu: f64) -> Result<f64, PlantError> {
    let b = nlp.spec().state_bounds;
    let node = &nlp.nodes()[k];
    let (lo, hi) = (nlp.lower()[k], nlp.upper()[k]);
    let mut best: Option<(bool, f64, f64)> = None;
    for i in 0..=SCAN_POINTS + 1 {
        let c = match i {
            0 => 0.0f64.clamp(lo, hi),
            _ => lo + (hi - lo) * (i - 1) as f64 / SCAN_POINTS as f64,
        };
        let e = nlp.spec().model.evaluate(node, x, c)?;
        let n = e.next;
        let outside = (b.soc_min - n.soc).max(n.soc - b.soc_max).max(0.0) * 100.0
            + (b.t_cl_min - n.t_cl).max(n.t_cl - b.t_cl_max).max(0.0);
        let feasible = outside == 0.0;
        let score = if feasible {
            e.cost - mu * (n.soc - x.soc)
        } else {
            outside
        };
        let better = match best {
            None => true,
            Some((bf, bs, bc)) => {
                (feasible && !bf)
                    || (feasible == bf && (score < bs || (score == bs && c.abs() < bc.abs())))
            }
        };
        if better {
            best = Some((feasible, score, c));
        }
    }
    Ok(best.expect("scan has candidates").2)
}

/// Greedy pass pricing nodes before `switch` at `mu_first` and the rest at
/// `mu_rest`. Node `switch` itself takes `theta` of the way from its
/// `mu_rest` choice towards its `mu_first` choice.
fn greedy_blend(
    nlp: &Nlp,
    mu_first: f64,
    mu_rest: f64,
    switch: usize,
    theta: f64,
) -> Result<(Vec<f64>, PlantState), PlantError> {
    let mut x = nlp.spec().initial_state;
    let mut u = Vec::with_capacity(nlp.n_vars());
    for k in 0..nlp.n_vars() {
        let c = if k < switch {
            node_choice(nlp, k, &x, mu_first)?
        } else if k == switch && theta > 0.0 {
            let a = node_choice(nlp, k, &x, mu_rest)?;
            let b = node_choice(nlp, k, &x, mu_first)?;
            a + theta * (b - a)
        } else {
            node_choice(nlp, k, &x, mu_rest)?
        };
        x = nlp.spec().model.evaluate(&nlp.nodes()[k], &x, c)?.next;
        u.push(c);
    }
    Ok((u, x))
}

fn greedy(nlp: &Nlp, mu: f64) -> Result<(Vec<f64>, PlantState), PlantError> {
    greedy_blend(nlp, mu, mu, 0, 0.0)
}

/// Terminal SOC as a function of price is non-decreasing in practice; the
/// bisection only relies on the sign at the bracket ends. Returns the final
/// bracket.
fn bisect<F>(mut lo: f64, mut hi: f64, mut above: F) -> Result<(f64, f64), PlantError>
where
    F: FnMut(f64) -> Result<bool, PlantError>,
{
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if above(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo, hi))
}

/// Terminal SOC jumps where many similar nodes switch mode at one price.
/// Pricing a prefix of the horizon at `mu_hit` (which reaches the target)
/// and the rest at `mu_miss` fills the gap; the node at the switch point is
/// interpolated.
fn blend_to_target(
    nlp: &Nlp,
    mu_miss: f64,
    mu_hit: f64,
    target: f64,
    rising: bool,
) -> Result<Vec<f64>, PlantError> {
    let reached = |soc: f64| if rising { soc >= target } else { soc <= target };
    let n = nlp.n_vars();
    let (full, end) = greedy_blend(nlp, mu_hit, mu_miss, n, 0.0)?;
    if !reached(end.soc) {
        return Ok(full);
    }
    // smallest prefix that reaches the target
    let (mut a, mut b) = (0usize, n);
    while b - a > 1 {
        let mid = (a + b) / 2;
        if reached(greedy_blend(nlp, mu_hit, mu_miss, mid, 0.0)?.1.soc) {
            b = mid;
        } else {
            a = mid;
        }
    }
    if b == 0 {
        return Ok(greedy_blend(nlp, mu_hit, mu_miss, 0, 0.0)?.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if reached(greedy_blend(nlp, mu_hit, mu_miss, b - 1, mid)?.1.soc) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(greedy_blend(nlp, mu_hit, mu_miss, b - 1, hi)?.0)
}

pub(super) fn price_seed(nlp: &Nlp) -> Result<Vec<f64>, PlantError> {
    if nlp.n_vars() == 0 {
        return Ok(Vec::new());
    }
    match nlp.spec().terminal {
        Terminal::None => Ok(greedy(nlp, 0.0)?.0),
        Terminal::SocInterval { lo, hi } => {
            let (u0, end) = greedy(nlp, 0.0)?;
            let target = 0.5 * (lo + hi);
            if end.soc < lo {
                let (a, b) = bisect(0.0, PRICE_RANGE, |m| Ok(greedy(nlp, m)?.1.soc >= target))?;
                blend_to_target(nlp, a, b, target, true)
            } else if end.soc > hi {
                let (a, b) = bisect(0.0, PRICE_RANGE, |m| Ok(greedy(nlp, -m)?.1.soc <= target))?;
                blend_to_target(nlp, -a, -b, target, false)
            } else {
                Ok(u0)
            }
        }
        Terminal::SocPenalty { weight, reference } => {
            // stationarity of the penalty: mu = 2 w (ref - soc_end(mu))
            let (_, mu) = bisect(-PRICE_RANGE, PRICE_RANGE, |m| {
                let end = greedy(nlp, m)?.1.soc;
                Ok(m - 2.0 * weight * (reference - end) >= 0.0)
            })?;
            Ok(greedy(nlp, mu)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::test_models::nodes;
    use crate::nlp::{transcribe, OcpSpec, StateBounds};
    use crate::powertrain::{PredictionModel, VehicleParams};

    #[test]
    fn interval_seed_lands_inside_the_band() {
        let v = VehicleParams::default();
        let m = PredictionModel::new(&v);
        let demands: Vec<f64> = (0..30).map(|i| 4_000.0 + 500.0 * (i % 7) as f64).collect();
        let nlp = transcribe(OcpSpec {
            nodes: nodes(&demands, 10.0, 12.0),
            initial_state: PlantState::new(0.6, 70.0),
            model: &m,
            state_bounds: StateBounds::default(),
            terminal: Terminal::SocInterval { lo: 0.594, hi: 0.606 },
        });
        let u = price_seed(&nlp).unwrap();
        let end = nlp.rollout(&u).unwrap().states[30].soc;
        assert!((0.594..=0.606).contains(&end), "{end}");
    }
}
