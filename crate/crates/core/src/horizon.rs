//! Multi-rate decision grid: `N` fine nodes of `dt1` seconds from now, then
//! coarse nodes of `dt2` seconds until the end of the trip. The last coarse
//! node is trimmed so the nodes tile `[t_now, t_end]` exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::{demand_profile, Preview};
use crate::maps::{power_demand, RoadLoadParams};

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HorizonError {
    #[error("expected {expected_fine} fine and {expected_coarse} coarse speeds, got {fine} and {coarse}")]
    SizeMismatch {
        expected_fine: usize,
        expected_coarse: usize,
        fine: usize,
        coarse: usize,
    },
    #[error("end of trip reached at t = {t_now} s (trip ends at {t_end} s)")]
    EndOfTrip { t_now: f64, t_end: f64 },
    #[error("invalid horizon parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonNode {
    pub start_time: f64,
    pub duration: f64,
    pub speed: f64,
    pub accel: f64,
    /// Traction power demand over the node, W.
    pub power_demand: f64,
    pub segment: Segment,
}

impl HorizonNode {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonParams {
    /// Number of fine nodes.
    pub n_fine: usize,
    pub dt1: f64,
    pub dt2: f64,
}

impl HorizonParams {
    pub fn validate(&self) -> Result<(), HorizonError> {
        if self.n_fine < 1 {
            return Err(HorizonError::Invalid("N must be at least 1".into()));
        }
        if !(self.dt1 > 0.0 && self.dt2 >= self.dt1) {
            return Err(HorizonError::Invalid("need 0 < dt1 <= dt2".into()));
        }
        Ok(())
    }

    /// `(fine, coarse)` node counts for a horizon over `[t_now, t_end]`.
    pub fn node_counts(&self, t_now: f64, t_end: f64) -> (usize, usize) {
        let remaining = t_end - t_now;
        if remaining <= EPS {
            return (0, 0);
        }
        let whole_fine = ((remaining / self.dt1) + EPS).floor() as usize;
        let fine = self.n_fine.min(whole_fine.max(1));
        let rest = remaining - fine as f64 * self.dt1;
        let coarse = if rest <= EPS {
            0
        } else {
            ((rest / self.dt2) - EPS).ceil().max(1.0) as usize
        };
        (fine, coarse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub nodes: Vec<HorizonNode>,
    pub t_now: f64,
    pub t_end: f64,
    pub n_fine: usize,
    pub params: HorizonParams,
}

impl Horizon {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_coarse(&self) -> usize {
        self.nodes.len() - self.n_fine
    }

    pub fn total_duration(&self) -> f64 {
        self.nodes.iter().map(|n| n.duration).sum()
    }

    /// True when the remaining trip fits in the fine segment.
    pub fn is_all_fine(&self) -> bool {
        self.n_fine == self.nodes.len()
    }
}

/// Builds the horizon from explicit speed lists.
///
/// `fine_accels` must match `fine_speeds`; coarse accelerations follow from
/// forward differences of the block speeds.
pub fn build_from_speeds(
    t_now: f64,
    t_end: f64,
    params: &HorizonParams,
    fine_speeds: &[f64],
    fine_accels: &[f64],
    coarse_speeds: &[f64],
    rl: &RoadLoadParams,
) -> Result<Horizon, HorizonError> {
    params.validate()?;
    if !(t_now < t_end) {
        return Err(HorizonError::Invalid(format!(
            "t_now = {t_now} must precede t_end = {t_end}"
        )));
    }
    let (n_fine, n_coarse) = params.node_counts(t_now, t_end);
    if fine_speeds.len() != n_fine
        || fine_accels.len() != n_fine
        || coarse_speeds.len() != n_coarse
    {
        return Err(HorizonError::SizeMismatch {
            expected_fine: n_fine,
            expected_coarse: n_coarse,
            fine: fine_speeds.len(),
            coarse: coarse_speeds.len(),
        });
    }

    let mut nodes = Vec::with_capacity(n_fine + n_coarse);
    for (i, (&v, &a)) in fine_speeds.iter().zip(fine_accels).enumerate() {
        let start = t_now + i as f64 * params.dt1;
        nodes.push(HorizonNode {
            start_time: start,
            duration: params.dt1.min(t_end - start),
            speed: v,
            accel: a,
            power_demand: power_demand(v, a, rl),
            segment: Segment::Fine,
        });
    }
    let coarse_start = t_now + n_fine as f64 * params.dt1;
    let demands = demand_profile(coarse_speeds, params.dt2, rl);
    for (j, (&v, &p)) in coarse_speeds.iter().zip(&demands).enumerate() {
        let start = coarse_start + j as f64 * params.dt2;
        let duration = if j + 1 == n_coarse {
            t_end - start
        } else {
            params.dt2
        };
        let accel = if n_coarse >= 2 {
            let k = j.min(n_coarse - 2);
            (coarse_speeds[k + 1] - coarse_speeds[k]) / params.dt2
        } else {
            0.0
        };
        nodes.push(HorizonNode {
            start_time: start,
            duration,
            speed: v,
            accel,
            power_demand: p,
            segment: Segment::Coarse,
        });
    }
    Ok(Horizon {
        nodes,
        t_now,
        t_end,
        n_fine,
        params: *params,
    })
}

/// Builds the horizon at the preview's time from a cycle preview.
pub fn build(
    t_end: f64,
    params: &HorizonParams,
    preview: &Preview,
    rl: &RoadLoadParams,
) -> Result<Horizon, HorizonError> {
    build_from_speeds(
        preview.t as f64,
        t_end,
        params,
        &preview.fine_speeds,
        &preview.fine_accels,
        &preview.coarse_speeds,
        rl,
    )
}

/// Moves the horizon forward by one fine step and rebuilds it from a fresh preview.
pub fn advance(
    h: &Horizon,
    dt: f64,
    new_preview: &Preview,
    rl: &RoadLoadParams,
) -> Result<Horizon, HorizonError> {
    if (dt - h.params.dt1).abs() > EPS {
        return Err(HorizonError::Invalid(format!(
            "advance step {dt} differs from dt1 = {}",
            h.params.dt1
        )));
    }
    let t_next = h.t_now + dt;
    if t_next >= h.t_end - EPS {
        return Err(HorizonError::EndOfTrip {
            t_now: h.t_now,
            t_end: h.t_end,
        });
    }
    if (new_preview.t as f64 - t_next).abs() > EPS {
        return Err(HorizonError::Invalid(format!(
            "preview is for t = {} s, expected {t_next} s",
            new_preview.t
        )));
    }
    build(h.t_end, &h.params, new_preview, rl)
}
