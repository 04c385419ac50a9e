//! Greedy informative waypoint selection.
//!
//! At step `n` the UAV scores a ring of candidate positions at radius
//! `d_max` (plus holding position) by how much a measurement taken there
//! would shrink the estimated CRB, and discards any candidate from which the
//! terminal can no longer be reached in the remaining steps.

use crate::error::Result;
use crate::fim::{improvement_matrix, InfoState, StepContribution};
use crate::model::{ToaNoiseModel, Vec2, Vec3};

pub const DEFAULT_HEADINGS: usize = 8;

/// Distance from which the terminal can still be reached at step `n`.
pub fn reach_threshold(n: usize, mission_steps: usize, d_max: f64) -> f64 {
    d_max * mission_steps.saturating_sub(n) as f64
}

#[derive(Debug, Clone)]
pub struct PlannerState {
    /// Current 1-based step.
    pub step: usize,
    pub position: Vec3,
    pub terminal: Vec3,
    pub mission_steps: usize,
    pub d_max: f64,
    /// Number of headings on the candidate ring.
    pub headings: usize,
    /// FIM of the measurements collected so far, built at the estimates.
    pub info: InfoState,
    pub user_estimates: Vec<Vec2>,
    pub noise: ToaNoiseModel,
}

impl PlannerState {
    /// Ring candidates in heading order (heading 0 = +x, counter-clockwise),
    /// followed by the hold position.
    pub fn candidates(&self) -> Vec<Vec3> {
        let m = self.headings;
        let mut out: Vec<Vec3> = (0..m)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
                Vec3::new(
                    self.position.x + self.d_max * a.cos(),
                    self.position.y + self.d_max * a.sin(),
                    self.position.z,
                )
            })
            .collect();
        out.push(self.position);
        out
    }

    fn feasible(&self, candidate: Vec3) -> bool {
        let reach = reach_threshold(self.step + 1, self.mission_steps, self.d_max);
        candidate.distance(self.terminal) <= reach * (1.0 + 1e-12) + 1e-12
    }
}

/// Trace of the CRB improvement of a measurement at `candidate`, or
/// `-inf` when the terminal would become unreachable.
pub fn greedy_cost(candidate: Vec3, st: &PlannerState) -> f64 {
    if !st.feasible(candidate) {
        return f64::NEG_INFINITY;
    }
    match candidate_gain(candidate, st) {
        Ok(v) => v,
        Err(_) => f64::NEG_INFINITY,
    }
}

fn candidate_gain(candidate: Vec3, st: &PlannerState) -> Result<f64> {
    let blocks = st
        .user_estimates
        .iter()
        .map(|&u| {
            let d = candidate.distance(u.lift());
            if d == 0.0 {
                // UAV sitting on the user: no horizontal information
                return Ok(nalgebra::Matrix2::zeros());
            }
            let sigma = crate::channel::sigma_tau_of_distance(d, &st.noise);
            crate::fim::toa_info_contribution(candidate, u, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let r = improvement_matrix(&st.info, &StepContribution { blocks })?;
    Ok(r.trace())
}

/// Next UAV position. Falls back to a straight move towards the terminal
/// when every candidate is infeasible.
pub fn next_waypoint(st: &PlannerState) -> Vec3 {
    if st.step + 1 >= st.mission_steps {
        return st.terminal;
    }
    let mut best: Option<(Vec3, f64)> = None;
    for c in st.candidates() {
        let cost = greedy_cost(c, st);
        if cost == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|(_, b)| cost > b) {
            best = Some((c, cost));
        }
    }
    match best {
        Some((c, _)) => c,
        None => {
            let remaining = (st.mission_steps - st.step) as f64;
            let to_goal = st.terminal.to_na() - st.position.to_na();
            Vec3::from_na(&(st.position.to_na() + to_goal / remaining))
        }
    }
}
