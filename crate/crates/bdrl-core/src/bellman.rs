//! One-step distributional Bellman targets on a fixed atom grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{CategoricalReturn, SupportGrid};
use crate::error::{BdrlError, Result};

pub type StateId = usize;
pub type ActionId = usize;

/// A single sampled environment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateId,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: StateId,
}

/// Target probability masses `m_d` produced by the categorical projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanTarget {
    grid: Arc<SupportGrid>,
    m: Vec<f64>,
}

impl BellmanTarget {
    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.m
    }

    pub fn into_return(self) -> Result<CategoricalReturn> {
        CategoricalReturn::new(self.grid, self.m)
    }
}

/// Relocates each source atom's mass to `clamp(r + gamma * z_d)` and splits it
/// linearly between the two bracketing grid atoms. Mass is conserved exactly
/// up to floating-point summation.
pub fn project_target(next_z: &CategoricalReturn, reward: f64, gamma: f64) -> Result<BellmanTarget> {
    let grid = Arc::clone(next_z.grid());
    let mut m = vec![0.0; grid.atom_count()];
    project_target_into(next_z.probs(), reward, gamma, &grid, &mut m)?;
    Ok(BellmanTarget { grid, m })
}

/// Slice-level projection kernel shared with the training hot path.
pub(crate) fn project_target_into(
    next_probs: &[f64],
    reward: f64,
    gamma: f64,
    grid: &SupportGrid,
    out: &mut [f64],
) -> Result<()> {
    if !reward.is_finite() {
        return Err(BdrlError::NonFinite("reward".into()));
    }
    if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
        return Err(BdrlError::invalid_config(
            "gamma",
            format!("must lie in (0, 1], got {gamma}"),
        ));
    }
    let d_count = grid.atom_count();
    debug_assert_eq!(next_probs.len(), d_count);
    debug_assert_eq!(out.len(), d_count);
    out.fill(0.0);
    let dz = grid.delta_z();
    let top = (d_count - 1) as f64;
    for (d, &p) in next_probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let target = (reward + gamma * grid.atom(d)).clamp(grid.z_min(), grid.z_max());
        let pos = ((target - grid.z_min()) / dz).clamp(0.0, top);
        let lo = pos.floor();
        let lo_idx = lo as usize;
        let frac = pos - lo;
        if frac == 0.0 {
            out[lo_idx] += p;
        } else {
            out[lo_idx] += p * (1.0 - frac);
            out[lo_idx + 1] += p * frac;
        }
    }
    Ok(())
}

/// Index of the action with maximal expected return; ties go to the lowest
/// action index.
pub fn greedy_action(returns_for_state: &[CategoricalReturn]) -> Result<ActionId> {
    if returns_for_state.is_empty() {
        return Err(BdrlError::EmptyInput("greedy_action over no actions".into()));
    }
    let mut best = 0;
    let mut best_value = returns_for_state[0].expectation();
    for (a, z) in returns_for_state.iter().enumerate().skip(1) {
        let value = z.expectation();
        if value > best_value {
            best = a;
            best_value = value;
        }
    }
    Ok(best)
}

/// Same tie-break over raw expected values.
pub(crate) fn argmax_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
