//! Tabular softmax parameterization of per-agent return distributions.
//!
//! Logits are stored agent-major so each agent's block is one contiguous
//! slice; recovered probability vectors are always valid distributions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bellman::{ActionId, StateId};
use crate::dist::{expectation_slice, CategoricalReturn, SupportGrid};
use crate::error::{BdrlError, Result};

/// Probabilities below this floor are clipped before the log when a
/// distribution is written back into logits.
const LOG_FLOOR: f64 = 1e-12;
/// Out-of-band logit for the disjoint-support initialization; exp underflows
/// to exactly zero against the in-band logits, producing genuinely disjoint
/// supports while staying within gradient reach.
const BAND_SUPPRESSED_LOGIT: f64 = -760.0;

/// How agent logits start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitInit {
    /// All-zero logits: every distribution starts uniform.
    Uniform,
    /// Each agent's mass confined to a narrow atom band; bands alternate
    /// between a low and a high region so agents start with disjoint
    /// supports.
    DisjointBands,
}

impl Default for LogitInit {
    fn default() -> Self {
        LogitInit::Uniform
    }
}

/// Per-(agent, state, action) logits over the atom grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    grid: Arc<SupportGrid>,
    n_agents: usize,
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl ParameterTable {
    pub fn new(grid: Arc<SupportGrid>, n_agents: usize, n_states: usize, n_actions: usize) -> Self {
        let len = n_agents * n_states * n_actions * grid.atom_count();
        ParameterTable {
            grid,
            n_agents,
            n_states,
            n_actions,
            logits: vec![0.0; len],
        }
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn atom_count(&self) -> usize {
        self.grid.atom_count()
    }

    /// Length of one agent's contiguous logit block.
    pub fn agent_block_len(&self) -> usize {
        self.n_states * self.n_actions * self.grid.atom_count()
    }

    fn offset(&self, agent: usize, state: StateId, action: ActionId) -> usize {
        debug_assert!(agent < self.n_agents && state < self.n_states && action < self.n_actions);
        ((agent * self.n_states + state) * self.n_actions + action) * self.grid.atom_count()
    }

    pub fn logits(&self, agent: usize, state: StateId, action: ActionId) -> &[f64] {
        let o = self.offset(agent, state, action);
        &self.logits[o..o + self.grid.atom_count()]
    }

    pub fn logits_mut(&mut self, agent: usize, state: StateId, action: ActionId) -> &mut [f64] {
        let o = self.offset(agent, state, action);
        let d = self.grid.atom_count();
        &mut self.logits[o..o + d]
    }

    /// Numerically stable softmax of the stored logits.
    pub fn probs_into(&self, agent: usize, state: StateId, action: ActionId, out: &mut [f64]) {
        softmax_into(self.logits(agent, state, action), out);
    }

    pub fn probs(&self, agent: usize, state: StateId, action: ActionId) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.atom_count()];
        self.probs_into(agent, state, action, &mut out);
        out
    }

    pub fn distribution(&self, agent: usize, state: StateId, action: ActionId) -> CategoricalReturn {
        CategoricalReturn::new(Arc::clone(&self.grid), self.probs(agent, state, action))
            .expect("softmax output is always a valid distribution")
    }

    pub fn expectation(&self, agent: usize, state: StateId, action: ActionId) -> f64 {
        let probs = self.probs(agent, state, action);
        expectation_slice(&probs, &self.grid)
    }

    /// Expected return for every action at `state`.
    pub fn action_values(&self, agent: usize, state: StateId) -> Vec<f64> {
        (0..self.n_actions)
            .map(|a| self.expectation(agent, state, a))
            .collect()
    }

    /// Greedy action per state (lowest index on ties).
    pub fn greedy_policy(&self, agent: usize) -> Vec<ActionId> {
        (0..self.n_states)
            .map(|s| crate::bellman::argmax_lowest_index(&self.action_values(agent, s)))
            .collect()
    }

    /// Overwrites the logits at one cell so the recovered distribution equals
    /// `probs` up to the `LOG_FLOOR` clip.
    pub fn set_distribution(
        &mut self,
        agent: usize,
        state: StateId,
        action: ActionId,
        probs: &[f64],
    ) -> Result<()> {
        if probs.len() != self.grid.atom_count() {
            return Err(BdrlError::InvalidDistribution(format!(
                "expected {} probabilities, got {}",
                self.grid.atom_count(),
                probs.len()
            )));
        }
        let logits = self.logits_mut(agent, state, action);
        for (l, &p) in logits.iter_mut().zip(probs) {
            *l = p.max(LOG_FLOOR).ln();
        }
        Ok(())
    }

    pub fn apply_init(&mut self, init: LogitInit) {
        match init {
            LogitInit::Uniform => self.logits.fill(0.0),
            LogitInit::DisjointBands => {
                let d = self.grid.atom_count();
                let width = (d / 10).max(2);
                let low_start = (d * 3) / 10;
                let high_start = (d * 11) / 20;
                for agent in 0..self.n_agents {
                    let start = if agent % 2 == 0 { low_start } else { high_start };
                    let band = start..(start + width).min(d);
                    for state in 0..self.n_states {
                        for action in 0..self.n_actions {
                            let logits = self.logits_mut(agent, state, action);
                            for (atom, l) in logits.iter_mut().enumerate() {
                                *l = if band.contains(&atom) {
                                    0.0
                                } else {
                                    BAND_SUPPRESSED_LOGIT
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Mutable per-agent blocks for group-parallel training.
    pub fn agent_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let len = self.agent_block_len();
        self.logits.chunks_mut(len).collect()
    }

    pub fn agent_block(&self, agent: usize) -> &[f64] {
        let len = self.agent_block_len();
        &self.logits[agent * len..(agent + 1) * len]
    }

    pub fn agent_block_mut(&mut self, agent: usize) -> &mut [f64] {
        let len = self.agent_block_len();
        &mut self.logits[agent * len..(agent + 1) * len]
    }

    /// Builds a table for a subset of agents, preserving their relative order.
    pub fn extract_agents(&self, agents: &[usize]) -> ParameterTable {
        let len = self.agent_block_len();
        let mut logits = Vec::with_capacity(agents.len() * len);
        for &a in agents {
            logits.extend_from_slice(self.agent_block(a));
        }
        ParameterTable {
            grid: Arc::clone(&self.grid),
            n_agents: agents.len(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            logits,
        }
    }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Frozen snapshot of one agent's distributions used as the group target.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReference {
    pub group: usize,
    pub agent: usize,
    grid: Arc<SupportGrid>,
    n_states: usize,
    n_actions: usize,
    /// `[state][action][atom]` probabilities, flattened.
    probs: Vec<f64>,
}

impl GroupReference {
    /// Snapshots `agent`'s current distributions from the table.
    pub fn snapshot(table: &ParameterTable, group: usize, agent: usize) -> GroupReference {
        let d = table.atom_count();
        let mut probs = vec![0.0; table.n_states() * table.n_actions() * d];
        for s in 0..table.n_states() {
            for a in 0..table.n_actions() {
                let o = (s * table.n_actions() + a) * d;
                table.probs_into(agent, s, a, &mut probs[o..o + d]);
            }
        }
        GroupReference {
            group,
            agent,
            grid: Arc::clone(table.grid()),
            n_states: table.n_states(),
            n_actions: table.n_actions(),
            probs,
        }
    }

    pub fn probs(&self, state: StateId, action: ActionId) -> &[f64] {
        let d = self.grid.atom_count();
        let o = (state * self.n_actions + action) * d;
        &self.probs[o..o + d]
    }

    pub fn distribution(&self, state: StateId, action: ActionId) -> CategoricalReturn {
        CategoricalReturn::new(Arc::clone(&self.grid), self.probs(state, action).to_vec())
            .expect("reference snapshots are valid distributions")
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    /// Bitwise equality of the stored probabilities; used to verify the
    /// reference was never touched by training.
    pub fn bit_identical(&self, other: &GroupReference) -> bool {
        self.group == other.group
            && self.agent == other.agent
            && self.probs.len() == other.probs.len()
            && self
                .probs
                .iter()
                .zip(&other.probs)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_table() -> ParameterTable {
        let grid = SupportGrid::shared(0.0, 4.0, 5).unwrap();
        ParameterTable::new(grid, 2, 3, 2)
    }

    #[test]
    fn zero_logits_give_uniform_distributions() {
        let t = small_table();
        let p = t.probs(1, 2, 0);
        for v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!((t.expectation(0, 0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn set_distribution_round_trips() {
        let mut t = small_table();
        let target = [0.5, 0.25, 0.125, 0.0625, 0.0625];
        t.set_distribution(0, 1, 1, &target).unwrap();
        let got = t.probs(0, 1, 1);
        for (a, b) in got.iter().zip(&target) {
            assert!((a - b).abs() < 1e-11);
        }
        assert!(t.set_distribution(0, 1, 1, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn disjoint_band_init_underflows_to_exact_zeros() {
        let grid = SupportGrid::shared(0.0, 34.0, 51).unwrap();
        let mut t = ParameterTable::new(grid, 2, 1, 1);
        t.apply_init(LogitInit::DisjointBands);
        let p0 = t.probs(0, 0, 0);
        let p1 = t.probs(1, 0, 0);
        let support0: Vec<usize> = (0..51).filter(|&d| p0[d] > 0.0).collect();
        let support1: Vec<usize> = (0..51).filter(|&d| p1[d] > 0.0).collect();
        assert!(!support0.is_empty() && !support1.is_empty());
        assert!(support0.iter().all(|d| !support1.contains(d)));
        let sum0: f64 = p0.iter().sum();
        assert!((sum0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extract_preserves_blocks() {
        let mut t = small_table();
        t.logits_mut(1, 0, 0)[3] = 0.7;
        let sub = t.extract_agents(&[1]);
        assert_eq!(sub.n_agents(), 1);
        assert_eq!(sub.logits(0, 0, 0)[3], 0.7);
    }

    #[test]
    fn reference_snapshot_is_frozen_copy() {
        let mut t = small_table();
        t.logits_mut(0, 0, 0)[0] = 1.5;
        let r1 = GroupReference::snapshot(&t, 0, 0);
        let r2 = GroupReference::snapshot(&t, 0, 0);
        assert!(r1.bit_identical(&r2));
        t.logits_mut(0, 0, 0)[0] = -1.5;
        let r3 = GroupReference::snapshot(&t, 0, 0);
        assert!(!r1.bit_identical(&r3));
    }
}
