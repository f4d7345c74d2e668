//! Boosted training on the tabular softmax parameterization: baseline
//! optimality-only training, group reference selection, worst-pair selection,
//! the composite cross-entropy + divergence loss with exact gradients, the
//! post-update projection hook, and the Q-learning baseline.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{argmax_lowest_index, project_target_into, ActionId, StateId, Transition};
use crate::diagnostics::{ConvergenceTrace, TraceEntry};
use crate::dist::{expectation_slice, w2_slice};
use crate::error::{BdrlError, Result};
use crate::projection::{
    solve_projection, ProjectionBranch, ProjectionConfig, ProjectionEvent,
};
use crate::rng::{stream_rng, StreamDomain};
use crate::table::{GroupReference, ParameterTable};

/// Divergence saturation: value at least this large with a vanishing gradient.
const SATURATION_VALUE_MIN: f64 = 0.6;
const SATURATION_GRAD_MAX: f64 = 1e-8;

/// Which discrepancy penalizes the worst pair's distribution gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergencePenalty {
    W2,
    Kl,
    Js,
}

impl Default for DivergencePenalty {
    fn default() -> Self {
        DivergencePenalty::W2
    }
}

/// All training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub exploration_rate: f64,
    pub trajectories_per_agent: usize,
    pub projection: ProjectionConfig,
    pub divergence_penalty: DivergencePenalty,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.1,
            gamma: 0.97,
            epochs: 2000,
            minibatch_size: 256,
            learning_rate: 0.05,
            exploration_rate: 0.1,
            trajectories_per_agent: 42,
            projection: ProjectionConfig::default(),
            divergence_penalty: DivergencePenalty::W2,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(BdrlError::invalid_config(
                "training.lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(BdrlError::invalid_config(
                "training.gamma",
                format!("must lie in (0, 1), got {}", self.gamma),
            ));
        }
        if self.epochs == 0 {
            return Err(BdrlError::invalid_config("training.epochs", "must be >= 1"));
        }
        if self.minibatch_size == 0 {
            return Err(BdrlError::invalid_config(
                "training.minibatch_size",
                "must be >= 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(BdrlError::invalid_config(
                "training.learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if !(0.0..=1.0).contains(&self.exploration_rate) {
            return Err(BdrlError::invalid_config(
                "training.exploration_rate",
                format!("must lie in [0, 1], got {}", self.exploration_rate),
            ));
        }
        if self.trajectories_per_agent == 0 {
            return Err(BdrlError::invalid_config(
                "training.trajectories_per_agent",
                "must be >= 1",
            ));
        }
        self.projection.validate()
    }
}

/// Summed Bellman targets for one unique `(state, action)` cell of a
/// minibatch; each sampled occurrence contributes one unit-mass target.
#[derive(Debug, Clone)]
pub struct PairBatchEntry {
    pub state: StateId,
    pub action: ActionId,
    pub count: usize,
    pub summed_target_i: Vec<f64>,
    pub summed_target_j: Vec<f64>,
}

/// Minibatch targets for the selected pair, frozen before the gradient step.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub entries: Vec<PairBatchEntry>,
}

/// Loss value split into its accuracy and penalty parts.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub accuracy: f64,
    pub penalty: f64,
}

impl LossBreakdown {
    pub fn total(&self, lambda: f64) -> f64 {
        self.accuracy + lambda * self.penalty
    }
}

/// Pathology flags raised while applying the penalty gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct PenaltyStats {
    pub nonfinite: bool,
    pub saturated: bool,
}

/// One JSONL record per trained epoch per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLogRecord {
    pub epoch: usize,
    pub group: usize,
    pub loss_accuracy: f64,
    pub loss_penalty: f64,
    /// Global agent ids of the worst pair; absent for singleton groups.
    pub pair: Option<(usize, usize)>,
    /// Worst-pair discrepancy at selection time (mean w2 per sampled
    /// occurrence over the minibatch).
    pub max_pair_w2: f64,
    pub penalty_nonfinite: bool,
    pub penalty_saturated: bool,
}

/// Everything `train_boosted` produces besides the updated table.
#[derive(Debug, Clone, Default)]
pub struct BoostedOutput {
    pub training_log: Vec<TrainingLogRecord>,
    pub projection_events: Vec<ProjectionEvent>,
    pub trace: ConvergenceTrace,
    pub penalty_nonfinite_events: u64,
    pub penalty_saturated_events: u64,
}

// --- divergence values and logit-space gradients --------------------------

fn divergence_value(pa: &[f64], pb: &[f64], delta_z: f64, kind: DivergencePenalty) -> f64 {
    match kind {
        DivergencePenalty::W2 => crate::dist::w2_slice(pa, pb, delta_z),
        DivergencePenalty::Kl => crate::dist::kl_slice(pa, pb),
        DivergencePenalty::Js => crate::dist::js_slice(pa, pb),
    }
}

/// Chains a gradient over probabilities through the softmax. Entries with
/// zero probability contribute nothing (their limit under the softmax chain
/// is zero even when the raw probability-gradient diverges).
fn chain_softmax(probs: &[f64], grad_p: &[f64], out: &mut [f64]) {
    let mut inner = 0.0;
    for (p, g) in probs.iter().zip(grad_p) {
        if *p > 0.0 {
            inner += p * g;
        }
    }
    for ((o, p), g) in out.iter_mut().zip(probs).zip(grad_p) {
        *o = if *p > 0.0 { p * (g - inner) } else { 0.0 };
    }
}

/// Computes logit-space gradients of the divergence at one cell. Returns the
/// divergence value; gradients are written into `out_i` / `out_j` (zeroed on
/// the non-finite path).
fn divergence_logit_grad(
    pa: &[f64],
    pb: &[f64],
    delta_z: f64,
    kind: DivergencePenalty,
    out_i: &mut [f64],
    out_j: &mut [f64],
) -> f64 {
    let d = pa.len();
    let mut gp_i = vec![0.0; d];
    let mut gp_j = vec![0.0; d];
    let value = match kind {
        DivergencePenalty::W2 => {
            let w2 = w2_slice(pa, pb, delta_z);
            if w2 > 0.0 {
                // Suffix sums of CDF differences over the truncated index range.
                let mut cdf_diff = vec![0.0; d - 1];
                let mut cum = 0.0;
                for k in 0..d - 1 {
                    cum += pa[k] - pb[k];
                    cdf_diff[k] = cum;
                }
                let mut suffix = 0.0;
                let mut suffixes = vec![0.0; d];
                for k in (0..d - 1).rev() {
                    suffix += cdf_diff[k];
                    suffixes[k] = suffix;
                }
                for k in 0..d {
                    gp_i[k] = delta_z * suffixes[k] / w2;
                    gp_j[k] = -gp_i[k];
                }
            }
            w2
        }
        DivergencePenalty::Kl => {
            let v = crate::dist::kl_slice(pa, pb);
            if v.is_finite() {
                for k in 0..d {
                    if pa[k] > 0.0 {
                        // Log difference and a capped ratio keep subnormal
                        // probabilities from overflowing to infinity.
                        gp_i[k] = pa[k].ln() - pb[k].ln() + 1.0;
                        gp_j[k] = -(pa[k] / pb[k]).min(1e300);
                    }
                }
            }
            v
        }
        DivergencePenalty::Js => {
            let v = crate::dist::js_slice(pa, pb);
            for k in 0..d {
                let m = 0.5 * (pa[k] + pb[k]);
                if pa[k] > 0.0 {
                    gp_i[k] = if pb[k] == 0.0 {
                        0.5 * std::f64::consts::LN_2
                    } else {
                        0.5 * (pa[k].ln() - m.ln())
                    };
                }
                if pb[k] > 0.0 {
                    gp_j[k] = if pa[k] == 0.0 {
                        0.5 * std::f64::consts::LN_2
                    } else {
                        0.5 * (pb[k].ln() - m.ln())
                    };
                }
            }
            v
        }
    };
    if value.is_finite() {
        chain_softmax(pa, &gp_i, out_i);
        chain_softmax(pb, &gp_j, out_j);
    } else {
        out_i.fill(0.0);
        out_j.fill(0.0);
    }
    value
}

/// Composite loss over a frozen-target pair batch: summed cross-entropy of
/// both pair agents plus `lambda` times the per-occurrence divergence.
pub fn composite_loss(
    table: &ParameterTable,
    batch: &PairBatch,
    pair: (usize, usize),
    lambda: f64,
    divergence: DivergencePenalty,
) -> LossBreakdown {
    let d = table.atom_count();
    let dz = table.grid().delta_z();
    let mut p_i = vec![0.0; d];
    let mut p_j = vec![0.0; d];
    let mut accuracy = 0.0;
    let mut penalty = 0.0;
    for e in &batch.entries {
        table.probs_into(pair.0, e.state, e.action, &mut p_i);
        table.probs_into(pair.1, e.state, e.action, &mut p_j);
        for k in 0..d {
            if e.summed_target_i[k] > 0.0 {
                accuracy -= e.summed_target_i[k] * p_i[k].ln();
            }
            if e.summed_target_j[k] > 0.0 {
                accuracy -= e.summed_target_j[k] * p_j[k].ln();
            }
        }
        penalty += e.count as f64 * divergence_value(&p_i, &p_j, dz, divergence);
    }
    let _ = lambda;
    LossBreakdown { accuracy, penalty }
}

/// One gradient-descent step of the composite loss on the pair's logits.
/// Targets are held fixed; the cross-entropy gradient through the softmax is
/// `count * p - summed_target` per cell.
pub fn pair_gradient_step(
    table: &mut ParameterTable,
    batch: &PairBatch,
    pair: (usize, usize),
    lambda: f64,
    divergence: DivergencePenalty,
    learning_rate: f64,
) -> PenaltyStats {
    let d = table.atom_count();
    let dz = table.grid().delta_z();
    let mut p_i = vec![0.0; d];
    let mut p_j = vec![0.0; d];
    let mut pen_i = vec![0.0; d];
    let mut pen_j = vec![0.0; d];
    let mut stats = PenaltyStats::default();
    for e in &batch.entries {
        table.probs_into(pair.0, e.state, e.action, &mut p_i);
        table.probs_into(pair.1, e.state, e.action, &mut p_j);
        let count = e.count as f64;
        let value = divergence_logit_grad(&p_i, &p_j, dz, divergence, &mut pen_i, &mut pen_j);
        if !value.is_finite() {
            stats.nonfinite = true;
        } else {
            let norm = pen_i
                .iter()
                .chain(pen_j.iter())
                .fold(0.0f64, |m, g| m.max(g.abs()));
            if value >= SATURATION_VALUE_MIN && norm < SATURATION_GRAD_MAX {
                stats.saturated = true;
            }
        }
        {
            let logits_i = table.logits_mut(pair.0, e.state, e.action);
            for k in 0..d {
                let grad = count * p_i[k] - e.summed_target_i[k] + lambda * count * pen_i[k];
                logits_i[k] -= learning_rate * grad;
            }
        }
        {
            let logits_j = table.logits_mut(pair.1, e.state, e.action);
            for k in 0..d {
                let grad = count * p_j[k] - e.summed_target_j[k] + lambda * count * pen_j[k];
                logits_j[k] -= learning_rate * grad;
            }
        }
    }
    stats
}

// --- target construction ---------------------------------------------------

/// Greedy action per state for one agent, from current expectations.
fn greedy_actions(table: &ParameterTable, agent: usize) -> Vec<ActionId> {
    let d = table.atom_count();
    let mut probs = vec![0.0; d];
    (0..table.n_states())
        .map(|s| {
            let values: Vec<f64> = (0..table.n_actions())
                .map(|a| {
                    table.probs_into(agent, s, a, &mut probs);
                    expectation_slice(&probs, table.grid())
                })
                .collect();
            argmax_lowest_index(&values)
        })
        .collect()
}

/// Accumulates the projected Bellman target of `transition` for `agent` into
/// `acc`, evaluating the next state under the agent's current greedy policy.
fn add_target(
    table: &ParameterTable,
    agent: usize,
    policy: &[ActionId],
    transition: &Transition,
    gamma: f64,
    scratch_probs: &mut [f64],
    scratch_target: &mut [f64],
    acc: &mut [f64],
) -> Result<()> {
    let next_action = policy[transition.next_state];
    table.probs_into(agent, transition.next_state, next_action, scratch_probs);
    project_target_into(
        scratch_probs,
        transition.reward,
        gamma,
        table.grid(),
        scratch_target,
    )?;
    for (a, t) in acc.iter_mut().zip(scratch_target.iter()) {
        *a += t;
    }
    Ok(())
}

/// Builds frozen pair targets for a sampled minibatch of transitions.
pub fn build_pair_batch(
    table: &ParameterTable,
    pair: (usize, usize),
    minibatch: &[Transition],
    gamma: f64,
) -> Result<PairBatch> {
    let d = table.atom_count();
    let policy_i = greedy_actions(table, pair.0);
    let policy_j = greedy_actions(table, pair.1);
    let mut probs = vec![0.0; d];
    let mut target = vec![0.0; d];
    let mut entries: BTreeMap<(StateId, ActionId), PairBatchEntry> = BTreeMap::new();
    for t in minibatch {
        let e = entries
            .entry((t.state, t.action))
            .or_insert_with(|| PairBatchEntry {
                state: t.state,
                action: t.action,
                count: 0,
                summed_target_i: vec![0.0; d],
                summed_target_j: vec![0.0; d],
            });
        e.count += 1;
        add_target(
            table,
            pair.0,
            &policy_i,
            t,
            gamma,
            &mut probs,
            &mut target,
            &mut e.summed_target_i,
        )?;
        add_target(
            table,
            pair.1,
            &policy_j,
            t,
            gamma,
            &mut probs,
            &mut target,
            &mut e.summed_target_j,
        )?;
    }
    Ok(PairBatch {
        entries: entries.into_values().collect(),
    })
}

// --- reference and pair selection -------------------------------------------

/// Expected return of the agent's best action at its start state.
fn start_state_value(table: &ParameterTable, agent: usize, start_state: StateId) -> f64 {
    let values = table.action_values(agent, start_state);
    values.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Picks the in-group agent with the largest expected unregularized return
/// at its start state (lowest agent id on ties) and freezes its
/// distributions as the group reference.
pub fn select_reference(
    table: &ParameterTable,
    group: usize,
    agents: &[usize],
    start_states: &[StateId],
) -> Result<GroupReference> {
    if agents.is_empty() {
        return Err(BdrlError::EmptyInput(format!(
            "select_reference on empty group {group}"
        )));
    }
    let mut best = agents[0];
    let mut best_value = start_state_value(table, agents[0], start_states[agents[0]]);
    for &agent in &agents[1..] {
        let value = start_state_value(table, agent, start_states[agent]);
        if value > best_value {
            best = agent;
            best_value = value;
        }
    }
    Ok(GroupReference::snapshot(table, group, best))
}

/// The unordered pair with the largest mean w2 over the minibatch's sampled
/// `(s, a)` occurrences (lexicographically smallest pair on ties). Returns
/// the pair and its discrepancy value.
pub fn select_worst_pair(
    table: &ParameterTable,
    agents: &[usize],
    sa_counts: &BTreeMap<(StateId, ActionId), usize>,
) -> Result<((usize, usize), f64)> {
    if agents.len() < 2 {
        return Err(BdrlError::EmptyInput(
            "select_worst_pair needs at least two agents".into(),
        ));
    }
    if sa_counts.is_empty() {
        return Err(BdrlError::EmptyInput("select_worst_pair on empty minibatch".into()));
    }
    let d = table.atom_count();
    let dz = table.grid().delta_z();
    let total: usize = sa_counts.values().sum();
    // Distribution cache per agent over the unique minibatch cells.
    let cache: Vec<Vec<f64>> = agents
        .iter()
        .map(|&agent| {
            let mut block = vec![0.0; sa_counts.len() * d];
            for (slot, (&(s, a), _)) in sa_counts.iter().enumerate() {
                table.probs_into(agent, s, a, &mut block[slot * d..(slot + 1) * d]);
            }
            block
        })
        .collect();
    let mut best_pair = (agents[0], agents[1]);
    let mut best_value = f64::NEG_INFINITY;
    for i in 0..agents.len() {
        for j in (i + 1)..agents.len() {
            let mut sum = 0.0;
            for (slot, (_, &count)) in sa_counts.iter().enumerate() {
                let pa = &cache[i][slot * d..(slot + 1) * d];
                let pb = &cache[j][slot * d..(slot + 1) * d];
                sum += count as f64 * w2_slice(pa, pb, dz);
            }
            let value = sum / total as f64;
            if value > best_value {
                best_value = value;
                best_pair = (agents[i], agents[j]);
            }
        }
    }
    Ok((best_pair, best_value))
}

/// Mean pairwise-maximum w2 over a fixed probe set: the convergence-trace
/// scalar for one group.
pub fn max_pair_probe_w2(
    table: &ParameterTable,
    agents: &[usize],
    probe: &[(StateId, ActionId)],
) -> f64 {
    if agents.len() < 2 || probe.is_empty() {
        return 0.0;
    }
    let d = table.atom_count();
    let dz = table.grid().delta_z();
    let cache: Vec<Vec<f64>> = agents
        .iter()
        .map(|&agent| {
            let mut block = vec![0.0; probe.len() * d];
            for (slot, &(s, a)) in probe.iter().enumerate() {
                table.probs_into(agent, s, a, &mut block[slot * d..(slot + 1) * d]);
            }
            block
        })
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..agents.len() {
        for j in (i + 1)..agents.len() {
            let mut sum = 0.0;
            for slot in 0..probe.len() {
                let pa = &cache[i][slot * d..(slot + 1) * d];
                let pb = &cache[j][slot * d..(slot + 1) * d];
                sum += w2_slice(pa, pb, dz);
            }
            worst = worst.max(sum / probe.len() as f64);
        }
    }
    worst
}

// --- baseline optimality training -------------------------------------------

fn sample_minibatch<'a>(
    pool: &'a [Transition],
    size: usize,
    rng: &mut impl Rng,
) -> Vec<&'a Transition> {
    (0..size).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

/// Cross-entropy-only update of one agent from its own minibatch; shared by
/// baseline training and (with the penalty added) the boosted loop.
fn ce_epoch(
    table: &mut ParameterTable,
    agent: usize,
    pool: &[Transition],
    cfg: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = table.atom_count();
    let minibatch = sample_minibatch(pool, cfg.minibatch_size, rng);
    let policy = greedy_actions(table, agent);
    let mut probs = vec![0.0; d];
    let mut target = vec![0.0; d];
    let mut entries: BTreeMap<(StateId, ActionId), (usize, Vec<f64>)> = BTreeMap::new();
    for t in minibatch {
        let e = entries
            .entry((t.state, t.action))
            .or_insert_with(|| (0, vec![0.0; d]));
        e.0 += 1;
        add_target(table, agent, &policy, t, cfg.gamma, &mut probs, &mut target, &mut e.1)?;
    }
    for ((state, action), (count, summed_target)) in entries {
        table.probs_into(agent, state, action, &mut probs);
        let logits = table.logits_mut(agent, state, action);
        for k in 0..d {
            let grad = count as f64 * probs[k] - summed_target[k];
            logits[k] -= cfg.learning_rate * grad;
        }
    }
    Ok(())
}

/// Optimality-only training: every agent minimizes its own cross-entropy
/// Bellman loss on its own trajectories. Deterministic per (config, seed);
/// agents train on independent seeded streams and may run in parallel.
pub fn train_baseline_optimality(
    table: &mut ParameterTable,
    transitions_per_agent: &[Vec<Transition>],
    cfg: &TrainingConfig,
) -> Result<()> {
    cfg.validate()?;
    if transitions_per_agent.len() != table.n_agents() {
        return Err(BdrlError::Invariant(format!(
            "{} agents in table but {} trajectory sets",
            table.n_agents(),
            transitions_per_agent.len()
        )));
    }
    for (agent, pool) in transitions_per_agent.iter().enumerate() {
        if pool.is_empty() {
            return Err(BdrlError::EmptyInput(format!(
                "agent {agent} has no stored transitions"
            )));
        }
    }
    let results: Vec<Result<ParameterTable>> = (0..table.n_agents())
        .into_par_iter()
        .map(|agent| {
            let mut local = table.extract_agents(&[agent]);
            let mut rng = stream_rng(cfg.seed, StreamDomain::AgentTraining, agent as u64);
            for _ in 0..cfg.epochs {
                ce_epoch(&mut local, 0, &transitions_per_agent[agent], cfg, &mut rng)?;
            }
            Ok(local)
        })
        .collect();
    for (agent, local) in results.into_iter().enumerate() {
        let local = local?;
        table
            .agent_block_mut(agent)
            .copy_from_slice(local.agent_block(0));
    }
    Ok(())
}

// --- boosted main loop -------------------------------------------------------

struct GroupResult {
    group: usize,
    agents: Vec<usize>,
    logits: ParameterTable,
    records: Vec<TrainingLogRecord>,
    events: Vec<ProjectionEvent>,
    trace: Vec<TraceEntry>,
    nonfinite: u64,
    saturated: u64,
}

#[allow(clippy::too_many_arguments)]
fn train_group(
    group: usize,
    agents: &[usize],
    mut local: ParameterTable,
    reference: &GroupReference,
    pool: &[Transition],
    probe: &[(StateId, ActionId)],
    cfg: &TrainingConfig,
) -> Result<GroupResult> {
    let d = local.atom_count();
    let dz = local.grid().delta_z();
    let local_ids: Vec<usize> = (0..agents.len()).collect();
    let mut rng = stream_rng(cfg.seed, StreamDomain::GroupTraining, group as u64);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut nonfinite = 0u64;
    let mut saturated = 0u64;

    for epoch in 0..cfg.epochs {
        let minibatch: Vec<Transition> = (0..cfg.minibatch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let mut sa_counts: BTreeMap<(StateId, ActionId), usize> = BTreeMap::new();
        for t in &minibatch {
            *sa_counts.entry((t.state, t.action)).or_insert(0) += 1;
        }

        let mut record = TrainingLogRecord {
            epoch,
            group,
            loss_accuracy: 0.0,
            loss_penalty: 0.0,
            pair: None,
            max_pair_w2: 0.0,
            penalty_nonfinite: false,
            penalty_saturated: false,
        };

        // Pre-gradient snapshot of every agent's minibatch distributions:
        // these are the carried-over estimates the projection mixes from.
        let mut snapshot = vec![0.0; agents.len() * sa_counts.len() * d];
        for (ai, &a) in local_ids.iter().enumerate() {
            for (slot, (&(s, act), _)) in sa_counts.iter().enumerate() {
                let o = (ai * sa_counts.len() + slot) * d;
                local.probs_into(a, s, act, &mut snapshot[o..o + d]);
            }
        }

        if agents.len() >= 2 {
            let ((li, lj), sel_value) = select_worst_pair(&local, &local_ids, &sa_counts)?;
            record.pair = Some((agents[li], agents[lj]));
            record.max_pair_w2 = sel_value;
            let batch = build_pair_batch(&local, (li, lj), &minibatch, cfg.gamma)?;
            let loss = composite_loss(&local, &batch, (li, lj), cfg.lambda, cfg.divergence_penalty);
            record.loss_accuracy = loss.accuracy;
            record.loss_penalty = loss.penalty;
            let stats = pair_gradient_step(
                &mut local,
                &batch,
                (li, lj),
                cfg.lambda,
                cfg.divergence_penalty,
                cfg.learning_rate,
            );
            record.penalty_nonfinite = stats.nonfinite;
            record.penalty_saturated = stats.saturated;
            nonfinite += stats.nonfinite as u64;
            saturated += stats.saturated as u64;
        }

        // Post-update projection of every group member toward the frozen
        // reference on the minibatch cells.
        let mut current = vec![0.0; d];
        for (ai, &a) in local_ids.iter().enumerate() {
            for (slot, (&(s, act), _)) in sa_counts.iter().enumerate() {
                let o = (ai * sa_counts.len() + slot) * d;
                let old_probs = &snapshot[o..o + d];
                local.probs_into(a, s, act, &mut current);
                let ref_probs = reference.probs(s, act);
                let outcome = project_slices(
                    old_probs,
                    &current,
                    ref_probs,
                    local.grid(),
                    &cfg.projection,
                )?;
                if outcome.branch != ProjectionBranch::Accepted {
                    let d_before = w2_slice(old_probs, ref_probs, dz);
                    let d_after = w2_slice(outcome.result.probs(), ref_probs, dz);
                    local.set_distribution(a, s, act, outcome.result.probs())?;
                    events.push(ProjectionEvent {
                        epoch,
                        group,
                        agent: agents[ai],
                        branch: outcome.branch,
                        alpha: outcome.alpha_used.map(|w| w.value()),
                        d_before,
                        d_after,
                    });
                }
            }
        }

        trace.push(TraceEntry {
            epoch,
            group,
            max_pair_w2: max_pair_probe_w2(&local, &local_ids, probe),
        });
        records.push(record);
    }

    Ok(GroupResult {
        group,
        agents: agents.to_vec(),
        logits: local,
        records,
        events,
        trace,
        nonfinite,
        saturated,
    })
}

fn project_slices(
    old_probs: &[f64],
    new_probs: &[f64],
    ref_probs: &[f64],
    grid: &std::sync::Arc<crate::dist::SupportGrid>,
    cfg: &ProjectionConfig,
) -> Result<crate::projection::ProjectionOutcome> {
    use crate::dist::CategoricalReturn;
    let z_old = CategoricalReturn::new(std::sync::Arc::clone(grid), old_probs.to_vec())?;
    let z_new = CategoricalReturn::new(std::sync::Arc::clone(grid), new_probs.to_vec())?;
    let z_ref = CategoricalReturn::new(std::sync::Arc::clone(grid), ref_probs.to_vec())?;
    solve_projection(&z_old, &z_new, &z_ref, cfg)
}

/// The main boosted loop: per epoch and group, sample a minibatch from the
/// group's pooled transitions, train the worst pair on the composite loss,
/// then project every member toward the frozen group reference. Groups train
/// concurrently on independent seeded streams; outputs are merged in
/// deterministic (epoch, group) order.
pub fn train_boosted(
    table: &mut ParameterTable,
    groups: &[Vec<usize>],
    references: &[GroupReference],
    transitions_per_agent: &[Vec<Transition>],
    cfg: &TrainingConfig,
) -> Result<BoostedOutput> {
    cfg.validate()?;
    if groups.len() != references.len() {
        return Err(BdrlError::Invariant(format!(
            "{} groups but {} references",
            groups.len(),
            references.len()
        )));
    }
    let mut seen = vec![false; table.n_agents()];
    for (g, agents) in groups.iter().enumerate() {
        for &a in agents {
            if a >= table.n_agents() || seen[a] {
                return Err(BdrlError::Invariant(format!(
                    "agent {a} missing or assigned twice (group {g})"
                )));
            }
            seen[a] = true;
        }
        if !agents.contains(&references[g].agent) {
            return Err(BdrlError::Invariant(format!(
                "reference agent {} is not in group {g}",
                references[g].agent
            )));
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(BdrlError::Invariant("groups do not cover all agents".into()));
    }

    let work: Vec<(usize, Vec<usize>)> = groups.iter().cloned().enumerate().collect();
    let results: Vec<Result<GroupResult>> = work
        .into_par_iter()
        .map(|(g, agents)| {
            let local = table.extract_agents(&agents);
            let mut pool = Vec::new();
            for &a in &agents {
                pool.extend_from_slice(&transitions_per_agent[a]);
            }
            if pool.is_empty() {
                return Err(BdrlError::EmptyInput(format!(
                    "group {g} has no stored transitions"
                )));
            }
            let mut probe: Vec<(StateId, ActionId)> = pool
                .iter()
                .map(|t| (t.state, t.action))
                .collect();
            probe.sort_unstable();
            probe.dedup();
            train_group(g, &agents, local, &references[g], &pool, &probe, cfg)
        })
        .collect();

    let mut output = BoostedOutput::default();
    let mut group_results = Vec::with_capacity(results.len());
    for r in results {
        group_results.push(r?);
    }
    group_results.sort_by_key(|r| r.group);
    for r in &group_results {
        for (local_idx, &agent) in r.agents.iter().enumerate() {
            table
                .agent_block_mut(agent)
                .copy_from_slice(r.logits.agent_block(local_idx));
        }
        output.penalty_nonfinite_events += r.nonfinite;
        output.penalty_saturated_events += r.saturated;
    }
    // Merge per-group logs in (epoch, group) order.
    let mut records: Vec<TrainingLogRecord> = group_results
        .iter()
        .flat_map(|r| r.records.iter().cloned())
        .collect();
    records.sort_by_key(|r| (r.epoch, r.group));
    output.training_log = records;
    let mut events: Vec<ProjectionEvent> = group_results
        .iter()
        .flat_map(|r| r.events.iter().cloned())
        .collect();
    events.sort_by_key(|e| (e.epoch, e.group, e.agent));
    output.projection_events = events;
    let mut trace_entries: Vec<TraceEntry> = group_results
        .iter()
        .flat_map(|r| r.trace.iter().copied())
        .collect();
    trace_entries.sort_by_key(|e| (e.epoch, e.group));
    for e in trace_entries {
        output.trace.push(e)?;
    }
    Ok(output)
}

// --- Q-learning baseline -----------------------------------------------------

/// Per-agent tabular Q values and greedy policies.
#[derive(Debug, Clone)]
pub struct QLearningOutput {
    /// `q[agent][state][action]`.
    pub q: Vec<Vec<Vec<f64>>>,
    pub policies: Vec<Vec<ActionId>>,
}

/// Standard tabular Q-learning on the same stored trajectories, minibatch
/// replay with the shared learning rate and discount.
pub fn train_q_learning(
    transitions_per_agent: &[Vec<Transition>],
    cfg: &TrainingConfig,
    n_states: usize,
    n_actions: usize,
) -> Result<QLearningOutput> {
    cfg.validate()?;
    let mut q = Vec::with_capacity(transitions_per_agent.len());
    for (agent, pool) in transitions_per_agent.iter().enumerate() {
        if pool.is_empty() {
            return Err(BdrlError::EmptyInput(format!(
                "agent {agent} has no stored transitions"
            )));
        }
        let mut table = vec![vec![0.0; n_actions]; n_states];
        let mut rng = stream_rng(cfg.seed, StreamDomain::QLearning, agent as u64);
        for _ in 0..cfg.epochs {
            for _ in 0..cfg.minibatch_size {
                let t = &pool[rng.random_range(0..pool.len())];
                let next_best = table[t.next_state]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let td = t.reward + cfg.gamma * next_best - table[t.state][t.action];
                table[t.state][t.action] += cfg.learning_rate * td;
            }
        }
        q.push(table);
    }
    let policies = q
        .iter()
        .map(|table| table.iter().map(|row| argmax_lowest_index(row)).collect())
        .collect();
    Ok(QLearningOutput { q, policies })
}
