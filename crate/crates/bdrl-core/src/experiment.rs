//! Experiment driver: configuration, the full train-and-report pipeline,
//! parameter sweeps, and the fixed on-disk output formats.
//!
//! Every output file starts with a config-hash line so results from different
//! configurations can never be mixed in one directory unnoticed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bellman::{ActionId, StateId, Transition};
use crate::cohort::{
    generate_cohort, sample_trajectories, transition_row, value_iteration, CohortParams,
    DynamicsParams, HealthCondition, PatientModel, TreatmentAction, ACTION_COUNT, CONDITION_COUNT,
};
use crate::diagnostics::{batch_means, BatchMeansReport, ConvergenceTrace};
use crate::dist::SupportGrid;
use crate::error::{BdrlError, Result};
use crate::grouping::{elbow_select, kmeans, ElbowResult, GroupAssignment};
use crate::projection::{ProjectionConfig, ProjectionEvent};
use crate::rng::{stream_rng, StreamDomain};
use crate::table::{GroupReference, LogitInit, ParameterTable};
use crate::training::{
    select_reference, train_baseline_optimality, train_boosted, train_q_learning, BoostedOutput,
    DivergencePenalty, TrainingConfig, TrainingLogRecord,
};

/// Which learner runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bdrl,
    Drl,
    Qlearning,
}

impl Default for Algorithm {
    fn default() -> Self {
        Algorithm::Bdrl
    }
}

impl std::str::FromStr for Algorithm {
    type Err = BdrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bdrl" => Ok(Algorithm::Bdrl),
            "drl" => Ok(Algorithm::Drl),
            "qlearning" => Ok(Algorithm::Qlearning),
            other => Err(BdrlError::invalid_config(
                "algo",
                format!("expected bdrl|drl|qlearning, got `{other}`"),
            )),
        }
    }
}

impl std::str::FromStr for DivergencePenalty {
    type Err = BdrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2" => Ok(DivergencePenalty::W2),
            "kl" => Ok(DivergencePenalty::Kl),
            "js" => Ok(DivergencePenalty::Js),
            other => Err(BdrlError::invalid_config(
                "divergence",
                format!("expected w2|kl|js, got `{other}`"),
            )),
        }
    }
}

/// Fixed cluster count or elbow-method auto-selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSelection {
    Fixed(usize),
    Named(String),
}

impl Default for GroupSelection {
    fn default() -> Self {
        GroupSelection::Fixed(3)
    }
}

impl GroupSelection {
    /// `Ok(None)` means auto-select via the elbow method.
    pub fn fixed_k(&self) -> Result<Option<usize>> {
        match self {
            GroupSelection::Fixed(k) => Ok(Some(*k)),
            GroupSelection::Named(s) if s == "auto" => Ok(None),
            GroupSelection::Named(other) => Err(BdrlError::invalid_config(
                "groups",
                format!("expected an integer or `auto`, got `{other}`"),
            )),
        }
    }
}

/// Atom-grid bounds shared by all learned distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub atoms: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            z_min: 0.0,
            z_max: 34.0,
            atoms: 51,
        }
    }
}

/// Full experiment configuration. Defaults mirror the base case: lambda 0.1,
/// epsilon 0.010, rho 0.90, alpha floor 0.05, three groups, gamma 0.97.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algo: Algorithm,
    pub n_agents: usize,
    pub seed: u64,
    pub grid: GridConfig,
    pub cohort: CohortParams,
    pub dynamics: DynamicsParams,
    pub training: TrainingConfig,
    pub groups: GroupSelection,
    /// Candidate cluster counts scanned when `groups` is `auto`.
    pub elbow_k_range: Vec<usize>,
    pub logit_init: LogitInit,
    /// Simulation guard: trajectories stop after this many annual steps.
    pub horizon: usize,
    /// Monte Carlo rollouts per agent feeding the batch-means diagnostics.
    pub eval_trajectories: usize,
    /// Batch counts reported in batch_means.csv.
    pub batch_counts: Vec<usize>,
    /// Swept keys: lambda | epsilon | rho | alpha_floor | divergence.
    pub sweep: BTreeMap<String, Vec<String>>,
    /// Worker threads for sweep points (0 = one per logical CPU).
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algo: Algorithm::Bdrl,
            n_agents: 30,
            seed: 42,
            grid: GridConfig::default(),
            cohort: CohortParams::default(),
            dynamics: DynamicsParams::default(),
            training: TrainingConfig::default(),
            groups: GroupSelection::default(),
            elbow_k_range: (1..=8).collect(),
            logit_init: LogitInit::Uniform,
            horizon: 100,
            eval_trajectories: 200,
            batch_counts: (1..=10).map(|i| i * 10).collect(),
            sweep: BTreeMap::new(),
            workers: 1,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Validates every sub-config and returns the canonical resolved form
    /// with the top-level seed propagated into the training stream seed.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut resolved = self.clone();
        resolved.training.seed = resolved.seed;
        if resolved.n_agents == 0 {
            return Err(BdrlError::invalid_config("n_agents", "must be >= 1"));
        }
        if resolved.horizon == 0 {
            return Err(BdrlError::invalid_config("horizon", "must be >= 1"));
        }
        if resolved.eval_trajectories == 0 {
            return Err(BdrlError::invalid_config("eval_trajectories", "must be >= 1"));
        }
        SupportGrid::new(resolved.grid.z_min, resolved.grid.z_max, resolved.grid.atoms)?;
        resolved.dynamics.validate()?;
        resolved.training.validate()?;
        match resolved.groups.fixed_k()? {
            Some(k) => {
                if k == 0 || k > resolved.n_agents {
                    return Err(BdrlError::invalid_config(
                        "groups",
                        format!("k must lie in 1..={}, got {k}", resolved.n_agents),
                    ));
                }
            }
            None => {
                if resolved.elbow_k_range.len() < 3 {
                    return Err(BdrlError::invalid_config(
                        "elbow_k_range",
                        "auto grouping needs at least 3 candidate k values",
                    ));
                }
            }
        }
        for key in resolved.sweep.keys() {
            if !matches!(
                key.as_str(),
                "lambda" | "epsilon" | "rho" | "alpha_floor" | "divergence"
            ) {
                return Err(BdrlError::invalid_config(
                    format!("sweep.{key}"),
                    "swept keys are lambda|epsilon|rho|alpha_floor|divergence",
                ));
            }
            if resolved.sweep[key].is_empty() {
                return Err(BdrlError::invalid_config(
                    format!("sweep.{key}"),
                    "sweep list must be nonempty",
                ));
            }
        }
        Ok(resolved)
    }

    /// Stable 16-hex-digit hash of the resolved configuration. Worker count
    /// and output location are execution environment, not experiment
    /// identity, so they are normalized out before hashing.
    pub fn config_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.workers = 0;
        canonical.out_dir = None;
        let json = serde_json::to_string(&canonical)?;
        let digest = Sha256::digest(json.as_bytes());
        let mut s = String::with_capacity(16);
        for b in digest.iter().take(8) {
            use std::fmt::Write as _;
            let _ = write!(s, "{b:02x}");
        }
        Ok(s)
    }
}

/// One agent's summary line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent: usize,
    pub group: usize,
    pub mean_return: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRowKind {
    Resilient,
    Median,
    Vulnerable,
}

impl GroupRowKind {
    fn label(self) -> &'static str {
        match self {
            GroupRowKind::Resilient => "group_resilient",
            GroupRowKind::Median => "group_median",
            GroupRowKind::Vulnerable => "group_vulnerable",
        }
    }
}

/// Per-group Most Resilient / Median / Most Vulnerable row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub kind: GroupRowKind,
    pub agent: usize,
    pub mean_return: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Everything one experiment run produces in memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub algo: Algorithm,
    pub seed: u64,
    pub chosen_k: usize,
    pub agents: Vec<AgentSummary>,
    pub group_rows: Vec<GroupRow>,
    /// Final convergence-trace value per group.
    pub final_trace: Vec<(usize, f64)>,
    pub penalty_nonfinite_events: u64,
    pub penalty_saturated_events: u64,
    /// True when the frozen reference snapshots were bit-identical before and
    /// after the boosted phase.
    pub references_bit_identical: bool,
    pub elbow: Option<ElbowResult>,
    pub batch_means_default: Option<BatchMeansReport>,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn group_row(&self, group: usize, kind: GroupRowKind) -> Option<&GroupRow> {
        self.group_rows
            .iter()
            .find(|r| r.group == group && r.kind == kind)
    }
}

struct PipelineArtifacts {
    report: ExperimentReport,
    trace: ConvergenceTrace,
    training_log: Vec<TrainingLogRecord>,
    projection_events: Vec<ProjectionEvent>,
    batch_rows: Vec<(usize, usize, f64, f64)>,
    resolved: ExperimentConfig,
}

/// Runs a full experiment: cohort, grouping, data collection, training,
/// diagnostics, report; writes the output files when `out_dir` is set.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let artifacts = run_pipeline(config)?;
    if let Some(dir) = &artifacts.resolved.out_dir {
        write_outputs(dir, &artifacts)?;
    }
    Ok(artifacts.report)
}

fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineArtifacts> {
    let started = std::time::Instant::now();
    let resolved = config.resolve()?;
    let config_hash = resolved.config_hash()?;

    let cohort = generate_cohort(resolved.n_agents, resolved.seed, &resolved.cohort)?;
    let features: Vec<Vec<f64>> = cohort.iter().map(|p| p.features.to_vec()).collect();

    let (assignment, elbow) = assign_groups(&resolved, &features)?;
    let groups = assignment.groups();
    let start_states: Vec<StateId> = cohort.iter().map(|p| p.start_condition.index()).collect();

    // Behavior data: epsilon-greedy on the model-implied action values.
    let transitions: Vec<Vec<Transition>> = cohort
        .iter()
        .map(|patient| {
            let behavior_q = value_iteration(patient, &resolved.dynamics, 1e-10);
            sample_trajectories(
                patient,
                &behavior_q,
                &resolved.dynamics,
                resolved.training.trajectories_per_agent,
                resolved.training.exploration_rate,
                resolved.horizon,
                resolved.seed,
            )
            .into_iter()
            .flatten()
            .collect()
        })
        .collect();

    let grid = SupportGrid::shared(resolved.grid.z_min, resolved.grid.z_max, resolved.grid.atoms)?;

    let mut trace = ConvergenceTrace::new();
    let mut training_log = Vec::new();
    let mut projection_events = Vec::new();
    let mut penalty_nonfinite = 0;
    let mut penalty_saturated = 0;
    let mut references_bit_identical = true;

    let (agents, policies) = match resolved.algo {
        Algorithm::Qlearning => {
            let out = train_q_learning(
                &transitions,
                &resolved.training,
                CONDITION_COUNT,
                ACTION_COUNT,
            )?;
            let agents: Vec<AgentSummary> = (0..resolved.n_agents)
                .map(|agent| {
                    let s0 = start_states[agent];
                    let value = out.q[agent][s0]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    AgentSummary {
                        agent,
                        group: assignment.assignment[agent],
                        mean_return: value,
                        p5: value,
                        p50: value,
                        p95: value,
                    }
                })
                .collect();
            (agents, out.policies)
        }
        Algorithm::Bdrl | Algorithm::Drl => {
            let mut training = resolved.training;
            if resolved.algo == Algorithm::Drl {
                training.lambda = 0.0;
                training.projection = ProjectionConfig::disabled();
            }
            let mut table = ParameterTable::new(
                Arc::clone(&grid),
                resolved.n_agents,
                CONDITION_COUNT,
                ACTION_COUNT,
            );
            table.apply_init(resolved.logit_init);
            train_baseline_optimality(&mut table, &transitions, &training)?;
            let references: Vec<GroupReference> = groups
                .iter()
                .enumerate()
                .map(|(g, members)| select_reference(&table, g, members, &start_states))
                .collect::<Result<_>>()?;
            let frozen: Vec<GroupReference> = references.clone();
            let out: BoostedOutput =
                train_boosted(&mut table, &groups, &references, &transitions, &training)?;
            references_bit_identical = frozen
                .iter()
                .zip(&references)
                .all(|(a, b)| a.bit_identical(b));
            trace = out.trace;
            training_log = out.training_log;
            projection_events = out.projection_events;
            penalty_nonfinite = out.penalty_nonfinite_events;
            penalty_saturated = out.penalty_saturated_events;

            let agents: Vec<AgentSummary> = (0..resolved.n_agents)
                .map(|agent| {
                    let s0 = start_states[agent];
                    let values = table.action_values(agent, s0);
                    let best = crate::bellman::argmax_lowest_index(&values);
                    let dist = table.distribution(agent, s0, best);
                    AgentSummary {
                        agent,
                        group: assignment.assignment[agent],
                        mean_return: values[best],
                        p5: dist.quantile(0.05),
                        p50: dist.quantile(0.50),
                        p95: dist.quantile(0.95),
                    }
                })
                .collect();
            let policies = (0..resolved.n_agents)
                .map(|agent| table.greedy_policy(agent))
                .collect();
            (agents, policies)
        }
    };

    let group_rows = build_group_rows(&agents, groups.len());
    let (batch_rows, batch_default) = evaluate_policies(&resolved, &cohort, &policies)?;

    let final_trace: Vec<(usize, f64)> = (0..groups.len())
        .map(|g| {
            let series = trace.group_series(g);
            (g, series.last().map(|e| e.max_pair_w2).unwrap_or(0.0))
        })
        .collect();

    let report = ExperimentReport {
        config_hash,
        algo: resolved.algo,
        seed: resolved.seed,
        chosen_k: groups.len(),
        agents,
        group_rows,
        final_trace,
        penalty_nonfinite_events: penalty_nonfinite,
        penalty_saturated_events: penalty_saturated,
        references_bit_identical,
        elbow,
        batch_means_default: batch_default,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(PipelineArtifacts {
        report,
        trace,
        training_log,
        projection_events,
        batch_rows,
        resolved,
    })
}

fn assign_groups(
    config: &ExperimentConfig,
    features: &[Vec<f64>],
) -> Result<(GroupAssignment, Option<ElbowResult>)> {
    match config.groups.fixed_k()? {
        Some(k) => Ok((kmeans(features, k, config.seed, 300)?, None)),
        None => {
            let k_range: Vec<usize> = config
                .elbow_k_range
                .iter()
                .copied()
                .filter(|&k| k >= 1 && k <= features.len())
                .collect();
            if k_range.len() < 3 {
                return Err(BdrlError::invalid_config(
                    "elbow_k_range",
                    "fewer than 3 feasible candidate k values",
                ));
            }
            let elbow = elbow_select(features, &k_range, config.seed)?;
            let assignment = kmeans(features, elbow.chosen_k, config.seed, 300)?;
            Ok((assignment, Some(elbow)))
        }
    }
}

fn build_group_rows(agents: &[AgentSummary], n_groups: usize) -> Vec<GroupRow> {
    let mut rows = Vec::new();
    for g in 0..n_groups {
        let mut members: Vec<&AgentSummary> = agents.iter().filter(|a| a.group == g).collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|a, b| {
            a.mean_return
                .partial_cmp(&b.mean_return)
                .unwrap()
                .then(a.agent.cmp(&b.agent))
        });
        let picks = [
            (GroupRowKind::Resilient, members[members.len() - 1]),
            (GroupRowKind::Median, members[members.len() / 2]),
            (GroupRowKind::Vulnerable, members[0]),
        ];
        for (kind, m) in picks {
            rows.push(GroupRow {
                group: g,
                kind,
                agent: m.agent,
                mean_return: m.mean_return,
                p5: m.p5,
                p50: m.p50,
                p95: m.p95,
            });
        }
    }
    rows
}

/// Simulates the learned greedy policies and feeds the pooled discounted
/// returns through the batch-means diagnostics.
fn evaluate_policies(
    config: &ExperimentConfig,
    cohort: &[PatientModel],
    policies: &[Vec<ActionId>],
) -> Result<(Vec<(usize, usize, f64, f64)>, Option<BatchMeansReport>)> {
    let actions = TreatmentAction::all();
    let mut samples = Vec::with_capacity(cohort.len() * config.eval_trajectories);
    for patient in cohort {
        let policy = &policies[patient.id];
        let mut rng = stream_rng(config.seed, StreamDomain::Evaluation, patient.id as u64);
        for _ in 0..config.eval_trajectories {
            let mut condition = patient.start_condition;
            let mut discount = 1.0;
            let mut total = 0.0;
            for _ in 0..config.horizon {
                let s = condition.index();
                let action = actions[policy[s]];
                total +=
                    discount * crate::cohort::reward(patient, condition, action, &config.dynamics);
                discount *= config.dynamics.gamma;
                let row = transition_row(patient, condition, action, &config.dynamics);
                let u: f64 = rand::Rng::random(&mut rng);
                let mut cum = 0.0;
                let mut next = CONDITION_COUNT - 1;
                for (i, p) in row.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        next = i;
                        break;
                    }
                }
                condition = HealthCondition::from_index(next).unwrap();
                if condition == HealthCondition::Dead {
                    break;
                }
            }
            samples.push(total);
        }
    }
    let mut rows = Vec::new();
    let mut default_report = None;
    for &b in &config.batch_counts {
        if b > samples.len() {
            continue;
        }
        let report = batch_means(&samples, b)?;
        rows.push((
            b,
            report.batch_size,
            report.grand_mean,
            report.standard_error,
        ));
        if b == 30 {
            default_report = Some(report);
        }
    }
    Ok((rows, default_report))
}

// --- sweeps ------------------------------------------------------------------

fn apply_sweep_value(config: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let parse_f64 = |v: &str| -> Result<f64> {
        v.parse::<f64>().map_err(|_| {
            BdrlError::invalid_config(format!("sweep.{key}"), format!("bad numeric value `{v}`"))
        })
    };
    match key {
        "lambda" => config.training.lambda = parse_f64(value)?,
        "epsilon" => config.training.projection.epsilon = parse_f64(value)?,
        "rho" => config.training.projection.rho = parse_f64(value)?,
        "alpha_floor" => config.training.projection.alpha_floor = parse_f64(value)?,
        "divergence" => config.training.divergence_penalty = value.parse()?,
        other => {
            return Err(BdrlError::invalid_config(
                format!("sweep.{other}"),
                "swept keys are lambda|epsilon|rho|alpha_floor|divergence",
            ))
        }
    }
    Ok(())
}

/// One sweep point: the overridden key/value pairs and the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub overrides: BTreeMap<String, String>,
    pub report: ExperimentReport,
}

/// Runs the cartesian product of the configured sweep lists. Every point
/// shares the base cohort and seeds; each writes into its own subdirectory.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let resolved = config.resolve()?;
    if resolved.sweep.is_empty() {
        return Err(BdrlError::invalid_config(
            "sweep",
            "sweep mode requires at least one nonempty sweep list",
        ));
    }
    let keys: Vec<&String> = resolved.sweep.keys().collect();
    let mut points: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
    for key in &keys {
        let mut expanded = Vec::new();
        for point in &points {
            for value in &resolved.sweep[*key] {
                let mut next = point.clone();
                next.insert((*key).clone(), value.clone());
                expanded.push(next);
            }
        }
        points = expanded;
    }

    let workers = if resolved.workers == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        resolved.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| BdrlError::Invariant(format!("worker pool: {e}")))?;

    let base = resolved.clone();
    let results: Vec<Result<SweepPoint>> = pool.install(|| {
        use rayon::prelude::*;
        points
            .par_iter()
            .map(|overrides| {
                let mut point_config = base.clone();
                point_config.sweep.clear();
                for (key, value) in overrides {
                    apply_sweep_value(&mut point_config, key, value)?;
                }
                if let Some(dir) = &base.out_dir {
                    let label: Vec<String> =
                        overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    point_config.out_dir = Some(dir.join(label.join("_")));
                }
                let report = run(&point_config)?;
                Ok(SweepPoint {
                    overrides: overrides.clone(),
                    report,
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

// --- output files ----------------------------------------------------------

const HASH_PREFIX: &str = "# config_hash=";

fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        String::from("nan")
    }
}

fn known_output_files() -> [&'static str; 6] {
    [
        "report.csv",
        "convergence.csv",
        "batch_means.csv",
        "training.jsonl",
        "projections.jsonl",
        "config_resolved.json",
    ]
}

/// Rejects directories already holding outputs from a different config.
fn ensure_hash_consistency(dir: &Path, hash: &str) -> Result<()> {
    for name in known_output_files() {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let file = fs::File::open(&path)?;
        let mut first = String::new();
        BufReader::new(file).read_line(&mut first)?;
        let existing = if let Some(rest) = first.strip_prefix(HASH_PREFIX) {
            Some(rest.trim().to_string())
        } else {
            serde_json::from_str::<serde_json::Value>(&first)
                .ok()
                .and_then(|v| {
                    v.get("config_hash")
                        .and_then(|h| h.as_str())
                        .map(String::from)
                })
        };
        if let Some(existing) = existing {
            if existing != hash {
                return Err(BdrlError::Invariant(format!(
                    "output directory {} holds results for config {existing}, refusing to mix with {hash}",
                    dir.display()
                )));
            }
        }
    }
    Ok(())
}

fn write_outputs(dir: &Path, artifacts: &PipelineArtifacts) -> Result<()> {
    let hash = &artifacts.report.config_hash;
    fs::create_dir_all(dir)?;
    ensure_hash_consistency(dir, hash)?;

    let mut f = fs::File::create(dir.join("report.csv"))?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    writeln!(f, "kind,group,agent,mean_return,p5,p50,p95")?;
    for a in &artifacts.report.agents {
        writeln!(
            f,
            "agent,{},{},{},{},{},{}",
            a.group,
            a.agent,
            fmt_float(a.mean_return),
            fmt_float(a.p5),
            fmt_float(a.p50),
            fmt_float(a.p95)
        )?;
    }
    for r in &artifacts.report.group_rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.kind.label(),
            r.group,
            r.agent,
            fmt_float(r.mean_return),
            fmt_float(r.p5),
            fmt_float(r.p50),
            fmt_float(r.p95)
        )?;
    }

    let mut f = fs::File::create(dir.join("convergence.csv"))?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    writeln!(f, "epoch,group,max_pair_w2")?;
    for e in artifacts.trace.entries() {
        writeln!(f, "{},{},{}", e.epoch, e.group, fmt_float(e.max_pair_w2))?;
    }

    let mut f = fs::File::create(dir.join("batch_means.csv"))?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    writeln!(f, "B,M,grand_mean,se")?;
    for (b, m, mean, se) in &artifacts.batch_rows {
        writeln!(f, "{b},{m},{},{}", fmt_float(*mean), fmt_float(*se))?;
    }

    let mut f = fs::File::create(dir.join("training.jsonl"))?;
    writeln!(f, "{}", serde_json::json!({ "config_hash": hash }))?;
    for record in &artifacts.training_log {
        writeln!(f, "{}", serde_json::to_string(record)?)?;
    }

    // Accepted no-op steps are not recorded; solved and fallback events are.
    let mut f = fs::File::create(dir.join("projections.jsonl"))?;
    writeln!(f, "{}", serde_json::json!({ "config_hash": hash }))?;
    for event in &artifacts.projection_events {
        writeln!(f, "{}", serde_json::to_string(event)?)?;
    }

    let mut f = fs::File::create(dir.join("config_resolved.json"))?;
    let body = serde_json::json!({
        "config_hash": hash,
        "config": &artifacts.resolved,
    });
    writeln!(f, "{}", serde_json::to_string_pretty(&body)?)?;

    if let Some(elbow) = &artifacts.report.elbow {
        let mut f = fs::File::create(dir.join("elbow.csv"))?;
        writeln!(f, "{HASH_PREFIX}{hash}")?;
        writeln!(f, "k,inertia")?;
        for (k, inertia) in &elbow.curve {
            writeln!(f, "{k},{}", fmt_float(*inertia))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.n_agents = 4;
        config.seed = seed;
        config.groups = GroupSelection::Fixed(2);
        config.training.epochs = 30;
        config.training.minibatch_size = 32;
        config.training.trajectories_per_agent = 6;
        config.eval_trajectories = 20;
        config.horizon = 40;
        config
    }

    #[test]
    fn resolve_rejects_bad_configs_with_key_paths() {
        let mut config = tiny_config(1);
        config.training.lambda = -1.0;
        match config.resolve() {
            Err(BdrlError::InvalidConfig { path, .. }) => assert_eq!(path, "training.lambda"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut config = tiny_config(1);
        config.groups = GroupSelection::Named("sideways".into());
        assert!(config.resolve().is_err());
        let mut config = tiny_config(1);
        config.sweep.insert("gamma".into(), vec!["0.9".into()]);
        assert!(config.resolve().is_err());
    }

    #[test]
    fn micro_run_completes_and_writes_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(5);
        config.n_agents = 2;
        config.groups = GroupSelection::Fixed(1);
        config.out_dir = Some(dir.path().to_path_buf());
        let report = run(&config).unwrap();
        assert_eq!(report.agents.len(), 2);
        assert!(report.references_bit_identical);
        for name in known_output_files() {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
    }

    #[test]
    fn drl_equals_bdrl_with_zero_lambda_and_projection_disabled() {
        let mut drl = tiny_config(7);
        drl.algo = Algorithm::Drl;
        let mut bdrl = tiny_config(7);
        bdrl.algo = Algorithm::Bdrl;
        bdrl.training.lambda = 0.0;
        bdrl.training.projection = ProjectionConfig::disabled();
        let report_drl = run(&drl).unwrap();
        let report_bdrl = run(&bdrl).unwrap();
        assert_eq!(report_drl.agents.len(), report_bdrl.agents.len());
        for (a, b) in report_drl.agents.iter().zip(&report_bdrl.agents) {
            assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
            assert_eq!(a.p50.to_bits(), b.p50.to_bits());
        }
    }

    #[test]
    fn group_rows_are_ordered_resilient_median_vulnerable() {
        let config = tiny_config(11);
        let report = run(&config).unwrap();
        for g in 0..report.chosen_k {
            let res = report.group_row(g, GroupRowKind::Resilient);
            let med = report.group_row(g, GroupRowKind::Median);
            let vul = report.group_row(g, GroupRowKind::Vulnerable);
            if let (Some(r), Some(m), Some(v)) = (res, med, vul) {
                assert!(r.mean_return >= m.mean_return);
                assert!(m.mean_return >= v.mean_return);
            }
        }
    }

    #[test]
    fn mixed_hash_directories_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(3);
        config.n_agents = 2;
        config.groups = GroupSelection::Fixed(1);
        config.out_dir = Some(dir.path().to_path_buf());
        run(&config).unwrap();
        let mut other = config.clone();
        other.seed = 4;
        let err = run(&other).unwrap_err();
        assert!(matches!(err, BdrlError::Invariant(_)), "{err:?}");
    }

    #[test]
    fn single_point_sweep_equals_run() {
        let mut config = tiny_config(9);
        config.n_agents = 3;
        config.groups = GroupSelection::Fixed(1);
        config.sweep.insert("lambda".into(), vec!["0.1".into()]);
        let points = sweep(&config).unwrap();
        assert_eq!(points.len(), 1);
        let mut single = config.clone();
        single.sweep.clear();
        single.training.lambda = 0.1;
        let direct = run(&single).unwrap();
        for (a, b) in points[0].report.agents.iter().zip(&direct.agents) {
            assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
        }
    }

    #[test]
    fn qlearning_run_produces_degenerate_percentiles() {
        let mut config = tiny_config(13);
        config.algo = Algorithm::Qlearning;
        config.training.epochs = 20;
        let report = run(&config).unwrap();
        for a in &report.agents {
            assert_eq!(a.mean_return, a.p50);
            assert_eq!(a.p5, a.p95);
        }
    }
}
