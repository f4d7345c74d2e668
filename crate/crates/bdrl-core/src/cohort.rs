//! Synthetic heterogeneous cohort of per-patient treatment MDPs.
//!
//! Every patient shares the ten-condition state space and the 21
//! treatment-intensity actions but owns private transition risks and reward
//! weights. Base annual event risks come from a parameterized logistic
//! surrogate of an external risk model; the coefficients are configuration,
//! not ground truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bellman::{ActionId, StateId, Transition};
use crate::error::{BdrlError, Result};
use crate::rng::{stream_rng, StreamDomain};

/// Mutually exclusive annual health conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HealthCondition {
    Healthy,
    HistoryMi,
    HistoryStroke,
    HistoryBoth,
    SurvivedMi,
    SurvivedStroke,
    DeadNonAscvd,
    DeadMi,
    DeadStroke,
    Dead,
}

pub const CONDITION_COUNT: usize = 10;

impl HealthCondition {
    pub const ALL: [HealthCondition; CONDITION_COUNT] = [
        HealthCondition::Healthy,
        HealthCondition::HistoryMi,
        HealthCondition::HistoryStroke,
        HealthCondition::HistoryBoth,
        HealthCondition::SurvivedMi,
        HealthCondition::SurvivedStroke,
        HealthCondition::DeadNonAscvd,
        HealthCondition::DeadMi,
        HealthCondition::DeadStroke,
        HealthCondition::Dead,
    ];

    pub fn index(self) -> StateId {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }

    pub fn from_index(i: StateId) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// All four death conditions carry zero reward.
    pub fn is_death(self) -> bool {
        matches!(
            self,
            HealthCondition::DeadNonAscvd
                | HealthCondition::DeadMi
                | HealthCondition::DeadStroke
                | HealthCondition::Dead
        )
    }

    pub fn has_mi_history(self) -> bool {
        matches!(
            self,
            HealthCondition::HistoryMi | HealthCondition::HistoryBoth | HealthCondition::SurvivedMi
        )
    }

    pub fn has_stroke_history(self) -> bool {
        matches!(
            self,
            HealthCondition::HistoryStroke
                | HealthCondition::HistoryBoth
                | HealthCondition::SurvivedStroke
        )
    }

    /// Next-year condition when no event occurs and the patient survives.
    fn successor(self) -> HealthCondition {
        match self {
            HealthCondition::SurvivedMi => HealthCondition::HistoryMi,
            HealthCondition::SurvivedStroke => HealthCondition::HistoryStroke,
            other => other,
        }
    }
}

/// Count of antihypertensive medications at standard and half dose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentAction {
    pub std_doses: u8,
    pub half_doses: u8,
}

pub const ACTION_COUNT: usize = 21;

impl TreatmentAction {
    pub fn new(std_doses: u8, half_doses: u8) -> Result<Self> {
        if std_doses + half_doses > 5 {
            return Err(BdrlError::invalid_config(
                "action",
                format!("at most 5 total doses, got {std_doses}+{half_doses}"),
            ));
        }
        Ok(TreatmentAction {
            std_doses,
            half_doses,
        })
    }

    /// The 21 legal combinations in a fixed index order.
    pub fn all() -> Vec<TreatmentAction> {
        let mut out = Vec::with_capacity(ACTION_COUNT);
        for std_doses in 0..=5u8 {
            for half_doses in 0..=(5 - std_doses) {
                out.push(TreatmentAction {
                    std_doses,
                    half_doses,
                });
            }
        }
        out
    }

    pub fn from_index(i: ActionId) -> Option<TreatmentAction> {
        Self::all().get(i).copied()
    }
}

/// Treatment-effect and weighting parameters shared by the whole cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsParams {
    pub sbp_reduction_std: f64,
    pub sbp_reduction_half: f64,
    pub dbp_reduction_std: f64,
    pub dbp_reduction_half: f64,
    /// Relative risk reduction per myocardial-infarction dose.
    pub rr_mi_std: f64,
    pub rr_mi_half: f64,
    pub rr_stroke_std: f64,
    pub rr_stroke_half: f64,
    /// Attribution weights when both events occur in one year.
    pub mi_weight: f64,
    pub stroke_weight: f64,
    pub disutility_half: f64,
    pub disutility_std: f64,
    pub gamma: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            sbp_reduction_std: 5.5,
            sbp_reduction_half: 3.7,
            dbp_reduction_std: 3.3,
            dbp_reduction_half: 2.2,
            rr_mi_std: 0.13,
            rr_mi_half: 0.07,
            rr_stroke_std: 0.21,
            rr_stroke_half: 0.14,
            mi_weight: 0.70,
            stroke_weight: 0.30,
            disutility_half: 0.001,
            disutility_std: 0.002,
            gamma: 0.97,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(BdrlError::invalid_config(
                "dynamics.gamma",
                format!("must lie in (0, 1), got {}", self.gamma),
            ));
        }
        if (self.mi_weight + self.stroke_weight - 1.0).abs() > 1e-12 {
            return Err(BdrlError::invalid_config(
                "dynamics.mi_weight",
                "event attribution weights must sum to 1",
            ));
        }
        for (name, v) in [
            ("rr_mi_std", self.rr_mi_std),
            ("rr_mi_half", self.rr_mi_half),
            ("rr_stroke_std", self.rr_stroke_std),
            ("rr_stroke_half", self.rr_stroke_half),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(BdrlError::invalid_config(
                    format!("dynamics.{name}"),
                    format!("must lie in [0, 1), got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Baseline covariates; also the clustering feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientFeatures {
    pub age: f64,
    pub sex: f64,
    pub race: f64,
    pub smoking: f64,
    pub diabetes: f64,
    pub systolic_bp: f64,
    pub total_cholesterol: f64,
    pub hdl: f64,
    pub ldl: f64,
}

impl PatientFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.age,
            self.sex,
            self.race,
            self.smoking,
            self.diabetes,
            self.systolic_bp,
            self.total_cholesterol,
            self.hdl,
            self.ldl,
        ]
    }
}

/// Quality-of-life weights by condition class; death is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QolWeights {
    pub healthy: f64,
    pub history: f64,
    pub survived_event_year: f64,
}

impl Default for QolWeights {
    fn default() -> Self {
        QolWeights {
            healthy: 1.0,
            history: 0.90,
            survived_event_year: 0.80,
        }
    }
}

impl QolWeights {
    pub fn weight(&self, condition: HealthCondition) -> f64 {
        match condition {
            HealthCondition::Healthy => self.healthy,
            HealthCondition::HistoryMi
            | HealthCondition::HistoryStroke
            | HealthCondition::HistoryBoth => self.history,
            HealthCondition::SurvivedMi | HealthCondition::SurvivedStroke => {
                self.survived_event_year
            }
            _ => 0.0,
        }
    }
}

/// One agent's MDP: covariates, annual risks, fatality odds, rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientModel {
    pub id: usize,
    pub features: PatientFeatures,
    pub base_mi_risk: f64,
    pub base_stroke_risk: f64,
    pub base_non_ascvd_death_risk: f64,
    pub mi_fatality: f64,
    pub stroke_fatality: f64,
    pub history_odds_multiplier: f64,
    pub qol: QolWeights,
    pub start_condition: HealthCondition,
}

/// Shared logistic coefficients with per-outcome intercepts. Covariates are
/// centered before entering the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskCoefficients {
    pub mi_intercept: f64,
    pub stroke_intercept: f64,
    pub death_intercept: f64,
    pub age: f64,
    pub systolic_bp: f64,
    pub smoking: f64,
    pub diabetes: f64,
    pub cholesterol: f64,
}

impl Default for RiskCoefficients {
    fn default() -> Self {
        RiskCoefficients {
            mi_intercept: -4.6,
            stroke_intercept: -5.2,
            death_intercept: -4.9,
            age: 0.08,
            systolic_bp: 0.02,
            smoking: 0.55,
            diabetes: 0.45,
            cholesterol: 0.004,
        }
    }
}

/// Cohort generator settings; all fields have documented defaults so partial
/// overrides deserialize cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortParams {
    pub age_min: u32,
    pub age_max: u32,
    pub sex_rate: f64,
    pub race_rate: f64,
    pub smoking_rate: f64,
    pub diabetes_rate: f64,
    pub sbp_mean: f64,
    pub sbp_sd: f64,
    pub cholesterol_mean: f64,
    pub cholesterol_sd: f64,
    pub hdl_mean: f64,
    pub hdl_sd: f64,
    pub ldl_mean: f64,
    pub ldl_sd: f64,
    pub coefficients: RiskCoefficients,
    pub mi_fatality_min: f64,
    pub mi_fatality_max: f64,
    pub stroke_fatality_min: f64,
    pub stroke_fatality_max: f64,
    pub history_odds_multiplier: f64,
    pub qol: QolWeights,
    pub start_condition: HealthCondition,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            age_min: 50,
            age_max: 54,
            sex_rate: 0.5,
            race_rate: 0.5,
            smoking_rate: 0.20,
            diabetes_rate: 0.15,
            sbp_mean: 130.0,
            sbp_sd: 15.0,
            cholesterol_mean: 200.0,
            cholesterol_sd: 30.0,
            hdl_mean: 50.0,
            hdl_sd: 12.0,
            ldl_mean: 120.0,
            ldl_sd: 25.0,
            coefficients: RiskCoefficients::default(),
            mi_fatality_min: 0.20,
            mi_fatality_max: 0.40,
            stroke_fatality_min: 0.15,
            stroke_fatality_max: 0.35,
            history_odds_multiplier: 2.0,
            qol: QolWeights::default(),
            start_condition: HealthCondition::Healthy,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CohortParams {
    fn base_risks(&self, f: &PatientFeatures) -> (f64, f64, f64) {
        let c = &self.coefficients;
        let predictor = c.age * (f.age - 52.0)
            + c.systolic_bp * (f.systolic_bp - 130.0) / 10.0
            + c.smoking * f.smoking
            + c.diabetes * f.diabetes
            + c.cholesterol * (f.total_cholesterol - 200.0);
        (
            sigmoid(c.mi_intercept + predictor),
            sigmoid(c.stroke_intercept + predictor),
            sigmoid(c.death_intercept + 0.5 * predictor),
        )
    }
}

/// Seeded synthetic cohort draw; identical seeds yield identical cohorts.
pub fn generate_cohort(n_agents: usize, seed: u64, params: &CohortParams) -> Result<Vec<PatientModel>> {
    if n_agents == 0 {
        return Err(BdrlError::EmptyInput("cohort of zero agents".into()));
    }
    let sbp = Normal::new(params.sbp_mean, params.sbp_sd)
        .map_err(|e| BdrlError::invalid_config("cohort.sbp_sd", e.to_string()))?;
    let tc = Normal::new(params.cholesterol_mean, params.cholesterol_sd)
        .map_err(|e| BdrlError::invalid_config("cohort.cholesterol_sd", e.to_string()))?;
    let hdl = Normal::new(params.hdl_mean, params.hdl_sd)
        .map_err(|e| BdrlError::invalid_config("cohort.hdl_sd", e.to_string()))?;
    let ldl = Normal::new(params.ldl_mean, params.ldl_sd)
        .map_err(|e| BdrlError::invalid_config("cohort.ldl_sd", e.to_string()))?;

    let mut out = Vec::with_capacity(n_agents);
    for id in 0..n_agents {
        let mut rng = stream_rng(seed, StreamDomain::Cohort, id as u64);
        let features = PatientFeatures {
            age: rng.random_range(params.age_min..=params.age_max) as f64,
            sex: if rng.random::<f64>() < params.sex_rate { 1.0 } else { 0.0 },
            race: if rng.random::<f64>() < params.race_rate { 1.0 } else { 0.0 },
            smoking: if rng.random::<f64>() < params.smoking_rate { 1.0 } else { 0.0 },
            diabetes: if rng.random::<f64>() < params.diabetes_rate { 1.0 } else { 0.0 },
            systolic_bp: sbp.sample(&mut rng).clamp(95.0, 185.0),
            total_cholesterol: tc.sample(&mut rng).clamp(120.0, 320.0),
            hdl: hdl.sample(&mut rng).clamp(20.0, 100.0),
            ldl: ldl.sample(&mut rng).clamp(40.0, 250.0),
        };
        let (base_mi_risk, base_stroke_risk, base_non_ascvd_death_risk) =
            params.base_risks(&features);
        out.push(PatientModel {
            id,
            features,
            base_mi_risk,
            base_stroke_risk,
            base_non_ascvd_death_risk,
            mi_fatality: rng.random_range(params.mi_fatality_min..=params.mi_fatality_max),
            stroke_fatality: rng
                .random_range(params.stroke_fatality_min..=params.stroke_fatality_max),
            history_odds_multiplier: params.history_odds_multiplier,
            qol: params.qol,
            start_condition: params.start_condition,
        });
    }
    Ok(out)
}

/// Multiplicative per-dose risk reduction.
pub fn treated_risk(base: f64, action: TreatmentAction, rr_std: f64, rr_half: f64) -> f64 {
    base * (1.0 - rr_std).powi(action.std_doses as i32)
        * (1.0 - rr_half).powi(action.half_doses as i32)
}

fn scale_odds(p: f64, multiplier: f64) -> f64 {
    multiplier * p / (1.0 - p + multiplier * p)
}

fn clamp_risk(p: f64, what: &str) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        log::warn!("{what} risk {p} left [0, 1]; clamping");
        p.clamp(0.0, 1.0)
    } else {
        p
    }
}

/// Exact one-year transition probabilities from `condition` under `action`.
pub fn transition_row(
    patient: &PatientModel,
    condition: HealthCondition,
    action: TreatmentAction,
    params: &DynamicsParams,
) -> [f64; CONDITION_COUNT] {
    let mut row = [0.0; CONDITION_COUNT];
    if condition.is_death() {
        row[HealthCondition::Dead.index()] = 1.0;
        return row;
    }

    let mut r_mi = treated_risk(patient.base_mi_risk, action, params.rr_mi_std, params.rr_mi_half);
    let mut r_stroke = treated_risk(
        patient.base_stroke_risk,
        action,
        params.rr_stroke_std,
        params.rr_stroke_half,
    );
    if condition.has_mi_history() || condition.has_stroke_history() {
        r_mi = scale_odds(r_mi, patient.history_odds_multiplier);
        r_stroke = scale_odds(r_stroke, patient.history_odds_multiplier);
    }
    let r_mi = clamp_risk(r_mi, "treated MI");
    let r_stroke = clamp_risk(r_stroke, "treated stroke");
    let r_death = clamp_risk(patient.base_non_ascvd_death_risk, "non-ASCVD death");

    // Attribute simultaneous independent events by the configured weighting.
    let p_mi_event = r_mi * (1.0 - r_stroke) + params.mi_weight * r_mi * r_stroke;
    let p_stroke_event = r_stroke * (1.0 - r_mi) + params.stroke_weight * r_mi * r_stroke;
    let p_no_event = (1.0 - r_mi) * (1.0 - r_stroke);

    let mi_nonfatal_target = if condition.has_stroke_history() {
        HealthCondition::HistoryBoth
    } else {
        HealthCondition::SurvivedMi
    };
    let stroke_nonfatal_target = if condition.has_mi_history() {
        HealthCondition::HistoryBoth
    } else {
        HealthCondition::SurvivedStroke
    };

    row[HealthCondition::DeadMi.index()] += p_mi_event * patient.mi_fatality;
    row[mi_nonfatal_target.index()] += p_mi_event * (1.0 - patient.mi_fatality);
    row[HealthCondition::DeadStroke.index()] += p_stroke_event * patient.stroke_fatality;
    row[stroke_nonfatal_target.index()] += p_stroke_event * (1.0 - patient.stroke_fatality);
    row[HealthCondition::DeadNonAscvd.index()] += p_no_event * r_death;
    row[condition.successor().index()] += p_no_event * (1.0 - r_death);
    row
}

/// Annual QALY reward: condition weight minus medication disutility.
pub fn reward(
    patient: &PatientModel,
    condition: HealthCondition,
    action: TreatmentAction,
    params: &DynamicsParams,
) -> f64 {
    if condition.is_death() {
        return 0.0;
    }
    patient.qol.weight(condition)
        - action.std_doses as f64 * params.disutility_std
        - action.half_doses as f64 * params.disutility_half
}

/// Exact state-action values of the patient MDP, used as the behavior
/// policy's value function during data collection.
pub fn value_iteration(patient: &PatientModel, params: &DynamicsParams, tol: f64) -> Vec<Vec<f64>> {
    let actions = TreatmentAction::all();
    let mut q = vec![vec![0.0; actions.len()]; CONDITION_COUNT];
    let rows: Vec<Vec<[f64; CONDITION_COUNT]>> = HealthCondition::ALL
        .iter()
        .map(|&c| {
            actions
                .iter()
                .map(|&a| transition_row(patient, c, a, params))
                .collect()
        })
        .collect();
    let rewards: Vec<Vec<f64>> = HealthCondition::ALL
        .iter()
        .map(|&c| actions.iter().map(|&a| reward(patient, c, a, params)).collect())
        .collect();
    for _ in 0..200_000 {
        let values: Vec<f64> = q
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..CONDITION_COUNT {
            for (a, _) in actions.iter().enumerate() {
                let next: f64 = rows[s][a]
                    .iter()
                    .zip(&values)
                    .map(|(p, v)| p * v)
                    .sum();
                let updated = rewards[s][a] + params.gamma * next;
                delta = delta.max((updated - q[s][a]).abs());
                q[s][a] = updated;
            }
        }
        if delta < tol {
            break;
        }
    }
    q
}

/// Epsilon-greedy action over per-action values with lowest-index tie-break.
fn epsilon_greedy(values: &[f64], exploration_rate: f64, rng: &mut impl Rng) -> ActionId {
    if exploration_rate > 0.0 && rng.random::<f64>() < exploration_rate {
        rng.random_range(0..values.len())
    } else {
        crate::bellman::argmax_lowest_index(values)
    }
}

fn sample_row(row: &[f64; CONDITION_COUNT], rng: &mut impl Rng) -> StateId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    CONDITION_COUNT - 1
}

/// Simulates `l` trajectories from the patient's start condition until the
/// absorbing state or the horizon cap, acting epsilon-greedily on
/// `behavior_q[state][action]`.
pub fn sample_trajectories(
    patient: &PatientModel,
    behavior_q: &[Vec<f64>],
    params: &DynamicsParams,
    l: usize,
    exploration_rate: f64,
    horizon: usize,
    seed: u64,
) -> Vec<Vec<Transition>> {
    let actions = TreatmentAction::all();
    let mut rng = stream_rng(seed, StreamDomain::Trajectory, patient.id as u64);
    let mut out = Vec::with_capacity(l);
    for _ in 0..l {
        let mut trajectory = Vec::new();
        let mut condition = patient.start_condition;
        for _ in 0..horizon {
            let s = condition.index();
            let a = epsilon_greedy(&behavior_q[s], exploration_rate, &mut rng);
            let action = actions[a];
            let r = reward(patient, condition, action, params);
            let row = transition_row(patient, condition, action, params);
            let next = sample_row(&row, &mut rng);
            trajectory.push(Transition {
                state: s,
                action: a,
                reward: r,
                next_state: next,
            });
            condition = HealthCondition::from_index(next).unwrap();
            if condition == HealthCondition::Dead {
                break;
            }
        }
        out.push(trajectory);
    }
    out
}

/// Discounted cumulative reward of one trajectory.
pub fn discounted_return(trajectory: &[Transition], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in trajectory {
        total += discount * t.reward;
        discount *= gamma;
    }
    total
}
