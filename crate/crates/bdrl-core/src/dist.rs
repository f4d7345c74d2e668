//! Categorical return distributions on a fixed, shared support grid.
//!
//! All learned return distributions in this crate live on one uniformly
//! spaced atom grid. Distances between distributions are measured by the
//! CDF-based 2-Wasserstein form used throughout the training and projection
//! code:
//!
//! ```text
//! w2(a, b) = sqrt( dz * sum_{d=1..D-1} (F_a(z_d) - F_b(z_d))^2 )
//! ```
//!
//! The sum stops at `D-1` because both CDFs equal 1 at the top atom for
//! normalized vectors; a regression test asserts the full-sum form agrees.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BdrlError, Result};

/// Probability-sum drift below this is left untouched.
pub const SUM_DRIFT_KEEP: f64 = 1e-9;
/// Drift in `(SUM_DRIFT_KEEP, SUM_DRIFT_REPAIR]` is renormalized; anything
/// beyond is an error, not silent repair.
pub const SUM_DRIFT_REPAIR: f64 = 1e-6;

/// Uniformly spaced return atoms `z_d = z_min + d * dz`, `d = 0..atom_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGrid {
    z_min: f64,
    z_max: f64,
    atom_count: usize,
    delta_z: f64,
}

impl SupportGrid {
    pub fn new(z_min: f64, z_max: f64, atom_count: usize) -> Result<Self> {
        if !z_min.is_finite() || !z_max.is_finite() {
            return Err(BdrlError::NonFinite("grid bounds".into()));
        }
        if atom_count < 2 {
            return Err(BdrlError::invalid_config(
                "grid.atoms",
                format!("need at least 2 atoms, got {atom_count}"),
            ));
        }
        if z_max <= z_min {
            return Err(BdrlError::invalid_config(
                "grid.z_max",
                format!("z_max ({z_max}) must exceed z_min ({z_min})"),
            ));
        }
        let delta_z = (z_max - z_min) / (atom_count - 1) as f64;
        Ok(SupportGrid {
            z_min,
            z_max,
            atom_count,
            delta_z,
        })
    }

    /// Shared handle used by every distribution on this grid.
    pub fn shared(z_min: f64, z_max: f64, atom_count: usize) -> Result<Arc<Self>> {
        Self::new(z_min, z_max, atom_count).map(Arc::new)
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    pub fn delta_z(&self) -> f64 {
        self.delta_z
    }

    /// Value of atom `d` (0-based).
    pub fn atom(&self, d: usize) -> f64 {
        debug_assert!(d < self.atom_count);
        self.z_min + d as f64 * self.delta_z
    }

    pub fn atoms(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.atom_count).map(move |d| self.atom(d))
    }

    /// Two grids are interchangeable iff bounds and atom count match exactly.
    pub fn same_support(&self, other: &SupportGrid) -> bool {
        self.z_min == other.z_min && self.z_max == other.z_max && self.atom_count == other.atom_count
    }
}

/// Mixture weight in the closed interval `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MixWeight(f64);

impl MixWeight {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(BdrlError::invalid_config(
                "mix_weight",
                format!("must lie in [0, 1], got {value}"),
            ));
        }
        Ok(MixWeight(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for MixWeight {
    type Error = BdrlError;

    fn try_from(value: f64) -> Result<Self> {
        MixWeight::new(value)
    }
}

impl From<MixWeight> for f64 {
    fn from(w: MixWeight) -> f64 {
        w.0
    }
}

/// An immutable probability vector over a [`SupportGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalReturn {
    grid: Arc<SupportGrid>,
    probs: Vec<f64>,
}

impl CategoricalReturn {
    /// Validates length, nonnegativity, and normalization (with the drift
    /// repair rule from the module docs).
    pub fn new(grid: Arc<SupportGrid>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.atom_count() {
            return Err(BdrlError::InvalidDistribution(format!(
                "expected {} probabilities, got {}",
                grid.atom_count(),
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(BdrlError::InvalidDistribution(format!(
                "probability {p} is negative or non-finite"
            )));
        }
        let mut probs = probs;
        let sum: f64 = probs.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift > SUM_DRIFT_REPAIR {
            return Err(BdrlError::InvalidDistribution(format!(
                "probabilities sum to {sum}; drift {drift:e} exceeds the repair limit"
            )));
        }
        if drift > SUM_DRIFT_KEEP {
            for p in &mut probs {
                *p /= sum;
            }
        }
        Ok(CategoricalReturn { grid, probs })
    }

    /// All mass on atom `d`.
    pub fn point_mass(grid: Arc<SupportGrid>, d: usize) -> Result<Self> {
        if d >= grid.atom_count() {
            return Err(BdrlError::InvalidDistribution(format!(
                "atom index {d} out of range for {}-atom grid",
                grid.atom_count()
            )));
        }
        let mut probs = vec![0.0; grid.atom_count()];
        probs[d] = 1.0;
        Ok(CategoricalReturn { grid, probs })
    }

    pub fn uniform(grid: Arc<SupportGrid>) -> Self {
        let n = grid.atom_count();
        CategoricalReturn {
            grid,
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn grid(&self) -> &Arc<SupportGrid> {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// CDF evaluated at every atom; the last entry is 1 up to drift.
    pub fn cdf(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.probs.len());
        let mut cum = 0.0;
        for p in &self.probs {
            cum += p;
            out.push(cum);
        }
        out
    }

    /// Expected return `sum_d p_d z_d`.
    pub fn expectation(&self) -> f64 {
        expectation_slice(&self.probs, &self.grid)
    }

    /// Smallest atom value whose CDF reaches `q`.
    pub fn quantile(&self, q: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&q));
        let mut cum = 0.0;
        for (d, p) in self.probs.iter().enumerate() {
            cum += p;
            if cum >= q {
                return self.grid.atom(d);
            }
        }
        self.grid.z_max()
    }

    fn check_support(&self, other: &CategoricalReturn, op: &str) -> Result<()> {
        if !self.grid.same_support(&other.grid) {
            return Err(BdrlError::SupportMismatch(format!(
                "{op}: grids [{}, {}] x{} vs [{}, {}] x{}",
                self.grid.z_min(),
                self.grid.z_max(),
                self.grid.atom_count(),
                other.grid.z_min(),
                other.grid.z_max(),
                other.grid.atom_count()
            )));
        }
        Ok(())
    }

    /// CDF-based 2-Wasserstein distance on the shared grid.
    pub fn w2_distance(&self, other: &CategoricalReturn) -> Result<f64> {
        self.check_support(other, "w2_distance")?;
        Ok(w2_slice(&self.probs, &other.probs, self.grid.delta_z()))
    }

    /// `sum_d p_d ln(p_d / q_d)` with `0 ln(0/x) = 0`; `+inf` on support escape.
    pub fn kl_divergence(&self, other: &CategoricalReturn) -> Result<f64> {
        self.check_support(other, "kl_divergence")?;
        Ok(kl_slice(&self.probs, &other.probs))
    }

    /// Jensen-Shannon divergence; always finite, bounded by `ln 2`.
    pub fn js_divergence(&self, other: &CategoricalReturn) -> Result<f64> {
        self.check_support(other, "js_divergence")?;
        Ok(js_slice(&self.probs, &other.probs))
    }

    /// Convex combination `w * self + (1 - w) * other`.
    pub fn mix(&self, other: &CategoricalReturn, w: MixWeight) -> Result<CategoricalReturn> {
        self.check_support(other, "mix")?;
        let wv = w.value();
        let probs: Vec<f64> = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| wv * a + (1.0 - wv) * b)
            .collect();
        CategoricalReturn::new(Arc::clone(&self.grid), probs)
    }
}

pub(crate) fn expectation_slice(probs: &[f64], grid: &SupportGrid) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(d, p)| p * grid.atom(d))
        .sum()
}

/// `sqrt(dz * sum_{d<D-1} (F_a - F_b)^2)` over raw probability slices.
pub(crate) fn w2_slice(pa: &[f64], pb: &[f64], delta_z: f64) -> f64 {
    debug_assert_eq!(pa.len(), pb.len());
    let mut cum = 0.0;
    let mut sum = 0.0;
    for i in 0..pa.len() - 1 {
        cum += pa[i] - pb[i];
        sum += cum * cum;
    }
    (delta_z * sum).sqrt()
}

pub(crate) fn kl_slice(pa: &[f64], pb: &[f64]) -> f64 {
    debug_assert_eq!(pa.len(), pb.len());
    // Log differences instead of ratio logs: a/b can overflow to infinity
    // when b is subnormal even though the divergence itself is finite.
    let mut sum = 0.0;
    for (&a, &b) in pa.iter().zip(pb) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            sum += a * (a.ln() - b.ln());
        }
    }
    sum
}

pub(crate) fn js_slice(pa: &[f64], pb: &[f64]) -> f64 {
    debug_assert_eq!(pa.len(), pb.len());
    let mut sum = 0.0;
    for (&a, &b) in pa.iter().zip(pb) {
        if a > 0.0 {
            sum += if b == 0.0 {
                0.5 * a * std::f64::consts::LN_2
            } else {
                0.5 * a * (a.ln() - (0.5 * (a + b)).ln())
            };
        }
        if b > 0.0 {
            sum += if a == 0.0 {
                0.5 * b * std::f64::consts::LN_2
            } else {
                0.5 * b * (b.ln() - (0.5 * (a + b)).ln())
            };
        }
    }
    // Roundoff can push the sum a hair past ln 2 or below 0.
    sum.clamp(0.0, std::f64::consts::LN_2)
}

// --- serialization -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GridRepr {
    z_min: f64,
    z_max: f64,
    atoms: usize,
}

#[derive(Serialize, Deserialize)]
struct DistRepr {
    grid: GridRepr,
    probs: Vec<f64>,
}

impl Serialize for CategoricalReturn {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        DistRepr {
            grid: GridRepr {
                z_min: self.grid.z_min(),
                z_max: self.grid.z_max(),
                atoms: self.grid.atom_count(),
            },
            probs: self.probs.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CategoricalReturn {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = DistRepr::deserialize(deserializer)?;
        let grid = SupportGrid::shared(repr.grid.z_min, repr.grid.z_max, repr.grid.atoms)
            .map_err(serde::de::Error::custom)?;
        CategoricalReturn::new(grid, repr.probs).map_err(serde::de::Error::custom)
    }
}
