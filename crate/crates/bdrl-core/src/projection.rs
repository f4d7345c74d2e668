//! Post-update projection: accept a provisional estimate, solve a one-variable
//! convex QP for the smallest admissible mixture weight, or fall back to a
//! contraction toward the group reference.
//!
//! For distributions on a shared grid the mixture `alpha * old + (1 - alpha) * new`
//! has CDF `alpha * F_old + (1 - alpha) * F_new`, so both the objective
//! `w2(mix, new)` and the constraint `w2(mix, ref) <= epsilon` are quadratics in
//! `alpha`. With `a_d = F_old(z_d) - F_new(z_d)` and `b_d = F_new(z_d) - F_ref(z_d)`:
//!
//! ```text
//! w2^2(mix, ref) = dz * (A alpha^2 + 2 B alpha + C),   A = sum a_d^2,
//!                                                      B = sum a_d b_d,
//!                                                      C = sum b_d^2,
//! ```
//!
//! so the constraint is `A alpha^2 + 2 B alpha + C <= epsilon^2 / dz` and the
//! objective `w2(mix, new) = alpha * sqrt(dz * A)` is increasing in `alpha`:
//! the smallest feasible `alpha` is optimal.

use serde::{Deserialize, Serialize};

use crate::dist::{CategoricalReturn, MixWeight};
use crate::error::{BdrlError, Result};

/// `A` values below this are treated as the degenerate `old == new` case.
const DEGENERATE_A: f64 = 1e-24;
/// Smallest admissible solved mixture weight when no floor is configured.
const MIN_ALPHA: f64 = f64::EPSILON;
/// Numerical slack on feasibility comparisons.
const FEAS_SLACK: f64 = 1e-12;

/// Tolerance and fallback parameters for the projection step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Maximum allowed distance between an agent's return and the group
    /// reference, in the same units as `w2_distance`.
    pub epsilon: f64,
    /// Fallback mixture weight on the previous estimate.
    pub rho: f64,
    /// Lower bound applied to solved mixture weights (0 disables it).
    #[serde(default)]
    pub alpha_floor: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            epsilon: 0.010,
            rho: 0.90,
            alpha_floor: 0.05,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(BdrlError::invalid_config(
                "projection.epsilon",
                format!("must be > 0, got {}", self.epsilon),
            ));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(BdrlError::invalid_config(
                "projection.rho",
                format!("must lie in (0, 1), got {}", self.rho),
            ));
        }
        if !(0.0..1.0).contains(&self.alpha_floor) {
            return Err(BdrlError::invalid_config(
                "projection.alpha_floor",
                format!("must lie in [0, 1), got {}", self.alpha_floor),
            ));
        }
        Ok(())
    }

    /// `epsilon = +inf` never rejects a provisional estimate, which disables
    /// the projection entirely.
    pub fn disabled() -> Self {
        ProjectionConfig {
            epsilon: f64::INFINITY,
            rho: 0.90,
            alpha_floor: 0.0,
        }
    }

    fn is_disabled(&self) -> bool {
        self.epsilon.is_infinite()
    }
}

/// Which branch of the projection fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionBranch {
    Accepted,
    Solved,
    Fallback,
}

/// Result of one projection call.
#[derive(Debug, Clone)]
pub struct ProjectionOutcome {
    pub result: CategoricalReturn,
    pub branch: ProjectionBranch,
    /// Absent exactly when the branch is `Accepted`; carries the solved alpha
    /// or the fallback rho otherwise.
    pub alpha_used: Option<MixWeight>,
}

/// Quadratic coefficients of the projection constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpCoefficients {
    /// Coefficient of `alpha^2`: `sum a_d^2`.
    pub a: f64,
    /// Half the linear coefficient: `sum a_d b_d`.
    pub b: f64,
    /// Constant term: `sum b_d^2`.
    pub c: f64,
    /// Feasibility bound `epsilon^2 / dz` so that the constraint
    /// `A a^2 + 2 B a + C <= bound` is exactly `w2(mix, ref) <= epsilon`.
    pub bound: f64,
}

/// Computes the constraint quadratic for a triple on one grid.
pub fn qp_coefficients(
    z_old: &CategoricalReturn,
    z_new: &CategoricalReturn,
    z_ref: &CategoricalReturn,
    epsilon: f64,
) -> Result<QpCoefficients> {
    if !(epsilon > 0.0) {
        return Err(BdrlError::invalid_config(
            "epsilon",
            format!("must be > 0, got {epsilon}"),
        ));
    }
    if !z_old.grid().same_support(z_new.grid()) || !z_new.grid().same_support(z_ref.grid()) {
        return Err(BdrlError::SupportMismatch(
            "qp_coefficients requires one shared grid".into(),
        ));
    }
    let (po, pn, pr) = (z_old.probs(), z_new.probs(), z_ref.probs());
    let mut f_old = 0.0;
    let mut f_new = 0.0;
    let mut f_ref = 0.0;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for d in 0..po.len() - 1 {
        f_old += po[d];
        f_new += pn[d];
        f_ref += pr[d];
        let ad = f_old - f_new;
        let bd = f_new - f_ref;
        a += ad * ad;
        b += ad * bd;
        c += bd * bd;
    }
    let dz = z_old.grid().delta_z();
    Ok(QpCoefficients {
        a,
        b,
        c,
        bound: epsilon * epsilon / dz,
    })
}

/// Full three-way projection of a provisional estimate `z_new` given the
/// previous estimate `z_old` and the frozen group reference `z_ref`.
pub fn solve_projection(
    z_old: &CategoricalReturn,
    z_new: &CategoricalReturn,
    z_ref: &CategoricalReturn,
    cfg: &ProjectionConfig,
) -> Result<ProjectionOutcome> {
    cfg.validate()?;
    let d_new = z_ref.w2_distance(z_new)?;
    if cfg.is_disabled() || d_new < cfg.epsilon {
        return Ok(ProjectionOutcome {
            result: z_new.clone(),
            branch: ProjectionBranch::Accepted,
            alpha_used: None,
        });
    }
    let q = qp_coefficients(z_old, z_new, z_ref, cfg.epsilon)?;

    if q.a <= DEGENERATE_A {
        // old == new: the constraint no longer depends on alpha.
        if q.c <= q.bound + FEAS_SLACK {
            return Ok(ProjectionOutcome {
                result: z_new.clone(),
                branch: ProjectionBranch::Accepted,
                alpha_used: None,
            });
        }
        return fallback(z_old, z_ref, cfg);
    }

    let shifted_c = q.c - q.bound;
    let quarter_disc = q.b * q.b - q.a * shifted_c;
    if quarter_disc < 0.0 {
        return fallback(z_old, z_ref, cfg);
    }
    let root = quarter_disc.sqrt();
    // Numerically stable pair of roots of A x^2 + 2 B x + shifted_c.
    let sign = if q.b >= 0.0 { 1.0 } else { -1.0 };
    let qv = -(q.b + sign * root);
    let (r1, r2) = if qv == 0.0 {
        (0.0, 0.0)
    } else {
        (qv / q.a, shifted_c / qv)
    };
    let (alpha_lo, alpha_hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };

    if alpha_lo >= 1.0 || alpha_hi <= 0.0 {
        return fallback(z_old, z_ref, cfg);
    }
    // Smallest feasible alpha in (0, 1), raised to the floor when the floor
    // itself is feasible.
    let mut alpha = alpha_lo.max(MIN_ALPHA);
    if alpha < cfg.alpha_floor && cfg.alpha_floor <= alpha_hi + FEAS_SLACK {
        alpha = cfg.alpha_floor;
    }
    if alpha >= 1.0 || alpha > alpha_hi + FEAS_SLACK {
        return fallback(z_old, z_ref, cfg);
    }
    let weight = MixWeight::new(alpha)?;
    let result = z_old.mix(z_new, weight)?;
    Ok(ProjectionOutcome {
        result,
        branch: ProjectionBranch::Solved,
        alpha_used: Some(weight),
    })
}

fn fallback(
    z_old: &CategoricalReturn,
    z_ref: &CategoricalReturn,
    cfg: &ProjectionConfig,
) -> Result<ProjectionOutcome> {
    let weight = MixWeight::new(cfg.rho)?;
    let result = z_old.mix(z_ref, weight)?;
    Ok(ProjectionOutcome {
        result,
        branch: ProjectionBranch::Fallback,
        alpha_used: Some(weight),
    })
}

/// One fallback-style contraction `rho * z + (1 - rho) * z_ref`.
pub fn contraction_step(
    z: &CategoricalReturn,
    z_ref: &CategoricalReturn,
    rho: f64,
) -> Result<CategoricalReturn> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(BdrlError::invalid_config(
            "rho",
            format!("must lie in (0, 1), got {rho}"),
        ));
    }
    z.mix(z_ref, MixWeight::new(rho)?)
}

/// Finite-step bound from the geometric fallback decay: smallest `n` with
/// `rho^(n/2) * d0 <= epsilon`.
pub fn contraction_steps_bound(d0: f64, epsilon: f64, rho: f64) -> usize {
    ((epsilon * epsilon / (d0 * d0)).ln() / rho.ln()).ceil() as usize
}

/// One JSONL record per projection event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionEvent {
    pub epoch: usize,
    pub group: usize,
    pub agent: usize,
    pub branch: ProjectionBranch,
    pub alpha: Option<f64>,
    pub d_before: f64,
    pub d_after: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::SupportGrid;
    use std::sync::Arc;

    fn unit_grid(n: usize) -> Arc<SupportGrid> {
        SupportGrid::shared(0.0, (n - 1) as f64, n).unwrap()
    }

    fn random_dist(grid: &Arc<SupportGrid>, state: &mut u64) -> CategoricalReturn {
        let mut next = move |s: &mut u64| {
            *s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((*s >> 11) as f64) / ((1u64 << 53) as f64)
        };
        let mut p: Vec<f64> = (0..grid.atom_count()).map(|_| next(state)).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= sum);
        CategoricalReturn::new(Arc::clone(grid), p).unwrap()
    }

    #[test]
    fn coefficients_degenerate_cases() {
        let g = unit_grid(2);
        let old = CategoricalReturn::point_mass(Arc::clone(&g), 1).unwrap();
        let new = CategoricalReturn::new(Arc::clone(&g), vec![0.3, 0.7]).unwrap();
        let rf = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();

        // old == new: a_d vanishes identically and C = w2^2 / dz on this grid.
        let q = qp_coefficients(&new, &new, &rf, 0.5).unwrap();
        assert_eq!(q.a, 0.0);
        assert_eq!(q.b, 0.0);
        let w2 = new.w2_distance(&rf).unwrap();
        assert!((q.c - w2 * w2 / g.delta_z()).abs() < 1e-12);

        // new == ref: b_d vanishes identically.
        let q = qp_coefficients(&old, &new, &new, 0.5).unwrap();
        assert_eq!(q.b, 0.0);
        assert_eq!(q.c, 0.0);
    }

    #[test]
    fn quadratic_identity_against_distribution_route() {
        // dz * (A a^2 + 2 B a + C) == w2^2(mix(old, new, a), ref) on any grid.
        let g = SupportGrid::shared(-2.0, 5.0, 17).unwrap();
        let mut s = 3u64;
        for _ in 0..20 {
            let old = random_dist(&g, &mut s);
            let new = random_dist(&g, &mut s);
            let rf = random_dist(&g, &mut s);
            let q = qp_coefficients(&old, &new, &rf, 1.0).unwrap();
            for k in 0..100 {
                let alpha = k as f64 / 99.0;
                let mixed = old.mix(&new, MixWeight::new(alpha).unwrap()).unwrap();
                let lhs = g.delta_z() * (q.a * alpha * alpha + 2.0 * q.b * alpha + q.c);
                let rhs = mixed.w2_distance(&rf).unwrap().powi(2);
                assert!((lhs - rhs).abs() < 1e-9, "alpha={alpha}: {lhs} vs {rhs}");
            }
            assert!(q.b * q.b <= q.a * q.c + 1e-9);
        }
    }

    #[test]
    fn solve_accepts_exact_match() {
        let g = unit_grid(2);
        let old = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let new = CategoricalReturn::new(Arc::clone(&g), vec![0.4, 0.6]).unwrap();
        let cfg = ProjectionConfig {
            epsilon: 0.5,
            rho: 0.9,
            alpha_floor: 0.0,
        };
        let out = solve_projection(&old, &new, &new, &cfg).unwrap();
        assert_eq!(out.branch, ProjectionBranch::Accepted);
        assert!(out.alpha_used.is_none());
        assert_eq!(out.result, new);
    }

    #[test]
    fn solve_example_hand_quadratic() {
        // grid (0, 1), old = ref = point mass at atom 1, new = point mass at 0,
        // epsilon = 0.5: constraint (1 - alpha)^2 <= 0.25, alpha* = 0.5.
        let g = unit_grid(2);
        let old = CategoricalReturn::point_mass(Arc::clone(&g), 1).unwrap();
        let new = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let cfg = ProjectionConfig {
            epsilon: 0.5,
            rho: 0.9,
            alpha_floor: 0.0,
        };
        let out = solve_projection(&old, &new, &old, &cfg).unwrap();
        assert_eq!(out.branch, ProjectionBranch::Solved);
        let alpha = out.alpha_used.unwrap().value();
        assert!((alpha - 0.5).abs() < 1e-12);
        assert!((out.result.probs()[0] - 0.5).abs() < 1e-12);
        assert!((out.result.probs()[1] - 0.5).abs() < 1e-12);

        // Grid-search oracle at step 1e-5 over the actual distance route.
        let mut best = None;
        for k in 0..=100_000u64 {
            let a = k as f64 * 1e-5;
            let mixed = old.mix(&new, MixWeight::new(a.min(1.0)).unwrap()).unwrap();
            if old.w2_distance(&mixed).unwrap() <= cfg.epsilon {
                best = Some(a);
                break;
            }
        }
        assert!((best.unwrap() - alpha).abs() <= 1e-4);
    }

    #[test]
    fn solve_infeasible_falls_back() {
        // old == new, far reference: constraint cannot be met by any alpha.
        let g = unit_grid(2);
        let pm0 = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let pm1 = CategoricalReturn::point_mass(Arc::clone(&g), 1).unwrap();
        let cfg = ProjectionConfig {
            epsilon: 0.5,
            rho: 0.9,
            alpha_floor: 0.0,
        };
        // Oracle: no alpha on the grid satisfies the constraint.
        for k in 0..=1000u64 {
            let a = k as f64 / 1000.0;
            let mixed = pm0.mix(&pm0, MixWeight::new(a).unwrap()).unwrap();
            assert!(pm1.w2_distance(&mixed).unwrap() > cfg.epsilon);
        }
        let out = solve_projection(&pm0, &pm0, &pm1, &cfg).unwrap();
        assert_eq!(out.branch, ProjectionBranch::Fallback);
        assert_eq!(out.alpha_used.unwrap().value(), 0.9);
        let expected = pm0.mix(&pm1, MixWeight::new(0.9).unwrap()).unwrap();
        assert_eq!(out.result, expected);
    }

    #[test]
    fn alpha_floor_raises_solved_weight() {
        let g = unit_grid(2);
        let old = CategoricalReturn::point_mass(Arc::clone(&g), 1).unwrap();
        let new = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let cfg = ProjectionConfig {
            epsilon: 0.6,
            rho: 0.9,
            alpha_floor: 0.55,
        };
        // Feasible interval is [0.4, 1); the floor is feasible and binds.
        let out = solve_projection(&old, &new, &old, &cfg).unwrap();
        assert_eq!(out.branch, ProjectionBranch::Solved);
        assert!((out.alpha_used.unwrap().value() - 0.55).abs() < 1e-12);

        // An infeasible floor leaves the smallest feasible alpha in place:
        // here the feasible interval is [1/18, 1/6] and the floor 0.5 is
        // beyond it.
        let old = CategoricalReturn::new(Arc::clone(&g), vec![0.1, 0.9]).unwrap();
        let new = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let rf = CategoricalReturn::new(Arc::clone(&g), vec![0.9, 0.1]).unwrap();
        let tight = ProjectionConfig {
            epsilon: 0.05,
            rho: 0.9,
            alpha_floor: 0.5,
        };
        let out = solve_projection(&old, &new, &rf, &tight).unwrap();
        assert_eq!(out.branch, ProjectionBranch::Solved);
        assert!((out.alpha_used.unwrap().value() - 1.0 / 18.0).abs() < 1e-9);
        assert!(out.result.w2_distance(&rf).unwrap() <= tight.epsilon + 1e-9);
    }

    #[test]
    fn contraction_examples() {
        let g = unit_grid(2);
        let z = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let rf = CategoricalReturn::point_mass(Arc::clone(&g), 1).unwrap();
        let stepped = contraction_step(&z, &rf, 0.25).unwrap();
        assert_eq!(stepped.probs(), &[0.25, 0.75]);
        let d = stepped.w2_distance(&rf).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
        assert!(d <= 0.25f64.sqrt() * z.w2_distance(&rf).unwrap() + 1e-9);

        let same = contraction_step(&rf, &rf, 0.5).unwrap();
        assert_eq!(same, rf);
        assert!(contraction_step(&z, &rf, 1.0).is_err());
    }

    #[test]
    fn finite_step_convergence_count() {
        // d0 = 1, epsilon = 0.1, rho = 0.9 gives N = 44; iteration confirms.
        assert_eq!(contraction_steps_bound(1.0, 0.1, 0.9), 44);
        let g = unit_grid(2);
        let mut z = CategoricalReturn::point_mass(Arc::clone(&g), 0).unwrap();
        let rf = CategoricalReturn::point_mass(Arc::clone(&g), 1).unwrap();
        assert!((z.w2_distance(&rf).unwrap() - 1.0).abs() < 1e-15);
        let mut steps = 0;
        while z.w2_distance(&rf).unwrap() > 0.1 {
            z = contraction_step(&z, &rf, 0.9).unwrap();
            steps += 1;
            assert!(steps <= 44, "exceeded the Proposition-style bound");
        }
        assert!(steps <= 44);
    }

    #[test]
    fn one_step_stability_random_instances() {
        let g = SupportGrid::shared(0.0, 10.0, 21).unwrap();
        let mut s = 99u64;
        let cfg = ProjectionConfig {
            epsilon: 0.4,
            rho: 0.85,
            alpha_floor: 0.05,
        };
        for _ in 0..500 {
            let old = random_dist(&g, &mut s);
            let new = random_dist(&g, &mut s);
            let rf = random_dist(&g, &mut s);
            let d_before = old.w2_distance(&rf).unwrap();
            let out = solve_projection(&old, &new, &rf, &cfg).unwrap();
            let d_after = out.result.w2_distance(&rf).unwrap();
            assert!(d_after <= d_before.max(cfg.epsilon) + 1e-9);
            match out.branch {
                ProjectionBranch::Accepted => assert!(out.alpha_used.is_none()),
                ProjectionBranch::Solved => {
                    assert!(d_after <= cfg.epsilon + 1e-9);
                    assert!(out.alpha_used.is_some());
                }
                ProjectionBranch::Fallback => {
                    assert!((d_after - cfg.rho * d_before).abs() < 1e-9);
                }
            }
        }
    }
}
