//! Agent grouping by baseline features: standardized k-means with k-means++
//! restarts and elbow-based selection of the cluster count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BdrlError, Result};
use crate::rng::{stream_rng, StreamDomain};

const RESTARTS: usize = 10;

/// Final clustering of agents into `k` groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    /// `assignment[agent] = group id` in `0..k`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances of the final assignment.
    pub inertia: f64,
}

impl GroupAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Agent ids per group, ascending within each group.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k()];
        for (agent, &g) in self.assignment.iter().enumerate() {
            groups[g].push(agent);
        }
        groups
    }
}

/// Chosen cluster count plus the full inertia curve for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub chosen_k: usize,
    /// `(k, inertia)` pairs over the scanned range.
    pub curve: Vec<(usize, f64)>,
    /// False when the curve shows no pronounced elbow.
    pub confident: bool,
}

/// Zero-mean unit-variance scaling per dimension; constant dimensions map to 0.
pub fn standardize(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if features.is_empty() {
        return Vec::new();
    }
    let n = features.len() as f64;
    let dims = features[0].len();
    let mut mean = vec![0.0; dims];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dims];
    for f in features {
        for d in 0..dims {
            let diff = f[d] - mean[d];
            var[d] += diff * diff;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    features
        .iter()
        .map(|f| {
            (0..dims)
                .map(|d| {
                    if var[d] > 0.0 {
                        (f[d] - mean[d]) / var[d].sqrt()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = squared_distance(point, &centroids[0]);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

fn kmeans_plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids).1)
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // All points coincide with a centroid; any choice is equivalent.
            centroids.push(points[rng.random_range(0..points.len())].clone());
            continue;
        }
        let mut u = rng.random::<f64>() * total;
        let mut chosen = points.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.push(points[chosen].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> GroupAssignment {
    let k = centroids.len();
    let dims = points[0].len();
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (g, _) = nearest_centroid(p, &centroids);
            if assignment[i] != g {
                assignment[i] = g;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (p, &g) in points.iter().zip(&assignment) {
            counts[g] += 1;
            for d in 0..dims {
                sums[g][d] += p[d];
            }
        }
        for g in 0..k {
            if counts[g] == 0 {
                // Reseed an empty cluster from the point farthest from every
                // centroid (lowest index on ties).
                let mut far = 0;
                let mut far_d = -1.0;
                for (i, p) in points.iter().enumerate() {
                    let (_, d) = nearest_centroid(p, &centroids);
                    if d > far_d {
                        far = i;
                        far_d = d;
                    }
                }
                centroids[g] = points[far].clone();
                changed = true;
            } else {
                for d in 0..dims {
                    centroids[g][d] = sums[g][d] / counts[g] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    // Final assignment against the converged centroids.
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (g, d) = nearest_centroid(p, &centroids);
        assignment[i] = g;
        inertia += d;
    }
    GroupAssignment {
        assignment,
        centroids,
        inertia,
    }
}

/// Standardizes features, then runs Lloyd's iteration from `RESTARTS`
/// k-means++ initializations and keeps the lowest-inertia result
/// (ties go to the earliest restart).
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<GroupAssignment> {
    if features.is_empty() {
        return Err(BdrlError::EmptyInput("kmeans over no agents".into()));
    }
    if k == 0 || k > features.len() {
        return Err(BdrlError::invalid_config(
            "grouping.k",
            format!("k must lie in 1..={}, got {k}", features.len()),
        ));
    }
    let points = standardize(features);
    let mut best: Option<GroupAssignment> = None;
    for restart in 0..RESTARTS {
        let mut rng = stream_rng(seed, StreamDomain::ClusterRestart, restart as u64);
        let init = kmeans_plus_plus_init(&points, k, &mut rng);
        let result = lloyd(&points, init, max_iters);
        let better = match &best {
            None => true,
            Some(b) => result.inertia < b.inertia,
        };
        if better {
            best = Some(result);
        }
    }
    Ok(best.unwrap())
}

/// Scans `k_range`, picks the k with the largest second difference of the
/// inertia curve, and flags degenerate curves as low-confidence.
pub fn elbow_select(features: &[Vec<f64>], k_range: &[usize], seed: u64) -> Result<ElbowResult> {
    if k_range.len() < 3 {
        return Err(BdrlError::invalid_config(
            "grouping.k_range",
            format!("elbow selection needs at least 3 candidate k, got {}", k_range.len()),
        ));
    }
    let mut curve = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let assignment = kmeans(features, k, seed, 300)?;
        curve.push((k, assignment.inertia));
    }
    let scale = curve
        .iter()
        .map(|(_, i)| *i)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-300);
    let mut chosen = curve[1].0;
    let mut best_dd = f64::NEG_INFINITY;
    for w in curve.windows(3) {
        let dd = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if dd > best_dd {
            best_dd = dd;
            chosen = w[1].0;
        }
    }
    let confident = best_dd > 1e-9 * scale;
    if !confident {
        // No pronounced elbow; the flat-curve degenerate case prefers the
        // smallest k that already explains everything.
        if curve[0].1 <= 1e-12 * scale.max(1.0) {
            chosen = curve[0].0;
        }
    }
    Ok(ElbowResult {
        chosen_k: chosen,
        curve,
        confident,
    })
}
