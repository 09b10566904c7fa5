//! Density-peaks clustering with kNN density (DPC-kNN).
//!
//! ```text
//! ρ_i = exp(−(1/k) Σ_{j ∈ kNN(i)} ‖x_i − x_j‖²)
//! δ_i = min { ‖x_i − x_j‖ : ρ_j > ρ_i }      (max pairwise distance if none)
//! ```
//!
//! Centres are the `target` points with the largest `ρ_i·δ_i`; every other
//! point joins its nearest centre. Densities are kept as `ln ρ` and scores as
//! `ln ρ + ln δ`, which orders points exactly like the product but cannot
//! underflow when features have large norms.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Neighbour count used when the caller does not pick one.
pub fn default_knn(n: usize) -> usize {
    5.min(n.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpcClustering {
    /// `ln ρ_i` per point.
    pub log_density: Vec<f64>,
    /// `δ_i` per point.
    pub delta: Vec<f64>,
    /// Centre point indices, highest score first.
    pub centers: Vec<usize>,
    /// For each point, the position in `centers` of its cluster.
    pub assignment: Vec<usize>,
}

impl DpcClustering {
    /// Member lists, one per cluster, ordered by their smallest member.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.centers.len()];
        for (i, &c) in self.assignment.iter().enumerate() {
            members[c].push(i);
        }
        members.sort_by_key(|m| m[0]);
        members
    }
}

/// Cluster means plus the input rows each one aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduced {
    pub dim: usize,
    pub tokens: Vec<f32>,
    pub provenance: Vec<Vec<usize>>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub fn dpcknn_cluster(
    points: &[f32],
    dim: usize,
    target: usize,
    k_nn: Option<usize>,
) -> Result<DpcClustering> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if target == 0 || target > n {
        return Err(Error::Infeasible(format!(
            "DPC-kNN target {target} must lie in 1..={n}"
        )));
    }
    if k_nn == Some(0) {
        return Err(Error::Infeasible("DPC-kNN needs k >= 1".into()));
    }
    let k = k_nn.unwrap_or_else(|| default_knn(n)).min(n - 1);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    // pass 1: kNN density and the largest pairwise distance
    let pass1: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d2: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(row(i), row(j))).collect();
            let far = d2.iter().copied().fold(0.0f64, f64::max);
            let log_rho = if k == 0 {
                0.0
            } else {
                d2.select_nth_unstable_by(k - 1, f64::total_cmp);
                let mut nearest = d2[..k].to_vec();
                nearest.sort_by(f64::total_cmp);
                -nearest.iter().sum::<f64>() / k as f64
            };
            (log_rho, far)
        })
        .collect();
    let log_density: Vec<f64> = pass1.iter().map(|p| p.0).collect();
    let max_dist = pass1.iter().map(|p| p.1).fold(0.0f64, f64::max).sqrt();

    // pass 2: distance to the nearest strictly denser point
    let delta: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| log_density[j] > log_density[i])
                .map(|j| sq_dist(row(i), row(j)))
                .min_by(f64::total_cmp)
                .map_or(max_dist, f64::sqrt)
        })
        .collect();

    let score = |i: usize| log_density[i] + delta[i].ln();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let centers = order[..target].to_vec();

    let mut center_slot = vec![usize::MAX; n];
    for (slot, &c) in centers.iter().enumerate() {
        center_slot[c] = slot;
    }
    let assignment = (0..n)
        .into_par_iter()
        .map(|i| {
            if center_slot[i] != usize::MAX {
                return center_slot[i];
            }
            let (mut best, mut best_d, mut best_idx) = (0, f64::INFINITY, usize::MAX);
            for (slot, &c) in centers.iter().enumerate() {
                let d = sq_dist(row(i), row(c));
                if d < best_d || (d == best_d && c < best_idx) {
                    best = slot;
                    best_d = d;
                    best_idx = c;
                }
            }
            best
        })
        .collect();

    Ok(DpcClustering {
        log_density,
        delta,
        centers,
        assignment,
    })
}

/// Clusters `points` into exactly `target` groups and mean-pools each one.
pub fn dpcknn_reduce(
    points: &[f32],
    dim: usize,
    target: usize,
    k_nn: Option<usize>,
) -> Result<Reduced> {
    let clustering = dpcknn_cluster(points, dim, target, k_nn)?;
    let provenance = clustering.clusters();
    let mut tokens = Vec::with_capacity(provenance.len() * dim);
    let mut acc = vec![0.0f64; dim];
    for members in &provenance {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &m in members {
            for (a, &v) in acc.iter_mut().zip(&points[m * dim..(m + 1) * dim]) {
                *a += v as f64;
            }
        }
        let inv = members.len() as f64;
        tokens.extend(acc.iter().map(|a| (a / inv) as f32));
    }
    Ok(Reduced {
        dim,
        tokens,
        provenance,
    })
}
