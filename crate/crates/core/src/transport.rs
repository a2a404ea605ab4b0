//! Sinkhorn-Knopp projection onto the equal-partition constraint set and the
//! cardinality-constrained K-means objective.
//!
//! Soft assignments are K×N: rows are clusters, columns are samples. The
//! constraint set is {P ≥ 0 : P·1_N = (N/K)·1_K, Pᵀ·1_K = 1_N}.

use ndarray::{Array1, Array2, Axis};

use crate::clustering::{self, explicit_objective, Partition};
use crate::distributions::{cross_entropy, ProbVector};
use crate::error::{Error, Result};
use crate::DataMatrix;

/// Entries below this switch the projection to log-domain scaling.
pub const LOG_DOMAIN_THRESHOLD: f64 = 1e-30;

/// Column-stochastic K×N matrix of per-sample cluster posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    p: Array2<f64>,
}

impl SoftAssignment {
    /// Validates non-negativity and unit column sums (within 1e-9).
    pub fn new(p: Array2<f64>) -> Result<Self> {
        Self::with_tolerance(p, 1e-9)
    }

    fn with_tolerance(p: Array2<f64>, tol: f64) -> Result<Self> {
        if p.nrows() == 0 {
            return Err(Error::ZeroClusters);
        }
        if let Some(((r, c), &v)) = p.indexed_iter().find(|(_, &v)| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("entry ({r}, {c}) = {v}")));
        }
        for (n, col) in p.axis_iter(Axis(1)).enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!("column {n} sums to {s}")));
            }
        }
        Ok(Self { p })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn k(&self) -> usize {
        self.p.nrows()
    }

    pub fn n(&self) -> usize {
        self.p.ncols()
    }

    /// Posterior of sample `n` as a distribution over clusters.
    pub fn column(&self, n: usize) -> Result<ProbVector> {
        ProbVector::from_weights(&self.p.column(n).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub assignment: SoftAssignment,
    pub iterations: usize,
    /// max(|row sum − N/K|, |column sum − 1|) at exit.
    pub residual: f64,
}

/// Largest violation of the row (N/K) and column (1) sum constraints.
pub fn constraint_residual(p: &Array2<f64>) -> f64 {
    let (k, n) = p.dim();
    let row_target = n as f64 / k as f64;
    let rows = p
        .sum_axis(Axis(1))
        .iter()
        .fold(0.0f64, |m, s| m.max((s - row_target).abs()));
    let cols = p
        .sum_axis(Axis(0))
        .iter()
        .fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    rows.max(cols)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Alternating row/column scaling of a strictly positive K×N matrix until
/// the constraint residual drops below `cfg.tol`.
///
/// A matrix that is already feasible within `cfg.tol` is returned unchanged.
pub fn sinkhorn_project(p: &Array2<f64>, cfg: SinkhornConfig) -> Result<Projection> {
    let (k, n) = p.dim();
    if k == 0 {
        return Err(Error::ZeroClusters);
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if cfg.max_iter == 0 || !(cfg.tol > 0.0) {
        return Err(Error::InvalidArgument("max_iter and tol must be positive".into()));
    }
    for ((row, col), &value) in p.indexed_iter() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveEntry { row, col, value });
        }
    }
    let sig_tol = cfg.tol.max(1e-9);
    let residual = constraint_residual(p);
    if residual < cfg.tol {
        return Ok(Projection {
            assignment: SoftAssignment::with_tolerance(p.clone(), sig_tol)?,
            iterations: 0,
            residual,
        });
    }

    let row_target = n as f64 / k as f64;
    let log_domain = p.iter().any(|&v| v < LOG_DOMAIN_THRESHOLD);
    let mut residual = residual;
    if log_domain {
        let ln_target = row_target.ln();
        let mut l = p.mapv(f64::ln);
        for it in 1..=cfg.max_iter {
            for mut row in l.rows_mut() {
                let shift = ln_target - log_sum_exp(row.iter().copied());
                row.mapv_inplace(|v| v + shift);
            }
            for mut col in l.columns_mut() {
                let shift = log_sum_exp(col.iter().copied());
                col.mapv_inplace(|v| v - shift);
            }
            let q = l.mapv(f64::exp);
            residual = constraint_residual(&q);
            if residual < cfg.tol {
                return Ok(Projection {
                    assignment: SoftAssignment::with_tolerance(q, sig_tol)?,
                    iterations: it,
                    residual,
                });
            }
        }
    } else {
        let mut q = p.clone();
        for it in 1..=cfg.max_iter {
            let rows: Array1<f64> = q.sum_axis(Axis(1));
            for (mut row, s) in q.rows_mut().into_iter().zip(rows.iter()) {
                let f = row_target / s;
                row.mapv_inplace(|v| v * f);
            }
            let cols: Array1<f64> = q.sum_axis(Axis(0));
            for (mut col, s) in q.columns_mut().into_iter().zip(cols.iter()) {
                col.mapv_inplace(|v| v / s);
            }
            residual = constraint_residual(&q);
            if residual < cfg.tol {
                return Ok(Projection {
                    assignment: SoftAssignment::with_tolerance(q, sig_tol)?,
                    iterations: it,
                    residual,
                });
            }
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        residual,
    })
}

fn check_cardinalities(partition: &Partition, cardinalities: &[usize]) -> Result<()> {
    if cardinalities.len() != partition.k() {
        return Err(Error::LengthMismatch {
            expected: partition.k(),
            actual: cardinalities.len(),
        });
    }
    let total: usize = cardinalities.iter().sum();
    if total != partition.len() {
        return Err(Error::InvalidArgument(format!(
            "cardinalities sum to {total}, expected N = {}",
            partition.len()
        )));
    }
    if cardinalities.contains(&0) {
        return Err(Error::InvalidArgument("cardinalities must be positive".into()));
    }
    Ok(())
}

/// K-means objective restricted to partitions with |X_k| = N_k.
pub fn constrained_kmeans_objective(
    x: &DataMatrix,
    partition: &Partition,
    cardinalities: &[usize],
) -> Result<f64> {
    check_cardinalities(partition, cardinalities)?;
    for (cluster, (&actual, &required)) in partition
        .cluster_sizes()
        .iter()
        .zip(cardinalities)
        .enumerate()
    {
        if actual != required {
            return Err(Error::ConstraintInfeasible {
                cluster,
                required,
                actual,
            });
        }
    }
    explicit_objective(x, partition)
}

/// Exhaustive minimum of [`constrained_kmeans_objective`].
pub fn brute_force_constrained_optimum(
    x: &DataMatrix,
    cardinalities: &[usize],
    cap: u64,
) -> Result<(Partition, f64)> {
    let k = cardinalities.len();
    if cardinalities.iter().sum::<usize>() != x.nrows() {
        return Err(Error::InvalidArgument("cardinalities must sum to N".into()));
    }
    clustering::brute_force_with(x, k, cap, |p| {
        if p.cluster_sizes() == cardinalities {
            explicit_objective(x, p)
        } else {
            Ok(f64::INFINITY)
        }
    })
}

/// Greedy rounding of a K×N soft assignment to a hard partition with the
/// given cluster sizes: (cluster, sample) pairs are visited in order of
/// decreasing mass and accepted while the cluster has room.
pub fn round_to_cardinalities(p: &SoftAssignment, cardinalities: &[usize]) -> Result<Partition> {
    let (k, n) = p.matrix().dim();
    if cardinalities.len() != k || cardinalities.iter().sum::<usize>() != n {
        return Err(Error::InvalidArgument("cardinalities do not match shape".into()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..k).flat_map(|c| (0..n).map(move |s| (c, s))).collect();
    let m = p.matrix();
    pairs.sort_by(|a, b| m[[b.0, b.1]].total_cmp(&m[[a.0, a.1]]).then(a.cmp(b)));
    let mut room = cardinalities.to_vec();
    let mut assignment = vec![usize::MAX; n];
    for (c, s) in pairs {
        if assignment[s] == usize::MAX && room[c] > 0 {
            assignment[s] = c;
            room[c] -= 1;
        }
    }
    Partition::new(assignment, k)
}

/// Mean column-wise cross-entropy (1/N) Σ_n H(p_n⁺, p_n) where p_n⁺ are the
/// columns of the Sinkhorn projection of `target_raw` and p_n the columns of
/// `anchor`.
pub fn swav_loss(anchor: &SoftAssignment, target_raw: &Array2<f64>) -> Result<f64> {
    swav_loss_with(anchor, target_raw, SinkhornConfig::default())
}

pub fn swav_loss_with(
    anchor: &SoftAssignment,
    target_raw: &Array2<f64>,
    cfg: SinkhornConfig,
) -> Result<f64> {
    if anchor.matrix().dim() != target_raw.dim() {
        return Err(Error::DimensionMismatch(format!(
            "anchor {:?} vs target {:?}",
            anchor.matrix().dim(),
            target_raw.dim()
        )));
    }
    let target = sinkhorn_project(target_raw, cfg)?.assignment;
    let n = anchor.n();
    let mut total = 0.0;
    for col in 0..n {
        total += cross_entropy(&target.column(col)?, &anchor.column(col)?)?;
    }
    Ok(total / n as f64)
}
