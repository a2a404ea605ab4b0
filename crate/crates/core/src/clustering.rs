//! Explicit (centroid) and implicit (pairwise) K-means objectives, Lloyd's
//! algorithm and an exhaustive partition oracle.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::DataMatrix;

/// Default cap on K^N for [`brute_force_optimum`].
pub const DEFAULT_ENUMERATION_CAP: u64 = 4_000_000;

/// Hard assignment of N points to K clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroClusters);
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= k) {
            return Err(Error::InvalidArgument(format!(
                "cluster index {bad} out of range for K = {k}"
            )));
        }
        Ok(Self { assignment, k })
    }

    /// Recovers a partition from a 0/1 membership matrix with one-hot rows.
    pub fn from_membership(p: &Array2<f64>) -> Result<Self> {
        let mut assignment = Vec::with_capacity(p.nrows());
        for (n, row) in p.outer_iter().enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(k, _)| k)
                .collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("row {n} is not one-hot")));
            }
            assignment.push(ones[0]);
        }
        Self::new(assignment, p.ncols())
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// N×K membership matrix P with P·1_K = 1_N.
    pub fn membership(&self) -> Array2<f64> {
        let mut p = Array2::zeros((self.assignment.len(), self.k));
        for (n, &k) in self.assignment.iter().enumerate() {
            p[[n, k]] = 1.0;
        }
        p
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Applies a relabeling `perm[old] = new`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        Self::new(self.assignment.iter().map(|&a| perm[a]).collect(), self.k)
    }
}

/// K×d matrix of cluster centroids, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub mu: Array2<f64>,
}

impl Centroids {
    pub fn new(mu: Array2<f64>) -> Result<Self> {
        if mu.nrows() == 0 {
            return Err(Error::ZeroClusters);
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid entry".into()));
        }
        Ok(Self { mu })
    }

    pub fn k(&self) -> usize {
        self.mu.nrows()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.mu.outer_iter().map(|r| r.to_vec()).collect()
    }
}

/// Which form of the K-means objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    Explicit,
    Implicit,
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_partition(x: &DataMatrix, partition: &Partition) -> Result<()> {
    if partition.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "partition has {} entries but data has {} rows",
            partition.len(),
            x.nrows()
        )));
    }
    Ok(())
}

/// Per-cluster means; empty clusters get a zero row.
pub fn cluster_means(x: &DataMatrix, partition: &Partition) -> Result<Array2<f64>> {
    check_partition(x, partition)?;
    let mut mu = Array2::zeros((partition.k(), x.ncols()));
    let sizes = partition.cluster_sizes();
    for (row, &k) in x.outer_iter().zip(partition.assignment()) {
        let mut m = mu.row_mut(k);
        m += &row;
    }
    for (k, &s) in sizes.iter().enumerate() {
        if s > 0 {
            mu.row_mut(k).mapv_inplace(|v| v / s as f64);
        }
    }
    Ok(mu)
}

/// Σ_k Σ_{x∈X_k} ‖x − μ_k‖² with μ_k the mean of cluster k.
pub fn explicit_objective(x: &DataMatrix, partition: &Partition) -> Result<f64> {
    let mu = cluster_means(x, partition)?;
    Ok(x
        .outer_iter()
        .zip(partition.assignment())
        .map(|(row, &k)| sq_dist(row, mu.row(k)))
        .sum())
}

/// Σ_k 1/(2|X_k|) Σ_{x,x′∈X_k} ‖x − x′‖², summing over ordered pairs.
pub fn implicit_objective(x: &DataMatrix, partition: &Partition) -> Result<f64> {
    check_partition(x, partition)?;
    let sizes = partition.cluster_sizes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); partition.k()];
    for (n, &k) in partition.assignment().iter().enumerate() {
        members[k].push(n);
    }
    let mut total = 0.0;
    for (k, idx) in members.iter().enumerate() {
        if sizes[k] == 0 {
            continue;
        }
        let mut pair_sum = 0.0;
        for &i in idx {
            for &j in idx {
                pair_sum += sq_dist(x.row(i), x.row(j));
            }
        }
        total += pair_sum / (2.0 * sizes[k] as f64);
    }
    Ok(total)
}

pub fn objective(x: &DataMatrix, partition: &Partition, mode: ObjectiveMode) -> Result<f64> {
    match mode {
        ObjectiveMode::Explicit => explicit_objective(x, partition),
        ObjectiveMode::Implicit => implicit_objective(x, partition),
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(point: ArrayView1<f64>, mu: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in mu.outer_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// How Lloyd's algorithm picks its starting centroids.
#[derive(Debug, Clone)]
pub enum LloydInit {
    /// k-means++ seeding.
    PlusPlus { seed: u64 },
    /// The first K rows of the data.
    FirstK,
    Given(Centroids),
}

#[derive(Debug, Clone)]
pub struct LloydResult {
    pub centroids: Centroids,
    pub partition: Partition,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each iteration.
    pub history: Vec<f64>,
}

fn plus_plus_seed(x: &DataMatrix, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut mu = Array2::zeros((k, x.ncols()));
    for (r, &i) in chosen.iter().enumerate() {
        mu.row_mut(r).assign(&x.row(i));
    }
    mu
}

/// Lloyd's algorithm. Stops when the objective decreases by less than `tol`
/// or after `max_iter` iterations. Emptied clusters are re-seeded at the
/// point farthest from its current centroid.
pub fn lloyd(
    x: &DataMatrix,
    k: usize,
    init: LloydInit,
    max_iter: usize,
    tol: f64,
) -> Result<LloydResult> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if k == 0 {
        return Err(Error::ZeroClusters);
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds N = {n}")));
    }
    if max_iter == 0 || !(tol > 0.0) {
        return Err(Error::InvalidArgument("max_iter and tol must be positive".into()));
    }
    let mut mu = match init {
        LloydInit::PlusPlus { seed } => plus_plus_seed(x, k, seed),
        LloydInit::FirstK => x.slice(ndarray::s![0..k, ..]).to_owned(),
        LloydInit::Given(c) => {
            if c.k() != k || c.mu.ncols() != x.ncols() {
                return Err(Error::DimensionMismatch("initial centroids shape".into()));
            }
            c.mu
        }
    };

    let mut history = Vec::new();
    let mut assignment = vec![0usize; n];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest_centroid(x.row(i), &mu);
            assignment[i] = c;
            dist[i] = d;
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            sizes[a] += 1;
        }
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let far = (0..n)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("N >= K guarantees a cluster with two members");
            sizes[assignment[far]] -= 1;
            sizes[empty] += 1;
            assignment[far] = empty;
            dist[far] = 0.0;
        }
        let partition = Partition::new(assignment.clone(), k)?;
        mu = cluster_means(x, &partition)?;
        let obj = explicit_objective(x, &partition)?;
        history.push(obj);
        if prev - obj < tol {
            break;
        }
        prev = obj;
    }
    let partition = Partition::new(assignment, k)?;
    let objective = *history.last().expect("at least one iteration");
    Ok(LloydResult {
        centroids: Centroids::new(mu)?,
        partition,
        objective,
        iterations,
        history,
    })
}

/// Best of `restarts` k-means++ runs with seeds derived from `seed`.
pub fn lloyd_restarts(
    x: &DataMatrix,
    k: usize,
    restarts: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<LloydResult> {
    let mut best: Option<LloydResult> = None;
    for r in 0..restarts.max(1) {
        let run = lloyd(
            x,
            k,
            LloydInit::PlusPlus {
                seed: seed.wrapping_add(r as u64),
            },
            max_iter,
            tol,
        )?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Calls `visit` on every assignment of `n` points to `k` clusters in
/// lexicographic order. Returns an error if k^n exceeds `cap`.
pub(crate) fn for_each_assignment(
    n: usize,
    k: usize,
    cap: u64,
    mut visit: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let required = (k as f64).powi(n as i32);
    if required > cap as f64 {
        return Err(Error::EnumerationCap { required, cap });
    }
    let mut digits = vec![0usize; n];
    loop {
        visit(&digits)?;
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < k {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Exact global minimum of the chosen objective over all assignments of the
/// rows of `x` to at most `k` clusters. Ties keep the lexicographically first
/// assignment.
pub fn brute_force_optimum(
    x: &DataMatrix,
    k: usize,
    mode: ObjectiveMode,
    cap: u64,
) -> Result<(Partition, f64)> {
    brute_force_with(x, k, cap, |p| objective(x, p, mode))
}

/// Exhaustive minimization of an arbitrary partition objective.
pub fn brute_force_with(
    x: &DataMatrix,
    k: usize,
    cap: u64,
    mut eval: impl FnMut(&Partition) -> Result<f64>,
) -> Result<(Partition, f64)> {
    if k == 0 {
        return Err(Error::ZeroClusters);
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_assignment(x.nrows(), k, cap, |digits| {
        let p = Partition::new(digits.to_vec(), k)?;
        let v = eval(&p)?;
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((digits.to_vec(), v));
        }
        Ok(())
    })?;
    let (a, v) = best.expect("at least one assignment");
    Ok((Partition::new(a, k)?, v))
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let n = a.len();
    let ka = a.iter().copied().max().map_or(0, |m| m + 1);
    let kb = b.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let choose2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max - expected))
}
