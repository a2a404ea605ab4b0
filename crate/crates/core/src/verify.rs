//! Randomized property suites for the clustering, covariance, mixture and
//! transport identities. Each check reports its worst residual against a
//! tolerance.

use ndarray::{array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{brute_force_with, explicit_objective, implicit_objective, Partition, DEFAULT_ENUMERATION_CAP};
use crate::distributions::ProbVector;
use crate::error::{Error, Result};
use crate::losses::{covariance_decomposition_check, SimilarityMatrix};
use crate::mixture::{gmm_posterior, msn_zero_temp_limit, scaled_msn_loss, GmmModel};
use crate::transport::{constraint_residual, sinkhorn_project, SinkhornConfig};
use crate::DataMatrix;

/// Signature of a K-means objective evaluated on a fixed partition.
pub type ObjectiveFn = fn(&DataMatrix, &Partition) -> Result<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Largest N for exhaustive searches.
    pub max_n: usize,
    /// Largest K for exhaustive searches.
    pub max_k: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            max_n: 8,
            max_k: 3,
            trials: 100,
            seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be positive".into()));
        }
        if self.max_k < 2 || self.max_n < self.max_k {
            return Err(Error::InvalidArgument(format!(
                "need 2 <= max_k <= max_n, got max_k = {}, max_n = {}",
                self.max_k, self.max_n
            )));
        }
        let required = (self.max_k as f64).powi(self.max_n as i32);
        if required > DEFAULT_ENUMERATION_CAP as f64 {
            return Err(Error::EnumerationCap {
                required,
                cap: DEFAULT_ENUMERATION_CAP,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: worst.is_finite() && worst < tolerance,
            instances,
            worst,
            tolerance,
        }
    }

    fn failed(name: &str, err: Error) -> Self {
        Self {
            name: format!("{name}: {err}"),
            passed: false,
            instances: 0,
            worst: f64::NAN,
            tolerance: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: &str, checks: Vec<CheckResult>) -> Self {
        Self {
            suite: suite.to_string(),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> DataMatrix {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

fn check(name: &str, run: impl FnOnce() -> Result<(usize, f64)>, tolerance: f64) -> CheckResult {
    match run() {
        Ok((instances, worst)) => CheckResult::new(name, instances, worst, tolerance),
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Exhaustive optima of the explicit and implicit objectives agree.
pub fn oracle_equivalence(cfg: &VerifyConfig, implicit: ObjectiveFn) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials {
        let k = rng.random_range(2..=cfg.max_k);
        let n = rng.random_range(k..=cfg.max_n);
        let x = random_matrix(&mut rng, n, 2, 5.0);
        let (_, a) = brute_force_with(&x, k, DEFAULT_ENUMERATION_CAP, |p| explicit_objective(&x, p))?;
        let (_, b) = brute_force_with(&x, k, DEFAULT_ENUMERATION_CAP, |p| implicit(&x, p))?;
        worst = worst.max((a - b).abs());
    }
    Ok((cfg.trials, worst))
}

/// Relative gap between the explicit and implicit objectives on random
/// partitions. 200 instances minimum.
pub fn pairwise_identity(cfg: &VerifyConfig, implicit: ObjectiveFn) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let trials = cfg.trials.max(200);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..=30);
        let k = rng.random_range(1..=n.min(6));
        let d = rng.random_range(1..=5);
        let x = random_matrix(&mut rng, n, d, 3.0);
        let assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p = Partition::new(assignment, k)?;
        let e = explicit_objective(&x, &p)?;
        let i = implicit(&x, &p)?;
        let rel = if e == 0.0 { i.abs() } else { (e - i).abs() / e.abs() };
        worst = worst.max(rel);
    }
    Ok((trials, worst))
}

pub fn clustering_suite(cfg: &VerifyConfig, implicit: ObjectiveFn) -> SuiteReport {
    SuiteReport::new(
        "clustering",
        vec![
            check("explicit vs implicit optimum", || oracle_equivalence(cfg, implicit), 1e-9),
            check("pairwise objective identity (relative)", || pairwise_identity(cfg, implicit), 1e-12),
        ],
    )
}

/// Covariance and pairwise-trace residuals on centered two-view embeddings.
pub fn covariance_identities(cfg: &VerifyConfig) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials {
        let sources = rng.random_range(1..=16);
        let d = rng.random_range(1..=6);
        let z = random_matrix(&mut rng, 2 * sources, d, 2.0);
        let mean = z.mean_axis(Axis(0)).expect("non-empty");
        let z = z - &mean;
        let g = SimilarityMatrix::paired_views(sources)?;
        worst = worst.max(covariance_decomposition_check(&z, &g)?.residual);
    }
    Ok((cfg.trials, worst))
}

pub fn covariance_suite(cfg: &VerifyConfig) -> SuiteReport {
    SuiteReport::new(
        "covariance",
        vec![check("between/within decomposition", || covariance_identities(cfg), 1e-10)],
    )
}

/// Posterior by Bayes' rule with explicit Gaussian log-densities.
pub fn bayes_posterior(w: &Array2<f64>, prior: &ProbVector, sigma: f64, x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let log_joint: Vec<f64> = (0..w.ncols())
        .map(|k| {
            let sq: f64 = x.iter().enumerate().map(|(i, xi)| (xi - w[[i, k]]).powi(2)).sum();
            prior[k].ln() - sq / (2.0 * sigma) - 0.5 * d * (2.0 * std::f64::consts::PI * sigma).ln()
        })
        .collect();
    let m = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_joint.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Largest absolute gap between the model posterior and the Bayes oracle.
pub fn posterior_vs_bayes(draws: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=6);
        let w = random_matrix(&mut rng, d, k, 2.0);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let prior = ProbVector::from_weights(&weights)?;
        let sigma = rng.random_range(0.2..3.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let model = GmmModel::new(w.clone(), prior.clone(), sigma)?;
        let p = gmm_posterior(&model, ndarray::ArrayView1::from(&x))?;
        let q = bayes_posterior(&w, &prior, sigma, &x);
        for (a, b) in p.as_slice().iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((draws, worst))
}

/// Three points at −10 and one at +10 with centroids at ±10.
pub fn zero_temperature_fixture() -> (DataMatrix, Array2<f64>) {
    (array![[-10.0], [-10.0], [-10.0], [10.0]], array![[-10.0, 10.0]])
}

pub const ZERO_TEMPERATURE_SIGMAS: [f64; 7] = [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroTemperatureTrace {
    pub limit: f64,
    pub sigmas: Vec<f64>,
    pub gaps: Vec<f64>,
    /// Each gap is at most the previous one.
    pub monotone: bool,
}

/// |σ·MSN(σ) − limit| along a decreasing σ schedule on the fixture, with a
/// uniform prior and λ = 1.
pub fn zero_temperature_trace() -> Result<ZeroTemperatureTrace> {
    let (x, w) = zero_temperature_fixture();
    let prior = ProbVector::uniform(2)?;
    let limit = msn_zero_temp_limit(&x, &x, &w, &prior, 1.0)?.value;
    let mut gaps = Vec::new();
    for &sigma in &ZERO_TEMPERATURE_SIGMAS {
        gaps.push((scaled_msn_loss(&x, &x, &w, &prior, 1.0, sigma)? - limit).abs());
    }
    // Gaps below rounding level count as equal.
    let monotone = gaps.windows(2).all(|g| g[1] <= g[0] + 1e-14);
    Ok(ZeroTemperatureTrace {
        limit,
        sigmas: ZERO_TEMPERATURE_SIGMAS.to_vec(),
        gaps,
        monotone,
    })
}

pub fn mixture_suite(cfg: &VerifyConfig) -> SuiteReport {
    let trace = zero_temperature_trace();
    let (mono, last, value) = match &trace {
        Ok(t) => (
            if t.monotone { 0.0 } else { 1.0 },
            *t.gaps.last().expect("non-empty schedule"),
            (t.limit - 0.130812).abs(),
        ),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    SuiteReport::new(
        "mixture",
        vec![
            check("posterior vs Bayes rule", || posterior_vs_bayes(cfg.trials.max(500), cfg.seed.wrapping_add(3)), 1e-10),
            CheckResult::new("zero-temperature gap monotone (0 = yes)", 1, mono, 0.5),
            CheckResult::new("zero-temperature gap at sigma 0.001", 1, last, 1e-3),
            CheckResult::new("zero-temperature limit value", 1, value, 1e-6),
        ],
    )
}

/// Worst constraint residual, iteration count and idempotence gap of
/// Sinkhorn on random positive matrices.
pub fn sinkhorn_properties(cfg: &VerifyConfig) -> Result<(usize, f64, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let sk = SinkhornConfig::default();
    let (mut worst_res, mut worst_iter, mut worst_idem) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..cfg.trials {
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=64);
        let m = Array2::from_shape_fn((k, n), |_| rng.random_range(0.01..1.0));
        let p = sinkhorn_project(&m, sk)?;
        worst_res = worst_res.max(constraint_residual(p.assignment.matrix()));
        worst_iter = worst_iter.max(p.iterations);
        let again = sinkhorn_project(p.assignment.matrix(), sk)?;
        let gap = (again.assignment.matrix() - p.assignment.matrix())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        worst_idem = worst_idem.max(gap);
    }
    Ok((cfg.trials, worst_res, worst_iter, worst_idem))
}

pub fn transport_suite(cfg: &VerifyConfig) -> SuiteReport {
    let checks = match sinkhorn_properties(cfg) {
        Ok((n, res, iters, idem)) => vec![
            CheckResult::new("sinkhorn marginal residual", n, res, 1e-8),
            CheckResult::new("sinkhorn iterations", n, iters as f64, 1000.5),
            CheckResult::new("sinkhorn idempotence", n, idem, 1e-8),
        ],
        Err(e) => vec![CheckResult::failed("sinkhorn", e)],
    };
    SuiteReport::new("transport", checks)
}

/// Runs all four suites; `implicit` replaces the pairwise K-means objective.
pub fn verify_all_with(cfg: &VerifyConfig, implicit: ObjectiveFn) -> Result<VerifyReport> {
    cfg.validate()?;
    let suites = vec![
        clustering_suite(cfg, implicit),
        covariance_suite(cfg),
        mixture_suite(cfg),
        transport_suite(cfg),
    ];
    Ok(VerifyReport {
        config: *cfg,
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

pub fn verify_all(cfg: &VerifyConfig) -> Result<VerifyReport> {
    verify_all_with(cfg, implicit_objective)
}
