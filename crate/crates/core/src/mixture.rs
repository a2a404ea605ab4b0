//! Isotropic Gaussian mixtures with an arbitrary cluster prior, and the
//! zero-temperature limit of the MSN loss.
//!
//! Centroids are stored as the columns of a d×K matrix `W`. With covariance
//! σI for every component the posterior of x is
//!
//! ```text
//! p(x) = softmax((Wᵀx − ½‖x‖² − ½ diag(WᵀW)) / σ + ln π)
//! ```
//!
//! which is exactly Bayes' rule for N(μ_k, σI) components.

use ndarray::{Array1, Array2, ArrayView1};

use crate::distributions::{self, kl_divergence, softmax, ProbVector};
use crate::error::{Error, Result};
use crate::losses::{self, PriorAlignment};
use crate::DataMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    /// d×K, column k is μ_k.
    pub w: Array2<f64>,
    pub prior: ProbVector,
    /// Isotropic variance scale: Σ_k = σI.
    pub sigma: f64,
}

impl GmmModel {
    pub fn new(w: Array2<f64>, prior: ProbVector, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma = {sigma} must be positive")));
        }
        if prior.len() != w.ncols() {
            return Err(Error::LengthMismatch {
                expected: w.ncols(),
                actual: prior.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid matrix".into()));
        }
        Ok(Self { w, prior, sigma })
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

fn check_point(model: &GmmModel, x: ArrayView1<f64>) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, model has {}",
            x.len(),
            model.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input point".into()));
    }
    Ok(())
}

/// Posterior cluster probabilities of `x` under `model`.
pub fn gmm_posterior(model: &GmmModel, x: ArrayView1<f64>) -> Result<ProbVector> {
    check_point(model, x)?;
    let x_sq = x.dot(&x);
    let logits: Vec<f64> = model
        .w
        .columns()
        .into_iter()
        .zip(model.prior.as_slice())
        .map(|(mu, &pi)| (mu.dot(&x) - 0.5 * x_sq - 0.5 * mu.dot(&mu)) / model.sigma + pi.ln())
        .collect();
    softmax(&logits)
}

/// Σ_x Σ_k (p_k(x)/2)‖x − μ_k‖²/σ + N Σ_k d·ln σ + Σ_x KL(p(x)‖π).
pub fn gmm_objective(model: &GmmModel, x: &DataMatrix) -> Result<f64> {
    let n = x.nrows();
    let k = model.k();
    let d = model.dim() as f64;
    let mut distance = 0.0;
    let mut kl = 0.0;
    for row in x.outer_iter() {
        let post = gmm_posterior(model, row)?;
        for (mu, &pk) in model.w.columns().into_iter().zip(post.as_slice()) {
            let diff = &row - &mu;
            distance += 0.5 * pk * diff.dot(&diff) / model.sigma;
        }
        kl += kl_divergence(&post, &model.prior)?;
    }
    let log_det = n as f64 * k as f64 * d * model.sigma.ln();
    Ok(distance + log_det + kl)
}

fn check_unit_rows<'a>(rows: impl Iterator<Item = ArrayView1<'a, f64>>) -> Result<()> {
    for (index, r) in rows.enumerate() {
        let norm = r.dot(&r).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { index, norm });
        }
    }
    Ok(())
}

/// Uniform-prior, unit-variance objective on ℓ2-normalized data and centroids:
/// Σ_x Σ_k (s_k/2)‖x − μ_k‖² − Σ_x H(s) with s = softmax(Wᵀx).
pub fn simplified_objective(model: &GmmModel, x: &DataMatrix) -> Result<f64> {
    let k = model.k();
    let uniform = 1.0 / k as f64;
    if model.prior.as_slice().iter().any(|&p| (p - uniform).abs() > 1e-12) {
        return Err(Error::InvalidArgument("simplified objective needs a uniform prior".into()));
    }
    if model.sigma != 1.0 {
        return Err(Error::InvalidArgument("simplified objective needs sigma = 1".into()));
    }
    if x.ncols() != model.dim() {
        return Err(Error::DimensionMismatch("data vs centroid dimension".into()));
    }
    check_unit_rows(model.w.columns().into_iter())?;
    check_unit_rows(x.outer_iter())?;
    let mut total = 0.0;
    for row in x.outer_iter() {
        let logits: Vec<f64> = model.w.columns().into_iter().map(|mu| mu.dot(&row)).collect();
        let s = softmax(&logits)?;
        for (mu, &sk) in model.w.columns().into_iter().zip(s.as_slice()) {
            let diff = &row - &mu;
            total += 0.5 * sk * diff.dot(&diff);
        }
        total -= distributions::entropy(&s);
    }
    Ok(total)
}

/// Terms of the σ → 0 limit of σ·MSN.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroTempLimit {
    /// (1/N) Σ_n [max_c ⟨μ_c, x_n⟩ − ⟨μ_{k(n)}, x_n⟩]; zero iff every anchor
    /// shares its positive's nearest centroid (for equal-norm centroids).
    pub margin: f64,
    /// λ·KL(N_k/N ‖ prior).
    pub prior_term: f64,
    /// Σ_k Σ_{x∈X_k} ‖x − μ_k‖² with X_k grouped by the positive's centroid.
    pub kmeans: f64,
    /// k(n) = argmin_c ‖μ_c − x_n⁺‖.
    pub assignment: Vec<usize>,
    /// N_k / N.
    pub cluster_mass: ProbVector,
    /// `margin + prior_term`. This is the σ → 0 limit of σ·MSN(σ) whenever
    /// anchors and positives share their nearest centroid; otherwise the
    /// anchors' own hard assignments determine the limiting p̄.
    pub value: f64,
}

/// Zero-temperature limit of the σ-scaled MSN loss with prior-KL
/// regularizer: hard assignments by the positives' nearest centroid, a
/// margin term for anchors that land elsewhere, and λ times the KL between
/// the empirical cluster masses and the prior.
pub fn msn_zero_temp_limit(
    x_anchor: &DataMatrix,
    x_positive: &DataMatrix,
    w: &Array2<f64>,
    prior: &ProbVector,
    lambda: f64,
) -> Result<ZeroTempLimit> {
    let n = x_anchor.nrows();
    if n == 0 || x_positive.dim() != x_anchor.dim() {
        return Err(Error::DimensionMismatch("anchor and positive batches".into()));
    }
    if x_anchor.ncols() != w.nrows() {
        return Err(Error::DimensionMismatch("embedding vs prototype dimension".into()));
    }
    if prior.len() != w.ncols() {
        return Err(Error::LengthMismatch {
            expected: w.ncols(),
            actual: prior.len(),
        });
    }
    let k = w.ncols();
    let mut assignment = Vec::with_capacity(n);
    for (sample, xp) in x_positive.outer_iter().enumerate() {
        let d: Vec<f64> = w
            .columns()
            .into_iter()
            .map(|mu| {
                let diff = &xp - &mu;
                diff.dot(&diff)
            })
            .collect();
        let best = (0..k).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("K >= 1");
        let scale = d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if (0..k).any(|c| c != best && (d[c] - d[best]).abs() <= 1e-12 * scale) {
            return Err(Error::ArgminTie { sample });
        }
        assignment.push(best);
    }

    let mut margin = 0.0;
    let mut kmeans = 0.0;
    for (xa, &kn) in x_anchor.outer_iter().zip(&assignment) {
        let scores: Array1<f64> = w.t().dot(&xa);
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        margin += best - scores[kn];
        let diff = &xa - &w.column(kn);
        kmeans += diff.dot(&diff);
    }
    margin /= n as f64;

    let mut counts = vec![0.0; k];
    for &a in &assignment {
        counts[a] += 1.0;
    }
    let cluster_mass = ProbVector::from_weights(&counts)?;
    let prior_term = lambda * kl_divergence(&cluster_mass, prior)?;
    Ok(ZeroTempLimit {
        margin,
        prior_term,
        kmeans,
        assignment,
        cluster_mass,
        value: margin + prior_term,
    })
}

/// σ·MSN(σ) in prior-KL form, with λ replaced by λ/σ:
/// σ·(1/N) Σ H(p_n⁺, p_n) + λ·KL(p̄‖prior), where p_n = softmax(Wᵀx_n/σ)
/// and p_n⁺ = softmax(Wᵀx_n⁺/σ). Inputs are used as given (no normalization).
pub fn scaled_msn_loss(
    x_anchor: &DataMatrix,
    x_positive: &DataMatrix,
    w: &Array2<f64>,
    prior: &ProbVector,
    lambda: f64,
    sigma: f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let anchor_logits = x_anchor.dot(w) / sigma;
    let positive_logits = x_positive.dot(w) / sigma;
    let targets = positive_logits
        .outer_iter()
        .map(|row| softmax(&row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let loss = losses::pmsn_loss_from_logits(
        &anchor_logits,
        &targets,
        lambda / sigma,
        prior,
        PriorAlignment::FixedIndex,
    )?;
    Ok(sigma * loss.cross_entropy + sigma * loss.regularizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(k: usize) -> ProbVector {
        ProbVector::uniform(k).unwrap()
    }

    /// Bayes' rule with isotropic Gaussian likelihoods, computed without the
    /// expanded inner-product form.
    fn bayes_oracle(w: &Array2<f64>, prior: &ProbVector, sigma: f64, x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let log_joint: Vec<f64> = (0..w.ncols())
            .map(|k| {
                let sq: f64 = x.iter().enumerate().map(|(i, xi)| (xi - w[[i, k]]).powi(2)).sum();
                -sq / (2.0 * sigma) - 0.5 * d * (2.0 * std::f64::consts::PI * sigma).ln()
                    + prior[k].ln()
            })
            .collect();
        let m = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = log_joint.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    #[test]
    fn posterior_symmetric() {
        let m = GmmModel::new(array![[1.0, -1.0]], uniform(2), 1.0).unwrap();
        let p = gmm_posterior(&m, array![0.0].view()).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn posterior_separation_limit() {
        let m = GmmModel::new(array![[50.0, -50.0]], uniform(2), 1.0).unwrap();
        let p = gmm_posterior(&m, array![50.0].view()).unwrap();
        assert!(p[0] > 1.0 - 1e-15);
    }

    #[test]
    fn posterior_matches_bayes_one_d() {
        let w = array![[0.0, 2.0]];
        let m = GmmModel::new(w.clone(), uniform(2), 1.0).unwrap();
        let p = gmm_posterior(&m, array![1.5].view()).unwrap();
        // exp(-1.125) / (exp(-1.125) + exp(-0.125))
        let expected0 = 1.0 / (1.0 + 1f64.exp());
        assert!((p[0] - expected0).abs() < 1e-15);
        let oracle = bayes_oracle(&w, &uniform(2), 1.0, &[1.5]);
        assert!((p[1] - oracle[1]).abs() < 1e-12);
    }

    #[test]
    fn posterior_random_vs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let d = rng.random_range(1..=5);
            let k = rng.random_range(1..=6);
            let w = Array2::from_shape_fn((d, k), |_| rng.random_range(-2.0..2.0));
            let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let prior = ProbVector::from_weights(&weights).unwrap();
            let sigma = rng.random_range(0.2..3.0);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = GmmModel::new(w.clone(), prior.clone(), sigma).unwrap();
            let p = gmm_posterior(&m, Array1::from(x.clone()).view()).unwrap();
            let o = bayes_oracle(&w, &prior, sigma, &x);
            for (a, b) in p.as_slice().iter().zip(&o) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn posterior_rejects_non_finite() {
        let m = GmmModel::new(array![[1.0, -1.0]], uniform(2), 1.0).unwrap();
        assert!(matches!(
            gmm_posterior(&m, array![f64::NAN].view()),
            Err(Error::NonFinite(_))
        ));
        assert!(GmmModel::new(array![[1.0, -1.0]], uniform(2), 0.0).is_err());
    }

    #[test]
    fn objective_two_points_by_hand() {
        let w = array![[0.0, 2.0]];
        let prior = ProbVector::new(vec![0.75, 0.25]).unwrap();
        let sigma = 0.5;
        let m = GmmModel::new(w.clone(), prior.clone(), sigma).unwrap();
        let x = array![[0.5], [1.5]];
        let mut expected = 0.0;
        for &xv in &[0.5, 1.5] {
            let p = bayes_oracle(&w, &prior, sigma, &[xv]);
            expected += 0.5 * p[0] * xv * xv / sigma + 0.5 * p[1] * (xv - 2.0) * (xv - 2.0) / sigma;
            expected += p[0] * (p[0] / 0.75).ln() + p[1] * (p[1] / 0.25).ln();
        }
        expected += 2.0 * 2.0 * 1.0 * sigma.ln();
        assert!((gmm_objective(&m, &x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn objective_vanishes_at_collapsed_cluster() {
        let w = array![[0.0, 1000.0]];
        let m = GmmModel::new(w, ProbVector::new(vec![1.0, 0.0]).unwrap(), 1.0).unwrap();
        let x = array![[0.0], [0.0], [0.0]];
        assert!(gmm_objective(&m, &x).unwrap().abs() < 1e-12);
    }

    fn unit_columns(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Array2<f64> {
        let mut w = Array2::<f64>::from_shape_fn((d, k), |_| rng.random_range(-1.0..1.0));
        for mut c in w.columns_mut() {
            let n = c.dot(&c).sqrt();
            c /= n;
        }
        w
    }

    #[test]
    fn simplified_differs_by_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, k, n) = (3, 4, 6);
        let x = unit_columns(&mut rng, d, n).t().to_owned();
        let mut diffs = Vec::new();
        for _ in 0..10 {
            let w = unit_columns(&mut rng, d, k);
            let m = GmmModel::new(w, uniform(k), 1.0).unwrap();
            diffs.push(gmm_objective(&m, &x).unwrap() - simplified_objective(&m, &x).unwrap());
        }
        for v in &diffs {
            assert!((v - diffs[0]).abs() < 1e-9);
        }
        // The dropped term is Σ_x ln K.
        assert!((diffs[0] - n as f64 * (k as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn simplified_examples() {
        let m = GmmModel::new(array![[1.0], [0.0]], uniform(1), 1.0).unwrap();
        let x = array![[1.0, 0.0]];
        assert_eq!(simplified_objective(&m, &x).unwrap(), 0.0);

        let m = GmmModel::new(array![[1.0, -1.0], [0.0, 0.0]], uniform(2), 1.0).unwrap();
        let x = array![[0.0, 1.0]];
        // ‖x − μ_k‖² = 2 for both centroids.
        let expected = 0.5 * 0.5 * (2.0 + 2.0) - 2f64.ln();
        assert!((simplified_objective(&m, &x).unwrap() - expected).abs() < 1e-12);

        let bad = array![[2.0, 0.0]];
        assert!(matches!(
            simplified_objective(&m, &bad),
            Err(Error::NotNormalized { .. })
        ));
    }

    fn imbalanced_fixture() -> (DataMatrix, Array2<f64>) {
        (array![[-10.0], [-10.0], [-10.0], [10.0]], array![[-10.0, 10.0]])
    }

    #[test]
    fn zero_temp_examples() {
        let x = array![[-1.0], [1.0]];
        let w = array![[-1.0, 1.0]];
        let lim = msn_zero_temp_limit(&x, &x, &w, &uniform(2), 1.0).unwrap();
        assert_eq!(lim.value, 0.0);

        let (x, w) = imbalanced_fixture();
        let lim = msn_zero_temp_limit(&x, &x, &w, &uniform(2), 1.0).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((lim.value - expected).abs() < 1e-15);
        assert!((lim.value - 0.130812).abs() < 1e-6);

        let prior = ProbVector::new(vec![0.75, 0.25]).unwrap();
        let lim = msn_zero_temp_limit(&x, &x, &w, &prior, 1.0).unwrap();
        assert_eq!(lim.value, 0.0);
    }

    #[test]
    fn zero_temp_margin_counts_crossing_anchor() {
        let w = array![[-1.0, 1.0]];
        let pos = array![[-1.0], [1.0]];
        let anc = array![[0.5], [1.0]];
        let lim = msn_zero_temp_limit(&anc, &pos, &w, &uniform(2), 1.0).unwrap();
        // Anchor 0 scores -0.5 on its positive's centroid and 0.5 on the other.
        assert!((lim.margin - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_temp_tie_rejected() {
        let x = array![[0.0]];
        let w = array![[-1.0, 1.0]];
        assert_eq!(
            msn_zero_temp_limit(&x, &x, &w, &uniform(2), 1.0),
            Err(Error::ArgminTie { sample: 0 })
        );
    }

    #[test]
    fn scaled_msn_converges_with_margin() {
        // Anchors perturbed within their positive's cluster.
        let w = array![[-1.0, 1.0], [0.0, 0.0]];
        let pos = array![[-0.9, 0.1], [-0.8, -0.2], [0.9, 0.3]];
        let anc = array![[-0.7, 0.2], [-0.4, -0.1], [0.8, 0.1]];
        let lim = msn_zero_temp_limit(&anc, &pos, &w, &uniform(2), 1.0).unwrap();
        assert_eq!(lim.margin, 0.0);
        assert!(lim.kmeans > 0.0);
        let mut prev = f64::INFINITY;
        for sigma in [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001] {
            let v = scaled_msn_loss(&anc, &pos, &w, &uniform(2), 1.0, sigma).unwrap();
            let gap = (v - lim.value).abs();
            assert!(gap <= prev + 1e-12, "sigma {sigma}: {gap} > {prev}");
            prev = gap;
        }
        assert!(prev < 1e-3);
    }
}
