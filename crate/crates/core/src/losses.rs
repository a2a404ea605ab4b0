//! Self-supervised losses: simplified VICReg, MSN and prior-matching MSN
//! (PMSN), with analytic gradients for the Siamese trainer.
//!
//! Shapes: embeddings are N×d (one row per sample), prototypes are d×K (one
//! column per cluster), posteriors are one [`ProbVector`] per sample.
//!
//! The two regularizers differ by a constant when the prior is uniform:
//! λ·KL(p̄‖u) = λ ln K − λ H(p̄). MSN reports the `−λH(p̄)` convention and
//! PMSN the `+λ·KL` convention.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::distributions::{
    build_prior, cross_entropy, entropy, kl_divergence, log_sum_exp, softmax, PriorSpec,
    ProbVector,
};
use crate::error::{Error, Result};
use crate::DataMatrix;

/// How p̄ is matched against the prior in the PMSN regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorAlignment {
    /// Cluster k is compared with prior entry k.
    #[default]
    FixedIndex,
    /// Both p̄ and the prior are sorted in descending order before comparison,
    /// making the regularizer invariant to prototype permutations.
    SortedDescending,
}

/// Which volume regularizer a Siamese objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `+λ·KL(p̄‖prior)`.
    #[default]
    PriorKl,
    /// `−λ·H(p̄)`; the prior is ignored.
    NegEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Softmax temperature.
    pub sigma: f64,
    /// Target sharpening exponent T: targets are p^(1/T) renormalized.
    pub sharpen_t: f64,
    pub prior: PriorSpec,
    pub prior_alignment: PriorAlignment,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            gamma: 25.0,
            sigma: 0.1,
            sharpen_t: 0.25,
            prior: PriorSpec::Uniform,
            prior_alignment: PriorAlignment::FixedIndex,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda = {}", self.lambda)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma = {}", self.sigma)));
        }
        if !(self.sharpen_t > 0.0 && self.sharpen_t <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sharpen_t = {} outside (0, 1]",
                self.sharpen_t
            )));
        }
        if !(self.alpha > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("alpha and gamma must be positive".into()));
        }
        self.prior.validate()
    }
}

/// Symmetric 0/1 matrix of positive pairs with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    g: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(g: Array2<f64>) -> Result<Self> {
        let (r, c) = g.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!("similarity matrix is {r}×{c}")));
        }
        for ((i, j), &v) in g.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!("G[{i},{j}] = {v} is not 0/1")));
            }
            if i == j && v != 0.0 {
                return Err(Error::InvalidArgument(format!("G[{i},{i}] must be 0")));
            }
            if g[[j, i]] != v {
                return Err(Error::InvalidArgument(format!("G not symmetric at ({i},{j})")));
            }
        }
        Ok(Self { g })
    }

    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut g = Array2::zeros((n, n));
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("pair ({i},{j}) out of range")));
            }
            g[[i, j]] = 1.0;
            g[[j, i]] = 1.0;
        }
        Self::new(g)
    }

    /// Two views per source sample: row i pairs with row i + `sources`.
    pub fn paired_views(sources: usize) -> Result<Self> {
        let pairs: Vec<_> = (0..sources).map(|i| (i, i + sources)).collect();
        Self::from_pairs(2 * sources, &pairs)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }
}

/// (1/N)-normalized covariance of the rows of `z`.
pub fn covariance(z: &DataMatrix) -> Array2<f64> {
    let n = z.nrows() as f64;
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let centered = z - &mean;
    centered.t().dot(&centered) / n
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn pairwise_positive_sum(z: &DataMatrix, g: &SimilarityMatrix) -> f64 {
    let mut acc = 0.0;
    for ((i, j), &gij) in g.matrix().indexed_iter() {
        if gij != 0.0 {
            let diff = &z.row(i) - &z.row(j);
            acc += gij * diff.dot(&diff);
        }
    }
    acc
}

/// α‖Cov(Z) − I‖²_F + (γ/N) Σ_{i,j} G_ij ‖z_i − z_j‖².
pub fn vicreg_simplified(z: &DataMatrix, g: &SimilarityMatrix, alpha: f64, gamma: f64) -> Result<f64> {
    let (n, d) = z.dim();
    if n < 2 {
        return Err(Error::InvalidArgument("VICReg needs at least two embeddings".into()));
    }
    if g.n() != n {
        return Err(Error::DimensionMismatch(format!("G is {}×{0}, Z has {n} rows", g.n())));
    }
    let cov = covariance(z) - Array2::<f64>::eye(d);
    Ok(alpha * frobenius_sq(&cov) + gamma / n as f64 * pairwise_positive_sum(z, g))
}

/// Between/within split of the covariance of centered embeddings.
#[derive(Debug, Clone)]
pub struct CovarianceDecomposition {
    /// (1/N) ZᵀGZ.
    pub between: Array2<f64>,
    /// (1/N) Zᵀ(I − G)Z.
    pub within: Array2<f64>,
    /// ‖Cov(Z) − (between + within)‖_F.
    pub covariance_residual: f64,
    /// |Σ_ij G_ij‖z_i − z_j‖² − 2 Tr(Zᵀ(I − G)Z)|.
    pub pairwise_residual: f64,
    /// Larger of the two residuals.
    pub residual: f64,
}

/// Checks the covariance decomposition and the pairwise-trace identity on
/// column-centered `z` with exactly one positive per sample.
pub fn covariance_decomposition_check(
    z: &DataMatrix,
    g: &SimilarityMatrix,
) -> Result<CovarianceDecomposition> {
    let (n, _) = z.dim();
    if g.n() != n {
        return Err(Error::DimensionMismatch("G and Z sizes differ".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty embedding matrix".into()));
    }
    for (i, row) in g.matrix().outer_iter().enumerate() {
        let s = row.sum();
        if s != 1.0 {
            return Err(Error::InvalidArgument(format!("row {i} of G sums to {s}, expected 1")));
        }
    }
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let scale = z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(c) = mean.iter().position(|m| m.abs() > 1e-9 * scale) {
        return Err(Error::InvalidArgument(format!("column {c} of Z is not centered")));
    }
    let nf = n as f64;
    let gm = g.matrix();
    let between = z.t().dot(&gm.dot(z)) / nf;
    let i_minus_g = Array2::<f64>::eye(n) - gm;
    let within_raw = z.t().dot(&i_minus_g.dot(z));
    let within = &within_raw / nf;
    let cov = covariance(z);
    let covariance_residual = frobenius_sq(&(&cov - &(&between + &within))).sqrt();
    let trace: f64 = within_raw.diag().sum();
    let pairwise_residual = (pairwise_positive_sum(z, g) - 2.0 * trace).abs();
    Ok(CovarianceDecomposition {
        between,
        within,
        covariance_residual,
        pairwise_residual,
        residual: covariance_residual.max(pairwise_residual),
    })
}

/// Anchor posteriors p_n and target posteriors p_n⁺ for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBatch {
    anchors: Vec<ProbVector>,
    targets: Vec<ProbVector>,
}

impl PosteriorBatch {
    pub fn new(anchors: Vec<ProbVector>, targets: Vec<ProbVector>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if anchors.len() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: anchors.len(),
                actual: targets.len(),
            });
        }
        let k = anchors[0].len();
        for p in anchors.iter().chain(&targets) {
            if p.len() != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    actual: p.len(),
                });
            }
        }
        Ok(Self { anchors, targets })
    }

    pub fn anchors(&self) -> &[ProbVector] {
        &self.anchors
    }

    pub fn targets(&self) -> &[ProbVector] {
        &self.targets
    }

    pub fn k(&self) -> usize {
        self.anchors[0].len()
    }

    /// (1/N) Σ H(p_n⁺, p_n).
    pub fn mean_cross_entropy(&self) -> Result<f64> {
        let mut total = 0.0;
        for (a, t) in self.anchors.iter().zip(&self.targets) {
            total += cross_entropy(t, a)?;
        }
        Ok(total / self.anchors.len() as f64)
    }

    /// p̄ = (1/N) Σ p_n over the anchor posteriors.
    pub fn mean_anchor(&self) -> Result<ProbVector> {
        ProbVector::mean(&self.anchors)
    }
}

/// Mean cross-entropy minus λ·H(p̄).
pub fn msn_loss(batch: &PosteriorBatch, lambda: f64) -> Result<f64> {
    Ok(batch.mean_cross_entropy()? - lambda * entropy(&batch.mean_anchor()?))
}

/// Per-cluster prior entries against which p̄ is compared. Under
/// `SortedDescending` the cluster with the r-th largest p̄ receives the r-th
/// largest prior entry.
pub fn aligned_prior(pbar: &ProbVector, prior: &ProbVector, alignment: PriorAlignment) -> Result<ProbVector> {
    if pbar.len() != prior.len() {
        return Err(Error::LengthMismatch {
            expected: pbar.len(),
            actual: prior.len(),
        });
    }
    match alignment {
        PriorAlignment::FixedIndex => Ok(prior.clone()),
        PriorAlignment::SortedDescending => {
            let sorted_prior = prior.sorted_descending();
            let mut order: Vec<usize> = (0..pbar.len()).collect();
            order.sort_by(|&a, &b| pbar[b].total_cmp(&pbar[a]).then(a.cmp(&b)));
            let mut out = vec![0.0; pbar.len()];
            for (rank, &k) in order.iter().enumerate() {
                out[k] = sorted_prior[rank];
            }
            ProbVector::new(out)
        }
    }
}

/// Mean cross-entropy plus λ·KL(p̄‖prior).
pub fn pmsn_loss(
    batch: &PosteriorBatch,
    lambda: f64,
    prior: &ProbVector,
    alignment: PriorAlignment,
) -> Result<f64> {
    let pbar = batch.mean_anchor()?;
    let target = aligned_prior(&pbar, prior, alignment)?;
    Ok(batch.mean_cross_entropy()? + lambda * kl_divergence(&pbar, &target)?)
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    /// (1/N) Σ H(p_n⁺, p_n).
    pub cross_entropy: f64,
    /// λ·KL(p̄‖prior) or −λ·H(p̄).
    pub regularizer: f64,
    pub total: f64,
}

struct LogitForward {
    probs: Array2<f64>,
    pbar: ProbVector,
    reference: Option<ProbVector>,
    terms: LossTerms,
}

fn forward_from_logits(
    logits: &Array2<f64>,
    targets: &[ProbVector],
    lambda: f64,
    prior: &ProbVector,
    alignment: PriorAlignment,
    regularizer: Regularizer,
) -> Result<LogitForward> {
    let (n, k) = logits.dim();
    if n == 0 || targets.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: targets.len(),
        });
    }
    if targets.iter().any(|t| t.len() != k) {
        return Err(Error::DimensionMismatch("target posterior length differs from K".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut probs = Array2::zeros((n, k));
    let mut ce = 0.0;
    for (i, (row, t)) in logits.outer_iter().zip(targets).enumerate() {
        let lse = log_sum_exp(row.as_slice().expect("standard layout"));
        for (j, (&s, &q)) in row.iter().zip(t.as_slice()).enumerate() {
            let log_p = s - lse;
            probs[[i, j]] = log_p.exp();
            if q > 0.0 {
                ce -= q * log_p;
            }
        }
    }
    ce /= n as f64;
    let pbar = ProbVector::from_weights(&probs.mean_axis(Axis(0)).expect("n > 0").to_vec())?;
    let (reference, reg) = match regularizer {
        Regularizer::PriorKl => {
            if prior.len() != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    actual: prior.len(),
                });
            }
            let reference = aligned_prior(&pbar, prior, alignment)?;
            let kl = kl_divergence(&pbar, &reference)?;
            (Some(reference), lambda * kl)
        }
        Regularizer::NegEntropy => (None, -lambda * entropy(&pbar)),
    };
    Ok(LogitForward {
        probs,
        pbar,
        reference,
        terms: LossTerms {
            cross_entropy: ce,
            regularizer: reg,
            total: ce + reg,
        },
    })
}

/// PMSN loss evaluated from anchor logits (N×K) with log-softmax
/// cross-entropy, which stays finite when posteriors underflow.
pub fn pmsn_loss_from_logits(
    anchor_logits: &Array2<f64>,
    targets: &[ProbVector],
    lambda: f64,
    prior: &ProbVector,
    alignment: PriorAlignment,
) -> Result<LossTerms> {
    Ok(forward_from_logits(anchor_logits, targets, lambda, prior, alignment, Regularizer::PriorKl)?.terms)
}

fn check_unit(norms: impl Iterator<Item = f64>) -> Result<()> {
    for (index, norm) in norms.enumerate() {
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { index, norm });
        }
    }
    Ok(())
}

/// Row-wise softmax(Z·W/σ) for unit-norm rows of Z and unit-norm columns of W.
pub fn posterior_from_embeddings(z: &DataMatrix, w: &Array2<f64>, sigma: f64) -> Result<Vec<ProbVector>> {
    if z.ncols() != w.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} dims, prototypes {}",
            z.ncols(),
            w.nrows()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma = {sigma}")));
    }
    check_unit(z.outer_iter().map(|r| r.dot(&r).sqrt()))?;
    check_unit(w.columns().into_iter().map(|c| c.dot(&c).sqrt()))?;
    let logits = z.dot(w) / sigma;
    logits.outer_iter().map(|r| softmax(&r.to_vec())).collect()
}

/// p^(1/T) renormalized, computed in log space.
pub fn sharpen(p: &ProbVector, t: f64) -> Result<ProbVector> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!("sharpening exponent {t}")));
    }
    if t == 1.0 {
        return Ok(p.clone());
    }
    let logits: Vec<f64> = p
        .as_slice()
        .iter()
        .map(|&v| if v > 0.0 { v.ln() / t } else { f64::NEG_INFINITY })
        .collect();
    softmax(&logits)
}

/// Scales each row to unit ℓ2 norm; returns the normalized matrix and the
/// original norms.
pub fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = z.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::InvalidArgument(format!("row {i} has zero or non-finite norm")));
    }
    let out = z / &norms.view().insert_axis(Axis(1));
    Ok((out, norms))
}

/// Scales each column to unit ℓ2 norm.
pub fn normalize_columns(w: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let (t, norms) = normalize_rows(&w.t().to_owned())?;
    Ok((t.t().to_owned(), norms))
}

/// Gradient of f(v/‖v‖) given the gradient g w.r.t. the normalized rows u.
fn unnormalize_row_grad(g: &Array2<f64>, u: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, ur), &nr) in out.outer_iter_mut().zip(u.outer_iter()).zip(norms) {
        let proj = o.dot(&ur);
        o.zip_mut_with(&ur, |a, &b| *a = (*a - proj * b) / nr);
    }
    out
}

/// Target posteriors for a batch: sharpened softmax of the normalized target
/// embeddings against normalized prototypes. Treated as constants.
pub fn target_posteriors(z_target: &DataMatrix, w: &Array2<f64>, config: &LossConfig) -> Result<Vec<ProbVector>> {
    let (zt, _) = normalize_rows(z_target)?;
    let (wn, _) = normalize_columns(w)?;
    posterior_from_embeddings(&zt, &wn, config.sigma)?
        .iter()
        .map(|p| sharpen(p, config.sharpen_t))
        .collect()
}

/// Loss terms and gradients with respect to raw anchor embeddings and raw
/// prototypes. Both are ℓ2-normalized inside the loss.
#[derive(Debug, Clone)]
pub struct SiameseGradients {
    pub terms: LossTerms,
    /// N×d.
    pub d_anchor: Array2<f64>,
    /// d×K.
    pub d_prototypes: Array2<f64>,
    /// Mean anchor posterior of the batch.
    pub pbar: ProbVector,
}

/// Analytic gradients of the PMSN loss. The target branch is held constant.
pub fn pmsn_gradients(
    z_anchor: &DataMatrix,
    z_target: &DataMatrix,
    w: &Array2<f64>,
    config: &LossConfig,
) -> Result<SiameseGradients> {
    siamese_gradients(z_anchor, z_target, w, config, Regularizer::PriorKl)
}

/// Analytic gradients for either regularizer. With [`Regularizer::NegEntropy`]
/// this is the MSN loss.
pub fn siamese_gradients(
    z_anchor: &DataMatrix,
    z_target: &DataMatrix,
    w: &Array2<f64>,
    config: &LossConfig,
    regularizer: Regularizer,
) -> Result<SiameseGradients> {
    config.validate()?;
    if z_anchor.dim() != z_target.dim() {
        return Err(Error::DimensionMismatch("anchor and target batches".into()));
    }
    if z_anchor.ncols() != w.nrows() {
        return Err(Error::DimensionMismatch("embedding vs prototype dimension".into()));
    }
    let (n, k) = (z_anchor.nrows(), w.ncols());
    let targets = target_posteriors(z_target, w, config)?;
    let (za, za_norms) = normalize_rows(z_anchor)?;
    let (wn, w_norms) = normalize_columns(w)?;
    let logits = za.dot(&wn) / config.sigma;
    let prior = build_prior(&config.prior, k)?;
    let fwd = forward_from_logits(
        &logits,
        &targets,
        config.lambda,
        &prior,
        config.prior_alignment,
        regularizer,
    )?;

    // dL/dp̄_k is (λ/N)(ln p̄_k − ln r_k) up to a constant. Only differences
    // a_j − a_m reach the logits, so the reference enters as ln r_j − ln r_m,
    // which is exactly zero for a uniform prior.
    let nf = n as f64;
    let log_pbar: Vec<f64> = fwd
        .pbar
        .as_slice()
        .iter()
        .map(|&pb| if pb > 0.0 { pb.ln() } else { 0.0 })
        .collect();
    let log_ref: Vec<f64> = match &fwd.reference {
        Some(r) => r.as_slice().iter().map(|v| v.ln()).collect(),
        None => vec![0.0; k],
    };
    // A cluster with p̄_j = 0 has p_nj = 0 in every row, so its entries drop out.
    let a_diff = Array2::from_shape_fn((k, k), |(j, m)| {
        (log_pbar[j] - log_pbar[m]) - (log_ref[j] - log_ref[m])
    });
    let scale = config.lambda / nf;

    let mut d_logits = Array2::zeros((n, k));
    for i in 0..n {
        let p = fwd.probs.row(i);
        for j in 0..k {
            let centered: f64 = (0..k).map(|m| p[m] * a_diff[[j, m]]).sum();
            d_logits[[i, j]] = (p[j] - targets[i][j]) / nf + p[j] * scale * centered;
        }
    }
    let d_logits = d_logits / config.sigma;
    let d_za = d_logits.dot(&wn.t());
    let d_wn = za.t().dot(&d_logits);
    let d_anchor = unnormalize_row_grad(&d_za, &za, &za_norms);
    let d_prototypes = unnormalize_row_grad(&d_wn.t().to_owned(), &wn.t().to_owned(), &w_norms)
        .t()
        .to_owned();
    Ok(SiameseGradients {
        terms: fwd.terms,
        d_anchor,
        d_prototypes,
        pbar: fwd.pbar,
    })
}

/// PMSN loss of raw embeddings and prototypes, composed from the public
/// posterior, sharpening and loss operations.
pub fn pmsn_objective(
    z_anchor: &DataMatrix,
    z_target: &DataMatrix,
    w: &Array2<f64>,
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    let targets = target_posteriors(z_target, w, config)?;
    let (za, _) = normalize_rows(z_anchor)?;
    let (wn, _) = normalize_columns(w)?;
    let anchors = posterior_from_embeddings(&za, &wn, config.sigma)?;
    let prior = build_prior(&config.prior, w.ncols())?;
    pmsn_loss(
        &PosteriorBatch::new(anchors, targets)?,
        config.lambda,
        &prior,
        config.prior_alignment,
    )
}
