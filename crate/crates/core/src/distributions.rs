//! Discrete cluster priors and the information-theoretic quantities used by
//! every loss: entropy, cross-entropy and KL divergence, all in nats.
//!
//! Zero-probability conventions:
//! - `entropy` uses 0·ln 0 = 0.
//! - `cross_entropy` and `kl_divergence` return [`Error::SupportViolation`]
//!   when q_k = 0 and p_k > 0 instead of +∞.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on Σ p_k = 1 accepted by [`ProbVector::new`].
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// A probability distribution over K ≥ 1 clusters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and wraps `probs`. Inputs that are not normalized within
    /// [`NORMALIZATION_TOL`] are rejected, never renormalized.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::ZeroClusters);
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidProbVector(format!("entry {i} = {p}")));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidProbVector(format!("sum = {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights. Used for internally generated
    /// quantities (softmax outputs, count histograms), not for user input.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::ZeroClusters);
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidProbVector("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidProbVector("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroClusters);
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroClusters);
        }
        if index >= k {
            return Err(Error::InvalidArgument(format!("index {index} >= K = {k}")));
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Entries sorted in descending order.
    pub fn sorted_descending(&self) -> ProbVector {
        let mut v = self.0.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        ProbVector(v)
    }

    /// Arithmetic mean of several distributions over the same K.
    pub fn mean(vectors: &[ProbVector]) -> Result<ProbVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero distributions".into()))?;
        let k = first.len();
        let mut acc = vec![0.0; k];
        for v in vectors {
            check_same_len(first, v)?;
            for (a, p) in acc.iter_mut().zip(v.as_slice()) {
                *a += p;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        ProbVector::from_weights(&acc)
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        ProbVector::new(v).map_err(serde::de::Error::custom)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Family of feature priors over a fixed number of clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Uniform,
    PowerLaw { tau: f64 },
    Empirical { counts: Vec<u64> },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Uniform => Ok(()),
            PriorSpec::PowerLaw { tau } => {
                if !tau.is_finite() || *tau < 0.0 {
                    Err(Error::InvalidArgument(format!("power-law exponent {tau} < 0")))
                } else {
                    Ok(())
                }
            }
            PriorSpec::Empirical { counts } => {
                if let Some(i) = counts.iter().position(|&c| c == 0) {
                    Err(Error::InvalidArgument(format!("empirical count {i} is zero")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Builds the normalized prior described by `spec` over `k` clusters.
///
/// Power-law priors weight cluster k (1-based) by (1/k)^τ.
pub fn build_prior(spec: &PriorSpec, k: usize) -> Result<ProbVector> {
    if k == 0 {
        return Err(Error::ZeroClusters);
    }
    spec.validate()?;
    match spec {
        PriorSpec::Uniform => ProbVector::uniform(k),
        PriorSpec::PowerLaw { tau } => {
            let w: Vec<f64> = (1..=k).map(|i| (i as f64).powf(-tau)).collect();
            ProbVector::from_weights(&w)
        }
        PriorSpec::Empirical { counts } => {
            if counts.len() != k {
                return Err(Error::LengthMismatch {
                    expected: k,
                    actual: counts.len(),
                });
            }
            let w: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            ProbVector::from_weights(&w)
        }
    }
}

fn check_same_len(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    Ok(())
}

/// Numerically stable ln Σ exp(v_i). Returns −∞ when every entry is −∞.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax. Entries equal to −∞ map to exactly zero.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::ZeroClusters);
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::NonFinite("all logits are -inf".into()));
    }
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    ProbVector::from_weights(&e)
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.as_slice()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// H(p, q) = −Σ p_k ln q_k.
pub fn cross_entropy(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_len(p, q)?;
    let mut acc = 0.0;
    for (i, (&pk, &qk)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Err(Error::SupportViolation { index: i, p: pk });
        }
        acc -= pk * qk.ln();
    }
    Ok(acc)
}

/// KL(p‖q) = Σ p_k ln(p_k / q_k).
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_len(p, q)?;
    let mut acc = 0.0;
    for (i, (&pk, &qk)) in p.as_slice().iter().zip(q.as_slice()).enumerate() {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Err(Error::SupportViolation { index: i, p: pk });
        }
        acc += pk * (pk / qk).ln();
    }
    // Rounding can push identical distributions a hair below zero.
    Ok(acc.max(0.0))
}
