//! Toy Siamese trainer: a small encoder and a prototype matrix optimized on
//! MSN or PMSN with SGD and momentum, plus evaluation metrics.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distributions::{build_prior, kl_divergence, softmax, ProbVector};
use crate::error::{Error, Result};
use crate::losses::{aligned_prior, normalize_columns, siamese_gradients, LossConfig, LossTerms, Regularizer};
use crate::sampling::{Sampler, SamplerConfig};
use crate::synthdata::{make_views, SynthDataset, ViewAugmentation};
use crate::DataMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    /// One tanh hidden layer.
    Mlp { hidden: usize },
}

/// Affine layers with tanh between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Activations kept for the backward pass.
pub struct EncoderCache {
    inputs: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
}

impl Encoder {
    pub fn new(kind: EncoderKind, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = match kind {
            EncoderKind::Linear => vec![d_in, d_out],
            EncoderKind::Mlp { hidden } => vec![d_in, hidden, d_out],
        };
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("encoder dims {dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let normal = Normal::new(0.0, 1.0 / (pair[0] as f64).sqrt()).expect("positive scale");
            weights.push(Array2::from_shape_fn((pair[0], pair[1]), |_| normal.sample(rng)));
            biases.push(Array1::zeros(pair[1]));
        }
        Ok(Self { weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }

    pub fn forward(&self, x: &DataMatrix) -> Result<(DataMatrix, EncoderCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut cache = EncoderCache {
            inputs: Vec::new(),
            hidden: Vec::new(),
        };
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let pre = h.dot(w) + b;
            cache.inputs.push(h);
            h = if l < last { pre.mapv(f64::tanh) } else { pre };
            if l < last {
                cache.hidden.push(h.clone());
            }
        }
        Ok((h, cache))
    }

    pub fn embed(&self, x: &DataMatrix) -> Result<DataMatrix> {
        Ok(self.forward(x)?.0)
    }

    /// Parameter gradients given dLoss/d(output).
    pub fn backward(&self, cache: &EncoderCache, d_out: &DataMatrix) -> Encoder {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        let mut g = d_out.clone();
        for l in (0..self.weights.len()).rev() {
            weights.push(cache.inputs[l].t().dot(&g));
            biases.push(g.sum_axis(Axis(0)));
            if l > 0 {
                let back = g.dot(&self.weights[l].t());
                let h = &cache.hidden[l - 1];
                g = back * &h.mapv(|v| 1.0 - v * v);
            }
        }
        weights.reverse();
        biases.reverse();
        Encoder { weights, biases }
    }

    pub fn zeros_like(&self) -> Encoder {
        Encoder {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Applies `f(self_param, other_param)` to every parameter pair.
    pub fn zip_apply(&mut self, other: &Encoder, f: impl Fn(&mut f64, f64) + Copy) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_mut_with(b, |x, &y| f(x, y));
        }
    }

    /// All parameters, layer by layer: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>();
        if flat.len() != total {
            return Err(Error::LengthMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// `prior_kl` trains PMSN, `neg_entropy` trains MSN.
    pub regularizer: Regularizer,
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub num_prototypes: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Target-encoder EMA momentum; `None` shares the online encoder.
    pub ema_momentum: Option<f64>,
    pub augmentation: ViewAugmentation,
    /// Neighbors used by the purity metrics.
    pub purity_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig {
                lambda: 5.0,
                ..LossConfig::default()
            },
            regularizer: Regularizer::PriorKl,
            encoder: EncoderKind::Mlp { hidden: 64 },
            embed_dim: 16,
            num_prototypes: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 300,
            ema_momentum: Some(0.99),
            augmentation: ViewAugmentation {
                noise_sigma: 0.2,
                mask_fraction: 0.15,
            },
            purity_k: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.augmentation.validate()?;
        if self.embed_dim == 0 || self.num_prototypes == 0 || self.purity_k == 0 {
            return Err(Error::InvalidArgument("embed_dim, num_prototypes and purity_k must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("learning_rate > 0 and momentum in [0, 1) required".into()));
        }
        if let Some(m) = self.ema_momentum {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::InvalidArgument(format!("EMA momentum {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SiameseState {
    pub encoder: Encoder,
    /// d×K, unit columns.
    pub prototypes: Array2<f64>,
    pub target_encoder: Option<Encoder>,
    pub config: TrainConfig,
    encoder_velocity: Encoder,
    prototype_velocity: Array2<f64>,
}

impl SiameseState {
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(config.encoder, input_dim, config.embed_dim, &mut rng)?;
        let normal = Normal::new(0.0, 1.0).expect("unit scale");
        let raw = Array2::from_shape_fn((config.embed_dim, config.num_prototypes), |_| normal.sample(&mut rng));
        let (prototypes, _) = normalize_columns(&raw)?;
        Ok(Self {
            encoder_velocity: encoder.zeros_like(),
            prototype_velocity: Array2::zeros(prototypes.raw_dim()),
            target_encoder: config.ema_momentum.map(|_| encoder.clone()),
            encoder,
            prototypes,
            config,
        })
    }

    pub fn target(&self) -> &Encoder {
        self.target_encoder.as_ref().unwrap_or(&self.encoder)
    }

    /// Loss on a pair of views plus gradients for the online encoder and the
    /// prototypes. The target view is embedded by the target encoder and
    /// contributes no gradient.
    pub fn loss_and_gradients(&self, anchor: &DataMatrix, target: &DataMatrix) -> Result<(LossTerms, Encoder, Array2<f64>)> {
        let (za, cache) = self.encoder.forward(anchor)?;
        let zt = self.target().embed(target)?;
        // A squared norm that overflows cannot be normalized.
        if za.outer_iter().chain(zt.outer_iter()).any(|r| !r.dot(&r).is_finite()) {
            return Err(Error::NonFinite("embeddings".into()));
        }
        let g =siamese_gradients(&za, &zt, &self.prototypes, &self.config.loss, self.config.regularizer)?;
        Ok((g.terms, self.encoder.backward(&cache, &g.d_anchor), g.d_prototypes))
    }

    /// One SGD-with-momentum update followed by prototype renormalization and
    /// the EMA update.
    pub fn step(&mut self, anchor: &DataMatrix, target: &DataMatrix, step: usize) -> Result<LossTerms> {
        let diverged = |loss| Error::Diverged { step, loss };
        let (terms, enc_grad, proto_grad) = match self.loss_and_gradients(anchor, target) {
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            other => other?,
        };
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: terms.total,
            });
        }
        let (lr, m) = (self.config.learning_rate, self.config.momentum);
        self.encoder_velocity.zip_apply(&enc_grad, move |v, g| *v = m * *v + g);
        self.encoder.zip_apply(&self.encoder_velocity, move |p, v| *p -= lr * v);
        self.prototype_velocity.zip_mut_with(&proto_grad, |v, &g| *v = m * *v + g);
        self.prototypes.zip_mut_with(&self.prototype_velocity, |p, &v| *p -= lr * v);
        if self.prototypes.iter().any(|v| !v.is_finite()) {
            return Err(diverged(terms.total));
        }
        self.prototypes = normalize_columns(&self.prototypes)?.0;
        if let (Some(tgt), Some(mom)) = (self.target_encoder.as_mut(), self.config.ema_momentum) {
            tgt.zip_apply(&self.encoder, move |t, o| *t = mom * *t + (1.0 - mom) * o);
        }
        if self.encoder.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(diverged(terms.total));
        }
        Ok(terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nn_purity_primary: f64,
    pub nn_purity_secondary: Option<f64>,
    /// KL(p̄‖prior) over the whole dataset, with the configured alignment.
    pub kl_pbar_to_prior: f64,
    /// Fraction of samples whose most probable prototype is k.
    pub cluster_usage: ProbVector,
    pub mean_posterior: ProbVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub cross_entropy: Vec<f64>,
    pub regularizer: Vec<f64>,
    pub metrics: Metrics,
}

fn view_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn select_rows(x: &DataMatrix, ids: &[usize]) -> DataMatrix {
    x.select(Axis(0), ids)
}

/// Runs `state.config.steps` updates on batches drawn by `sampler`.
pub fn train(dataset: &SynthDataset, state: &mut SiameseState, sampler: SamplerConfig) -> Result<TrainReport> {
    if dataset.dim() != state.encoder.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} features, encoder expects {}",
            dataset.dim(),
            state.encoder.input_dim()
        )));
    }
    let sampler = Sampler::new(sampler, &dataset.labeled_indices())?;
    let steps = state.config.steps;
    let mut losses = Vec::with_capacity(steps);
    let mut ce = Vec::with_capacity(steps);
    let mut reg = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = select_rows(&dataset.x, &sampler.positions_at(step as u64));
        let (anchor, target) = make_views(&batch, &state.config.augmentation, view_seed(state.config.seed, step))?;
        let terms = state.step(&anchor, &target, step)?;
        losses.push(terms.total);
        ce.push(terms.cross_entropy);
        reg.push(terms.regularizer);
    }
    Ok(TrainReport {
        losses,
        cross_entropy: ce,
        regularizer: reg,
        metrics: evaluate(state, dataset)?,
    })
}

/// Fraction of each sample's k nearest neighbors (cosine similarity, self
/// excluded, ties to the lower index) sharing its label.
pub fn nn_purity(embeddings: &DataMatrix, labels: &[usize], k: usize) -> Result<f64> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in [1, N) with N = {n}")));
    }
    let norms: Array1<f64> = embeddings.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let unit = embeddings / &norms.mapv(|v| if v > 0.0 { v } else { 1.0 }).insert_axis(Axis(1));
    let sims = unit.dot(&unit.t());
    let mut hits = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = sims.row(i);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        order.select_nth_unstable_by(k - 1, cmp);
        hits += order[..k].iter().filter(|&&j| labels[j] == labels[i]).count();
    }
    Ok(hits as f64 / (n * k) as f64)
}

/// Purity metrics, KL of the mean posterior to the prior and argmax cluster
/// usage over the full dataset, using the online encoder.
pub fn evaluate(state: &SiameseState, dataset: &SynthDataset) -> Result<Metrics> {
    let z = state.encoder.embed(&dataset.x)?;
    let (zn, _) = crate::losses::normalize_rows(&z)?;
    let logits = zn.dot(&state.prototypes) / state.config.loss.sigma;
    let k = state.prototypes.ncols();
    let mut usage = vec![0.0; k];
    let mut posteriors = Vec::with_capacity(z.nrows());
    for row in logits.outer_iter() {
        let p = softmax(&row.to_vec())?;
        let best = (0..k).fold(0, |b, j| if p[j] > p[b] { j } else { b });
        usage[best] += 1.0;
        posteriors.push(p);
    }
    let pbar = ProbVector::mean(&posteriors)?;
    let prior = build_prior(&state.config.loss.prior, k)?;
    let reference = aligned_prior(&pbar, &prior, state.config.loss.prior_alignment)?;
    let pk = state.config.purity_k;
    Ok(Metrics {
        nn_purity_primary: nn_purity(&zn, &dataset.primary_labels, pk)?,
        nn_purity_secondary: dataset
            .secondary_labels
            .as_ref()
            .map(|s| nn_purity(&zn, s, pk))
            .transpose()?,
        kl_pbar_to_prior: kl_divergence(&pbar, &reference)?,
        cluster_usage: ProbVector::from_weights(&usage)?,
        mean_posterior: pbar,
    })
}
