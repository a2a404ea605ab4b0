//! Mini-batch samplers over labeled datasets.
//!
//! Every batch is a pure function of `(seed, iteration)`: the generator is
//! seeded once and the iteration index selects an independent ChaCha stream.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledIndex {
    pub index: usize,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerStrategy {
    UniformRandom,
    /// Many classes per batch, equal quota each.
    ClassBalanced { classes_per_batch: usize },
    /// Few classes per batch, equal quota each.
    ClassImbalanced { classes_per_batch: usize },
    /// Class k drawn with probability ∝ √count_k, then a uniform sample of it.
    InverseSqrtFreq,
}

impl SamplerStrategy {
    pub fn classes_per_batch(&self) -> Option<usize> {
        match *self {
            Self::ClassBalanced { classes_per_batch } | Self::ClassImbalanced { classes_per_batch } => {
                Some(classes_per_batch)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: SamplerStrategy,
    pub batch_size: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if let Some(c) = self.strategy.classes_per_batch() {
            if c == 0 {
                return Err(Error::InvalidArgument("classes_per_batch must be positive".into()));
            }
            if !self.batch_size.is_multiple_of(c) {
                return Err(Error::InvalidArgument(format!(
                    "batch_size {} not divisible by classes_per_batch {c}",
                    self.batch_size
                )));
            }
        }
        Ok(())
    }
}

/// Seeded sampler bound to one dataset.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    ids: Vec<usize>,
    /// Positions into `ids`, grouped by class id.
    by_class: Vec<Vec<usize>>,
    class_weights: Option<WeightedIndex<f64>>,
    iteration: u64,
}

impl Sampler {
    /// Fails if any class is too small for the per-class quota, since any
    /// class can be drawn.
    pub fn new(config: SamplerConfig, dataset: &[LabeledIndex]) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let num_classes = dataset.iter().map(|l| l.class_id).max().unwrap_or(0) + 1;
        let mut by_class = vec![Vec::new(); num_classes];
        for (pos, l) in dataset.iter().enumerate() {
            by_class[l.class_id].push(pos);
        }
        match config.strategy {
            SamplerStrategy::UniformRandom => {
                if config.batch_size > dataset.len() {
                    return Err(Error::InvalidArgument(format!(
                        "batch_size {} exceeds dataset size {}",
                        config.batch_size,
                        dataset.len()
                    )));
                }
            }
            SamplerStrategy::ClassBalanced { classes_per_batch }
            | SamplerStrategy::ClassImbalanced { classes_per_batch } => {
                if classes_per_batch > num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "classes_per_batch {classes_per_batch} exceeds {num_classes} classes"
                    )));
                }
                let quota = config.batch_size / classes_per_batch;
                if let Some((class, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < quota) {
                    return Err(Error::ClassTooSmall {
                        class,
                        available: members.len(),
                        quota,
                    });
                }
            }
            SamplerStrategy::InverseSqrtFreq => {}
        }
        let class_weights = match config.strategy {
            SamplerStrategy::InverseSqrtFreq => Some(
                WeightedIndex::new(by_class.iter().map(|m| (m.len() as f64).sqrt()))
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Self {
            config,
            ids: dataset.iter().map(|l| l.index).collect(),
            by_class,
            class_weights,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Batch as positions into the dataset slice passed to [`Sampler::new`].
    pub fn positions_at(&self, iteration: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration);
        let b = self.config.batch_size;
        match self.config.strategy {
            SamplerStrategy::UniformRandom => index::sample(&mut rng, self.ids.len(), b).into_vec(),
            SamplerStrategy::ClassBalanced { classes_per_batch }
            | SamplerStrategy::ClassImbalanced { classes_per_batch } => {
                let quota = b / classes_per_batch;
                let mut out = Vec::with_capacity(b);
                for class in index::sample(&mut rng, self.by_class.len(), classes_per_batch) {
                    let members = &self.by_class[class];
                    out.extend(index::sample(&mut rng, members.len(), quota).into_iter().map(|i| members[i]));
                }
                out
            }
            SamplerStrategy::InverseSqrtFreq => {
                let weights = self.class_weights.as_ref().expect("built in new");
                (0..b)
                    .map(|_| {
                        let members = &self.by_class[weights.sample(&mut rng)];
                        members[index::sample(&mut rng, members.len(), 1).index(0)]
                    })
                    .collect()
            }
        }
    }

    /// Sample ids of the batch at `iteration`.
    pub fn batch_at(&self, iteration: u64) -> Vec<usize> {
        self.positions_at(iteration).into_iter().map(|p| self.ids[p]).collect()
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let batch = self.batch_at(self.iteration);
        self.iteration += 1;
        batch
    }

    /// Per-iteration probability that each class contributes to a batch
    /// (stratified), or the per-draw class probability (frequency-weighted and
    /// uniform).
    pub fn class_selection_probabilities(&self) -> Vec<f64> {
        let c = self.by_class.len();
        let n = self.ids.len() as f64;
        match self.config.strategy {
            SamplerStrategy::UniformRandom => self.by_class.iter().map(|m| m.len() as f64 / n).collect(),
            SamplerStrategy::ClassBalanced { classes_per_batch }
            | SamplerStrategy::ClassImbalanced { classes_per_batch } => {
                vec![classes_per_batch as f64 / c as f64; c]
            }
            SamplerStrategy::InverseSqrtFreq => {
                let roots: Vec<f64> = self.by_class.iter().map(|m| (m.len() as f64).sqrt()).collect();
                let total: f64 = roots.iter().sum();
                roots.into_iter().map(|r| r / total).collect()
            }
        }
    }
}

/// Exact per-iteration inclusion probability of one sample in a dataset of
/// `num_classes` classes with `per_class` samples each.
///
/// Stratified strategies give (quota/n)·(c/C), evaluated as B/(n·C) so the
/// balanced and imbalanced forms agree bit for bit.
pub fn marginal_probability(
    strategy: SamplerStrategy,
    num_classes: usize,
    per_class: usize,
    batch_size: usize,
) -> Result<f64> {
    if num_classes == 0 || per_class == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("dataset shape and batch size must be positive".into()));
    }
    let total = num_classes * per_class;
    match strategy {
        SamplerStrategy::UniformRandom => {
            if batch_size > total {
                return Err(Error::InvalidArgument("batch larger than dataset".into()));
            }
            Ok(batch_size as f64 / total as f64)
        }
        SamplerStrategy::ClassBalanced { classes_per_batch }
        | SamplerStrategy::ClassImbalanced { classes_per_batch } => {
            if classes_per_batch == 0 || !batch_size.is_multiple_of(classes_per_batch) {
                return Err(Error::InvalidArgument("batch_size not divisible by classes_per_batch".into()));
            }
            if classes_per_batch > num_classes {
                return Err(Error::InvalidArgument("more classes per batch than classes".into()));
            }
            let quota = batch_size / classes_per_batch;
            if quota > per_class {
                return Err(Error::ClassTooSmall {
                    class: 0,
                    available: per_class,
                    quota,
                });
            }
            Ok(batch_size as f64 / total as f64)
        }
        SamplerStrategy::InverseSqrtFreq => Err(Error::Unsupported(
            "no closed-form marginal for inverse-sqrt-frequency sampling".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: SamplerConfig,
    pub iterations: u64,
    pub sample_ids: Vec<usize>,
    /// Fraction of iterations in which each sample appeared.
    pub frequencies: Vec<f64>,
    /// Closed-form marginal, when the dataset is class-uniform and the
    /// strategy has one.
    pub expected: Option<f64>,
    pub max_abs_deviation: Option<f64>,
    /// `max_abs_deviation` in binomial standard errors √(p(1−p)/iterations).
    pub max_standard_errors: Option<f64>,
}

fn class_uniform_shape(dataset: &[LabeledIndex]) -> Option<(usize, usize)> {
    let c = dataset.iter().map(|l| l.class_id).max()? + 1;
    let mut counts = vec![0usize; c];
    for l in dataset {
        counts[l.class_id] += 1;
    }
    let n = counts[0];
    counts.iter().all(|&x| x == n).then_some((c, n))
}

/// Counts how often each sample appears over `iterations` batches.
pub fn empirical_marginal_audit(config: SamplerConfig, dataset: &[LabeledIndex], iterations: u64) -> Result<AuditReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be positive".into()));
    }
    let sampler = Sampler::new(config, dataset)?;
    let mut counts = vec![0u64; dataset.len()];
    for it in 0..iterations {
        let mut batch = sampler.positions_at(it);
        // With-replacement strategies may repeat a sample within a batch.
        batch.sort_unstable();
        batch.dedup();
        for p in batch {
            counts[p] += 1;
        }
    }
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / iterations as f64).collect();
    let expected = class_uniform_shape(dataset)
        .and_then(|(c, n)| marginal_probability(config.strategy, c, n, config.batch_size).ok());
    let max_abs_deviation =
        expected.map(|p| frequencies.iter().map(|f| (f - p).abs()).fold(0.0, f64::max));
    let max_standard_errors = expected.zip(max_abs_deviation).map(|(p, dev)| {
        let se = (p * (1.0 - p) / iterations as f64).sqrt();
        if se > 0.0 {
            dev / se
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    });
    Ok(AuditReport {
        config,
        iterations,
        sample_ids: dataset.iter().map(|l| l.index).collect(),
        frequencies,
        expected,
        max_abs_deviation,
        max_standard_errors,
    })
}

/// Largest per-sample gap between two audits of the same dataset, in
/// standard errors of a difference of two independent binomial frequencies
/// with success probability `p`.
pub fn audit_gap_in_standard_errors(a: &AuditReport, b: &AuditReport, p: f64) -> Result<f64> {
    if a.frequencies.len() != b.frequencies.len() || a.iterations != b.iterations {
        return Err(Error::InvalidArgument("audits cover different datasets or lengths".into()));
    }
    let se = (2.0 * p * (1.0 - p) / a.iterations as f64).sqrt();
    let gap = a
        .frequencies
        .iter()
        .zip(&b.frequencies)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(gap / se)
}

/// `classes × per_class` samples with ids in class-major order.
pub fn uniform_class_dataset(classes: usize, per_class: usize) -> Vec<LabeledIndex> {
    (0..classes * per_class)
        .map(|i| LabeledIndex {
            index: i,
            class_id: i / per_class,
        })
        .collect()
}
