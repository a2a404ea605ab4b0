//! Paired prior comparison on the two-factor toy dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::PriorSpec;
use crate::error::{Error, Result};
use crate::sampling::{SamplerConfig, SamplerStrategy};
use crate::synthdata::{two_factor_dataset, FactorSpec, ViewAugmentation};
use crate::trainer::{train, Metrics, SiameseState, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperimentConfig {
    pub primary: FactorSpec,
    pub secondary: FactorSpec,
    pub num_samples: usize,
    pub batch_size: usize,
    /// The prior inside `train.loss` is replaced by each arm's prior.
    pub train: TrainConfig,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        Self {
            primary: FactorSpec {
                separation: 3.0,
                ..FactorSpec::primary_default()
            },
            secondary: FactorSpec::secondary_default(),
            num_samples: 2000,
            batch_size: 128,
            train: TrainConfig {
                steps: 3000,
                learning_rate: 0.1,
                augmentation: ViewAugmentation {
                    noise_sigma: 0.2,
                    mask_fraction: 0.05,
                },
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub metrics: Metrics,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub arm_a: ArmResult,
    pub arm_b: ArmResult,
    /// Secondary purity of arm B minus arm A.
    pub secondary_gain: f64,
    /// Primary purity of arm B minus arm A.
    pub primary_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub prior_a: PriorSpec,
    pub prior_b: PriorSpec,
    pub config: ToyExperimentConfig,
    pub rows: Vec<PairedRow>,
    pub median_secondary_gain: f64,
    pub median_primary_change: f64,
    /// Seeds where arm B has strictly higher secondary purity.
    pub secondary_wins: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains one arm: dataset, initialization and batches all derive from `seed`.
pub fn run_arm(config: &ToyExperimentConfig, prior: &PriorSpec, seed: u64) -> Result<ArmResult> {
    let dataset = two_factor_dataset(&config.primary, &config.secondary, config.num_samples, seed)?;
    let mut train_cfg = config.train.clone();
    train_cfg.loss.prior = prior.clone();
    train_cfg.seed = seed;
    let mut state = SiameseState::new(train_cfg, dataset.dim())?;
    let sampler = SamplerConfig {
        strategy: SamplerStrategy::UniformRandom,
        batch_size: config.batch_size,
        seed,
    };
    let report = train(&dataset, &mut state, sampler)?;
    Ok(ArmResult {
        final_loss: *report.losses.last().unwrap_or(&f64::NAN),
        metrics: report.metrics,
    })
}

/// Paired runs of prior A and prior B for every seed, in parallel.
pub fn run_toy_experiment(
    prior_a: &PriorSpec,
    prior_b: &PriorSpec,
    seeds: &[u64],
    config: &ToyExperimentConfig,
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    prior_a.validate()?;
    prior_b.validate()?;
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let results: Vec<ArmResult> = jobs
        .par_iter()
        .map(|&(seed, b)| run_arm(config, if b { prior_b } else { prior_a }, seed))
        .collect::<Result<_>>()?;
    let rows: Vec<PairedRow> = seeds
        .iter()
        .zip(results.chunks(2))
        .map(|(&seed, pair)| {
            let (a, b) = (pair[0].clone(), pair[1].clone());
            let sec = |m: &Metrics| m.nn_purity_secondary.unwrap_or(f64::NAN);
            PairedRow {
                seed,
                secondary_gain: sec(&b.metrics) - sec(&a.metrics),
                primary_change: b.metrics.nn_purity_primary - a.metrics.nn_purity_primary,
                arm_a: a,
                arm_b: b,
            }
        })
        .collect();
    let gains: Vec<f64> = rows.iter().map(|r| r.secondary_gain).collect();
    let changes: Vec<f64> = rows.iter().map(|r| r.primary_change).collect();
    Ok(ComparisonReport {
        prior_a: prior_a.clone(),
        prior_b: prior_b.clone(),
        config: config.clone(),
        median_secondary_gain: median(&gains),
        median_primary_change: median(&changes),
        secondary_wins: gains.iter().filter(|&&g| g > 0.0).count(),
        rows,
    })
}
