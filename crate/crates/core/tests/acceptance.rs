//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prior_lab::clustering::{
    adjusted_rand_index, brute_force_optimum, implicit_objective, lloyd_restarts, ObjectiveMode, Partition,
    DEFAULT_ENUMERATION_CAP,
};
use prior_lab::distributions::{build_prior, PriorSpec, ProbVector};
use prior_lab::experiment::{run_toy_experiment, ToyExperimentConfig};
use prior_lab::losses::{
    covariance_decomposition_check, pmsn_gradients, target_posteriors, LossConfig, PriorAlignment, Regularizer,
    SimilarityMatrix,
};
use prior_lab::mixture::{gmm_posterior, GmmModel};
use prior_lab::sampling::{
    audit_gap_in_standard_errors, empirical_marginal_audit, marginal_probability, uniform_class_dataset,
    SamplerConfig, SamplerStrategy,
};
use prior_lab::synthdata::{gaussian_mixture, make_views, two_factor_dataset};
use prior_lab::transport::{sinkhorn_project, SinkhornConfig};
use prior_lab::trainer::{SiameseState, TrainConfig};
use prior_lab::verify::{zero_temperature_trace, ZERO_TEMPERATURE_SIGMAS};
use prior_lab::DataMatrix;

type Outcome = Result<(bool, String), String>;

fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> DataMatrix {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

/// Centroid form of the K-means cost, written out with loops.
fn centroid_cost(x: &DataMatrix, assign: &[usize], k: usize) -> f64 {
    let d = x.ncols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for j in 0..d {
            sums[c][j] += x[[i, j]];
        }
    }
    let mut cost = 0.0;
    for (i, &c) in assign.iter().enumerate() {
        for j in 0..d {
            let m = sums[c][j] / counts[c] as f64;
            cost += (x[[i, j]] - m).powi(2);
        }
    }
    cost
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=3usize);
        let n = rng.random_range(k..=8usize);
        let x = rand_matrix(&mut rng, n, 2, 5.0);
        let (_, implicit) = brute_force_optimum(&x, k, ObjectiveMode::Implicit, DEFAULT_ENUMERATION_CAP)
            .map_err(|e| e.to_string())?;
        let mut best = f64::INFINITY;
        let mut assign = vec![0usize; n];
        loop {
            best = best.min(centroid_cost(&x, &assign, k));
            let mut pos = 0;
            while pos < n && assign[pos] == k - 1 {
                assign[pos] = 0;
                pos += 1;
            }
            if pos == n {
                break;
            }
            assign[pos] += 1;
        }
        worst = worst.max((best - implicit).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 1e-9 && secs < 10.0, format!("max |gap| {worst:.2e}, {secs:.2} s")))
}

fn pairwise_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=30usize);
        let k = rng.random_range(1..=n.min(6));
        let d = rng.random_range(1..=5usize);
        let x = rand_matrix(&mut rng, n, d, 3.0);
        let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p = Partition::new(assign.clone(), k).map_err(|e| e.to_string())?;
        let e = centroid_cost(&x, &assign, k);
        let i = implicit_objective(&x, &p).map_err(|e| e.to_string())?;
        worst = worst.max((e - i).abs() / e);
    }
    Ok((worst < 1e-12, format!("max relative error {worst:.2e}")))
}

fn covariance_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let sources = rng.random_range(1..=16usize);
        let d = rng.random_range(1..=6usize);
        let n = 2 * sources;
        let z = rand_matrix(&mut rng, n, d, 2.0);
        let z = &z - &z.mean_axis(Axis(0)).unwrap();
        let g = SimilarityMatrix::paired_views(sources).map_err(|e| e.to_string())?;
        let dec = covariance_decomposition_check(&z, &g).map_err(|e| e.to_string())?;
        worst = worst.max(dec.residual);

        // Positive pairs are (i, i + sources) in both directions.
        let partner = |i: usize| if i < sources { i + sources } else { i - sources };
        let mut between = Array2::<f64>::zeros((d, d));
        let mut cov = Array2::<f64>::zeros((d, d));
        let mut pair_sum = 0.0;
        for i in 0..n {
            let j = partner(i);
            for a in 0..d {
                for b in 0..d {
                    between[[a, b]] += z[[i, a]] * z[[j, b]] / n as f64;
                    cov[[a, b]] += z[[i, a]] * z[[i, b]] / n as f64;
                }
                pair_sum += (z[[i, a]] - z[[j, a]]).powi(2);
            }
        }
        let within = &cov - &between;
        worst = worst.max((&between - &dec.between).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        worst = worst.max((&within - &dec.within).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let trace: f64 = within.diag().sum() * n as f64;
        worst = worst.max((pair_sum - 2.0 * trace).abs());
    }
    Ok((worst < 1e-10, format!("max residual {worst:.2e}")))
}

fn gmm_posterior_vs_bayes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let d = rng.random_range(1..=5usize);
        let k = rng.random_range(2..=6usize);
        let w = rand_matrix(&mut rng, d, k, 2.0);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let pi: Vec<f64> = weights.iter().map(|v| v / total).collect();
        let var = rng.random_range(0.2..3.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();

        let norm = (2.0 * std::f64::consts::PI * var).powf(-(d as f64) / 2.0);
        let joint: Vec<f64> = (0..k)
            .map(|c| {
                let sq: f64 = (0..d).map(|j| (x[j] - w[[j, c]]).powi(2)).sum();
                pi[c] * norm * (-sq / (2.0 * var)).exp()
            })
            .collect();
        let evidence: f64 = joint.iter().sum();

        let model = GmmModel::new(w, ProbVector::new(pi).map_err(|e| e.to_string())?, var)
            .map_err(|e| e.to_string())?;
        let post = gmm_posterior(&model, ndarray::ArrayView1::from(&x)).map_err(|e| e.to_string())?;
        for (p, j) in post.as_slice().iter().zip(&joint) {
            worst = worst.max((p - j / evidence).abs());
        }
    }
    Ok((worst < 1e-10, format!("max abs error {worst:.2e}")))
}

fn zero_temperature() -> Outcome {
    let trace = zero_temperature_trace().map_err(|e| e.to_string())?;
    // Three of four points in the first cluster, uniform prior, λ = 1.
    let expected = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    let monotone = trace.gaps.windows(2).all(|g| g[1] <= g[0] + 1e-14);
    let last = *trace.gaps.last().unwrap();
    let value_err = (trace.limit - expected).abs();
    let value_ok = (trace.limit - 0.130812).abs() < 1e-6;
    Ok((
        monotone && last < 1e-3 && value_err < 1e-12 && value_ok && trace.sigmas == ZERO_TEMPERATURE_SIGMAS,
        format!("limit {:.6}, gap at sigma 0.001 {last:.2e}, monotone {monotone}", trace.limit),
    ))
}

fn sinkhorn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut res, mut iters, mut idem) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..100 {
        let k = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=64usize);
        let m = Array2::from_shape_fn((k, n), |_| rng.random_range(0.01..1.0));
        let p = sinkhorn_project(&m, SinkhornConfig::default()).map_err(|e| e.to_string())?;
        let q = p.assignment.matrix();
        for r in q.sum_axis(Axis(1)).iter() {
            res = res.max((r - n as f64 / k as f64).abs());
        }
        for c in q.sum_axis(Axis(0)).iter() {
            res = res.max((c - 1.0).abs());
        }
        iters = iters.max(p.iterations);
        let again = sinkhorn_project(q, SinkhornConfig::default()).map_err(|e| e.to_string())?;
        idem = idem.max((again.assignment.matrix() - q).iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    Ok((
        res < 1e-8 && iters <= 1000 && idem < 1e-8,
        format!("residual {res:.2e}, iterations {iters}, idempotence {idem:.2e}"),
    ))
}

/// PMSN loss with the target posteriors fixed, written out directly.
fn pmsn_forward(za: &DataMatrix, w: &Array2<f64>, targets: &[Vec<f64>], cfg: &LossConfig, prior: &[f64]) -> f64 {
    let (n, k) = (za.nrows(), w.ncols());
    let wn: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let col = w.column(c);
            let norm = col.dot(&col).sqrt();
            col.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut pbar = vec![0.0; k];
    let mut ce = 0.0;
    for (row, target) in za.outer_iter().zip(targets) {
        let norm = row.dot(&row).sqrt();
        let s: Vec<f64> = wn
            .iter()
            .map(|c| c.iter().zip(row.iter()).map(|(a, b)| a * b / norm).sum::<f64>() / cfg.sigma)
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for c in 0..k {
            ce -= target[c] * (s[c] - lse);
            pbar[c] += (s[c] - lse).exp() / n as f64;
        }
    }
    let reference: Vec<f64> = match cfg.prior_alignment {
        PriorAlignment::FixedIndex => prior.to_vec(),
        PriorAlignment::SortedDescending => {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| pbar[b].total_cmp(&pbar[a]));
            let mut sorted = prior.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut r = vec![0.0; k];
            for (rank, &c) in order.iter().enumerate() {
                r[c] = sorted[rank];
            }
            r
        }
    };
    let kl: f64 = pbar.iter().zip(&reference).map(|(p, q)| p * (p / q).ln()).sum();
    ce / n as f64 + cfg.lambda * kl
}

fn normwise_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn finite_difference_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = rng.random_range(2..=8usize);
        let d = rng.random_range(2..=6usize);
        let k = rng.random_range(2..=6usize);
        let cfg = LossConfig {
            lambda: rng.random_range(0.1..5.0),
            sigma: rng.random_range(0.2..1.0),
            sharpen_t: rng.random_range(0.25..1.0),
            prior: if trial % 2 == 0 {
                PriorSpec::Uniform
            } else {
                PriorSpec::PowerLaw {
                    tau: rng.random_range(0.2..1.5),
                }
            },
            prior_alignment: if trial % 3 == 0 {
                PriorAlignment::SortedDescending
            } else {
                PriorAlignment::FixedIndex
            },
            ..LossConfig::default()
        };
        let za = rand_matrix(&mut rng, n, d, 1.0);
        let zt = rand_matrix(&mut rng, n, d, 1.0);
        let w = rand_matrix(&mut rng, d, k, 1.0);
        let prior = build_prior(&cfg.prior, k).map_err(|e| e.to_string())?.into_vec();
        let targets: Vec<Vec<f64>> = target_posteriors(&zt, &w, &cfg)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|p| p.into_vec())
            .collect();
        let g = pmsn_gradients(&za, &zt, &w, &cfg).map_err(|e| e.to_string())?;

        let mut num_a = Array2::zeros(za.raw_dim());
        for idx in ndarray::indices(za.raw_dim()) {
            let (mut plus, mut minus) = (za.clone(), za.clone());
            plus[idx] += h;
            minus[idx] -= h;
            num_a[idx] = (pmsn_forward(&plus, &w, &targets, &cfg, &prior)
                - pmsn_forward(&minus, &w, &targets, &cfg, &prior))
                / (2.0 * h);
        }
        let mut num_w = Array2::zeros(w.raw_dim());
        for idx in ndarray::indices(w.raw_dim()) {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus[idx] += h;
            minus[idx] -= h;
            num_w[idx] = (pmsn_forward(&za, &plus, &targets, &cfg, &prior)
                - pmsn_forward(&za, &minus, &targets, &cfg, &prior))
                / (2.0 * h);
        }
        worst = worst.max(normwise_error(&g.d_anchor, &num_a));
        worst = worst.max(normwise_error(&g.d_prototypes, &num_w));
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.2e}")))
}

fn msn_uniform_equivalence() -> Outcome {
    let base = ToyExperimentConfig::default();
    let data = two_factor_dataset(&base.primary, &base.secondary, 400, 7).map_err(|e| e.to_string())?;
    let cfg = |regularizer| TrainConfig {
        regularizer,
        seed: 7,
        ..base.train.clone()
    };
    let mut pmsn = SiameseState::new(cfg(Regularizer::PriorKl), data.dim()).map_err(|e| e.to_string())?;
    let mut msn = SiameseState::new(cfg(Regularizer::NegEntropy), data.dim()).map_err(|e| e.to_string())?;
    let offset = pmsn.config.loss.lambda * (pmsn.config.num_prototypes as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (mut param_gap, mut loss_gap) = (0.0f64, 0.0f64);
    let steps = 200;
    for step in 0..steps {
        let rows: Vec<usize> = (0..64).map(|_| rng.random_range(0..data.len())).collect();
        let batch = data.x.select(Axis(0), &rows);
        let (anchor, target) = make_views(&batch, &base.train.augmentation, step as u64).map_err(|e| e.to_string())?;
        let lp = pmsn.step(&anchor, &target, step).map_err(|e| e.to_string())?;
        let lm = msn.step(&anchor, &target, step).map_err(|e| e.to_string())?;
        loss_gap = loss_gap.max((lp.total - lm.total - offset).abs());
        let a = pmsn.encoder.to_flat();
        let b = msn.encoder.to_flat();
        for (x, y) in a.iter().zip(&b) {
            param_gap = param_gap.max((x - y).abs());
        }
        param_gap = param_gap.max((&pmsn.prototypes - &msn.prototypes).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    Ok((
        param_gap < 1e-10 && loss_gap < 1e-12,
        format!("{steps} steps, max parameter gap {param_gap:.2e}, max loss offset error {loss_gap:.2e}"),
    ))
}

fn marginal_equality() -> Outcome {
    let (classes, per_class, batch) = (100usize, 10usize, 20usize);
    let balanced = SamplerStrategy::ClassBalanced { classes_per_batch: 20 };
    let imbalanced = SamplerStrategy::ClassImbalanced { classes_per_batch: 2 };
    let pb = marginal_probability(balanced, classes, per_class, batch).map_err(|e| e.to_string())?;
    let pi = marginal_probability(imbalanced, classes, per_class, batch).map_err(|e| e.to_string())?;
    // (quota / per_class) · (c / classes) as exact fractions.
    let exact = |c: usize| ((batch / c) * c, per_class * classes);
    let closed_equal = pb == pi && exact(20) == exact(2) && pb == exact(20).0 as f64 / exact(20).1 as f64;

    let data = uniform_class_dataset(classes, per_class);
    let run = |strategy| {
        let cfg = SamplerConfig {
            strategy,
            batch_size: batch,
            seed: 109,
        };
        empirical_marginal_audit(cfg, &data, 100_000)
    };
    let a = run(balanced).map_err(|e| e.to_string())?;
    let b = run(imbalanced).map_err(|e| e.to_string())?;
    let gap = audit_gap_in_standard_errors(&a, &b, pb).map_err(|e| e.to_string())?;
    Ok((
        closed_equal && gap < 4.0,
        format!("closed forms {pb} and {pi}, max audit gap {gap:.2} standard errors"),
    ))
}

struct ToyOutcome {
    wins: usize,
    median_gain: f64,
    median_primary_change: f64,
    kls: Vec<(f64, f64)>,
    secs: f64,
}

fn toy_run() -> Result<ToyOutcome, String> {
    let start = Instant::now();
    let report = run_toy_experiment(
        &PriorSpec::Uniform,
        &PriorSpec::PowerLaw { tau: 0.5 },
        &[0, 1, 2, 3, 4],
        &ToyExperimentConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok(ToyOutcome {
        wins: report.secondary_wins,
        median_gain: report.median_secondary_gain,
        median_primary_change: report.median_primary_change,
        kls: report
            .rows
            .iter()
            .map(|r| (r.arm_a.metrics.kl_pbar_to_prior, r.arm_b.metrics.kl_pbar_to_prior))
            .collect(),
        secs: start.elapsed().as_secs_f64(),
    })
}

fn toy_direction(toy: &Result<ToyOutcome, String>) -> Outcome {
    let t = toy.as_ref().map_err(Clone::clone)?;
    Ok((
        t.wins >= 4 && t.median_gain >= 0.05 && t.median_primary_change > -0.05 && t.secs < 300.0,
        format!(
            "wins {}/5, median secondary gain {:.4}, median primary change {:.4}, {:.1} s",
            t.wins, t.median_gain, t.median_primary_change, t.secs
        ),
    ))
}

fn prior_matching(toy: &Result<ToyOutcome, String>) -> Outcome {
    let t = toy.as_ref().map_err(Clone::clone)?;
    let worst_u = t.kls.iter().map(|k| k.0).fold(0.0, f64::max);
    let worst_pl = t.kls.iter().map(|k| k.1).fold(0.0, f64::max);
    Ok((
        worst_u < 0.05 && worst_pl < 0.05,
        format!("max KL uniform {worst_u:.4}, power-law {worst_pl:.4}"),
    ))
}

fn imbalanced_kmeans() -> Outcome {
    let ari = |spec: &PriorSpec, sep: f64, seed: u64| -> Result<f64, String> {
        let ds = gaussian_mixture(2, spec, 20, 2, sep, 1.0, seed).map_err(|e| e.to_string())?;
        let fit = lloyd_restarts(&ds.x, 2, 10, seed, 300, 1e-10).map_err(|e| e.to_string())?;
        adjusted_rand_index(fit.partition.assignment(), &ds.primary_labels).map_err(|e| e.to_string())
    };
    let mut hits = Vec::new();
    for sep in [2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0] {
        for seed in 0..50 {
            let a = ari(&PriorSpec::PowerLaw { tau: 1.5 }, sep, seed)?;
            if a < 0.5 && ari(&PriorSpec::Uniform, sep, seed)? > 0.9 {
                hits.push((sep, seed));
            }
        }
    }
    let first = hits.first().map(|(s, d)| format!(", first at separation {s} seed {d}")).unwrap_or_default();
    Ok((!hits.is_empty(), format!("{} grid points{first}", hits.len())))
}

fn main() {
    let toy = toy_run();
    let criteria: Vec<(&str, Outcome)> = vec![
        ("explicit/implicit oracle equivalence", oracle_equivalence()),
        ("pairwise objective identity", pairwise_identity()),
        ("covariance decomposition", covariance_decomposition()),
        ("mixture posterior vs Bayes rule", gmm_posterior_vs_bayes()),
        ("zero-temperature limit", zero_temperature()),
        ("sinkhorn projection", sinkhorn()),
        ("PMSN gradients vs finite differences", finite_difference_gradients()),
        ("MSN vs uniform-prior PMSN", msn_uniform_equivalence()),
        ("sampler marginal equality", marginal_equality()),
        ("toy experiment direction", toy_direction(&toy)),
        ("prior-matching convergence", prior_matching(&toy)),
        ("imbalanced K-means splits heavy class", imbalanced_kmeans()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in criteria.iter().enumerate() {
        let (ok, detail) = match outcome {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("[{}] {:>2}. {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
