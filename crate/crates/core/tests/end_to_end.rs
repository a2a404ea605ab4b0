use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prior_lab::clustering::{adjusted_rand_index, lloyd_restarts};
use prior_lab::distributions::{build_prior, kl_divergence, PriorSpec};
use prior_lab::losses::{
    normalize_columns, normalize_rows, pmsn_gradients, pmsn_loss, posterior_from_embeddings, target_posteriors,
    PosteriorBatch,
};
use prior_lab::sampling::{Sampler, SamplerConfig, SamplerStrategy};
use prior_lab::synthdata::{gaussian_mixture, make_views, two_factor_dataset, FactorSpec, SynthDataset};
use prior_lab::trainer::{evaluate, train, SiameseState, TrainConfig};

fn small_config(prior: PriorSpec) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 150,
        learning_rate: 0.1,
        ..TrainConfig::default()
    };
    cfg.loss.prior = prior;
    cfg
}

#[test]
fn dataset_round_trips_through_both_formats() {
    let ds = two_factor_dataset(&FactorSpec::primary_default(), &FactorSpec::secondary_default(), 50, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in ["d.csv", "d.bin"] {
        let path = dir.path().join(name);
        ds.save(&path).unwrap();
        let back = SynthDataset::load(&path).unwrap();
        assert_eq!(back, ds, "{name}");
    }
}

#[test]
fn loading_garbage_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.bin");
    std::fs::write(&path, b"not a dataset").unwrap();
    assert!(SynthDataset::load(&path).is_err());
}

#[test]
fn kmeans_recovers_well_separated_balanced_mixture() {
    let ds = gaussian_mixture(3, &PriorSpec::Uniform, 300, 3, 12.0, 1.0, 5).unwrap();
    let fit = lloyd_restarts(&ds.x, 3, 5, 5, 300, 1e-10).unwrap();
    let ari = adjusted_rand_index(fit.partition.assignment(), &ds.primary_labels).unwrap();
    assert!(ari > 0.99, "ari {ari}");
}

#[test]
fn training_is_reproducible_and_matches_prior() {
    let ds = two_factor_dataset(&FactorSpec::primary_default(), &FactorSpec::secondary_default(), 400, 11).unwrap();
    let sampler = SamplerConfig {
        strategy: SamplerStrategy::UniformRandom,
        batch_size: 64,
        seed: 11,
    };
    let run = || {
        let mut state = SiameseState::new(small_config(PriorSpec::Uniform), ds.dim()).unwrap();
        let report = train(&ds, &mut state, sampler).unwrap();
        (report, state.prototypes)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.losses, b.losses);
    assert_eq!(pa, pb);
    assert_eq!(a.losses.len(), 150);
    assert!(a.metrics.kl_pbar_to_prior < 0.1, "{}", a.metrics.kl_pbar_to_prior);
}

#[test]
fn evaluation_reports_kl_against_the_configured_prior() {
    let ds = two_factor_dataset(&FactorSpec::primary_default(), &FactorSpec::secondary_default(), 200, 2).unwrap();
    let prior = PriorSpec::PowerLaw { tau: 0.5 };
    let state = SiameseState::new(small_config(prior.clone()), ds.dim()).unwrap();
    let m = evaluate(&state, &ds).unwrap();
    let expected = kl_divergence(&m.mean_posterior, &build_prior(&prior, 10).unwrap()).unwrap();
    assert!((m.kl_pbar_to_prior - expected).abs() < 1e-12);
}

#[test]
fn encoder_and_prototype_gradients_match_finite_differences() {
    let ds = two_factor_dataset(&FactorSpec::primary_default(), &FactorSpec::secondary_default(), 24, 4).unwrap();
    let mut cfg = small_config(PriorSpec::PowerLaw { tau: 0.5 });
    cfg.loss.sigma = 0.5;
    let state = SiameseState::new(cfg, ds.dim()).unwrap();
    let (anchor, target) = make_views(&ds.x, &state.config.augmentation, 9).unwrap();
    let (_, enc_grad, proto_grad) = state.loss_and_gradients(&anchor, &target).unwrap();

    // Target posteriors are constants: embed the target view once.
    let zt = state.target().embed(&target).unwrap();
    let loss = |s: &SiameseState| {
        let za = s.encoder.embed(&anchor).unwrap();
        let g = pmsn_gradients(&za, &zt, &s.prototypes, &s.config.loss).unwrap();
        g.terms.total
    };
    let h = 1e-6;
    let flat = state.encoder.to_flat();
    let analytic = enc_grad.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..40 {
        let i = rng.random_range(0..flat.len());
        let mut plus = state.clone();
        let mut minus = state.clone();
        let mut f = flat.clone();
        f[i] += h;
        plus.encoder.set_flat(&f).unwrap();
        f[i] -= 2.0 * h;
        minus.encoder.set_flat(&f).unwrap();
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!((numeric - analytic[i]).abs() < 1e-6 * (1.0 + numeric.abs()), "param {i}");
    }
    let za = state.encoder.embed(&anchor).unwrap();
    let cfg = &state.config.loss;
    let targets = target_posteriors(&zt, &state.prototypes, cfg).unwrap();
    let prior = build_prior(&cfg.prior, state.prototypes.ncols()).unwrap();
    let (zan, _) = normalize_rows(&za).unwrap();
    let fixed_target_loss = |w: &Array2<f64>| {
        let (wn, _) = normalize_columns(w).unwrap();
        let anchors = posterior_from_embeddings(&zan, &wn, cfg.sigma).unwrap();
        let batch = PosteriorBatch::new(anchors, targets.clone()).unwrap();
        pmsn_loss(&batch, cfg.lambda, &prior, cfg.prior_alignment).unwrap()
    };
    for idx in ndarray::indices(proto_grad.raw_dim()) {
        let mut plus = state.prototypes.clone();
        let mut minus = state.prototypes.clone();
        plus[idx] += h;
        minus[idx] -= h;
        let numeric = (fixed_target_loss(&plus) - fixed_target_loss(&minus)) / (2.0 * h);
        assert!((numeric - proto_grad[idx]).abs() < 1e-6 * (1.0 + numeric.abs()), "prototype {idx:?}");
    }
}

#[test]
fn class_balanced_batches_cover_requested_classes() {
    let data = prior_lab::sampling::uniform_class_dataset(30, 8);
    let cfg = SamplerConfig {
        strategy: SamplerStrategy::ClassBalanced { classes_per_batch: 6 },
        batch_size: 24,
        seed: 1,
    };
    let sampler = Sampler::new(cfg, &data).unwrap();
    for it in 0..50 {
        let batch = sampler.batch_at(it);
        assert_eq!(batch.len(), 24);
        let mut classes: Vec<usize> = batch.iter().map(|&i| data[i].class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), 6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn views_keep_shape_and_only_mask_the_anchor(seed in 0u64..1000, mask in 0.0f64..0.9) {
        let x = Array2::from_shape_fn((10, 6), |(i, j)| (i * 6 + j) as f64 + 1.0);
        let aug = prior_lab::synthdata::ViewAugmentation { noise_sigma: 0.0, mask_fraction: mask };
        let (a, t) = make_views(&x, &aug, seed).unwrap();
        prop_assert_eq!(a.dim(), x.dim());
        prop_assert_eq!(&t, &x);
        for (av, xv) in a.iter().zip(x.iter()) {
            prop_assert!(*av == 0.0 || av == xv);
        }
    }

    #[test]
    fn gaussian_mixture_covers_every_class(classes in 1usize..6, seed in 0u64..500) {
        let ds = gaussian_mixture(classes, &PriorSpec::PowerLaw { tau: 1.5 }, 40, 8, 3.0, 1.0, seed).unwrap();
        let mut seen = vec![false; classes];
        for &l in &ds.primary_labels {
            seen[l] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(ds.x.len_of(Axis(0)), 40);
    }
}
