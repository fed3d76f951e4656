#[path = "support/fixture.rs"]
mod fixture;

use fixture::{fixture, SEED, TARGET};
use gradfisher_core::crossdevice::{self, CrossDeviceConfig, FeatureChoice, GaussianFit};
use gradfisher_core::fedsim::{self, Composition};
use gradfisher_core::linalg;
use gradfisher_core::model;
use gradfisher_core::{Error, RandomSource};
use std::time::Instant;

fn estimation_users(n: usize, stream: u64) -> Vec<fedsim::User> {
    fedsim::generate_population(
        &fixture().task,
        n,
        10,
        Composition::KOfBatch { c: TARGET, k: 4 },
        RandomSource::new(SEED, stream),
    )
    .unwrap()
}

fn target_users(first: usize, n: usize, batch: usize, stream: u64) -> Vec<fedsim::User> {
    fedsim::generate_population_from(
        &fixture().task,
        first,
        n,
        batch,
        Composition::SingleClass { class: Some(TARGET) },
        RandomSource::new(SEED, stream),
    )
    .unwrap()
}

#[test]
fn lowest_bin_holds_exactly_one_with_known_cdf() {
    let start = Instant::now();
    let (mu, sigma) = (1.5, 2.0);
    for m in [2usize, 4, 8, 16] {
        let truth = GaussianFit {
            feature_index: 0,
            mu,
            sigma,
            ks_stat: 0.0,
            n_observations: 0,
        };
        let theta = crossdevice::choose_cutoff(&truth, m);
        let trials = 10_000;
        let mut hits = 0;
        for t in 0..trials {
            let xs = linalg::gaussian_sample(RandomSource::new(SEED, 1000 + m as u64).derive(t), mu, sigma, m).unwrap();
            if xs.iter().filter(|&&x| x < theta).count() == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        let p = (1.0 - 1.0 / m as f64).powi(m as i32 - 1);
        assert!((freq - p).abs() < 0.02, "M = {m}: {freq} vs {p}");
        assert!(p >= (-1.0f64).exp());
        assert!(freq >= (-1.0f64).exp() - 0.02);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn catch_rate_matches_table_row() {
    let start = Instant::now();
    let f = fixture();
    let est = estimation_users(200, 4);
    let targets = target_users(1000, 100, 10, 5);
    let config = CrossDeviceConfig {
        expected_targets: Some(10),
        ..Default::default()
    };
    let out = crossdevice::one_shot_feature_attack(&f.model, &est, &targets, TARGET, &config).unwrap();
    assert_eq!(out.reports.len(), 100);
    assert!(out.reports.iter().all(|r| r.queries_used == 1));
    let hist = out.catch_histogram();
    assert!((0.27..=0.49).contains(&hist[1]), "{hist:?}");
    assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for r in &out.reports {
        assert_eq!(r.isolated_gradient.is_some(), r.n_caught == 1);
    }

    // Expected success of a uniformly random feature index.
    let m = f.model.feature_dim();
    let mut random = 0.0;
    for j in 0..m {
        let fixed = CrossDeviceConfig {
            feature: FeatureChoice::Fixed(j),
            ..config
        };
        // A feature that is constant over the observations cannot be fitted
        // and catches nobody.
        let Ok(plan) = crossdevice::plan_attack(&f.model, &out.observations, TARGET, &fixed) else {
            continue;
        };
        let reports: Vec<_> = targets
            .iter()
            .map(|u| crossdevice::attack_user(&plan, u).unwrap())
            .collect();
        random += crossdevice::catch_histogram(&reports)[1] / m as f64;
    }
    assert!(hist[1] >= random, "{} < {random}", hist[1]);
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn default_bin_count_is_mean_observed_count() {
    let f = fixture();
    let est = estimation_users(60, 6);
    let obs = crossdevice::estimate_phase(&f.model, &est, TARGET, 1000.0).unwrap();
    assert_eq!(obs.len(), 60);
    assert!(obs.iter().all(|o| o.s == 4));
    let plan = crossdevice::plan_attack(&f.model, &obs, TARGET, &CrossDeviceConfig::default()).unwrap();
    assert_eq!(plan.expected_targets, 4);
    assert_eq!(plan.theta, crossdevice::choose_cutoff(&plan.fit, 4));
}

#[test]
fn single_example_users_below_cutoff_are_caught() {
    let f = fixture();
    let est = estimation_users(100, 7);
    let targets = target_users(2000, 40, 1, 8);
    let out =
        crossdevice::one_shot_feature_attack(&f.model, &est, &targets, TARGET, &CrossDeviceConfig::default()).unwrap();
    let j = out.plan.plan.feature_index;
    let mut below = 0;
    for (u, r) in targets.iter().zip(&out.reports) {
        let fj = model::forward(&f.model, &u.batch[0].x).unwrap().feature()[j];
        if fj < out.plan.theta - 0.05 {
            below += 1;
            assert_eq!(r.n_caught, 1);
            assert!(r.best_cosine >= 0.999);
            // A feature held at zero by its ReLU passes nothing back to
            // the extractor, so only the head reveals the catch.
            if fj > 0.0 {
                assert!(r.input_recovery_error.unwrap() < 1e-9);
            } else {
                assert_eq!(r.input_recovery_error, None);
            }
        }
    }
    assert!(below > 0);
}

fn fit_distance(fit: &GaussianFit, pool: &mut [f64]) -> f64 {
    pool.sort_by(f64::total_cmp);
    let n = pool.len() as f64;
    pool.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = fit.cdf(x);
            ((i + 1) as f64 / n - c).max(c - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[test]
fn more_estimation_users_fit_better() {
    let f = fixture();
    let mut rng = RandomSource::new(SEED, 9).rng();
    let mut pool: Vec<f64> = (0..10_000)
        .map(|_| {
            model::forward(&f.model, &f.task.sample(TARGET, &mut rng).x)
                .unwrap()
                .feature()[f.feature]
        })
        .collect();
    let mut distances = Vec::new();
    for n in [25, 225] {
        let obs = crossdevice::estimate_phase(&f.model, &estimation_users(n, 10), TARGET, 1000.0).unwrap();
        let fit = crossdevice::fit_gaussian(&obs, f.feature).unwrap();
        distances.push(fit_distance(&fit, &mut pool));
    }
    assert!(distances[1] < distances[0], "{distances:?}");
}

#[test]
fn too_few_observations_abort() {
    let f = fixture();
    let est = estimation_users(5, 11);
    let targets = target_users(3000, 3, 10, 12);
    let r = crossdevice::one_shot_feature_attack(&f.model, &est, &targets, TARGET, &CrossDeviceConfig::default());
    assert!(
        matches!(r, Err(Error::AbortEstimation { usable: 5, needed: 8 })),
        "{r:?}"
    );
    let overlap = crossdevice::one_shot_feature_attack(&f.model, &est, &est, TARGET, &CrossDeviceConfig::default());
    assert!(overlap.is_err());
}
