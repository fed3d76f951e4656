//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use gradfisher::presets::{self, PresetOutput};
use gradfisher::ExperimentConfig;
use gradfisher_core::fedsim::{self, Composition, SyntheticTask};
use gradfisher_core::model::{self, Architecture};
use gradfisher_core::{fishing, linalg, recovery, ModelParams, RandomSource};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_model(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(&Architecture::default(), RandomSource::new(seed, 0)).unwrap();
    let mut noise = linalg::gaussian_sample(RandomSource::new(seed, 1), 0.0, 0.05, 1024)
        .unwrap()
        .into_inner()
        .into_iter();
    for layer in &mut p.layers {
        for b in layer.bias.iter_mut() {
            *b = noise.next().unwrap();
        }
    }
    for b in p.head_bias.iter_mut() {
        *b = noise.next().unwrap();
    }
    p
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for pair in 0..20u64 {
        let p = random_model(100 + pair);
        let x = (0..)
            .map(|k| linalg::gaussian_sample(RandomSource::new(200 + pair, k), 0.0, 0.75, 32).unwrap())
            .find(|x| oracles::min_relu_margin(&p, x) > 1e-4)
            .unwrap();
        let y = (pair as usize * 7) % 20;
        let t = model::forward(&p, &x).unwrap();
        let analytic = model::backward(&p, &t, y).unwrap().values();
        let fd = oracles::finite_difference_gradient(&p, &x, y, 1e-6);
        for (a, f) in analytic.iter().zip(&fd) {
            worst = worst.max((a - f).abs() / (f.abs() + 1e-12));
        }
        pairs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 10.0,
        format!("worst relative error {worst:.2e} over {pairs} pairs (< 1e-5), {secs:.1} s (< 10 s)"),
    )
}

fn logit_gradient_identities() -> Outcome {
    let mut exact = true;
    for k in 0..100u64 {
        let p = random_model(1000 + k);
        let x = linalg::gaussian_sample(RandomSource::new(3, k), 0.0, 1.0, 32).unwrap();
        let y = (k as usize * 13) % 20;
        let t = model::forward(&p, &x).unwrap();
        let g = model::grad_logits(&t, y);
        for c in 0..20 {
            let expected = if c == y { t.probs[c] - 1.0 } else { t.probs[c] };
            exact &= g[c] == expected;
        }
    }
    outcome(
        exact,
        "grad_logits equals p_c and p_c - 1 bit-exactly on 100 traces".into(),
    )
}

fn preset_outcome(out: &PresetOutput, secs: f64, limit: Option<f64>) -> Outcome {
    let mut detail: Vec<String> = out.criteria.iter().map(|c| c.detail.clone()).collect();
    let in_time = limit.is_none_or(|l| secs < l);
    match limit {
        Some(l) => detail.push(format!("{secs:.1} s (< {l} s)")),
        None => detail.push(format!("{secs:.1} s")),
    }
    outcome(out.passed() && in_time, detail.join("; "))
}

fn average_feature(task: &SyntheticTask, benign: &ModelParams) -> Outcome {
    let c = 3;
    let fished = fishing::class_fishing(benign, c, 1000.0).unwrap();
    let mut worst = 0.0f64;
    for (i, n) in [8usize, 32, 64].into_iter().enumerate() {
        let users = fedsim::generate_population(
            task,
            5,
            n,
            Composition::KOfBatch { c, k: 4 },
            RandomSource::new(7, 500 + i as u64),
        )
        .unwrap();
        for u in &users {
            let g = model::batch_gradient(&fished, &u.batch).unwrap();
            let fbar = recovery::recover_avg_feature(&g, c).unwrap();
            let feats: Vec<_> = u
                .batch
                .iter()
                .filter(|e| e.y == c)
                .map(|e| model::forward(&fished, &e.x).unwrap().feature().clone())
                .collect();
            let mean: Vec<f64> = (0..fbar.len())
                .map(|k| feats.iter().map(|f| f[k]).sum::<f64>() / feats.len() as f64)
                .collect();
            let diff: f64 = fbar
                .iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(diff / norm);
        }
    }
    outcome(
        worst < 1e-3,
        format!("worst relative error {worst:.2e} at batch sizes 8, 32, 64 (< 1e-3)"),
    )
}

fn main() -> ExitCode {
    let config = ExperimentConfig::default();
    let mut runs: BTreeMap<&str, (PresetOutput, f64)> = BTreeMap::new();
    for name in presets::PRESETS {
        let start = Instant::now();
        let out = presets::run_preset_with_threads(name, &config, Some(4)).unwrap_or_else(|e| panic!("{name}: {e}"));
        runs.insert(name, (out, start.elapsed().as_secs_f64()));
    }
    let task = SyntheticTask::generate(&config.task_spec(), config.seed).unwrap();
    let benign = fedsim::train_benign(
        &task,
        &config.architecture(),
        &config.training_spec(),
        RandomSource::new(config.seed, 0),
    )
    .unwrap();

    let run = |name: &str, limit: Option<f64>| {
        let (out, secs) = &runs[name];
        preset_outcome(out, *secs, limit)
    };
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "logit gradient identities", logit_gradient_identities()),
        (3, "class fishing suppression", run("prop1-sweep", Some(30.0))),
        (4, "average-feature identity", average_feature(&task, &benign)),
        (5, "bin Monte Carlo", run("prop2-montecarlo", Some(60.0))),
        (6, "cross-device catch rate", run("cross-device", Some(300.0))),
    ];

    // The binary-queries preset also carries the breach check.
    let (bq, secs) = &runs["binary-queries"];
    let scaling: Vec<_> = bq.criteria.iter().filter(|c| c.name != "end-to-end breach").collect();
    results.push((
        7,
        "one-shot query scaling",
        outcome(
            scaling.iter().all(|c| c.passed) && *secs < 300.0,
            format!(
                "{}; {secs:.1} s (< 300 s)",
                scaling.iter().map(|c| c.detail.as_str()).collect::<Vec<_>>().join("; ")
            ),
        ),
    ));
    results.push((8, "full binary attack", run("binary-full", None)));
    let breach = bq
        .criteria
        .iter()
        .find(|c| c.name == "end-to-end breach")
        .expect("breach criterion");
    results.push((9, "end-to-end breach", outcome(breach.passed, breach.detail.clone())));
    results.push((10, "disparate impact", run("disparate-impact", None)));
    results.push((11, "defense frontier", run("defense-sweep", None)));

    let mut identical = true;
    let mut compared = 0;
    for name in presets::PRESETS {
        let again = presets::run_preset_with_threads(name, &config, Some(1)).unwrap();
        let first = &runs[name].0;
        let a: Vec<_> = first.csv_files().collect();
        let b: Vec<_> = again.csv_files().collect();
        identical &= a == b && !a.is_empty();
        compared += a.len();
    }
    results.push((
        12,
        "determinism",
        outcome(
            identical,
            format!("{compared} CSV files from all presets byte-identical at 4 and 1 threads"),
        ),
    ));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "{} criterion {n:>2} ({name}): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
