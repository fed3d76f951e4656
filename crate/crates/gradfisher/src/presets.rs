//! The experiment presets. Each one builds its populations from the master
//! seed, runs an attack, and checks its own pass criteria.

use std::path::Path;

use gradfisher_core::crossdevice::{self, CrossDeviceConfig, FeatureChoice, FeatureObservation, GaussianFit};
use gradfisher_core::crosssilo::{self, BinaryAttackConfig, IsolationTest, OneShotOptions, QueryRecord};
use gradfisher_core::fedsim::{self, Aggregation, Composition, DefenseConfig, SyntheticTask, User};
use gradfisher_core::recovery::{self, CatchReport};
use gradfisher_core::{fishing, linalg, model, Error, GradientUpdate, ModelParams, RandomSource};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, FeatureSelection};
use crate::formats::{self, fmt_f64, fmt_opt, FormatError, Table};

pub const PRESETS: [&str; 7] = [
    "prop1-sweep",
    "prop2-montecarlo",
    "cross-device",
    "binary-queries",
    "binary-full",
    "disparate-impact",
    "defense-sweep",
];

pub const SUMMARY_SCHEMA: u32 = 1;

// Random streams under the master seed.
const STREAM_MODEL: u64 = 0;
const STREAM_ESTIMATION: u64 = 4;
const STREAM_TARGETS: u64 = 5;
const STREAM_SILO: u64 = 10;
const STREAM_BREACH: u64 = 19;
const STREAM_FULL: u64 = 20;
const STREAM_PROP1: u64 = 21;
const STREAM_DISPARATE: u64 = 30;
const STREAM_DEFENSE: u64 = 40;
const STREAM_NOISE: u64 = 41;
const STREAM_MONTE_CARLO: u64 = 1000;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("unknown preset `{0}` (expected one of: {list})", list = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PresetOutput {
    pub preset: String,
    pub seed: u64,
    /// File name and bytes, in write order.
    pub files: Vec<(String, Vec<u8>)>,
    pub metrics: Value,
    pub criteria: Vec<Criterion>,
}

impl PresetOutput {
    fn new(preset: &str, seed: u64) -> Self {
        Self {
            preset: preset.to_string(),
            seed,
            files: Vec::new(),
            metrics: json!({}),
            criteria: Vec::new(),
        }
    }

    fn table(&mut self, name: &str, table: &Table) {
        self.files.push((name.to_string(), table.to_bytes()));
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.criteria.push(Criterion::new(name, passed, detail));
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Criterion> {
        self.criteria.iter().filter(|c| !c.passed)
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn csv_files(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.files
            .iter()
            .filter(|(n, _)| n.ends_with(".csv"))
            .map(|(n, b)| (n.as_str(), b.as_slice()))
    }

    pub fn summary_json(&self) -> String {
        let summary = json!({
            "schema": SUMMARY_SCHEMA,
            "preset": self.preset,
            "seed": self.seed,
            "passed": self.passed(),
            "metrics": self.metrics,
            "criteria": self.criteria,
            "files": self.files.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        });
        let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes every artifact plus summary.json and config-resolved.json.
    pub fn write(&self, dir: &Path, config: &ExperimentConfig) -> Result<(), RunError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RunError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(io(&p))?;
        }
        let p = dir.join("summary.json");
        std::fs::write(&p, self.summary_json()).map_err(io(&p))?;
        let mut resolved = config.clone();
        resolved.preset = Some(self.preset.clone());
        let p = dir.join("config-resolved.json");
        std::fs::write(&p, resolved.to_json()).map_err(io(&p))?;
        Ok(())
    }
}

/// Runs `name` on a dedicated pool of `threads` workers (all cores when
/// `None`). Outputs do not depend on the worker count.
pub fn run_preset_with_threads(
    name: &str,
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<PresetOutput, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Threads(e.to_string()))?;
    pool.install(|| run_preset(name, config))
}

/// Runs `name` on the current rayon pool.
pub fn run_preset(name: &str, config: &ExperimentConfig) -> Result<PresetOutput, RunError> {
    let mut out = PresetOutput::new(name, config.seed);
    match name {
        "prop1-sweep" => prop1_sweep(config, &mut out)?,
        "prop2-montecarlo" => prop2_montecarlo(config, &mut out)?,
        "cross-device" => cross_device(config, &mut out)?,
        "binary-queries" => binary_queries(config, &mut out)?,
        "binary-full" => binary_full(config, &mut out)?,
        "disparate-impact" => disparate_impact(config, &mut out)?,
        "defense-sweep" => defense_sweep(config, &mut out)?,
        other => return Err(RunError::UnknownPreset(other.to_string())),
    }
    Ok(out)
}

struct Setup {
    task: SyntheticTask,
    model: ModelParams,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, RunError> {
    let task = SyntheticTask::generate(&cfg.task_spec(), cfg.seed)?;
    let model = fedsim::train_benign(
        &task,
        &cfg.architecture(),
        &cfg.training_spec(),
        RandomSource::new(cfg.seed, STREAM_MODEL),
    )?;
    Ok(Setup { task, model })
}

fn population(
    cfg: &ExperimentConfig,
    s: &Setup,
    first_id: usize,
    n_users: usize,
    batch: usize,
    composition: Composition,
    stream: u64,
) -> Result<Vec<User>, RunError> {
    Ok(fedsim::generate_population_from(
        &s.task,
        first_id,
        n_users,
        batch,
        composition,
        RandomSource::new(cfg.seed, stream),
    )?)
}

fn single_class(cfg: &ExperimentConfig) -> Composition {
    Composition::SingleClass {
        class: Some(cfg.target_class),
    }
}

fn manifest_json(cfg: &ExperimentConfig, composition: Composition, users: &[User]) -> Vec<u8> {
    let m = formats::manifest(cfg.seed, composition, users, cfg.n_classes);
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
    s.push('\n');
    s.into_bytes()
}

/// Phase-1 observations from the estimation population (ids `0..`), one
/// class-fished query each.
fn estimation(cfg: &ExperimentConfig, s: &Setup) -> Result<Vec<FeatureObservation>, RunError> {
    let users = population(
        cfg,
        s,
        0,
        cfg.estimation_users,
        cfg.estimation_batch,
        Composition::KOfBatch {
            c: cfg.target_class,
            k: cfg.estimation_targets,
        },
        STREAM_ESTIMATION,
    )?;
    let fished = fishing::class_fishing(&s.model, cfg.target_class, cfg.alpha)?;
    let obs = users
        .par_iter()
        .map(|u| crossdevice::observe_user(&fished, u, cfg.target_class))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(obs.into_iter().flatten().collect())
}

fn pick_feature(choice: FeatureChoice, obs: &[FeatureObservation]) -> Result<usize, RunError> {
    Ok(match choice {
        FeatureChoice::Fixed(j) => j,
        FeatureChoice::KsTest => crossdevice::select_feature(obs)?.0,
        FeatureChoice::LargestMean => crossdevice::select_feature_by_mean(obs)?.0,
    })
}

fn estimation_table(obs: &[FeatureObservation], j: usize) -> Table {
    let mut t = Table::new(&["user_id", "s", "f_bar_j"]);
    for o in obs {
        t.push(vec![o.user_id.to_string(), o.s.to_string(), fmt_f64(o.f_bar[j])]);
    }
    t
}

fn catch_row(r: &CatchReport) -> Vec<String> {
    vec![
        r.user_id.to_string(),
        r.n_caught.to_string(),
        fmt_f64(r.best_cosine),
        r.queries_used.to_string(),
        fmt_opt(r.input_recovery_error),
    ]
}

const CATCH_HEADER: [&str; 5] = [
    "user_id",
    "n_caught",
    "best_cosine",
    "queries_used",
    "input_recovery_error",
];

fn query_rows(t: &mut Table, user_id: usize, log: &[QueryRecord]) {
    for q in log {
        t.push(vec![
            user_id.to_string(),
            q.query_index.to_string(),
            fmt_f64(q.cutoff),
            fmt_opt(q.recovered_f),
            q.s_below.to_string(),
        ]);
    }
}

const QUERY_HEADER: [&str; 5] = ["user_id", "query_index", "cutoff", "recovered_f", "s_below"];

fn relative_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn prop1_sweep(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let s = setup(cfg)?;
    let c = cfg.target_class;
    let users = population(
        cfg,
        &s,
        0,
        cfg.prop1_users,
        cfg.prop1_batch,
        Composition::KOfBatch {
            c,
            k: cfg.prop1_targets,
        },
        STREAM_PROP1,
    )?;
    let mut alphas = cfg.prop1_alphas.clone();
    alphas.sort_by(f64::total_cmp);
    let residual = |u: &User, alpha: f64| -> Result<f64, RunError> {
        let fished = fishing::class_fishing(&s.model, c, alpha)?;
        let g = model::batch_gradient(&fished, &u.batch)?.extractor_values();
        let n = u.batch.len() as f64;
        let mut oracle = vec![0.0; g.len()];
        for e in u.batch.iter().filter(|e| e.y == c) {
            for (o, v) in oracle
                .iter_mut()
                .zip(model::example_gradient(&fished, e)?.extractor_values())
            {
                *o += v / n;
            }
        }
        Ok(relative_diff(&oracle, &g))
    };
    let rows = users
        .par_iter()
        .map(|u| alphas.iter().map(|&a| residual(u, a)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;

    let mut t = Table::new(&["user_id", "alpha", "residual"]);
    for (u, r) in users.iter().zip(&rows) {
        for (a, v) in alphas.iter().zip(r) {
            t.push(vec![u.user_id.to_string(), fmt_f64(*a), fmt_f64(*v)]);
        }
    }
    out.table("prop1.csv", &t);
    out.files.push((
        "population.json".into(),
        manifest_json(
            cfg,
            Composition::KOfBatch {
                c,
                k: cfg.prop1_targets,
            },
            &users,
        ),
    ));

    let worst_top = rows.iter().map(|r| *r.last().expect("alphas")).fold(0.0, f64::max);
    let monotone = rows.iter().all(|r| r.windows(2).all(|w| w[1] < w[0]));
    let means: Vec<f64> = (0..alphas.len())
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
        .collect();
    out.metrics = json!({
        "alphas": alphas,
        "mean_residual": means,
        "max_residual_at_largest_alpha": worst_top,
    });
    let top = alphas.last().expect("alphas");
    out.check(
        "suppression residual",
        worst_top < cfg.prop1_tol,
        format!(
            "max residual at alpha = {top} is {worst_top:.3e}, need < {:e}",
            cfg.prop1_tol
        ),
    );
    out.check(
        "residual decreases with alpha",
        monotone,
        format!(
            "mean residuals [{}] for alphas {alphas:?}",
            means.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );
    Ok(())
}

fn prop2_montecarlo(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let truth = |m: usize| {
        let fit = GaussianFit {
            feature_index: 0,
            mu: 0.0,
            sigma: 1.0,
            ks_stat: 0.0,
            n_observations: 0,
        };
        crossdevice::choose_cutoff(&fit, m)
    };
    let mut t = Table::new(&["bins", "trials", "hits", "frequency", "expected"]);
    let mut worst: f64 = 0.0;
    let mut lowest = f64::INFINITY;
    let mut freqs = Vec::new();
    for &m in &cfg.mc_bins {
        let theta = truth(m);
        let src = RandomSource::new(cfg.seed, STREAM_MONTE_CARLO + m as u64);
        let hits = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|trial| -> Result<usize, Error> {
                let xs = linalg::gaussian_sample(src.derive(trial), 0.0, 1.0, m)?;
                Ok(usize::from(xs.iter().filter(|&&x| x < theta).count() == 1))
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))?;
        let freq = hits as f64 / cfg.trials as f64;
        let expected = (1.0 - 1.0 / m as f64).powi(m as i32 - 1);
        worst = worst.max((freq - expected).abs());
        lowest = lowest.min(freq);
        freqs.push(freq);
        t.push(vec![
            m.to_string(),
            cfg.trials.to_string(),
            hits.to_string(),
            fmt_f64(freq),
            fmt_f64(expected),
        ]);
    }
    out.table("prop2.csv", &t);
    out.metrics = json!({
        "bins": cfg.mc_bins,
        "frequency": freqs,
        "max_abs_deviation": worst,
    });
    out.check(
        "exactly-one frequency",
        worst < cfg.prop2_tol,
        format!(
            "max |frequency - (1 - 1/M)^(M-1)| = {worst:.4}, need < {}",
            cfg.prop2_tol
        ),
    );
    let floor = (-1.0f64).exp() - cfg.prop2_tol;
    out.check(
        "frequency above 1/e",
        lowest >= floor,
        format!("lowest frequency {lowest:.4}, need >= {floor:.4}"),
    );
    Ok(())
}

fn cross_device(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let s = setup(cfg)?;
    let c = cfg.target_class;
    let obs = estimation(cfg, &s)?;
    let targets = population(
        cfg,
        &s,
        cfg.estimation_users,
        cfg.target_users,
        cfg.target_batch,
        single_class(cfg),
        STREAM_TARGETS,
    )?;
    let config = CrossDeviceConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        combine_with_class: cfg.combine_with_class,
        expected_targets: Some(cfg.bins.unwrap_or(cfg.target_batch)),
        feature: cfg.feature_choice(FeatureSelection::Ks),
    };
    let plan = crossdevice::plan_attack(&s.model, &obs, c, &config)?;
    let attack = |plan: &crossdevice::AttackPlan| {
        targets
            .par_iter()
            .map(|u| crossdevice::attack_user(plan, u))
            .collect::<Result<Vec<_>, _>>()
    };
    let reports = attack(&plan)?;
    let hist = crossdevice::catch_histogram(&reports);

    // Expected success of a uniformly random feature. A feature that is
    // constant over the observations cannot be fitted and catches nobody.
    let m = s.model.feature_dim();
    let per_feature = (0..m)
        .map(|j| {
            let fixed = CrossDeviceConfig {
                feature: FeatureChoice::Fixed(j),
                ..config
            };
            match crossdevice::plan_attack(&s.model, &obs, c, &fixed) {
                Ok(p) => Ok(crossdevice::catch_histogram(&attack(&p)?)[1]),
                Err(Error::Degenerate) => Ok(0.0),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let random = per_feature.iter().sum::<f64>() / m as f64;

    let j = plan.fit.feature_index;
    out.table("estimation.csv", &estimation_table(&obs, j));
    let mut t = Table::new(&CATCH_HEADER);
    for r in &reports {
        t.push(catch_row(r));
    }
    out.table("catches.csv", &t);
    let mut t = Table::new(&["feature_index", "catch_rate"]);
    for (j, r) in per_feature.iter().enumerate() {
        t.push(vec![j.to_string(), fmt_f64(*r)]);
    }
    out.table("features.csv", &t);
    out.files.push((
        "population.json".into(),
        manifest_json(cfg, single_class(cfg), &targets),
    ));

    out.metrics = json!({
        "feature_index": j,
        "ks_stat": plan.fit.ks_stat,
        "mu": plan.fit.mu,
        "sigma": plan.fit.sigma,
        "theta": plan.theta,
        "bins": plan.expected_targets,
        "observations": obs.len(),
        "catch_histogram": {"0": hist[0], "1": hist[1], "2": hist[2], ">=3": hist[3]},
        "catch_rate": hist[1],
        "random_feature_catch_rate": random,
    });
    out.check(
        "catch rate",
        (cfg.catch_rate_min..=cfg.catch_rate_max).contains(&hist[1]),
        format!(
            "{:.3} of users caught alone, need [{}, {}]",
            hist[1], cfg.catch_rate_min, cfg.catch_rate_max
        ),
    );
    out.check(
        "selected feature beats a random feature",
        hist[1] >= random,
        format!("selected {:.3} vs random-feature average {random:.3}", hist[1]),
    );
    Ok(())
}

fn one_shot_options(cfg: &ExperimentConfig) -> OneShotOptions {
    OneShotOptions {
        beta: cfg.beta,
        max_queries: cfg.max_queries,
        ..Default::default()
    }
}

fn binary_queries(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let s = setup(cfg)?;
    let c = cfg.target_class;
    let obs = estimation(cfg, &s)?;
    let j = pick_feature(cfg.feature_choice(FeatureSelection::LargestMean), &obs)?;
    let options = one_shot_options(cfg);

    let mut queries = Table::new(&QUERY_HEADER);
    let mut catches = Table::new(&CATCH_HEADER);
    let mut scaling = Table::new(&[
        "batch_size",
        "users",
        "mean_queries",
        "min_queries",
        "max_queries",
        "isolated",
        "gave_up",
    ]);
    let mut means = Vec::new();
    let mut first_id = cfg.estimation_users;
    for (i, &n) in cfg.batch_sizes.iter().enumerate() {
        let users = population(
            cfg,
            &s,
            first_id,
            cfg.silo_users,
            n,
            single_class(cfg),
            STREAM_SILO + i as u64,
        )?;
        first_id += cfg.silo_users;
        let results = users
            .par_iter()
            .map(|u| match crosssilo::one_shot_binary_with(u, &s.model, c, j, &options) {
                Ok(r) => Ok(Some(r)),
                Err(Error::GiveUp { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut used = Vec::with_capacity(users.len());
        let (mut isolated, mut gave_up) = (0, 0);
        for (u, r) in users.iter().zip(&results) {
            match r {
                Some(r) => {
                    query_rows(&mut queries, u.user_id, &r.log);
                    catches.push(catch_row(&r.report));
                    used.push(r.report.queries_used);
                    isolated += usize::from(r.report.n_caught == 1);
                }
                None => {
                    used.push(cfg.max_queries);
                    gave_up += 1;
                }
            }
        }
        let mean = used.iter().sum::<usize>() as f64 / used.len() as f64;
        means.push(mean);
        scaling.push(vec![
            n.to_string(),
            users.len().to_string(),
            fmt_f64(mean),
            used.iter().min().expect("users").to_string(),
            used.iter().max().expect("users").to_string(),
            isolated.to_string(),
            gave_up.to_string(),
        ]);
    }
    out.table("queries.csv", &queries);
    out.table("catches.csv", &catches);
    out.table("scaling.csv", &scaling);

    // End-to-end breach on one fresh user.
    let breach_user = population(cfg, &s, first_id, 1, cfg.breach_batch, single_class(cfg), STREAM_BREACH)?.remove(0);
    let breach = crosssilo::one_shot_binary_with(&breach_user, &s.model, c, j, &options);
    let (breach_caught, breach_cos, breach_err) = match &breach {
        Ok(r) => {
            let x = &breach_user.batch[r.min_feature_example].x;
            let cos = r
                .report
                .recovered_input
                .as_ref()
                .map_or(0.0, |rec| recovery::vector_cosine(rec, x));
            (
                r.report.n_caught,
                cos,
                r.report.input_recovery_error.unwrap_or(f64::INFINITY),
            )
        }
        Err(Error::GiveUp { .. }) => (0, 0.0, f64::INFINITY),
        Err(e) => return Err(e.clone().into()),
    };

    let largest = *cfg.batch_sizes.iter().max().expect("batch sizes");
    let at_largest = means[cfg.batch_sizes.iter().position(|&n| n == largest).expect("present")];
    let logs: Vec<f64> = cfg.batch_sizes.iter().map(|&n| (n as f64).log2()).collect();
    let fitted = if cfg.batch_sizes.len() >= 2 {
        slope(&logs, &means)
    } else {
        f64::NAN
    };
    out.metrics = json!({
        "feature_index": j,
        "batch_sizes": cfg.batch_sizes,
        "mean_queries": means,
        "log2_slope": fitted,
        "breach_batch": cfg.breach_batch,
        "breach_isolated": breach_caught,
        "breach_input_cosine": breach_cos,
        "breach_input_error": breach_err,
    });
    out.check(
        "mean queries at largest batch",
        (cfg.mean_queries_min..=cfg.mean_queries_max).contains(&at_largest),
        format!(
            "{at_largest:.2} queries at n = {largest}, need [{}, {}]",
            cfg.mean_queries_min, cfg.mean_queries_max
        ),
    );
    out.check(
        "query growth is logarithmic",
        (cfg.slope_min..=cfg.slope_max).contains(&fitted),
        format!(
            "slope {fitted:.3} per doubling, need [{}, {}]",
            cfg.slope_min, cfg.slope_max
        ),
    );
    out.check(
        "end-to-end breach",
        breach_caught == 1 && breach_cos >= cfg.cosine_min && breach_err < cfg.input_error_max,
        format!(
            "{breach_caught} example isolated (need 1), input cosine {breach_cos:.6} (need >= {}), max error {breach_err:.3e} (need < {:e}) at n = {}",
            cfg.cosine_min, cfg.input_error_max, cfg.breach_batch
        ),
    );
    Ok(())
}

struct FullCheck {
    cosines: Vec<f64>,
    members: Vec<usize>,
    telescoping: f64,
}

fn check_full(
    s: &Setup,
    cfg: &ExperimentConfig,
    u: &User,
    j: usize,
    r: &crosssilo::BinaryAttackResult,
) -> Result<FullCheck, RunError> {
    let c = cfg.target_class;
    let at_inf = fishing::feature_fishing(&s.model, c, j, f64::INFINITY, cfg.beta, false)?;
    let mut oracle = u
        .batch
        .iter()
        .map(|e| {
            Ok((
                model::forward(&s.model, &e.x)?.feature()[j],
                model::example_gradient(&at_inf, e)?,
            ))
        })
        .collect::<Result<Vec<(f64, GradientUpdate)>, Error>>()?;
    oracle.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cosines = Vec::new();
    let mut next = 0;
    for g in &r.gradients {
        let group: Vec<GradientUpdate> = oracle[next..next + g.members].iter().map(|o| o.1.clone()).collect();
        next += g.members;
        cosines.push(recovery::cosine_similarity(
            &g.gradient,
            &GradientUpdate::sum_of(&group)?,
        )?);
    }
    let n = u.batch.len() as f64;
    let full = crosssilo::query_user(u, &at_inf)?.scaled(n);
    let telescoping = match r.total() {
        Some(t) => relative_diff(&t.values(), &full.values()),
        None => f64::INFINITY,
    };
    Ok(FullCheck {
        cosines,
        members: r.gradients.iter().map(|g| g.members).collect(),
        telescoping,
    })
}

fn binary_full(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let s = setup(cfg)?;
    let c = cfg.target_class;
    let obs = estimation(cfg, &s)?;
    let j = pick_feature(cfg.feature_choice(FeatureSelection::LargestMean), &obs)?;
    let n = cfg.full_batch;
    let budget = cfg.query_budget.unwrap_or(n * n);
    let attack = BinaryAttackConfig {
        beta: cfg.beta,
        query_budget: Some(budget),
        ..Default::default()
    };
    let users = population(
        cfg,
        &s,
        cfg.estimation_users,
        cfg.full_users,
        n,
        single_class(cfg),
        STREAM_FULL,
    )?;
    let results = users
        .par_iter()
        .map(|u| {
            let r = crosssilo::binary_attack_with(u, &s.model, c, j, n, &attack)?;
            let check = check_full(&s, cfg, u, j, &r)?;
            Ok((r, check))
        })
        .collect::<Result<Vec<_>, RunError>>()?;

    let mut queries = Table::new(&QUERY_HEADER);
    let mut recovered = Table::new(&[
        "user_id",
        "rank",
        "members",
        "mean_feature",
        "isolation_query",
        "cosine",
    ]);
    let mut min_cos = f64::INFINITY;
    let mut worst_tel: f64 = 0.0;
    let mut max_queries = 0;
    let mut complete = true;
    for (u, (r, check)) in users.iter().zip(&results) {
        query_rows(&mut queries, u.user_id, &r.log);
        let mut rank = 0;
        for (g, cos) in r.gradients.iter().zip(&check.cosines) {
            recovered.push(vec![
                u.user_id.to_string(),
                rank.to_string(),
                g.members.to_string(),
                fmt_f64(g.mean_feature),
                r.isolation_query[rank].map_or(String::new(), |q| q.to_string()),
                fmt_f64(*cos),
            ]);
            rank += g.members;
            min_cos = min_cos.min(*cos);
        }
        complete &= check.members.iter().sum::<usize>() == n;
        worst_tel = worst_tel.max(check.telescoping);
        max_queries = max_queries.max(r.queries);
    }
    out.table("queries.csv", &queries);
    out.table("recovered.csv", &recovered);
    out.metrics = json!({
        "feature_index": j,
        "batch_size": n,
        "min_cosine": min_cos,
        "max_telescoping_error": worst_tel,
        "max_queries": max_queries,
        "query_budget": budget,
    });
    out.check(
        "every example recovered",
        complete && min_cos >= cfg.cosine_min,
        format!(
            "min cosine {min_cos:.9} over all recovered gradients, need >= {}",
            cfg.cosine_min
        ),
    );
    out.check(
        "telescoping sum",
        worst_tel <= cfg.telescoping_tol,
        format!("relative error {worst_tel:.3e}, need <= {:e}", cfg.telescoping_tol),
    );
    out.check(
        "query count within n squared",
        max_queries <= n * n,
        format!("{max_queries} queries, need <= {}", n * n),
    );
    Ok(())
}

fn disparate_impact(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let s = setup(cfg)?;
    let c = cfg.target_class;
    let obs = estimation(cfg, &s)?;
    let j = pick_feature(cfg.feature_choice(FeatureSelection::LargestMean), &obs)?;
    let users = population(
        cfg,
        &s,
        cfg.estimation_users,
        cfg.disparate_users,
        cfg.disparate_batch,
        single_class(cfg),
        STREAM_DISPARATE,
    )?;
    let rows = users
        .par_iter()
        .map(|u| crosssilo::disparate_impact_row(u, &s.model, c, j, cfg.beta))
        .collect::<Result<Vec<_>, _>>()?;
    let table = crosssilo::disparate_impact_table(rows);
    let mut t = Table::new(&["user_id", "batch_size", "min_query", "median_query", "total_queries"]);
    for r in &table.rows {
        t.push(vec![
            r.user_id.to_string(),
            r.batch_size.to_string(),
            r.min_query.to_string(),
            r.median_query.to_string(),
            r.total_queries.to_string(),
        ]);
    }
    out.table("isolation.csv", &t);
    out.metrics = json!({
        "feature_index": j,
        "batch_size": cfg.disparate_batch,
        "mean_min_query": table.mean_min_query,
        "mean_median_query": table.mean_median_query,
    });
    out.check(
        "outliers isolated first",
        table.mean_min_query < table.mean_median_query,
        format!(
            "mean isolation query {:.2} for the minimum vs {:.2} for the median",
            table.mean_min_query, table.mean_median_query
        ),
    );
    Ok(())
}

fn defense_sweep(cfg: &ExperimentConfig, out: &mut PresetOutput) -> Result<(), RunError> {
    let s = setup(cfg)?;
    let c = cfg.target_class;
    let obs = estimation(cfg, &s)?;
    let j = pick_feature(cfg.feature_choice(FeatureSelection::LargestMean), &obs)?;
    let users = population(
        cfg,
        &s,
        cfg.estimation_users,
        cfg.defense_users,
        cfg.defense_batch,
        single_class(cfg),
        STREAM_DEFENSE,
    )?;
    let options = OneShotOptions {
        isolation: IsolationTest::InputConsistency,
        best_effort: true,
        ..one_shot_options(cfg)
    };
    let mut t = Table::new(&["noise_std", "user_id", "queries_used", "input_cosine"]);
    let mut means = Vec::new();
    for &sigma in &cfg.noise_stds {
        let defense = DefenseConfig::new(Some(cfg.clip_norm), sigma, Aggregation::Mean)?;
        let rows = users
            .par_iter()
            .map(|u| {
                let noise = RandomSource::new(cfg.seed, STREAM_NOISE).derive(u.user_id as u64);
                let defended = u.clone().with_defense(defense, noise);
                match crosssilo::one_shot_binary_with(&defended, &s.model, c, j, &options) {
                    Ok(r) => {
                        let x = &u.batch[r.min_feature_example].x;
                        let cos = r
                            .report
                            .recovered_input
                            .as_ref()
                            .map_or(0.0, |rec| recovery::vector_cosine(rec, x));
                        Ok((r.report.queries_used, cos))
                    }
                    Err(Error::NoSignal(_) | Error::Unrecoverable | Error::GiveUp { .. }) => {
                        Ok((options.max_queries, 0.0))
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (u, (q, cos)) in users.iter().zip(&rows) {
            t.push(vec![
                fmt_f64(sigma),
                u.user_id.to_string(),
                q.to_string(),
                fmt_f64(*cos),
            ]);
        }
        means.push(rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64);
    }
    out.table("defense.csv", &t);
    out.metrics = json!({
        "feature_index": j,
        "clip_norm": cfg.clip_norm,
        "noise_stds": cfg.noise_stds,
        "mean_input_cosine": means,
    });
    out.check(
        "recovery degrades with noise",
        means.windows(2).all(|w| w[1] <= w[0]),
        format!("mean input cosines {means:.3?} for noise {:?}", cfg.noise_stds),
    );
    let last = *means.last().expect("noise levels");
    out.check(
        "strong noise breaks recovery",
        last < cfg.defense_cosine_max,
        format!(
            "mean input cosine {last:.3} at the largest noise, need < {}",
            cfg.defense_cosine_max
        ),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_line() {
        assert!((slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_preset() {
        let e = run_preset("nope", &ExperimentConfig::default()).unwrap_err();
        assert!(matches!(e, RunError::UnknownPreset(_)));
    }
}
