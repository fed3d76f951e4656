//! One-shot feature attack for cross-device FL.
//!
//! Phase 1 class-fishes a group of estimation users and records their
//! average target-class features. Phase 2 picks the most normal feature by
//! the Kolmogorov–Smirnov statistic, fits a Gaussian and places the cutoff
//! at the lowest equal-mass bin. Phase 3 sends the feature-fished model to
//! every remaining user exactly once.

use alloc::vec::Vec;

use crate::error::{param, Error, Result};
use crate::fedsim::{self, User};
use crate::fishing::{self, FishingPlan, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::linalg::{pairwise_sum, Vector};
use crate::model::{self, ModelParams};
use crate::recovery::{self, CatchReport};
use crate::stats::{normal_cdf, normal_quantile};

/// Minimum number of samples for a KS statistic and for the estimation phase.
pub const MIN_OBSERVATIONS: usize = 8;

/// Recovered average target feature of one estimation user.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureObservation {
    pub user_id: usize,
    pub f_bar: Vector,
    /// Estimated number of target-class examples (always ≥ 1).
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub feature_index: usize,
    pub mu: f64,
    pub sigma: f64,
    pub ks_stat: f64,
    pub n_observations: usize,
}

impl GaussianFit {
    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf((x - self.mu) / self.sigma)
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = pairwise_sum(samples) / n;
    let sq: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, libm::sqrt(pairwise_sum(&sq) / n))
}

fn ks_unchecked(samples: &[f64]) -> Result<f64> {
    let (mean, std) = mean_std(samples);
    if !(std > 1e-12) {
        return Err(Error::Degenerate);
    }
    let mut z: Vec<f64> = samples.iter().map(|x| (x - mean) / std).collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        let cdf = normal_cdf(zi);
        d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
    }
    Ok(d)
}

/// KS distance between the standardised samples and N(0, 1).
pub fn ks_statistic(samples: &[f64]) -> Result<f64> {
    if samples.len() < MIN_OBSERVATIONS {
        return Err(param(alloc::format!(
            "KS statistic needs at least {MIN_OBSERVATIONS} samples, got {}",
            samples.len()
        )));
    }
    ks_unchecked(samples)
}

fn feature_column(obs: &[FeatureObservation], j: usize) -> Vec<f64> {
    obs.iter().map(|o| o.f_bar[j]).collect()
}

/// Feature whose observed averages look most normal. Ties go to the lowest
/// index; constant features are skipped.
pub fn select_feature(obs: &[FeatureObservation]) -> Result<(usize, f64)> {
    if obs.len() < MIN_OBSERVATIONS {
        return Err(Error::AbortEstimation {
            usable: obs.len(),
            needed: MIN_OBSERVATIONS,
        });
    }
    let m = obs[0].f_bar.len();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..m {
        match ks_statistic(&feature_column(obs, j)) {
            Ok(d) if best.is_none_or(|(_, b)| d < b) => best = Some((j, d)),
            Ok(_) | Err(Error::Degenerate) => {}
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::Degenerate)
}

/// Feature with the largest mean observed average, ties to the lowest
/// index. After a ReLU such a feature rarely sits at zero, so examples of
/// the target class are not tied at the bottom of the range.
pub fn select_feature_by_mean(obs: &[FeatureObservation]) -> Result<(usize, f64)> {
    if obs.is_empty() {
        return Err(Error::AbortEstimation { usable: 0, needed: 1 });
    }
    let m = obs[0].f_bar.len();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..m {
        let mean = feature_column(obs, j).iter().sum::<f64>() / obs.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((j, mean));
        }
    }
    best.ok_or(Error::Degenerate)
}

/// μ is the mean of the observed averages; σ rescales each average by √s
/// to undo the variance shrink of an s-sample mean.
pub fn fit_gaussian(obs: &[FeatureObservation], j: usize) -> Result<GaussianFit> {
    if obs.len() < 2 {
        return Err(param("need at least two observations to fit"));
    }
    if obs.iter().any(|o| j >= o.f_bar.len()) {
        return Err(param(alloc::format!("feature index {j} out of range")));
    }
    let n = obs.len() as f64;
    let column = feature_column(obs, j);
    let mu = pairwise_sum(&column) / n;
    let scaled: Vec<f64> = obs.iter().map(|o| o.f_bar[j] * libm::sqrt(o.s as f64)).collect();
    let mu_scaled = pairwise_sum(&scaled) / n;
    let sq: Vec<f64> = scaled.iter().map(|v| (v - mu_scaled) * (v - mu_scaled)).collect();
    let sigma = libm::sqrt(pairwise_sum(&sq) / n);
    if !(sigma > 0.0) {
        return Err(Error::Degenerate);
    }
    let ks_stat = ks_unchecked(&column).unwrap_or(1.0);
    Ok(GaussianFit {
        feature_index: j,
        mu,
        sigma,
        ks_stat,
        n_observations: obs.len(),
    })
}

/// Upper edge of the lowest of `m` equal-mass bins; +∞ when m ≤ 1.
pub fn choose_cutoff(fit: &GaussianFit, m: usize) -> f64 {
    if m <= 1 {
        return f64::INFINITY;
    }
    fit.mu + fit.sigma * normal_quantile(1.0 / m as f64)
}

/// How the attacked feature is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureChoice {
    KsTest,
    LargestMean,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossDeviceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub combine_with_class: bool,
    /// Bin count M. `None` uses the rounded mean of the observed counts.
    pub expected_targets: Option<usize>,
    pub feature: FeatureChoice,
}

impl Default for CrossDeviceConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            combine_with_class: false,
            expected_targets: None,
            feature: FeatureChoice::KsTest,
        }
    }
}

/// Query one estimation user with a class-fished model. `None` when the
/// user holds no target-class data.
pub fn observe_user(fished: &ModelParams, user: &User, c: usize) -> Result<Option<FeatureObservation>> {
    let g = fedsim::user_update(user, fished)?;
    let f_bar = match recovery::recover_avg_feature(&g, c) {
        Ok(f) => f,
        Err(Error::NoSignal(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let s = recovery::estimate_target_count(&g, c)?;
    if s == 0 {
        return Ok(None);
    }
    Ok(Some(FeatureObservation {
        user_id: user.user_id,
        f_bar,
        s,
    }))
}

/// Phase 1 over a list of users, one query each.
pub fn estimate_phase(benign: &ModelParams, users: &[User], c: usize, alpha: f64) -> Result<Vec<FeatureObservation>> {
    let fished = fishing::class_fishing(benign, c, alpha)?;
    let mut out = Vec::with_capacity(users.len());
    for u in users {
        if let Some(o) = observe_user(&fished, u, c)? {
            out.push(o);
        }
    }
    Ok(out)
}

/// Result of phase 2: the fit, the cutoff and the malicious model.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub target_class: usize,
    pub fit: GaussianFit,
    pub expected_targets: usize,
    pub theta: f64,
    pub plan: FishingPlan,
    pub model: ModelParams,
}

pub fn plan_attack(
    benign: &ModelParams,
    obs: &[FeatureObservation],
    c: usize,
    config: &CrossDeviceConfig,
) -> Result<AttackPlan> {
    if obs.len() < MIN_OBSERVATIONS {
        return Err(Error::AbortEstimation {
            usable: obs.len(),
            needed: MIN_OBSERVATIONS,
        });
    }
    let j = match config.feature {
        FeatureChoice::KsTest => select_feature(obs)?.0,
        FeatureChoice::LargestMean => select_feature_by_mean(obs)?.0,
        FeatureChoice::Fixed(j) => j,
    };
    let fit = fit_gaussian(obs, j)?;
    let expected_targets = config.expected_targets.unwrap_or_else(|| {
        let mean = obs.iter().map(|o| o.s as f64).sum::<f64>() / obs.len() as f64;
        libm::round(mean).max(1.0) as usize
    });
    let theta = choose_cutoff(&fit, expected_targets);
    let mut plan = FishingPlan::feature(c, j, theta, config.beta);
    plan.alpha = config.alpha;
    plan.combine_with_class = config.combine_with_class;
    let model = plan.apply(benign)?;
    Ok(AttackPlan {
        target_class: c,
        fit,
        expected_targets,
        theta,
        plan,
        model,
    })
}

/// Phase 3 for one user: a single query, then evaluation against the
/// user's per-example gradients sorted by the attacked feature.
pub fn attack_user(plan: &AttackPlan, user: &User) -> Result<CatchReport> {
    let j = plan.plan.feature_index;
    let g = fedsim::user_update(user, &plan.model)?;

    let mut ranked = Vec::with_capacity(user.batch.len());
    for e in &user.batch {
        let t = model::forward(&plan.model, &e.x)?;
        let grad = model::backward(&plan.model, &t, e.y)?;
        ranked.push((t.feature()[j], e, grad));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per_example: Vec<_> = ranked.iter().map(|r| r.2.clone()).collect();
    let caught = recovery::count_caught(&g, &per_example)?;

    let recovered_input = recovery::analytic_input_recovery(&g).ok().map(|r| r.input);
    let input_recovery_error = match (&recovered_input, caught.n_caught) {
        (Some(x), 1) => Some(max_abs_diff(x, &ranked[0].1.x)),
        _ => None,
    };
    let isolated_gradient = (caught.n_caught == 1).then(|| {
        let n = g.batch_size as f64;
        g.clone().scaled(n)
    });
    Ok(CatchReport {
        user_id: user.user_id,
        n_caught: caught.n_caught,
        best_cosine: caught.best_cosine,
        isolated_gradient,
        recovered_input,
        queries_used: 1,
        input_recovery_error,
    })
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDeviceOutcome {
    pub observations: Vec<FeatureObservation>,
    pub plan: AttackPlan,
    pub reports: Vec<CatchReport>,
}

impl CrossDeviceOutcome {
    /// Fractions of users with 0, 1, 2 and ≥3 caught examples.
    pub fn catch_histogram(&self) -> [f64; 4] {
        catch_histogram(&self.reports)
    }
}

pub fn catch_histogram(reports: &[CatchReport]) -> [f64; 4] {
    let mut h = [0.0; 4];
    for r in reports {
        h[r.n_caught.min(3)] += 1.0;
    }
    let n = reports.len().max(1) as f64;
    h.map(|v| v / n)
}

/// All three phases. Estimation and target users must be disjoint; every
/// user is queried exactly once.
pub fn one_shot_feature_attack(
    benign: &ModelParams,
    estimation_users: &[User],
    target_users: &[User],
    c: usize,
    config: &CrossDeviceConfig,
) -> Result<CrossDeviceOutcome> {
    check_disjoint(estimation_users, target_users)?;
    let observations = estimate_phase(benign, estimation_users, c, config.alpha)?;
    let plan = plan_attack(benign, &observations, c, config)?;
    let reports = target_users
        .iter()
        .map(|u| attack_user(&plan, u))
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossDeviceOutcome {
        observations,
        plan,
        reports,
    })
}

pub fn check_disjoint(a: &[User], b: &[User]) -> Result<()> {
    let mut ids: Vec<usize> = a.iter().chain(b).map(|u| u.user_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(param("estimation and target users must be disjoint and unique"));
    }
    Ok(())
}
