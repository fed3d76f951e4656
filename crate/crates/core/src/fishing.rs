//! Malicious rewrites of the classification head.
//!
//! Both transforms leave the feature extractor untouched and return a fresh
//! [`ModelParams`], so one benign checkpoint can seed any number of attack
//! variants.
//!
//! Naming: `theta` is always the cutoff (in feature units) and `beta` the
//! logit scale. Some write-ups swap the two symbols when quoting values.

use crate::error::{param, Result};
use crate::model::ModelParams;

/// Default non-target bias for class fishing (and for combined fishing).
pub const DEFAULT_ALPHA: f64 = 1000.0;
/// Default logit scale for feature fishing.
pub const DEFAULT_BETA: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FishingMode {
    Class,
    Feature,
}

/// Everything needed to build one malicious model from a benign one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FishingPlan {
    pub mode: FishingMode,
    pub target_class: usize,
    /// Attacked feature (feature mode only).
    pub feature_index: usize,
    /// Non-target bias (class mode, and feature mode when combined).
    pub alpha: f64,
    /// Logit scale (feature mode).
    pub beta: f64,
    /// Cutoff (feature mode); `f64::INFINITY` catches everything.
    pub theta: f64,
    pub combine_with_class: bool,
}

impl FishingPlan {
    pub fn class(target_class: usize, alpha: f64) -> Self {
        Self {
            mode: FishingMode::Class,
            target_class,
            feature_index: 0,
            alpha,
            beta: DEFAULT_BETA,
            theta: f64::INFINITY,
            combine_with_class: false,
        }
    }

    pub fn feature(target_class: usize, feature_index: usize, theta: f64, beta: f64) -> Self {
        Self {
            mode: FishingMode::Feature,
            target_class,
            feature_index,
            alpha: DEFAULT_ALPHA,
            beta,
            theta,
            combine_with_class: false,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.target_class >= params.n_classes() {
            return Err(param(alloc::format!(
                "target class {} out of range for {} classes",
                self.target_class,
                params.n_classes()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(param("alpha must be finite and positive"));
        }
        if self.mode == FishingMode::Feature {
            if self.feature_index >= params.feature_dim() {
                return Err(param(alloc::format!(
                    "feature index {} out of range for {} features",
                    self.feature_index,
                    params.feature_dim()
                )));
            }
            if !(self.beta > 0.0 && self.beta.is_finite()) {
                return Err(param("beta must be finite and positive"));
            }
            if self.theta.is_nan() || self.theta == f64::NEG_INFINITY {
                return Err(param("theta must be finite or +inf"));
            }
        }
        Ok(())
    }

    pub fn apply(&self, params: &ModelParams) -> Result<ModelParams> {
        self.validate(params)?;
        Ok(match self.mode {
            FishingMode::Class => class_fishing_unchecked(params, self.target_class, self.alpha),
            FishingMode::Feature => feature_fishing_unchecked(
                params,
                self.target_class,
                self.feature_index,
                self.theta,
                self.beta,
                self.combine_with_class.then_some(self.alpha),
            ),
        })
    }
}

/// Zero every head row except `c` and set every other bias to `alpha`.
pub fn class_fishing(params: &ModelParams, c: usize, alpha: f64) -> Result<ModelParams> {
    FishingPlan::class(c, alpha).apply(params)
}

/// Reduce the head to the single weight `beta` at `(c, j)` with bias
/// `-beta * theta` on row `c`.
///
/// With `combine_with_class` the non-target biases become
/// [`DEFAULT_ALPHA`] instead of zero. The target logit is unchanged, so the
/// effective boundary then sits at `theta + alpha / beta`.
pub fn feature_fishing(
    params: &ModelParams,
    c: usize,
    j: usize,
    theta: f64,
    beta: f64,
    combine_with_class: bool,
) -> Result<ModelParams> {
    let mut plan = FishingPlan::feature(c, j, theta, beta);
    plan.combine_with_class = combine_with_class;
    plan.apply(params)
}

fn class_fishing_unchecked(params: &ModelParams, c: usize, alpha: f64) -> ModelParams {
    let mut out = params.clone();
    for r in 0..out.n_classes() {
        if r != c {
            out.head_weight.row_mut(r).fill(0.0);
            out.head_bias[r] = alpha;
        }
    }
    out
}

fn feature_fishing_unchecked(
    params: &ModelParams,
    c: usize,
    j: usize,
    theta: f64,
    beta: f64,
    combine_alpha: Option<f64>,
) -> ModelParams {
    let mut out = params.clone();
    out.head_weight.as_mut_slice().fill(0.0);
    out.head_weight[(c, j)] = beta;
    out.head_bias.fill(combine_alpha.unwrap_or(0.0));
    // +inf cutoff: the bias is -inf in exact arithmetic; the most negative
    // finite value keeps every logit finite and the target probability at 0.
    let b = -beta * theta;
    out.head_bias[c] = if b.is_finite() { b } else { -f64::MAX };
    out
}
