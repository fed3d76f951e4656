//! Experiment configuration: a flat JSON object whose keys override the
//! built-in defaults.

use std::path::{Path, PathBuf};

use gradfisher_core::crossdevice::FeatureChoice;
use gradfisher_core::fedsim::{TaskSpec, TrainingSpec};
use gradfisher_core::model::{Activation, Architecture};
use gradfisher_core::{FishingMode, FishingPlan};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Class,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSelection {
    Ks,
    LargestMean,
}

/// Every knob of every preset. Unset keys keep their defaults; a preset
/// ignores the keys it does not use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub out: PathBuf,

    // Task and model.
    pub n_classes: usize,
    pub input_dim: usize,
    pub within_class_std: f64,
    pub mean_radius: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub feature_activation: ActivationName,
    pub train_per_class: usize,
    pub train_epochs: usize,
    pub train_lr: f64,

    // Fishing plan.
    pub mode: ModeName,
    pub target_class: usize,
    /// Attacked feature; `null` lets `feature_selection` pick it.
    pub feature_index: Option<usize>,
    /// `null` picks the preset's own rule (KS for cross-device, largest
    /// mean for the cross-silo presets).
    pub feature_selection: Option<FeatureSelection>,
    pub alpha: f64,
    pub beta: f64,
    /// Cutoff for a fixed feature plan; `null` is +∞.
    pub theta: Option<f64>,
    pub combine_with_class: bool,

    // Populations.
    pub estimation_users: usize,
    pub estimation_batch: usize,
    pub estimation_targets: usize,
    pub target_users: usize,
    pub target_batch: usize,
    /// Bin count M; `null` uses the attacked users' batch size.
    pub bins: Option<usize>,
    pub silo_users: usize,
    pub batch_sizes: Vec<usize>,
    pub breach_batch: usize,
    pub full_users: usize,
    pub full_batch: usize,
    /// Query budget for the full binary attack; `null` is n².
    pub query_budget: Option<usize>,
    pub max_queries: usize,
    pub disparate_users: usize,
    pub disparate_batch: usize,

    // Class-fishing sweep.
    pub prop1_users: usize,
    pub prop1_batch: usize,
    pub prop1_targets: usize,
    pub prop1_alphas: Vec<f64>,

    // Monte Carlo.
    pub trials: usize,
    pub mc_bins: Vec<usize>,

    // Defenses.
    pub clip_norm: f64,
    pub noise_stds: Vec<f64>,
    pub defense_users: usize,
    pub defense_batch: usize,

    // Pass thresholds.
    pub prop1_tol: f64,
    pub prop2_tol: f64,
    pub catch_rate_min: f64,
    pub catch_rate_max: f64,
    pub mean_queries_min: f64,
    pub mean_queries_max: f64,
    pub slope_min: f64,
    pub slope_max: f64,
    pub cosine_min: f64,
    pub input_error_max: f64,
    pub telescoping_tol: f64,
    pub defense_cosine_max: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        let arch = Architecture::default();
        let train = TrainingSpec::default();
        Self {
            preset: None,
            seed: 7,
            out: PathBuf::from("out"),
            n_classes: task.n_classes,
            input_dim: task.input_dim,
            within_class_std: task.within_class_std,
            mean_radius: task.mean_radius,
            hidden: arch.hidden,
            feature_dim: arch.feature_dim,
            feature_activation: ActivationName::Relu,
            train_per_class: train.per_class,
            train_epochs: train.epochs,
            train_lr: train.lr,
            mode: ModeName::Feature,
            target_class: 3,
            feature_index: None,
            feature_selection: None,
            alpha: gradfisher_core::fishing::DEFAULT_ALPHA,
            beta: gradfisher_core::fishing::DEFAULT_BETA,
            theta: None,
            combine_with_class: false,
            estimation_users: 200,
            estimation_batch: 10,
            estimation_targets: 4,
            target_users: 100,
            target_batch: 10,
            bins: None,
            silo_users: 50,
            batch_sizes: vec![8, 32, 128, 256],
            breach_batch: 128,
            full_users: 5,
            full_batch: 16,
            query_budget: None,
            max_queries: gradfisher_core::crosssilo::ONE_SHOT_MAX_QUERIES,
            disparate_users: 50,
            disparate_batch: 64,
            prop1_users: 5,
            prop1_batch: 16,
            prop1_targets: 4,
            prop1_alphas: vec![2.0, 10.0, 1000.0],
            trials: 10_000,
            mc_bins: vec![2, 4, 8, 16],
            clip_norm: 0.1,
            noise_stds: vec![0.0, 0.01, 0.1, 1.0],
            defense_users: 10,
            defense_batch: 128,
            prop1_tol: 1e-4,
            prop2_tol: 0.02,
            catch_rate_min: 0.27,
            catch_rate_max: 0.49,
            mean_queries_min: 5.0,
            mean_queries_max: 11.0,
            slope_min: 0.5,
            slope_max: 2.5,
            cosine_min: 0.999,
            input_error_max: 1e-6,
            telescoping_tol: 1e-10,
            defense_cosine_max: 0.5,
        }
    }
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

fn positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("{v} is not a finite positive number")))
    }
}

fn nonzero(key: &'static str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(invalid(key, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parse JSON text. Blank input yields the defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: strip_position(&e.to_string()),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config always serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("within_class_std", self.within_class_std)?;
        positive("mean_radius", self.mean_radius)?;
        positive("train_lr", self.train_lr)?;
        positive("clip_norm", self.clip_norm)?;
        if let Some(t) = self.theta {
            if t.is_nan() {
                return Err(invalid("theta", "must be a number or null"));
            }
        }
        if self.n_classes < 2 {
            return Err(invalid("n_classes", "need at least two classes"));
        }
        if self.target_class >= self.n_classes {
            return Err(invalid(
                "target_class",
                format!("{} is not below n_classes", self.target_class),
            ));
        }
        if let Some(j) = self.feature_index {
            if j >= self.feature_dim {
                return Err(invalid("feature_index", format!("{j} is not below feature_dim")));
            }
        }
        if self.estimation_targets > self.estimation_batch {
            return Err(invalid("estimation_targets", "exceeds estimation_batch"));
        }
        if self.prop1_targets > self.prop1_batch {
            return Err(invalid("prop1_targets", "exceeds prop1_batch"));
        }
        for (key, v) in [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("estimation_users", self.estimation_users),
            ("estimation_batch", self.estimation_batch),
            ("target_users", self.target_users),
            ("target_batch", self.target_batch),
            ("silo_users", self.silo_users),
            ("breach_batch", self.breach_batch),
            ("full_users", self.full_users),
            ("full_batch", self.full_batch),
            ("max_queries", self.max_queries),
            ("disparate_users", self.disparate_users),
            ("disparate_batch", self.disparate_batch),
            ("prop1_users", self.prop1_users),
            ("prop1_batch", self.prop1_batch),
            ("trials", self.trials),
            ("defense_users", self.defense_users),
            ("defense_batch", self.defense_batch),
        ] {
            nonzero(key, v)?;
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "layer widths must be at least 1"));
        }
        if let Some(m) = self.bins {
            nonzero("bins", m)?;
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(invalid("batch_sizes", "need at least one positive batch size"));
        }
        if self.mc_bins.is_empty() || self.mc_bins.contains(&0) {
            return Err(invalid("mc_bins", "need at least one positive bin count"));
        }
        if self.prop1_alphas.len() < 2 {
            return Err(invalid("prop1_alphas", "need at least two values"));
        }
        for &a in &self.prop1_alphas {
            positive("prop1_alphas", a)?;
        }
        if self.noise_stds.is_empty() || self.noise_stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(invalid("noise_stds", "need finite values >= 0"));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            n_classes: self.n_classes,
            input_dim: self.input_dim,
            within_class_std: self.within_class_std,
            mean_radius: self.mean_radius,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            n_classes: self.n_classes,
            feature_activation: match self.feature_activation {
                ActivationName::Relu => Activation::Relu,
                ActivationName::Identity => Activation::Identity,
            },
        }
    }

    pub fn training_spec(&self) -> TrainingSpec {
        TrainingSpec {
            per_class: self.train_per_class,
            epochs: self.train_epochs,
            lr: self.train_lr,
        }
    }

    /// The attacked feature rule, falling back to `default` when neither
    /// `feature_index` nor `feature_selection` is set.
    pub fn feature_choice(&self, default: FeatureSelection) -> FeatureChoice {
        match (self.feature_index, self.feature_selection.unwrap_or(default)) {
            (Some(j), _) => FeatureChoice::Fixed(j),
            (None, FeatureSelection::Ks) => FeatureChoice::KsTest,
            (None, FeatureSelection::LargestMean) => FeatureChoice::LargestMean,
        }
    }

    /// The fishing plan spelled out by the plan keys, for a known feature.
    pub fn fishing_plan(&self, feature_index: usize) -> FishingPlan {
        let mut plan = match self.mode {
            ModeName::Class => FishingPlan::class(self.target_class, self.alpha),
            ModeName::Feature => FishingPlan::feature(
                self.target_class,
                feature_index,
                self.theta.unwrap_or(f64::INFINITY),
                self.beta,
            ),
        };
        plan.alpha = self.alpha;
        plan.combine_with_class = self.combine_with_class && plan.mode == FishingMode::Feature;
        plan
    }
}

// serde_json appends " at line L column C"; the position is reported
// separately.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}

/// Values given on the command line; each one set wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut config: ExperimentConfig) -> ExperimentConfig {
        if let Some(p) = &self.preset {
            config.preset = Some(p.clone());
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(o) = &self.out {
            config.out = o.clone();
        }
        config
    }
}
