//! Synthetic federated environment: data, users, fedSGD updates with
//! optional local differential privacy, and server-side aggregation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{param, Result};
use crate::linalg::{self, RandomSource, Vector};
use crate::model::{self, Architecture, Example, GradientUpdate, ModelParams};

/// Gaussian class blobs around well separated means.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub n_classes: usize,
    pub input_dim: usize,
    pub class_means: Vec<Vector>,
    pub within_class_std: f64,
    pub seed: u64,
}

/// Knobs for [`SyntheticTask::generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub within_class_std: f64,
    /// Norm of every class mean.
    pub mean_radius: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 20,
            input_dim: 32,
            within_class_std: 0.5,
            mean_radius: 3.0,
        }
    }
}

impl SyntheticTask {
    /// Class means drawn uniformly on the sphere of radius `mean_radius`.
    pub fn generate(spec: &TaskSpec, seed: u64) -> Result<Self> {
        if spec.n_classes < 2 || spec.input_dim == 0 {
            return Err(param("need at least two classes and one input dimension"));
        }
        if !(spec.within_class_std > 0.0) || !(spec.mean_radius > 0.0) {
            return Err(param("std and radius must be positive"));
        }
        let mut rng = RandomSource::new(seed, 0).derive(0x7a5c).rng();
        let class_means = (0..spec.n_classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.input_dim).map(|_| linalg::standard_normal(&mut rng)).collect();
                let norm = libm::sqrt(linalg::dot(&v, &v));
                v.iter().map(|x| spec.mean_radius * x / norm).collect::<Vec<_>>().into()
            })
            .collect();
        let task = Self {
            n_classes: spec.n_classes,
            input_dim: spec.input_dim,
            class_means,
            within_class_std: spec.within_class_std,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    /// Class means must be at least `4 * within_class_std` apart.
    pub fn validate(&self) -> Result<()> {
        let min = self.min_mean_distance();
        if min < 4.0 * self.within_class_std {
            return Err(param(alloc::format!(
                "class means only {min:.3} apart; need {:.3}",
                4.0 * self.within_class_std
            )));
        }
        Ok(())
    }

    pub fn min_mean_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (i, a) in self.class_means.iter().enumerate() {
            for b in &self.class_means[i + 1..] {
                let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                min = min.min(libm::sqrt(d));
            }
        }
        min
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> Example {
        let x: Vec<f64> = self.class_means[y]
            .iter()
            .map(|m| m + self.within_class_std * linalg::standard_normal(rng))
            .collect();
        Example::new(x, y)
    }

    /// `per_class` examples of every class, shuffled.
    pub fn dataset(&self, per_class: usize, src: RandomSource) -> Vec<Example> {
        let mut rng = src.rng();
        let mut out = Vec::with_capacity(per_class * self.n_classes);
        for y in 0..self.n_classes {
            for _ in 0..per_class {
                out.push(self.sample(y, &mut rng));
            }
        }
        out.shuffle(&mut rng);
        out
    }
}

/// Recipe for the benign model every attack starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSpec {
    pub per_class: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            per_class: 50,
            epochs: 20,
            lr: 0.05,
        }
    }
}

/// Initialize and train a classifier on a fresh sample of `task`.
pub fn train_benign(
    task: &SyntheticTask,
    arch: &Architecture,
    spec: &TrainingSpec,
    src: RandomSource,
) -> Result<ModelParams> {
    if arch.input_dim != task.input_dim || arch.n_classes != task.n_classes {
        return Err(param("architecture does not match the task"));
    }
    let init = ModelParams::init(arch, src.derive(1))?;
    let data = task.dataset(spec.per_class, src.derive(2));
    model::train_sgd(&init, &data, spec.epochs, spec.lr, src.derive(3))
}

/// How labels are assigned inside each user's batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    /// Every label i.i.d. uniform.
    Random,
    /// All examples of a user share one label: `class`, or a per-user
    /// uniform draw when `None`.
    SingleClass { class: Option<usize> },
    /// Exactly `k` examples of class `c`, the rest uniform over other classes.
    KOfBatch { c: usize, k: usize },
}

/// User-side protection applied before an update leaves the device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseConfig {
    pub clip_norm: Option<f64>,
    pub noise_std: f64,
    pub aggregation: Aggregation,
}

impl DefenseConfig {
    pub fn new(clip_norm: Option<f64>, noise_std: f64, aggregation: Aggregation) -> Result<Self> {
        if let Some(c) = clip_norm {
            if !(c > 0.0) {
                return Err(param("clip norm must be positive"));
            }
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(param("noise std must be finite and >= 0"));
        }
        if noise_std > 0.0 && clip_norm.is_none() {
            return Err(param("noise requires a clip norm"));
        }
        Ok(Self {
            clip_norm,
            noise_std,
            aggregation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

/// A participant holding a fixed private batch.
#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub user_id: usize,
    pub batch: Vec<Example>,
    pub defense: Option<DefenseConfig>,
    /// Seeds the user's privacy noise.
    pub noise_source: RandomSource,
}

impl User {
    pub fn new(user_id: usize, batch: Vec<Example>) -> Self {
        Self {
            user_id,
            batch,
            defense: None,
            noise_source: RandomSource::new(user_id as u64, 0x6e6f_6973),
        }
    }

    pub fn with_defense(mut self, defense: DefenseConfig, noise_source: RandomSource) -> Self {
        self.defense = Some(defense);
        self.noise_source = noise_source;
        self
    }

    /// Number of examples per label.
    pub fn label_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = alloc::vec![0; n_classes];
        for e in &self.batch {
            h[e.y] += 1;
        }
        h
    }
}

/// Users `0..n_users`, each drawing its batch from its own stream.
pub fn generate_population(
    task: &SyntheticTask,
    n_users: usize,
    batch_size: usize,
    composition: Composition,
    src: RandomSource,
) -> Result<Vec<User>> {
    generate_population_from(task, 0, n_users, batch_size, composition, src)
}

/// As [`generate_population`] with ids starting at `first_id`.
pub fn generate_population_from(
    task: &SyntheticTask,
    first_id: usize,
    n_users: usize,
    batch_size: usize,
    composition: Composition,
    src: RandomSource,
) -> Result<Vec<User>> {
    if batch_size == 0 {
        return Err(param("batch size must be positive"));
    }
    match composition {
        Composition::SingleClass { class: Some(c) } if c >= task.n_classes => {
            return Err(param(alloc::format!("class {c} out of range")))
        }
        Composition::KOfBatch { c, k } => {
            if c >= task.n_classes {
                return Err(param(alloc::format!("class {c} out of range")));
            }
            if k > batch_size {
                return Err(param(alloc::format!("k = {k} exceeds batch size {batch_size}")));
            }
        }
        _ => {}
    }
    let users = (first_id..first_id + n_users)
        .map(|id| {
            let mut rng = src.derive(id as u64).rng();
            let labels: Vec<usize> = match composition {
                Composition::Random => (0..batch_size).map(|_| rng.random_range(0..task.n_classes)).collect(),
                Composition::SingleClass { class } => {
                    let c = class.unwrap_or_else(|| rng.random_range(0..task.n_classes));
                    alloc::vec![c; batch_size]
                }
                Composition::KOfBatch { c, k } => {
                    let mut labels = alloc::vec![c; k];
                    for _ in k..batch_size {
                        let other = rng.random_range(0..task.n_classes - 1);
                        labels.push(if other >= c { other + 1 } else { other });
                    }
                    labels.shuffle(&mut rng);
                    labels
                }
            };
            let batch = labels.into_iter().map(|y| task.sample(y, &mut rng)).collect();
            let mut u = User::new(id, batch);
            u.noise_source = src.derive(id as u64).derive(0x6e6f_6973);
            u
        })
        .collect();
    Ok(users)
}

/// FNV-1a over parameter bits; keys the privacy noise to the query.
fn params_fingerprint(params: &ModelParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for block in params.blocks() {
        for v in block {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Clip every per-example gradient to `clip_norm` (flattened L2).
pub fn clipped_per_example(params: &ModelParams, batch: &[Example], clip_norm: f64) -> Result<Vec<GradientUpdate>> {
    let mut grads = model::per_example_gradients(params, batch)?;
    for g in &mut grads {
        let norm = g.norm();
        if norm > clip_norm {
            let s = clip_norm / norm;
            g.map_in_place(|v| v * s);
        }
    }
    Ok(grads)
}

/// The fedSGD update a user returns for `params`.
///
/// Without a defense this is exactly [`model::batch_gradient`]. With one,
/// per-example gradients are clipped, averaged, and Gaussian noise of std
/// `noise_std / batch_size` is added to every coordinate. The noise stream
/// is a function of the user and the received parameters, so repeating a
/// query repeats the answer.
pub fn user_update(user: &User, params: &ModelParams) -> Result<GradientUpdate> {
    let defense = match user.defense {
        None => return model::batch_gradient(params, &user.batch),
        Some(d) => d,
    };
    if user.batch.is_empty() {
        return Err(param("empty batch"));
    }
    let mut update = match defense.clip_norm {
        None => model::batch_gradient(params, &user.batch)?,
        Some(c) => GradientUpdate::mean_of(&clipped_per_example(params, &user.batch, c)?)?,
    };
    if defense.noise_std > 0.0 {
        let std = defense.noise_std / user.batch.len() as f64;
        let mut rng = user.noise_source.derive(params_fingerprint(params)).rng();
        update.map_in_place(|v| v + std * linalg::standard_normal(&mut rng));
    }
    Ok(update)
}

/// Elementwise mean (pairwise summation) or elementwise median (lower
/// middle element for even counts).
pub fn aggregate(updates: &[GradientUpdate], mode: Aggregation) -> Result<GradientUpdate> {
    let first = updates.first().ok_or_else(|| param("no updates to aggregate"))?;
    for u in updates {
        first.check_shape(u)?;
    }
    match mode {
        Aggregation::Mean => GradientUpdate::mean_of(updates),
        Aggregation::Median => {
            let mut out = first.clone();
            out.batch_size = updates.iter().map(|u| u.batch_size).sum();
            let all: Vec<Vec<&[f64]>> = updates.iter().map(|u| u.blocks()).collect();
            let mut column = Vec::with_capacity(updates.len());
            for (b, dst) in out.blocks_mut().into_iter().enumerate() {
                for (i, d) in dst.iter_mut().enumerate() {
                    column.clear();
                    column.extend(all.iter().map(|blocks| blocks[b][i]));
                    column.sort_by(f64::total_cmp);
                    *d = column[(column.len() - 1) / 2];
                }
            }
            Ok(out)
        }
    }
}
