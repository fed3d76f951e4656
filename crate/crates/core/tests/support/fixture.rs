//! A trained benign model and the population setup shared by the
//! simulation tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use gradfisher_core::crossdevice;
use gradfisher_core::fedsim::{self, Composition, SyntheticTask, TaskSpec, TrainingSpec};
use gradfisher_core::model::Architecture;
use gradfisher_core::{ModelParams, RandomSource};

pub const SEED: u64 = 7;
pub const TARGET: usize = 3;

pub struct Fixture {
    pub task: SyntheticTask,
    pub model: ModelParams,
    /// Feature picked by the KS test on 200 estimation users.
    pub feature: usize,
    /// Feature with the largest mean on the same users; used by the
    /// cross-silo attacks.
    pub silo_feature: usize,
}

pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = SyntheticTask::generate(&TaskSpec::default(), SEED).unwrap();
        let model = fedsim::train_benign(
            &task,
            &Architecture::default(),
            &TrainingSpec::default(),
            RandomSource::new(SEED, 0),
        )
        .unwrap();
        let est = fedsim::generate_population(
            &task,
            200,
            10,
            Composition::KOfBatch { c: TARGET, k: 4 },
            RandomSource::new(SEED, 4),
        )
        .unwrap();
        let obs = crossdevice::estimate_phase(&model, &est, TARGET, 1000.0).unwrap();
        let (feature, _) = crossdevice::select_feature(&obs).unwrap();
        let (silo_feature, _) = crossdevice::select_feature_by_mean(&obs).unwrap();
        Fixture {
            task,
            model,
            feature,
            silo_feature,
        }
    })
}
