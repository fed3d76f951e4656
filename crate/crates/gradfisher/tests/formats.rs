use gradfisher::formats;
use gradfisher_core::fedsim::{self, Composition, SyntheticTask, TaskSpec, TrainingSpec};
use gradfisher_core::model::{self, Architecture};
use gradfisher_core::RandomSource;

#[test]
fn dataset_file_round_trip() {
    let task = SyntheticTask::generate(&TaskSpec::default(), 3).unwrap();
    let data = task.dataset(4, RandomSource::new(3, 1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    formats::write_dataset(std::fs::File::create(&path).unwrap(), &data).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), data.len() + 1);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 33);
    let back = formats::read_dataset(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn trained_checkpoint_reloads_identically() {
    let task = SyntheticTask::generate(&TaskSpec::default(), 5).unwrap();
    let spec = TrainingSpec {
        epochs: 2,
        ..Default::default()
    };
    let params = fedsim::train_benign(&task, &Architecture::default(), &spec, RandomSource::new(5, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    formats::save_checkpoint(&path, &params).unwrap();
    let back = formats::load_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    let data = task.dataset(2, RandomSource::new(5, 9));
    assert_eq!(
        model::batch_gradient(&back, &data).unwrap(),
        model::batch_gradient(&params, &data).unwrap()
    );
    assert!(formats::load_checkpoint(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn manifest_lists_label_histograms() {
    let task = SyntheticTask::generate(&TaskSpec::default(), 2).unwrap();
    let comp = Composition::KOfBatch { c: 1, k: 3 };
    let users = fedsim::generate_population(&task, 4, 8, comp, RandomSource::new(2, 2)).unwrap();
    let m = formats::manifest(2, comp, &users, task.n_classes);
    let v = serde_json::to_value(&m).unwrap();
    assert_eq!(v["seed"], 2);
    assert_eq!(v["composition"], "3-of-batch:1");
    assert_eq!(v["batch_size"], 8);
    let users = v["users"].as_array().unwrap();
    assert_eq!(users.len(), 4);
    for u in users {
        let h: Vec<u64> = u["label_histogram"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap())
            .collect();
        assert_eq!(h.len(), 20);
        assert_eq!(h[1], 3);
        assert_eq!(h.iter().sum::<u64>(), 8);
    }
}
