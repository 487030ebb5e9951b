use std::path::PathBuf;

use eatformer::data::{load_gtsrb_dir, load_splits, AugmentPolicy, SplitManifest};
use eatformer::train::{evaluate, train, OptimConfig, TrainOptions};
use eatformer::{Model, ModelSpec};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gtsrb_mini")
}

#[test]
fn loads_every_annotated_image() {
    let (data, report) = load_gtsrb_dir(fixture(), 16).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(report.loaded, 12);
    assert!(report.skipped.is_empty());
    assert_eq!(data.class_counts(), vec![4, 4, 4]);
    assert!(data.samples.iter().all(|s| s.image.shape() == [3, 16, 16]));
}

#[test]
fn held_out_split_is_disjoint_and_stratified() {
    let splits = load_splits(fixture(), 16, 0).unwrap();
    assert!(!splits.official);
    assert_eq!(splits.train.len() + splits.val.len(), 12);
    assert!(splits.val.class_counts().iter().all(|&n| n >= 1));
    let manifest = SplitManifest::from_datasets(&splits.train, &splits.val, None).unwrap();
    manifest.check_disjoint().unwrap();
    assert_eq!(manifest.to_string().parse::<SplitManifest>().unwrap(), manifest);
    assert_eq!(load_splits(fixture(), 16, 0).unwrap().val, splits.val);
}

#[test]
fn a_micro_model_trains_on_the_fixture() {
    let splits = load_splits(fixture(), 16, 1).unwrap();
    let mut model = Model::<f64>::build(ModelSpec::micro(3), 0).unwrap();
    let cfg = OptimConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        ..OptimConfig::default()
    };
    let out = train(
        &mut model,
        &splits.train,
        &splits.val,
        &cfg,
        &AugmentPolicy::default(),
        &TrainOptions::default(),
        &mut |_| Ok(()),
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
    let (_, report) = evaluate(&model, &splits.val, 8).unwrap();
    assert_eq!(report.total as usize, splits.val.len());
}
