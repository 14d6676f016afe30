//! A small task that trains in about a second.

use dinet::config::RunConfig;
use dinet::data::{generate_dataset, DatasetSplit, SyntheticConfig};
use dinet::train::{TrainConfig, TrainMode};
use dinet::{BlockSpec, DiNetModel, ModelConfig};

pub fn small_run(seed: u64, mode: TrainMode) -> RunConfig {
    let mut run = RunConfig {
        data: SyntheticConfig {
            num_classes: 3,
            clips_per_class_per_domain: 10,
            clip_shape: [1, 8, 16, 16],
            shape_radius: [2.0, 3.0],
            ..SyntheticConfig::default()
        },
        model: ModelConfig {
            input_shape: [1, 8, 16, 16],
            blocks: vec![BlockSpec::plain(4).downsampled(), BlockSpec::grouped(8, 2).downsampled()],
            feature_dim: 8,
            num_actions: 3,
            domain_hidden: [8, 4],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            base_lr: 0.02,
            mode,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    run.set_seed(seed);
    run.validate().unwrap();
    run
}

pub fn small_data(run: &RunConfig) -> DatasetSplit {
    generate_dataset(&run.data).unwrap()
}

pub fn small_model(run: &RunConfig) -> DiNetModel<f32> {
    DiNetModel::build(run.model.clone(), run.model_seed()).unwrap()
}
