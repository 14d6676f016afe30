//! Training-loop contracts on a small task.

mod support;

use std::path::Path;

use dinet::checkpoint::{decode_checkpoint, encode_checkpoint};
use dinet::data::class_names;
use dinet::metrics::{evaluate, features, predict, RunMetadata};
use dinet::train::{history_csv, train, train_source_only, TrainMode, TrainState};
use dinet::{DiNetModel, ModelConfig, ParamGroup};
use support::small::{small_data, small_model, small_run};

fn snapshot(model: &DiNetModel<f32>) -> Vec<u32> {
    let p = model.params.params().iter().flat_map(|p| p.value.data().to_vec());
    let b = model.params.buffers().iter().flat_map(|b| b.value.data().to_vec());
    p.chain(b).map(f32::to_bits).collect()
}

#[test]
fn same_seed_same_history() {
    let run = small_run(4, TrainMode::Dann);
    let data = small_data(&run);
    let a = train(small_model(&run), &data, &run.train).unwrap();
    let b = train(small_model(&run), &data, &run.train).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(snapshot(&a.model), snapshot(&b.model));
}

#[test]
fn progress_reaches_one_and_objective_is_consistent() {
    let run = small_run(5, TrainMode::Dann);
    let data = small_data(&run);
    let st = train(small_model(&run), &data, &run.train).unwrap();
    let total = TrainState::<f32>::total_steps(&data, &run.train);
    assert_eq!(total, run.train.epochs * (data.train_source.len().min(data.train_target.len()) / 2));
    assert_eq!(st.history.len(), total);
    assert_eq!(st.history.last().unwrap().p, 1.0);
    assert_eq!(st.history[0].p, 0.0);
    assert_eq!(st.history[0].lambda, 0.0);
    for r in &st.history {
        assert!(r.loss_action.is_finite() && r.loss_domain.is_finite());
        assert!((r.objective - (r.loss_action - r.lambda * r.loss_domain)).abs() <= 1e-6);
    }
    assert!(st.history.windows(2).all(|w| w[0].lambda < w[1].lambda && w[0].lr > w[1].lr));
}

#[test]
fn baseline_and_dann_see_the_same_batches() {
    let dann = small_run(6, TrainMode::Dann);
    let data = small_data(&dann);
    let a = train(small_model(&dann), &data, &dann.train).unwrap();
    let b = train_source_only(small_model(&dann), &data, &dann.train).unwrap();
    assert_eq!(a.batch_hashes.len(), dann.train.epochs);
    assert_eq!(a.batch_hashes, b.batch_hashes);
    assert!(b.history.iter().all(|r| r.lambda == 0.0));
}

#[test]
fn source_only_freezes_the_domain_head() {
    let run = small_run(7, TrainMode::SourceOnly);
    let data = small_data(&run);
    let init = small_model(&run);
    let st = train(init.clone(), &data, &run.train).unwrap();
    let group = |m: &DiNetModel<f32>, g: ParamGroup| {
        m.params
            .params()
            .iter()
            .filter(|p| p.group == g)
            .flat_map(|p| p.value.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(group(&init, ParamGroup::Domain), group(&st.model, ParamGroup::Domain));
    assert_ne!(group(&init, ParamGroup::Features), group(&st.model, ParamGroup::Features));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let run = small_run(8, TrainMode::Dann);
    let data = small_data(&run);
    let full = train(small_model(&run), &data, &run.train).unwrap();
    let total = TrainState::<f32>::total_steps(&data, &run.train);

    let mut first = TrainState::new(small_model(&run));
    first.run(&data, &run.train, Some(total / 2 + 1)).unwrap();
    let bytes = encode_checkpoint(&first, &run, total).unwrap();
    let ck = decode_checkpoint::<f32>(&bytes, Path::new("mem")).unwrap();
    let mut resumed = ck.state;
    resumed.run(&data, &ck.run.train, None).unwrap();

    assert_eq!(resumed.history.len(), full.history.len());
    for (a, b) in resumed.history.iter().zip(&full.history) {
        assert_eq!(a.step, b.step);
        assert!((a.loss_action - b.loss_action).abs() <= 1e-6);
        assert!((a.loss_domain - b.loss_domain).abs() <= 1e-6);
    }
    assert_eq!(resumed.batch_hashes, full.batch_hashes);
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let run = small_run(9, TrainMode::Dann);
    let data = small_data(&run);
    let st = train(small_model(&run), &data, &run.train).unwrap();
    let before = snapshot(&st.model);
    let names = class_names(3);
    let report = evaluate(&st.model, &data, &names, &run.train.probe, RunMetadata::default()).unwrap();
    assert_eq!(before, snapshot(&st.model));
    for m in [&report.source, &report.target] {
        assert_eq!(m.top1_accuracy, m.confusion.trace() as f64 / m.confusion.total() as f64);
    }
    assert_eq!(features(&st.model, &data.test_target).unwrap(), features(&st.model, &data.test_target).unwrap());
    assert!((0.0..=1.0).contains(&report.domain_probe_accuracy));
}

#[test]
fn predictions_ignore_a_constant_logit_shift() {
    let run = small_run(10, TrainMode::Dann);
    let data = small_data(&run);
    let model = train(small_model(&run), &data, &run.train).unwrap().model;
    let base = predict(&model, &data.test_source).unwrap();
    let mut shifted = model.clone();
    for p in shifted.params.params_mut() {
        if p.group == ParamGroup::Action && p.value.ndim() == 1 {
            for v in p.value.data_mut() {
                *v += 3.25;
            }
        }
    }
    assert_eq!(predict(&shifted, &data.test_source).unwrap(), base);
}

#[test]
fn parameter_groups_partition_the_default_model() {
    let model = DiNetModel::<f32>::build(ModelConfig::default(), 0).unwrap();
    let store = &model.params;
    let by_group: usize = ParamGroup::ALL
        .iter()
        .map(|&g| store.params().iter().filter(|p| p.group == g).map(|p| p.value.numel()).sum::<usize>())
        .sum();
    assert_eq!(by_group, store.total_count());
    let mut names: Vec<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), store.len());
    assert!(ParamGroup::ALL.iter().all(|&g| store.params().iter().any(|p| p.group == g)));
}
