use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dinet::data::{epoch_seed, generate_dataset, make_batches, SyntheticConfig, TrainingBatch};
use dinet::nn::ConvGeometry;
use dinet::train::{dann_step, OptimizerState, TrainConfig};
use dinet::{DiNetModel, Graph, ModelConfig, Tensor};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect()).unwrap()
}

fn conv3d(c: &mut Criterion) {
    let x = ramp(&[8, 8, 8, 16, 16]);
    let w = ramp(&[16, 4, 3, 3, 3]);
    let geometry = ConvGeometry::new([1; 3], [1; 3], 2);
    c.bench_function("conv3d_forward_8x8x8x16x16_g2", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            g.conv3d(xv, wv, None, geometry).unwrap()
        })
    });
    c.bench_function("conv3d_forward_backward_8x8x8x16x16_g2", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let y = g.conv3d(xv, wv, None, geometry).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
        })
    });
}

fn training_step(c: &mut Criterion) {
    let data = generate_dataset(&SyntheticConfig::default()).unwrap();
    let target = data.unlabeled_target();
    let cfg = TrainConfig::default();
    let plan = make_batches(&data.train_source, &target, cfg.batch_size, epoch_seed(0, 0)).unwrap()[0].clone();
    let batch = TrainingBatch::<f32>::assemble(&plan, &data.train_source, &target).unwrap();
    let model = DiNetModel::<f32>::build(ModelConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("default_model");
    group.sample_size(20);
    group.bench_function("dann_step_batch8", |b| {
        b.iter_batched(
            || (model.clone(), OptimizerState::new(&model.params)),
            |(mut m, mut opt)| dann_step(&mut m, &batch, 0.5, 0.01, &cfg, &mut opt).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let clips: Vec<&Tensor<f32>> = data.test_source.iter().take(16).map(|c| &c.video).collect();
    group.bench_function("eval_features_16_clips", |b| b.iter(|| model.extract_features(&clips, 16).unwrap()));
    group.finish();
}

criterion_group!(benches, conv3d, training_step);
criterion_main!(benches);
