//! Randomized gradient checks for every differentiable operation and for a
//! full training step of a small model.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finite_diff_grad, Tolerance, DEFAULT_EPS};
use crate::data::{mix_seed, TrainingBatch};
use crate::error::{Error, Result};
use crate::graph::{Elementwise, Graph, Var};
use crate::model::{BlockSpec, DiNetModel, DomainCoupling, ModelConfig};
use crate::nn::{Activation, ConvGeometry, Mode, PoolKind};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::Tensor;
use crate::train::{accumulate_step_gradients, dann_step, OptimizerState, TrainConfig, TrainMode};

/// Result of checking one operation over all of its random configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub name: String,
    pub configs: usize,
    pub max_rel_error: f64,
    /// Index of the configuration with the largest error.
    pub worst_config: usize,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub tolerance_rel: f64,
    pub tolerance_abs_floor: f64,
    pub checks: Vec<OpCheck>,
}

impl CheckReport {
    fn new(tol: Tolerance) -> Self {
        Self {
            tolerance_rel: tol.rel,
            tolerance_abs_floor: tol.abs_floor,
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One random configuration: inputs, the operation under test, and the
/// factor relating each input's analytic gradient to the finite difference
/// of the forward map (1 everywhere except in front of a reversal node).
struct Case {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    scales: Vec<f64>,
}

impl Case {
    fn new(inputs: Vec<Tensor<f64>>, forward: Forward) -> Self {
        let scales = vec![1.0; inputs.len()];
        Self { inputs, forward, scales }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape")
}

/// Distinct values spaced well beyond the finite-difference step, so no max
/// pooling window has a tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    v.shuffle(rng);
    let v = v.into_iter().map(|x| x + rng.random_range(-0.01..0.01)).collect();
    Tensor::new(shape, v).expect("shape")
}

/// `sum(out ⊙ r)` for a fixed random `r` of the output's shape.
fn objective(case: &Case, inputs: &[Tensor<f64>], r: &Tensor<f64>, leaves: bool) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if leaves { g.leaf(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let out = (case.forward)(&mut g, &vars)?;
    let rv = g.input(r.clone());
    let weighted = g.mul(out, rv)?;
    let loss = g.sum(weighted);
    Ok((g, vars, loss))
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng, tol: Tolerance) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    let r = uniform(rng, g.value(out).shape(), -1.0, 1.0);

    let (mut g, vars, loss) = objective(case, &case.inputs, &r, true)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let numeric = finite_diff_grad(
            |t| {
                let mut inputs = case.inputs.clone();
                inputs[i] = t.clone();
                let (g, _, loss) = objective(case, &inputs, &r, false)?;
                Ok(g.value(loss).item())
            },
            &case.inputs[i],
            DEFAULT_EPS,
        )?;
        let expected: Vec<f64> = numeric.data().iter().map(|v| v * case.scales[i]).collect();
        worst = worst.max(tol.max_relative_error(analytic.data(), &expected));
    }
    Ok(worst)
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let groups = rng.random_range(1..=3);
    let c_in = groups * rng.random_range(1..=2);
    let c_out = groups * rng.random_range(1..=2);
    let n = rng.random_range(1..=2);
    let mut kernel = [0; 3];
    let mut stride = [0; 3];
    let mut pad = [0; 3];
    let mut extent = [0; 3];
    for a in 0..3 {
        kernel[a] = rng.random_range(1..=3);
        stride[a] = rng.random_range(1..=2);
        pad[a] = rng.random_range(0..kernel[a]);
        extent[a] = kernel[a] + rng.random_range(0..=3);
    }
    let bias = rng.random_bool(0.5);
    let x = uniform(rng, &[n, c_in, extent[0], extent[1], extent[2]], -1.0, 1.0);
    let w = uniform(
        rng,
        &[c_out, c_in / groups, kernel[0], kernel[1], kernel[2]],
        -1.0,
        1.0,
    );
    let mut inputs = vec![x, w];
    if bias {
        inputs.push(uniform(rng, &[c_out], -1.0, 1.0));
    }
    let geometry = ConvGeometry::new(stride, pad, groups);
    Case::new(
        inputs,
        Box::new(move |g, v| g.conv3d(v[0], v[1], v.get(2).copied(), geometry)),
    )
}

fn bn_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=3),
    ]
}

fn batchnorm_train_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = bn_shape(rng);
    let c = shape[1];
    let inputs = vec![
        uniform(rng, &shape, -2.0, 2.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ];
    Case::new(
        inputs,
        Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|r| r.0)),
    )
}

fn batchnorm_eval_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = bn_shape(rng);
    let c = shape[1];
    let mean = uniform(rng, &[c], -0.5, 0.5).into_data();
    let var = uniform(rng, &[c], 0.2, 2.0).into_data();
    let inputs = vec![
        uniform(rng, &shape, -2.0, 2.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ];
    Case::new(
        inputs,
        Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    )
}

fn pool_case(rng: &mut ChaCha8Rng, kind: PoolKind) -> Case {
    let mut window = [0; 3];
    let mut stride = [0; 3];
    let mut shape = vec![rng.random_range(1..=2), rng.random_range(1..=2)];
    for a in 0..3 {
        window[a] = rng.random_range(1..=3);
        stride[a] = rng.random_range(1..=2);
        shape.push(window[a] + rng.random_range(0..=3));
    }
    let x = match kind {
        PoolKind::Max => distinct(rng, &shape),
        PoolKind::Avg => uniform(rng, &shape, -1.0, 1.0),
    };
    Case::new(vec![x], Box::new(move |g, v| g.pool3d(v[0], kind, window, stride)))
}

fn global_pool_case(rng: &mut ChaCha8Rng) -> Case {
    let shape: Vec<usize> = (0..5).map(|_| rng.random_range(1..=3)).collect();
    Case::new(vec![uniform(rng, &shape, -1.0, 1.0)], Box::new(|g, v| g.global_avg_pool(v[0])))
}

fn linear_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, fin, fout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let mut inputs = vec![uniform(rng, &[n, fin], -1.0, 1.0), uniform(rng, &[fout, fin], -1.0, 1.0)];
    if rng.random_bool(0.5) {
        inputs.push(uniform(rng, &[fout], -1.0, 1.0));
    }
    Case::new(inputs, Box::new(|g, v| g.linear(v[0], v[1], v.get(2).copied())))
}

fn matmul_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
    let inputs = vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)];
    Case::new(inputs, Box::new(|g, v| g.matmul(v[0], v[1])))
}

fn activation_case(rng: &mut ChaCha8Rng, act: Activation) -> Case {
    let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
    let x = match act {
        Activation::Relu => off_zero(rng, &shape),
        _ => uniform(rng, &shape, -3.0, 3.0),
    };
    Case::new(vec![x], Box::new(move |g, v| g.activation(v[0], act)))
}

fn elementwise_case(rng: &mut ChaCha8Rng) -> Case {
    let kind = [Elementwise::Add, Elementwise::Sub, Elementwise::Mul][rng.random_range(0..3)];
    let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
    let b_shape: Vec<usize> = if rng.random_bool(0.5) { vec![shape[1]] } else { shape.to_vec() };
    let inputs = vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &b_shape, -1.0, 1.0)];
    Case::new(inputs, Box::new(move |g, v| g.elementwise(kind, v[0], v[1])))
}

fn reductions_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(2..=5);
    let cols = rng.random_range(1..=4);
    let start = rng.random_range(0..n);
    let len = rng.random_range(1..=n - start);
    let factor = rng.random_range(-2.0..2.0);
    Case::new(
        vec![uniform(rng, &[n, cols], -1.0, 1.0)],
        Box::new(move |g, v| {
            let r = g.rows(v[0], start, len)?;
            let s = g.scale(r, factor);
            let m = g.mean(s);
            let t = g.sum(v[0]);
            g.add(m, t)
        }),
    )
}

fn softmax_ce_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    Case::new(
        vec![uniform(rng, &[n, k], -3.0, 3.0)],
        Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
    )
}

fn bce_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=6);
    let targets: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    Case::new(
        vec![uniform(rng, &[n, 1], -4.0, 4.0)],
        Box::new(move |g, v| g.bce_with_logits(v[0], &targets)),
    )
}

/// Features → reversal → linear → tanh → linear → BCE. The analytic gradient
/// of the features must equal `−λ` times the derivative of the forward map;
/// the weights behind the reversal see the plain derivative.
fn reversal_case(rng: &mut ChaCha8Rng, index: usize) -> Case {
    let lambda = match index {
        0 => 0.0,
        1 => 0.25,
        2 => 1.0,
        _ => rng.random_range(0.0..2.0),
    };
    let (n, d, h) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
    let targets: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    let inputs = vec![
        uniform(rng, &[n, d], -1.0, 1.0),
        uniform(rng, &[h, d], -1.0, 1.0),
        uniform(rng, &[1, h], -1.0, 1.0),
    ];
    let mut case = Case::new(
        inputs,
        Box::new(move |g, v| {
            let r = g.gradient_reversal(v[0], lambda)?;
            let hdn = g.linear(r, v[1], None)?;
            let hdn = g.activation(hdn, Activation::Tanh)?;
            let logit = g.linear(hdn, v[2], None)?;
            g.bce_with_logits(logit, &targets)
        }),
    );
    case.scales[0] = -lambda;
    case
}

type Generator = fn(&mut ChaCha8Rng, usize) -> Case;

const OPS: &[(&str, Generator)] = &[
    ("conv3d", |r, _| conv_case(r)),
    ("batchnorm_train", |r, _| batchnorm_train_case(r)),
    ("batchnorm_eval", |r, _| batchnorm_eval_case(r)),
    ("max_pool3d", |r, _| pool_case(r, PoolKind::Max)),
    ("avg_pool3d", |r, _| pool_case(r, PoolKind::Avg)),
    ("global_avg_pool", |r, _| global_pool_case(r)),
    ("linear", |r, _| linear_case(r)),
    ("matmul", |r, _| matmul_case(r)),
    ("relu", |r, _| activation_case(r, Activation::Relu)),
    ("tanh", |r, _| activation_case(r, Activation::Tanh)),
    ("sigmoid", |r, _| activation_case(r, Activation::Sigmoid)),
    ("elementwise", |r, _| elementwise_case(r)),
    ("rows_scale_mean_sum", |r, _| reductions_case(r)),
    ("softmax_cross_entropy", |r, _| softmax_ce_case(r)),
    ("bce_with_logits", |r, _| bce_case(r)),
    ("gradient_reversal", reversal_case),
];

/// Names of the operations covered by [`run_op_checks`].
pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

/// Checks every operation on `configs` random configurations in double
/// precision.
pub fn run_op_checks(configs: usize, seed: u64, tol: Tolerance) -> Result<CheckReport> {
    if configs == 0 {
        return Err(Error::invalid("at least one configuration per operation is required"));
    }
    let mut report = CheckReport::new(tol);
    for (op_index, (name, generate)) in OPS.iter().enumerate() {
        let start = Instant::now();
        let mut worst = (0.0f64, 0usize);
        for i in 0..configs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, op_index as u64), i as u64));
            let case = generate(&mut rng, i);
            let err = check_case(&case, &mut rng, tol)?;
            if err > worst.0 || i == 0 {
                worst = (err, i);
            }
        }
        report.checks.push(OpCheck {
            name: name.to_string(),
            configs,
            max_rel_error: worst.0,
            worst_config: worst.1,
            passed: tol.passes(worst.0),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// The small network used by the model-scope check.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        input_shape: [1, 4, 6, 6],
        blocks: vec![BlockSpec::plain(3), BlockSpec::grouped(4, 2).downsampled()],
        feature_dim: 5,
        num_actions: 3,
        domain_hidden: [4, 3],
        ..ModelConfig::default()
    }
}

fn step_losses(model: &DiNetModel<f64>, batch: &TrainingBatch<f64>) -> Result<(f64, f64)> {
    let mut m = model.clone();
    let mut g = Graph::new();
    let x = g.input(batch.clips.clone());
    let f = m.forward_features(&mut g, x, Mode::Train)?;
    let src = g.rows(f, 0, batch.n_source)?;
    let logits = m.forward_action(&mut g, src)?;
    let la = g.softmax_cross_entropy(logits, &batch.source_labels)?;
    let d = m.forward_domain_with(&mut g, f, DomainCoupling::Identity)?;
    let ld = g.bce_with_logits(d, &batch.domain_labels())?;
    Ok((g.value(la).item(), g.value(ld).item()))
}

/// End-to-end check of one training step on a batch of one source and one
/// target clip: the gradients left by the step's backward pass against
/// finite differences of `L_a − λ·L_d` (feature extractor) and `L_a + L_d`
/// (both heads), and the first momentum update against `θ − lr·∇`.
pub fn run_model_checks(seed: u64, tol: Tolerance) -> Result<CheckReport> {
    let lambda = 0.5;
    let lr = 0.01;
    let config = model_check_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DiNetModel::<f64>::build(config.clone(), seed)?;
    let [c, t, h, w] = config.input_shape;
    let batch = TrainingBatch {
        clips: uniform(&mut rng, &[2, c, t, h, w], 0.0, 1.0),
        source_labels: vec![rng.random_range(0..config.num_actions)],
        n_source: 1,
        n_target: 1,
        ids: vec!["source".into(), "target".into()],
    };

    let mut analytic = model.clone();
    accumulate_step_gradients(&mut analytic, &batch, DomainCoupling::Reversal(lambda), TrainMode::Dann)?;

    let mut report = CheckReport::new(tol);
    for group in ParamGroup::ALL {
        let start = Instant::now();
        let ids: Vec<ParamId> = model.params.group_ids(group).collect();
        let mut worst: f64 = 0.0;
        for &id in &ids {
            let numeric = finite_diff_grad(
                |v| {
                    let mut m = model.clone();
                    *m.params.value_mut(id) = v.clone();
                    let (la, ld) = step_losses(&m, &batch)?;
                    Ok(match group {
                        ParamGroup::Features => la - lambda * ld,
                        ParamGroup::Action | ParamGroup::Domain => la + ld,
                    })
                },
                model.params.value(id),
                DEFAULT_EPS,
            )?;
            worst = worst.max(tol.max_relative_error(analytic.params.grad(id).data(), numeric.data()));
        }
        report.checks.push(OpCheck {
            name: format!("dann_step.grad.{}", group_name(group)),
            configs: ids.len(),
            max_rel_error: worst,
            worst_config: 0,
            passed: tol.passes(worst),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    let start = Instant::now();
    let cfg = TrainConfig {
        momentum: 0.9,
        mode: TrainMode::Dann,
        ..TrainConfig::default()
    };
    let mut stepped = model.clone();
    let mut opt = OptimizerState::new(&stepped.params);
    dann_step(&mut stepped, &batch, lambda, lr, &cfg, &mut opt)?;
    let mut worst: f64 = 0.0;
    for id in model.params.ids() {
        let before = model.params.value(id).data();
        let after = stepped.params.value(id).data();
        let grad = analytic.params.grad(id).data();
        let moved: Vec<f64> = before.iter().zip(after).map(|(b, a)| (b - a) / lr).collect();
        worst = worst.max(tol.max_relative_error(&moved, grad));
    }
    report.checks.push(OpCheck {
        name: "dann_step.update".into(),
        configs: model.params.len(),
        max_rel_error: worst,
        worst_config: 0,
        passed: tol.passes(worst),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(report)
}

fn group_name(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Features => "features",
        ParamGroup::Action => "action",
        ParamGroup::Domain => "domain",
    }
}
