//! Gradient-reversal algebra on a tiny model in double precision.

use dinet::data::TrainingBatch;
use dinet::gradcheck::model_check_config;
use dinet::{DiNetModel, DomainCoupling, Graph, Mode, ParamGroup, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model(seed: u64) -> DiNetModel<f64> {
    DiNetModel::build(model_check_config(), seed).unwrap()
}

/// Two labelled source rows followed by two target rows.
pub fn tiny_batch(seed: u64) -> TrainingBatch<f64> {
    let shape = model_check_config().input_shape;
    let per = shape.iter().product::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..4 * per).map(|_| rng.random_range(0.0..1.0)).collect();
    TrainingBatch {
        clips: Tensor::new(&[4, shape[0], shape[1], shape[2], shape[3]], data).unwrap(),
        source_labels: vec![0, 2],
        n_source: 2,
        n_target: 2,
        ids: (0..4).map(|i| format!("c{i}")).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Action,
    Domain,
    Both,
}

/// Parameter gradients per group plus the gradient at the feature node.
#[derive(Debug, Clone)]
pub struct Grads {
    pub features: Vec<f64>,
    pub action: Vec<f64>,
    pub domain: Vec<f64>,
    pub feature_node: Vec<f64>,
}

pub fn grads(model: &DiNetModel<f64>, batch: &TrainingBatch<f64>, coupling: DomainCoupling, loss: Loss) -> Grads {
    let mut m = model.clone();
    let mut g = Graph::new();
    let x = g.input(batch.clips.clone());
    let f = m.forward_features(&mut g, x, Mode::Train).unwrap();
    let src = g.rows(f, 0, batch.n_source).unwrap();
    let logits = m.forward_action(&mut g, src).unwrap();
    let la = g.softmax_cross_entropy(logits, &batch.source_labels).unwrap();
    let d = m.forward_domain_with(&mut g, f, coupling).unwrap();
    let ld = g.bce_with_logits(d, &batch.domain_labels()).unwrap();
    let total = match loss {
        Loss::Action => la,
        Loss::Domain => ld,
        Loss::Both => g.add(la, ld).unwrap(),
    };
    g.backward(total).unwrap();
    let feature_node = g.grad(f).map(|t| t.to_f64_vec()).unwrap_or_default();
    m.params.zero_grads();
    m.params.accumulate_grads(&g);
    Grads {
        features: m.params.flat_grads(ParamGroup::Features),
        action: m.params.flat_grads(ParamGroup::Action),
        domain: m.params.flat_grads(ParamGroup::Domain),
        feature_node,
    }
}

/// Feature-extractor parameter gradients obtained by pushing `node_grad`
/// back from the feature node: the loss `Σ f ⊙ r` has gradient `r` at `f`.
pub fn features_grad_from_node(model: &DiNetModel<f64>, batch: &TrainingBatch<f64>, node_grad: &[f64]) -> Vec<f64> {
    let mut m = model.clone();
    let mut g = Graph::new();
    let x = g.input(batch.clips.clone());
    let f = m.forward_features(&mut g, x, Mode::Train).unwrap();
    let shape = g.value(f).shape().to_vec();
    let r = g.input(Tensor::new(&shape, node_grad.to_vec()).unwrap());
    let prod = g.mul(f, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    m.params.zero_grads();
    m.params.accumulate_grads(&g);
    m.params.flat_grads(ParamGroup::Features)
}

pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Equal as numbers, so `0.0` and `-0.0` match.
pub fn exactly_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

#[derive(Debug, Clone, Copy)]
pub struct GrlOutcome {
    pub lambda: f64,
    pub forward_identity: bool,
    /// θ_f gradient of `L_d` behind the reversal equals `−λ` times the
    /// identity-coupled gradient, exactly.
    pub reversed_is_scaled: bool,
    /// θ_d gradient of `L_d` does not depend on the coupling.
    pub head_unchanged: bool,
    /// With λ = 0 every θ_f gradient from `L_d` is zero.
    pub zero_at_lambda_zero: bool,
}

impl GrlOutcome {
    pub fn ok(&self) -> bool {
        self.forward_identity && self.reversed_is_scaled && self.head_unchanged && self.zero_at_lambda_zero
    }
}

pub fn grl_algebra(lambda: f64, seed: u64) -> GrlOutcome {
    let model = tiny_model(seed);
    let batch = tiny_batch(seed + 1);

    let mut g = Graph::<f64>::new();
    let x = g.input(batch.clips.clone());
    let y = g.gradient_reversal(x, lambda).unwrap();
    let forward_identity = bitwise_eq(&g.value(x).to_f64_vec(), &g.value(y).to_f64_vec());

    let rev = grads(&model, &batch, DomainCoupling::Reversal(lambda), Loss::Domain);
    let id = grads(&model, &batch, DomainCoupling::Identity, Loss::Domain);
    let scaled: Vec<f64> = id.features.iter().map(|&v| -lambda * v).collect();
    GrlOutcome {
        lambda,
        forward_identity,
        reversed_is_scaled: exactly_eq(&rev.features, &scaled),
        head_unchanged: bitwise_eq(&rev.domain, &id.domain),
        zero_at_lambda_zero: lambda != 0.0 || rev.features.iter().all(|&v| v == 0.0),
    }
}
