//! Post-hoc domain probe: how well a fresh domain classifier separates
//! source from target given frozen feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::init::init_parameters;
use crate::nn::{Activation, LinearLayer};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::train::optim::{sgd_update, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: [usize; 2],
    /// Full-batch gradient steps per fold.
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub folds: usize,
    pub seed: u64,
    /// Rescale every feature to zero mean and unit variance (fit on the
    /// training fold) before the classifier sees it. Off by default, so the
    /// probe reads the features exactly as the domain head does.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 32],
            epochs: 200,
            lr: 0.05,
            momentum: 0.9,
            folds: 2,
            seed: 0,
            standardize: false,
        }
    }
}

struct Mlp {
    layers: [LinearLayer; 3],
    store: ParamStore<f64>,
}

impl Mlp {
    fn new(dim: usize, hidden: [usize; 2], seed: u64) -> Self {
        let mut store = ParamStore::new();
        let layers = [
            LinearLayer::new(&mut store, "probe.fc1", ParamGroup::Domain, dim, hidden[0]),
            LinearLayer::new(&mut store, "probe.fc2", ParamGroup::Domain, hidden[0], hidden[1]),
            LinearLayer::new(&mut store, "probe.fc3", ParamGroup::Domain, hidden[1], 1),
        ];
        for (i, l) in layers.iter().enumerate() {
            init_parameters(l, &mut store, seed.wrapping_add(i as u64));
        }
        Self { layers, store }
    }

    fn logits(&self, g: &mut Graph<f64>, x: Tensor<f64>) -> Result<crate::graph::Var> {
        let mut h = g.input(x);
        let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
        for (l, act) in self.layers.iter().zip(acts) {
            h = l.forward(g, &self.store, h, act)?;
        }
        Ok(h)
    }
}

fn matrix(rows: &[&[f64]], mean: &[f64], std: &[f64]) -> Result<Tensor<f64>> {
    let dim = mean.len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend(r.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s));
    }
    Tensor::new(&[rows.len(), dim], data)
}

/// Balanced held-out accuracy of a 3-layer MLP domain classifier trained on
/// the features (optionally standardized) with `folds`-fold cross-validation.
/// Fold membership is the sample index modulo `folds`, within each domain.
pub fn post_hoc_domain_probe(source: &[Vec<f64>], target: &[Vec<f64>], cfg: &ProbeConfig) -> Result<f64> {
    if cfg.folds < 2 || source.len() < cfg.folds || target.len() < cfg.folds {
        return Err(Error::invalid(format!(
            "probe needs at least {} samples per domain, got {} source / {} target",
            cfg.folds.max(2),
            source.len(),
            target.len()
        )));
    }
    let dim = source[0].len();
    if dim == 0 || source.iter().chain(target).any(|r| r.len() != dim) {
        return Err(Error::shape("probe features must share one non-zero dimension"));
    }
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for fold in 0..cfg.folds {
        let mut train_x: Vec<&[f64]> = Vec::new();
        let mut train_y: Vec<u8> = Vec::new();
        let mut held: Vec<(&[f64], u8)> = Vec::new();
        for (label, pool) in [(0u8, source), (1u8, target)] {
            for (i, row) in pool.iter().enumerate() {
                if i % cfg.folds == fold {
                    held.push((row, label));
                } else {
                    train_x.push(row);
                    train_y.push(label);
                }
            }
        }
        let n = train_x.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| {
                if cfg.standardize {
                    train_x.iter().map(|r| r[j]).sum::<f64>() / n
                } else {
                    0.0
                }
            })
            .collect();
        let std: Vec<f64> = (0..dim)
            .map(|j| {
                let var = train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if cfg.standardize && var.sqrt() > 1e-8 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = matrix(&train_x, &mean, &std)?;
        let mut mlp = Mlp::new(dim, cfg.hidden, cfg.seed.wrapping_mul(31).wrapping_add(fold as u64));
        let mut opt = OptimizerState::new(&mlp.store);
        for _ in 0..cfg.epochs {
            let mut g = Graph::new();
            let logits = mlp.logits(&mut g, x.clone())?;
            let loss = g.bce_with_logits(logits, &train_y)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("domain probe loss".into()));
            }
            g.backward(loss)?;
            mlp.store.zero_grads();
            mlp.store.accumulate_grads(&g);
            sgd_update(&mut mlp.store, &mut opt, cfg.lr, cfg.momentum, &ParamGroup::ALL)?;
        }
        let rows: Vec<&[f64]> = held.iter().map(|(r, _)| *r).collect();
        let mut g = Graph::new();
        let logits = mlp.logits(&mut g, matrix(&rows, &mean, &std)?)?;
        for (&z, &(_, label)) in g.value(logits).data().iter().zip(&held) {
            let pred = u8::from(z > 0.0);
            total[label as usize] += 1;
            correct[label as usize] += usize::from(pred == label);
        }
    }
    Ok(0.5 * (correct[0] as f64 / total[0] as f64 + correct[1] as f64 / total[1] as f64))
}
