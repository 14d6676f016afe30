//! Domain-adversarial training and the source-only baseline.
//!
//! Every step forwards one half-source/half-target batch through the shared
//! feature extractor. The action head sees only the source rows; the domain
//! head sees all rows behind a gradient-reversal node. Backpropagating
//! `L_a + L_d` then gives the domain head the plain domain gradient and the
//! feature extractor `∂L_a − λ·∂L_d`.

mod optim;
mod probe;
mod schedule;

pub use optim::{sgd_update, OptimizerState};
pub use probe::{post_hoc_domain_probe, ProbeConfig};
pub use schedule::{lambda_schedule, lr_schedule, progress};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{epoch_seed, make_batches, BatchPlan, Clip, DatasetSplit, TrainingBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{DiNetModel, DomainCoupling};
use crate::nn::Mode;
use crate::params::ParamGroup;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Dann,
    SourceOnly,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dann" => Ok(TrainMode::Dann),
            "source-only" | "source_only" => Ok(TrainMode::SourceOnly),
            _ => Err(Error::invalid(format!("unknown mode {s:?} (expected dann or source-only)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Dann => "dann",
            TrainMode::SourceOnly => "source-only",
        })
    }
}

/// `α_p = α₀ / (1 + a·p)^b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrAnneal {
    pub a: f64,
    pub b: f64,
}

impl Default for LrAnneal {
    fn default() -> Self {
        Self { a: 10.0, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_anneal: LrAnneal,
    pub lambda_gain: f64,
    /// Constant λ instead of the progress schedule.
    pub lambda_fixed: Option<f64>,
    pub seed: u64,
    pub mode: TrainMode,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            base_lr: 0.07,
            momentum: 0.9,
            lr_anneal: LrAnneal::default(),
            lambda_gain: 10.0,
            lambda_fixed: None,
            seed: 0,
            mode: TrainMode::Dann,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and positive, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_anneal.a > 0.0 && self.lr_anneal.b > 0.0) {
            return bad(format!("lr_anneal parameters must be positive, got {:?}", self.lr_anneal));
        }
        if !(self.lambda_gain > 0.0 && self.lambda_gain.is_finite()) {
            return bad(format!("lambda_gain must be positive, got {}", self.lambda_gain));
        }
        if let Some(l) = self.lambda_fixed {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda_fixed must be non-negative, got {l}"));
            }
        }
        Ok(())
    }

    /// λ used at progress `p` in DANN mode.
    pub fn lambda_at(&self, p: f64) -> Result<f64> {
        match self.lambda_fixed {
            Some(l) => Ok(l),
            None => lambda_schedule(p, self.lambda_gain),
        }
    }

    pub fn lr_at(&self, p: f64) -> Result<f64> {
        lr_schedule(p, self.base_lr, self.lr_anneal.a, self.lr_anneal.b)
    }

    /// Parameter groups updated by the optimizer; the baseline freezes the
    /// domain head.
    pub fn trainable_groups(&self) -> &'static [ParamGroup] {
        match self.mode {
            TrainMode::Dann => &ParamGroup::ALL,
            TrainMode::SourceOnly => &[ParamGroup::Features, ParamGroup::Action],
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub p: f64,
    pub lambda: f64,
    pub lr: f64,
    pub loss_action: f64,
    pub loss_domain: f64,
    /// `loss_action − lambda·loss_domain`.
    pub objective: f64,
}

pub const HISTORY_HEADER: &str = "step,epoch,p,lambda,lr,loss_action,loss_domain,objective_F";

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.p, r.lambda, r.lr, r.loss_action, r.loss_domain, r.objective
        );
    }
    s
}

pub fn parse_history_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::invalid("history is missing its header row"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("malformed history row {line:?}"));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                p: num(2)?,
                lambda: num(3)?,
                lr: num(4)?,
                loss_action: num(5)?,
                loss_domain: num(6)?,
                objective: num(7)?,
            })
        })
        .collect()
}

/// Hash of one epoch's batch stream: the clip ids of every batch in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochHash {
    pub epoch: usize,
    pub hash: String,
}

pub fn batch_stream_hash(plans: &[BatchPlan], source: &[Clip], target: &[Clip]) -> String {
    let mut h = Sha256::new();
    for plan in plans {
        for &i in &plan.source {
            h.update(source[i].id.as_bytes());
            h.update(b",");
        }
        h.update(b"|");
        for &i in &plan.target {
            h.update(target[i].id.as_bytes());
            h.update(b",");
        }
        h.update(b";");
    }
    hex::encode(h.finalize())
}

pub fn batch_hashes_csv(hashes: &[EpochHash]) -> String {
    let mut s = String::from("epoch,hash\n");
    for e in hashes {
        let _ = writeln!(s, "{},{}", e.epoch, e.hash);
    }
    s
}

/// Losses of one step before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub action: f64,
    pub domain: f64,
}

/// Runs forward and backward for one batch and leaves the gradients of
/// `L_a + L_d` (DANN) or `L_a` (baseline) in `model.params`.
///
/// `coupling` chooses what sits between the features and the domain head.
pub fn accumulate_step_gradients<T: Scalar>(
    model: &mut DiNetModel<T>,
    batch: &TrainingBatch<T>,
    coupling: DomainCoupling,
    mode: TrainMode,
) -> Result<StepLosses> {
    batch.check_composition()?;
    let mut g = Graph::new();
    let x = g.input(batch.clips.clone());
    let features = model.forward_features(&mut g, x, Mode::Train)?;
    let source = g.rows(features, 0, batch.n_source)?;
    let logits = model.forward_action(&mut g, source)?;
    let loss_action = g.softmax_cross_entropy(logits, &batch.source_labels)?;
    let domain_logits = model.forward_domain_with(&mut g, features, coupling)?;
    let loss_domain = g.bce_with_logits(domain_logits, &batch.domain_labels())?;
    let losses = StepLosses {
        action: g.value(loss_action).item().as_f64(),
        domain: g.value(loss_domain).item().as_f64(),
    };
    let total = match mode {
        TrainMode::Dann => g.add(loss_action, loss_domain)?,
        TrainMode::SourceOnly => loss_action,
    };
    g.backward(total)?;
    model.params.zero_grads();
    model.params.accumulate_grads(&g);
    Ok(losses)
}

/// One optimization step: gradients of the batch, finite check, momentum
/// update of the trainable groups, gradients zeroed.
pub fn dann_step<T: Scalar>(
    model: &mut DiNetModel<T>,
    batch: &TrainingBatch<T>,
    lambda: f64,
    lr: f64,
    cfg: &TrainConfig,
    optimizer: &mut OptimizerState<T>,
) -> Result<StepLosses> {
    let lambda = match cfg.mode {
        TrainMode::Dann => lambda,
        TrainMode::SourceOnly => 0.0,
    };
    let losses = accumulate_step_gradients(model, batch, DomainCoupling::Reversal(lambda), cfg.mode)?;
    if !losses.action.is_finite() || !losses.domain.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            lambda,
            lr,
            what: format!("loss_action={} loss_domain={}", losses.action, losses.domain),
        });
    }
    sgd_update(&mut model.params, optimizer, lr, cfg.momentum, cfg.trainable_groups())?;
    model.params.zero_grads();
    Ok(losses)
}

pub fn steps_per_epoch(n_source: usize, n_target: usize, batch_size: usize) -> usize {
    n_source.min(n_target) / (batch_size / 2).max(1)
}

/// Everything needed to continue a run: model, momentum, progress, history.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: DiNetModel<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed steps.
    pub step: usize,
    pub history: Vec<LossRecord>,
    pub batch_hashes: Vec<EpochHash>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: DiNetModel<T>) -> Self {
        let optimizer = OptimizerState::new(&model.params);
        Self {
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
            batch_hashes: Vec::new(),
        }
    }

    pub fn total_steps(data: &DatasetSplit, cfg: &TrainConfig) -> usize {
        cfg.epochs * steps_per_epoch(data.train_source.len(), data.train_target.len(), cfg.batch_size)
    }

    pub fn is_complete(&self, data: &DatasetSplit, cfg: &TrainConfig) -> bool {
        self.step >= Self::total_steps(data, cfg)
    }

    /// Trains until the run is complete or `stop_after` total steps have been
    /// completed, whichever comes first.
    pub fn run(&mut self, data: &DatasetSplit, cfg: &TrainConfig, stop_after: Option<usize>) -> Result<()> {
        cfg.validate()?;
        let source = &data.train_source;
        let target = data.unlabeled_target();
        let spe = steps_per_epoch(source.len(), target.len(), cfg.batch_size);
        if spe == 0 {
            return Err(Error::invalid(format!(
                "{} source / {} target training clips cannot fill one batch of {}",
                source.len(),
                target.len(),
                cfg.batch_size
            )));
        }
        let total = cfg.epochs * spe;
        let end = stop_after.map_or(total, |s| s.min(total));
        let half = cfg.batch_size / 2;
        while self.step < end {
            let epoch = self.step / spe;
            let plans = make_batches(source, &target, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
            if !self.batch_hashes.iter().any(|h| h.epoch == epoch) {
                self.batch_hashes.push(EpochHash {
                    epoch,
                    hash: batch_stream_hash(&plans, source, &target),
                });
            }
            for plan in &plans[self.step % spe..] {
                if self.step >= end {
                    break;
                }
                let batch = TrainingBatch::<T>::assemble(plan, source, &target)?;
                if batch.n_source != half || batch.n_target != half {
                    return Err(Error::invalid(format!(
                        "step {}: batch holds {} source and {} target clips, expected {half} each",
                        self.step, batch.n_source, batch.n_target
                    )));
                }
                let p = progress(self.step, total);
                let lambda = match cfg.mode {
                    TrainMode::Dann => cfg.lambda_at(p)?,
                    TrainMode::SourceOnly => 0.0,
                };
                let lr = cfg.lr_at(p)?;
                let losses = dann_step(&mut self.model, &batch, lambda, lr, cfg, &mut self.optimizer).map_err(
                    |e| match e {
                        Error::Diverged { lambda, lr, what, .. } => Error::Diverged {
                            step: self.step,
                            lambda,
                            lr,
                            what,
                        },
                        other => other,
                    },
                )?;
                self.history.push(LossRecord {
                    step: self.step,
                    epoch,
                    p,
                    lambda,
                    lr,
                    loss_action: losses.action,
                    loss_domain: losses.domain,
                    objective: losses.action - lambda * losses.domain,
                });
                self.step += 1;
            }
        }
        Ok(())
    }

    pub fn write_history(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("history.csv"), history_csv(&self.history))?;
        std::fs::write(dir.join("batch_hashes.csv"), batch_hashes_csv(&self.batch_hashes))?;
        Ok(())
    }
}

/// Full run in the mode given by `cfg`.
pub fn train<T: Scalar>(model: DiNetModel<T>, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::new(model);
    state.run(data, cfg, None)?;
    Ok(state)
}

/// The control arm: the same loop and batch stream with λ = 0, the domain
/// loss excluded from the update and the domain head frozen.
pub fn train_source_only<T: Scalar>(
    model: DiNetModel<T>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainState<T>> {
    let cfg = TrainConfig {
        mode: TrainMode::SourceOnly,
        ..cfg.clone()
    };
    train(model, data, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_roundtrip() {
        let h = vec![LossRecord {
            step: 3,
            epoch: 0,
            p: 0.1,
            lambda: 0.4621171572600098,
            lr: 0.0084,
            loss_action: 1.2345678901234567,
            loss_domain: 0.6931,
            objective: 1.2345678901234567 - 0.4621171572600098 * 0.6931,
        }];
        assert_eq!(parse_history_csv(&history_csv(&h)).unwrap(), h);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let odd = TrainConfig {
            batch_size: 7,
            ..TrainConfig::default()
        };
        assert!(odd.validate().is_err());
        let m = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("source-only".parse::<TrainMode>().unwrap(), TrainMode::SourceOnly);
        assert_eq!(TrainMode::Dann.to_string(), "dann");
        assert!("adam".parse::<TrainMode>().is_err());
    }
}
