//! Training loop and the noise-robustness evaluation protocol.

mod eval;
mod optim;
mod study;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use eval::{evaluate, sweep, EvalResult};
pub use optim::OptimizerConfig;
pub use study::{
    ratio_study, run_train_sweep, sensitivity, training_subset, RatioRow, RunOutcome, SensitivityDeltas, REFERENCE_CIFAR10_SENSITIVITIES,
};

use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lipschitz::{aggregated_loss, AggregatedLoss, LipschitzParams};
use crate::nn::{argmax_rows, BoundParams, Model};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

use optim::Optimizer;

/// Multiply the learning rate by `factor` once epoch `epoch` has finished.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lip: LipschitzParams,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_drops: Vec<LrDrop>,
    #[serde(default = "one")]
    pub train_ratio: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

fn one() -> f64 {
    1.0
}

impl HyperParams {
    /// The MNIST protocol: 5 epochs of batch 100 at learning rate 1e-4.
    pub fn mnist(lip: LipschitzParams, seed: u64) -> Self {
        Self {
            lip,
            lr: 1e-4,
            epochs: 5,
            batch_size: 100,
            lr_drops: Vec::new(),
            train_ratio: 1.0,
            seed,
            optimizer: OptimizerConfig::adam(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lip.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam("epochs and batch_size must be positive".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::InvalidParam(format!("train_ratio {} outside (0, 1]", self.train_ratio)));
        }
        let mut prev = 0;
        for d in &self.lr_drops {
            if d.epoch <= prev || d.epoch > self.epochs {
                return Err(Error::InvalidParam(format!(
                    "lr_drops epochs must be strictly increasing within [1, {}]",
                    self.epochs
                )));
            }
            if !(d.factor > 0.0 && d.factor.is_finite()) {
                return Err(Error::InvalidParam(format!("lr drop factor must be positive, got {}", d.factor)));
            }
            prev = d.epoch;
        }
        if let OptimizerConfig::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::InvalidParam(format!("momentum {momentum} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|d| d.epoch < epoch)
            .fold(self.lr, |lr, d| lr * d.factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub l_usual: f64,
    pub l_lipschitz: f64,
    /// Absent for standard training.
    pub mean_k: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Perturbed forward passes recorded over the whole run.
    pub perturbed_passes: u64,
}

impl TrainRecord {
    /// Mean of the logged `k` over the final epoch.
    pub fn final_mean_k(&self) -> Option<f64> {
        let last = self.steps.last()?.epoch;
        let ks: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == last)
            .filter_map(|s| s.mean_k)
            .collect();
        (!ks.is_empty()).then(|| ks.iter().sum::<f64>() / ks.len() as f64)
    }
}

/// The per-batch loss a training run minimizes.
pub trait Objective {
    fn loss(
        &mut self,
        model: &Model,
        graph: &mut Graph,
        params: &BoundParams,
        images: &Tensor,
        labels: &[usize],
        rng: &mut Rng,
    ) -> Result<AggregatedLoss>;
}

/// Cross-entropy plus the Lipschitz hinge penalty.
#[derive(Clone, Copy, Debug)]
pub struct LipschitzObjective(pub LipschitzParams);

impl Objective for LipschitzObjective {
    fn loss(
        &mut self,
        model: &Model,
        graph: &mut Graph,
        params: &BoundParams,
        images: &Tensor,
        labels: &[usize],
        rng: &mut Rng,
    ) -> Result<AggregatedLoss> {
        aggregated_loss(model, graph, params, images, labels, &self.0, rng)
    }
}

/// Trains on the aggregated loss. Deterministic given `hp.seed`.
pub fn train(model: Model, ds: &LabeledDataset, hp: &HyperParams) -> Result<(Model, TrainRecord)> {
    train_with(model, ds, hp, &mut LipschitzObjective(hp.lip))
}

/// Trains with a caller-supplied objective. `hp.train_ratio` is not applied
/// here; see [`run_train_sweep`].
pub fn train_with(
    mut model: Model,
    ds: &LabeledDataset,
    hp: &HyperParams,
    objective: &mut dyn Objective,
) -> Result<(Model, TrainRecord)> {
    hp.validate()?;
    if ds.is_empty() {
        return Err(crate::error::DataError::Empty.into());
    }
    let mut optimizer = Optimizer::new(&hp.optimizer, &model);
    let mut noise_rng = rng::stream(hp.seed, streams::NOISE);
    let mut record = TrainRecord::default();
    let mut step = 0;
    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        let lr = hp.lr_at(epoch);
        let mut correct = 0usize;
        for batch in batches(ds, hp.batch_size, rng::derive(hp.seed, epoch as u64)) {
            let mut graph = Graph::new();
            let params = model.bind(&mut graph);
            let parts = objective.loss(&model, &mut graph, &params, &batch.images, &batch.labels, &mut noise_rng)?;
            let loss = graph.item(parts.total)?;
            if !loss.is_finite() || !parts.usual.is_finite() || !parts.lipschitz.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    usual: parts.usual,
                    lipschitz: parts.lipschitz,
                });
            }
            let pred = argmax_rows(graph.value(parts.clean.probs));
            correct += pred.labels.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
            graph.backward(parts.total)?;
            let grads: Vec<&[f64]> = params
                .0
                .iter()
                .map(|&v| graph.grad(v).expect("parameters track gradients"))
                .collect();
            optimizer.step(&mut model, &grads, lr);
            record.perturbed_passes += parts.perturbed_passes as u64;
            record.steps.push(StepRecord {
                step,
                epoch,
                loss,
                l_usual: parts.usual,
                l_lipschitz: parts.lipschitz,
                mean_k: parts.k.as_ref().map(|k| k.mean),
            });
            step += 1;
        }
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_acc: correct as f64 / ds.len() as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let mut hp = HyperParams::mnist(LipschitzParams::standard(), 0);
        hp.epochs = 300;
        hp.lr = 0.1;
        hp.lr_drops = vec![LrDrop { epoch: 150, factor: 0.1 }, LrDrop { epoch: 225, factor: 0.1 }];
        hp.validate().unwrap();
        assert_eq!(hp.lr_at(1), 0.1);
        assert_eq!(hp.lr_at(150), 0.1);
        assert!((hp.lr_at(151) - 0.01).abs() < 1e-15);
        assert!((hp.lr_at(300) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparams() {
        let base = HyperParams::mnist(LipschitzParams::standard(), 0);
        let mut hp = base.clone();
        hp.lr_drops = vec![LrDrop { epoch: 3, factor: 0.1 }, LrDrop { epoch: 2, factor: 0.1 }];
        assert!(hp.validate().is_err());
        let mut hp = base.clone();
        hp.lr_drops = vec![LrDrop { epoch: 6, factor: 0.1 }];
        assert!(hp.validate().is_err());
        let mut hp = base.clone();
        hp.lr = 0.0;
        assert!(hp.validate().is_err());
        let mut hp = base;
        hp.train_ratio = 0.0;
        assert!(hp.validate().is_err());
    }
}
