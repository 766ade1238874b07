//! Multi-run studies: train-then-sweep, training-data ratio curves and
//! finite-difference hyperparameter sensitivity.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::data::{subsample, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{Model, ModelBuilder};
use crate::report::{EvalReport, ReferenceSensitivity, SensitivityEntry, SensitivityReport};
use crate::rng;
use crate::CODE_VERSION;

use super::{sweep, train, HyperParams, TrainRecord};

/// Reference sensitivities measured on CIFAR-10 with ResNet-20 at
/// `(σ_train, β, L_n) = (0.25, 5, 0.01)`. Annotation only.
pub const REFERENCE_CIFAR10_SENSITIVITIES: [(&str, f64); 3] = [("sigma_train", 87.20), ("beta", 2.55), ("l_n", -28.89)];

const SUBSAMPLE_SALT: u64 = 0x5ab5_a3b1e;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub record: TrainRecord,
    pub report: EvalReport,
}

/// The part of `train_ds` a run with `hp` trains on: a seeded subsample when
/// `hp.train_ratio < 1`, the whole set otherwise.
pub fn training_subset<'a>(train_ds: &'a LabeledDataset, hp: &HyperParams) -> Result<Cow<'a, LabeledDataset>> {
    if hp.train_ratio < 1.0 {
        Ok(Cow::Owned(subsample(train_ds, hp.train_ratio, rng::derive(hp.seed, SUBSAMPLE_SALT))?))
    } else {
        Ok(Cow::Borrowed(train_ds))
    }
}

/// Builds a fresh model, trains it on `hp.train_ratio` of the training data
/// and sweeps the test set.
pub fn run_train_sweep(
    builder: ModelBuilder,
    arch_seed: u64,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    hp: &HyperParams,
    sigmas: &[f64],
    corruption_seed: u64,
) -> Result<RunOutcome> {
    hp.validate()?;
    let data = training_subset(train_ds, hp)?;
    let (model, record) = train(builder(arch_seed)?, &data, hp)?;
    let report = sweep(&model, test_ds, sigmas, corruption_seed, hp.lip.k_space, Some(hp))?;
    Ok(RunOutcome { model, record, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub sigma_test: f64,
    pub accuracy: f64,
}

/// For every ratio: a fresh model from `arch_seed`, a subset drawn with a
/// seed derived from `(hp.seed, ratio index)`, training with `hp`, and a
/// sweep over `sigmas`. A ratio of 1 uses the full dataset unchanged.
#[allow(clippy::too_many_arguments)]
pub fn ratio_study(
    builder: ModelBuilder,
    arch_seed: u64,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    ratios: &[f64],
    hp: &HyperParams,
    sigmas: &[f64],
    corruption_seed: u64,
) -> Result<Vec<RatioRow>> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::InvalidParam(format!("ratio {r} outside (0, 1]")));
    }
    let mut rows = Vec::with_capacity(ratios.len() * sigmas.len());
    for (i, &ratio) in ratios.iter().enumerate() {
        let subset = subsample(train_ds, ratio, rng::derive(hp.seed, i as u64))?;
        let (model, _) = train(builder(arch_seed)?, &subset, hp)?;
        let report = sweep(&model, test_ds, sigmas, corruption_seed, hp.lip.k_space, Some(hp))?;
        rows.extend(report.rows.iter().map(|r| RatioRow {
            ratio,
            sigma_test: r.sigma_test,
            accuracy: r.accuracy,
        }));
    }
    Ok(rows)
}

/// Step sizes for each perturbed hyperparameter; `None` skips it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityDeltas {
    pub sigma_train: Option<f64>,
    pub beta: Option<f64>,
    pub l_n: Option<f64>,
}

/// Trains the baseline once and one run per perturbed parameter, and reports
/// `Δacc / Δparam` with accuracy in percentage points at `sigma_eval`.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity(
    builder: ModelBuilder,
    arch_seed: u64,
    baseline: &HyperParams,
    deltas: SensitivityDeltas,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    sigma_eval: f64,
    corruption_seed: u64,
) -> Result<SensitivityReport> {
    let mut perturbed = Vec::new();
    for (name, delta) in [
        ("sigma_train", deltas.sigma_train),
        ("beta", deltas.beta),
        ("l_n", deltas.l_n),
    ] {
        let Some(delta) = delta else { continue };
        if delta == 0.0 || !delta.is_finite() {
            return Err(Error::InvalidParam(format!("delta for {name} must be finite and non-zero")));
        }
        let mut hp = baseline.clone();
        match name {
            "sigma_train" => hp.lip.sigma_train += delta,
            "beta" => hp.lip.beta += delta,
            _ => hp.lip.l_n += delta,
        }
        hp.validate()?;
        perturbed.push((name, delta, hp));
    }
    let accuracy = |hp: &HyperParams| -> Result<f64> {
        let run = run_train_sweep(builder, arch_seed, train_ds, test_ds, hp, &[sigma_eval], corruption_seed)?;
        Ok(100.0 * run.report.rows[0].accuracy)
    };
    let before = accuracy(baseline)?;
    let mut entries = Vec::with_capacity(perturbed.len());
    for (name, delta, hp) in &perturbed {
        entries.push(SensitivityEntry::new(name, *delta, before, accuracy(hp)?));
    }
    Ok(SensitivityReport {
        baseline: baseline.clone(),
        sigma_eval,
        entries,
        reference: REFERENCE_CIFAR10_SENSITIVITIES
            .iter()
            .map(|&(param, value)| ReferenceSensitivity {
                param: param.to_string(),
                value,
                note: "published CIFAR-10 ResNet-20 value at (0.25, 5, 0.01); reference only, not reproduced".into(),
            })
            .collect(),
        code_version: CODE_VERSION.to_string(),
    })
}
