use serde::{Deserialize, Serialize};

use crate::data::{corrupt, LabeledDataset};
use crate::error::{DataError, Error, Result};
use crate::graph::NORM_EPS;
use crate::lipschitz::KSpace;
use crate::nn::{argmax_rows, Model};
use crate::report::{model_hash, EvalReport, EvalRow, ReportMetadata, ASSUMPTIONS};
use crate::rng;
use crate::tensor::Tensor;
use crate::CODE_VERSION;

use super::HyperParams;

const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean top probability over correctly classified samples; 0 if none.
    pub mean_confidence_on_correct: f64,
    pub n: usize,
}

/// Per-chunk `(logits, probabilities)` for a whole image tensor.
fn outputs_chunked(model: &Model, images: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
    let n = images.shape()[0];
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|start| {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            Ok(model.outputs(&images.gather_rows(&rows)?)?)
        })
        .collect()
}

fn score(chunks: &[(Tensor, Tensor)], labels: &[usize]) -> EvalResult {
    let mut correct = 0usize;
    let mut confidence = 0.0;
    let mut offset = 0;
    for (_, probs) in chunks {
        let pred = argmax_rows(probs);
        for (i, (&l, &c)) in pred.labels.iter().zip(&pred.confidences).enumerate() {
            if l == labels[offset + i] {
                correct += 1;
                confidence += c;
            }
        }
        offset += pred.labels.len();
    }
    EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        mean_confidence_on_correct: if correct > 0 { confidence / correct as f64 } else { 0.0 },
        n: labels.len(),
    }
}

/// Argmax accuracy and mean confidence on correctly classified samples.
pub fn evaluate(model: &Model, ds: &LabeledDataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    Ok(score(&outputs_chunked(model, &ds.images)?, &ds.labels))
}

/// Seed of the corrupted test copy for one noise level; fixed per
/// `(corruption_seed, sigma)` so every model sees the same images.
pub(crate) fn corruption_seed_for(corruption_seed: u64, sigma: f64) -> u64 {
    rng::derive(corruption_seed, sigma.to_bits())
}

/// Evaluates on a fixed-seed corrupted copy of the test set for every
/// `sigma`. `mean_k` is the mean quotient between outputs on the corrupted
/// and the clean images, measured in `space`.
pub fn sweep(
    model: &Model,
    clean_test: &LabeledDataset,
    sigmas: &[f64],
    corruption_seed: u64,
    space: KSpace,
    hyperparams: Option<&HyperParams>,
) -> Result<EvalReport> {
    if sigmas.is_empty() {
        return Err(Error::InvalidParam("sigma grid is empty".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(DataError::NegativeSigma(*s).into());
    }
    if clean_test.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let clean_out = outputs_chunked(model, &clean_test.images)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for &sigma in &sorted {
        let corrupted = corrupt(clean_test, sigma, corruption_seed_for(corruption_seed, sigma))?;
        let out = if sigma == 0.0 {
            clean_out.clone()
        } else {
            outputs_chunked(model, &corrupted.images)?
        };
        let res = score(&out, &clean_test.labels);
        let mean_k = if sigma == 0.0 {
            0.0
        } else {
            mean_quotient(&clean_out, &out, &clean_test.images, &corrupted.images, space)
        };
        rows.push(EvalRow {
            sigma_test: sigma,
            accuracy: res.accuracy,
            mean_confidence_correct: res.mean_confidence_on_correct,
            mean_k,
            n: res.n,
        });
    }
    Ok(EvalReport {
        rows,
        metadata: ReportMetadata {
            hyperparams: hyperparams.cloned(),
            model: model.name().to_string(),
            model_hash: model_hash(model),
            dataset: clean_test.provenance.clone(),
            corruption_seed,
            code_version: CODE_VERSION.to_string(),
            assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        },
    })
}

fn mean_quotient(
    clean: &[(Tensor, Tensor)],
    noisy: &[(Tensor, Tensor)],
    clean_images: &Tensor,
    noisy_images: &Tensor,
    space: KSpace,
) -> f64 {
    let pick = |pair: &(Tensor, Tensor)| -> Vec<f64> {
        match space {
            KSpace::Probabilities => pair.1.data().to_vec(),
            KSpace::Logits => pair.0.data().to_vec(),
        }
    };
    let f_clean: Vec<f64> = clean.iter().flat_map(pick).collect();
    let f_noisy: Vec<f64> = noisy.iter().flat_map(pick).collect();
    let n = clean_images.shape()[0];
    let width = f_clean.len() / n;
    let dim = clean_images.row_len();
    let total: f64 = (0..n)
        .map(|i| {
            let num: f64 = f_clean[i * width..(i + 1) * width]
                .iter()
                .zip(&f_noisy[i * width..(i + 1) * width])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = clean_images.data()[i * dim..(i + 1) * dim]
                .iter()
                .zip(&noisy_images.data()[i * dim..(i + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            num / den.max(NORM_EPS)
        })
        .sum();
    total / n as f64
}
