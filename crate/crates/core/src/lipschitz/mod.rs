//! The Lipschitz regularizer: Gaussian input perturbation, the perturbed
//! quotient `k(x) = ‖f(x̄) − f(x)‖ / ‖x̄ − x‖`, the hinge penalty
//! `β · max(0, k − L_n)` and the aggregated training loss.

mod guarantee;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use guarantee::{
    compute_rho, guarantee, guarantee_for, one_hot_labels, probe_outside_radius, verify_radius_synthetic,
    GuaranteeReport, LipschitzClassifier, RampClassifier,
};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, NORM_EPS};
use crate::nn::{BoundParams, ForwardOutput, Model};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

/// Which network output the quotient measures distances in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSpace {
    /// Post-softmax probability rows.
    #[default]
    Probabilities,
    /// Pre-softmax scores.
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzParams {
    /// Std of the training perturbation, in [0, 1] pixel units.
    pub sigma_train: f64,
    /// Penalty weight; zero selects standard training.
    pub beta: f64,
    /// Target Lipschitz constant.
    pub l_n: f64,
    #[serde(default)]
    pub k_space: KSpace,
}

impl LipschitzParams {
    pub fn new(sigma_train: f64, beta: f64, l_n: f64) -> Self {
        Self {
            sigma_train,
            beta,
            l_n,
            k_space: KSpace::default(),
        }
    }

    /// Plain cross-entropy training. `sigma_train` and `l_n` are inert.
    pub fn standard() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub fn is_standard(&self) -> bool {
        self.beta == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.sigma_train.is_finite() && self.beta.is_finite() && self.l_n.is_finite();
        if !finite || self.sigma_train < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidParam(format!(
                "sigma_train and beta must be finite and non-negative, got {self:?}"
            )));
        }
        if self.l_n <= 0.0 {
            return Err(Error::InvalidParam(format!("l_n must be positive, got {}", self.l_n)));
        }
        if self.beta > 0.0 && self.sigma_train <= 0.0 {
            return Err(Error::InvalidParam("sigma_train must be positive when beta > 0".into()));
        }
        Ok(())
    }
}

/// Summary of per-sample quotients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KStatistics {
    pub per_sample_k: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub fraction_exceeding_l_n: f64,
}

impl KStatistics {
    pub fn from_values(per_sample_k: Vec<f64>, l_n: f64) -> Self {
        let n = per_sample_k.len().max(1) as f64;
        let mean = per_sample_k.iter().sum::<f64>() / n;
        let max = per_sample_k.iter().copied().fold(0.0, f64::max);
        let exceeding = per_sample_k.iter().filter(|&&k| k > l_n).count() as f64;
        Self {
            per_sample_k,
            mean,
            max,
            fraction_exceeding_l_n: exceeding / n,
        }
    }
}

/// A perturbed copy of an input together with the noise that produced it.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub perturbed: Tensor,
    pub noise: Tensor,
}

/// `x̄ = x + N(0, σ)` per component. No clipping is applied.
pub fn perturb(x: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Perturbation> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidParam(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Perturbation {
            perturbed: x.clone(),
            noise: Tensor::zeros(x.shape()),
        });
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut noise = Tensor::zeros(x.shape());
    noise.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
    let mut perturbed = x.clone();
    perturbed
        .data_mut()
        .iter_mut()
        .zip(noise.data())
        .for_each(|(p, n)| *p += n);
    Ok(Perturbation { perturbed, noise })
}

fn output_var(out: &ForwardOutput, space: KSpace) -> Var {
    match space {
        KSpace::Probabilities => out.probs,
        KSpace::Logits => out.logits,
    }
}

/// Per-sample inverse noise norms, guarded away from zero.
fn inverse_norms(noise: &Tensor) -> Vec<f64> {
    noise
        .data()
        .chunks(noise.row_len())
        .map(|r| 1.0 / r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS))
        .collect()
}

/// A differentiable batch of quotients plus the clean forward pass that
/// produced their reference outputs.
#[derive(Clone, Debug)]
pub struct KEstimate {
    /// Shape `[batch]`.
    pub k: Var,
    pub clean: ForwardOutput,
    pub stats: KStatistics,
}

/// Records clean and perturbed forward passes and the per-sample quotient.
/// Gradients flow through both passes; the denominator is a constant.
#[allow(clippy::too_many_arguments)]
pub fn estimate_k(
    model: &Model,
    graph: &mut Graph,
    params: &BoundParams,
    x: &Tensor,
    sigma: f64,
    l_n: f64,
    space: KSpace,
    rng: &mut Rng,
) -> Result<KEstimate> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "the quotient needs sigma > 0, got {sigma}"
        )));
    }
    let p = perturb(x, sigma, rng)?;
    let xv = graph.constant(x.clone());
    let xbar = graph.constant(p.perturbed);
    let clean = model.forward(graph, params, xv)?;
    let noisy = model.forward(graph, params, xbar)?;
    let diff = graph.sub(output_var(&noisy, space), output_var(&clean, space))?;
    let numerator = graph.row_l2_norm(diff)?;
    let k = graph.mul_const(numerator, &inverse_norms(&p.noise))?;
    let stats = KStatistics::from_values(graph.data(k).to_vec(), l_n);
    Ok(KEstimate { k, clean, stats })
}

/// `mean_i β · max(0, k_i − L_n)` as a graph value.
pub fn lipschitz_loss(graph: &mut Graph, k: Var, params: &LipschitzParams) -> Result<Var> {
    let shifted = graph.add_scalar(k, -params.l_n)?;
    let hinge = graph.relu(shifted)?;
    let mean = graph.mean(hinge)?;
    Ok(graph.scale(mean, params.beta)?)
}

/// Plain-number version of [`lipschitz_loss`].
pub fn hinge_penalty(k: &[f64], params: &LipschitzParams) -> f64 {
    let total: f64 = k.iter().map(|&ki| params.beta * (ki - params.l_n).max(0.0)).sum();
    total / k.len().max(1) as f64
}

/// `L = L_usual + L_Lipschitz` for one batch.
#[derive(Clone, Debug)]
pub struct AggregatedLoss {
    pub total: Var,
    pub usual: f64,
    pub lipschitz: f64,
    pub clean: ForwardOutput,
    /// Present only when the penalty is active (β > 0).
    pub k: Option<KStatistics>,
    /// Perturbed forward passes recorded for this batch.
    pub perturbed_passes: usize,
}

/// Cross-entropy on the clean batch plus the hinge penalty. With β = 0 the
/// perturbed pass is skipped and the total is the cross-entropy node itself.
#[allow(clippy::too_many_arguments)]
pub fn aggregated_loss(
    model: &Model,
    graph: &mut Graph,
    params: &BoundParams,
    x: &Tensor,
    labels: &[usize],
    lip: &LipschitzParams,
    rng: &mut Rng,
) -> Result<AggregatedLoss> {
    if lip.is_standard() {
        let xv = graph.constant(x.clone());
        let clean = model.forward(graph, params, xv)?;
        let ce = graph.cross_entropy(clean.probs, labels)?;
        return Ok(AggregatedLoss {
            total: ce,
            usual: graph.item(ce)?,
            lipschitz: 0.0,
            clean,
            k: None,
            perturbed_passes: 0,
        });
    }
    let est = estimate_k(model, graph, params, x, lip.sigma_train, lip.l_n, lip.k_space, rng)?;
    let ce = graph.cross_entropy(est.clean.probs, labels)?;
    let penalty = lipschitz_loss(graph, est.k, lip)?;
    let total = graph.add(ce, penalty)?;
    Ok(AggregatedLoss {
        total,
        usual: graph.item(ce)?,
        lipschitz: graph.item(penalty)?,
        clean: est.clean,
        k: Some(est.stats),
        perturbed_passes: 1,
    })
}

/// Quotients between paired clean and distorted batches, without gradients.
/// A zero distortion yields `k = 0`.
pub fn quotients(model: &Model, clean: &Tensor, distorted: &Tensor, space: KSpace) -> Result<Vec<f64>> {
    let pick = |(logits, probs): (Tensor, Tensor)| match space {
        KSpace::Probabilities => probs,
        KSpace::Logits => logits,
    };
    let a = pick(model.outputs(clean)?);
    let b = pick(model.outputs(distorted)?);
    let width = a.row_len();
    let dist = clean.row_len();
    Ok(a.data()
        .chunks(width)
        .zip(b.data().chunks(width))
        .zip(clean.data().chunks(dist).zip(distorted.data().chunks(dist)))
        .map(|((fa, fb), (xa, xb))| {
            let num = fa.iter().zip(fb).map(|(p, q)| (q - p) * (q - p)).sum::<f64>().sqrt();
            let den = xa.iter().zip(xb).map(|(p, q)| (q - p) * (q - p)).sum::<f64>().sqrt();
            num / den.max(NORM_EPS)
        })
        .collect())
}

const AUDIT_CHUNK: usize = 500;

/// Bulk, non-differentiable evaluation of `k` on the first `n` images.
/// Each chunk of samples draws its noise from its own seeded stream.
pub fn audit_empirical_k(
    model: &Model,
    images: &Tensor,
    sigma: f64,
    n: usize,
    l_n: f64,
    space: KSpace,
    seed: u64,
) -> Result<KStatistics> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidParam(format!("audit needs sigma > 0, got {sigma}")));
    }
    let n = n.min(images.shape()[0]);
    let mut ks = Vec::with_capacity(n);
    for (chunk, start) in (0..n).step_by(AUDIT_CHUNK).enumerate() {
        let rows: Vec<usize> = (start..(start + AUDIT_CHUNK).min(n)).collect();
        let x = images.gather_rows(&rows)?;
        let mut rng = rng::stream(rng::derive(seed, chunk as u64), streams::AUDIT);
        let p = perturb(&x, sigma, &mut rng)?;
        ks.extend(quotients(model, &x, &p.perturbed, space)?);
    }
    Ok(KStatistics::from_values(ks, l_n))
}
