//! Central-difference gradient checking for model losses.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{BoundParams, Model};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that entries whose analytic
/// and numeric gradients are both ~0 compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter tensor (chosen with
    /// `seed`); `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl GradcheckOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            step: 1e-5,
            tol,
            max_entries_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` with respect to every model
/// parameter against central differences. `loss_fn` must be deterministic:
/// any noise it draws has to come from a freshly seeded generator.
pub fn gradcheck<F>(model: &Model, mut loss_fn: F, input: &Tensor, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&Model, &mut Graph, &BoundParams, &Tensor) -> Result<Var>,
{
    let mut graph = Graph::new();
    let params = model.bind(&mut graph);
    let loss = loss_fn(model, &mut graph, &params, input)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .0
        .iter()
        .map(|&v| graph.grad(v).expect("bound params track gradients").to_vec())
        .collect();
    drop(graph);

    let mut eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let l = loss_fn(m, &mut g, &p, input)?;
        Ok(g.item(l)?)
    };

    let mut rng = rng::stream(opts.seed, streams::GRADCHECK);
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for (pi, grads) in analytic.iter().enumerate() {
        let len = grads.len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < len => {
                let mut e = index::sample(&mut rng, len, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..len).collect(),
        };
        let mut check = TensorCheck {
            name: model.params()[pi].name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &j in &entries {
            let orig = model.params()[pi].tensor.data()[j];
            probe.params_mut()[pi].tensor.data_mut()[j] = orig + opts.step;
            let up = eval(&probe)?;
            probe.params_mut()[pi].tensor.data_mut()[j] = orig - opts.step;
            let down = eval(&probe)?;
            probe.params_mut()[pi].tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            check.max_rel_error = check.max_rel_error.max(relative_error(grads[j], numeric));
            check.max_abs_error = check.max_abs_error.max((grads[j] - numeric).abs());
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tensors,
        max_rel_error,
        tol: opts.tol,
        passed: max_rel_error < opts.tol,
    })
}
