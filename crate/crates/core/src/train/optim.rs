use serde::{Deserialize, Serialize};

use crate::nn::Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer state, one buffer set per parameter tensor.
#[derive(Clone, Debug)]
pub(crate) enum Optimizer {
    Sgd { momentum: f64, velocity: Vec<Vec<f64>> },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub(crate) fn new(config: &OptimizerConfig, model: &Model) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect::<Vec<_>>();
        match *config {
            OptimizerConfig::Sgd { momentum } => Optimizer::Sgd {
                momentum,
                velocity: zeros(),
            },
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub(crate) fn step(&mut self, model: &mut Model, grads: &[&[f64]], lr: f64) {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for ((p, g), vel) in model.params_mut().iter_mut().zip(grads).zip(velocity) {
                    let data = p.tensor.data_mut();
                    if *momentum == 0.0 {
                        for (w, gi) in data.iter_mut().zip(g.iter()) {
                            *w -= lr * gi;
                        }
                    } else {
                        for ((w, gi), vi) in data.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                            *vi = *momentum * *vi + gi;
                            *w -= lr * *vi;
                        }
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, g), mi), vi) in model.params_mut().iter_mut().zip(grads).zip(m).zip(v) {
                    for (((w, &gi), mj), vj) in p.tensor.data_mut().iter_mut().zip(g.iter()).zip(mi.iter_mut()).zip(vi.iter_mut()) {
                        *mj = *beta1 * *mj + (1.0 - *beta1) * gi;
                        *vj = *beta2 * *vj + (1.0 - *beta2) * gi * gi;
                        let mhat = *mj / c1;
                        let vhat = *vj / c2;
                        *w -= lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}
