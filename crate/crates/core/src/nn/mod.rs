//! Layer stacks, the MNIST classifier and a registry of buildable models.

mod checkpoint;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::ModelError;
use crate::graph::{Graph, Var};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 {
                    return Err(format!("expects [channels, height, width], got {input:?}"));
                }
                if input[0] != in_channels {
                    return Err(format!("expects {in_channels} input channels, got {}", input[0]));
                }
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("channels, kernel and stride must be positive".into());
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return Err(format!("kernel {kernel} does not fit padded input {h}x{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("expects [{inputs}], got {input:?}"));
                }
                if outputs == 0 {
                    return Err("outputs must be positive".into());
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(format!("expects a flat vector, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// An ordered layer stack with named parameters. The last layer is always a
/// softmax, so outputs are probability rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    seed: u64,
    num_classes: usize,
}

/// Graph handles for a model's parameters, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams(pub Vec<Var>);

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Input of the final softmax.
    pub logits: Var,
    pub probs: Var,
}

impl Model {
    /// Validates that the layer geometries compose and He-initializes the
    /// weights from `seed`. Biases start at zero.
    pub fn build(name: &str, input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self, ModelError> {
        if layers.last() != Some(&LayerSpec::Softmax) {
            return Err(ModelError::MissingSoftmax);
        }
        let mut rng = rng::stream(seed, streams::INIT);
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if i + 1 < layers.len() && *layer == LayerSpec::Softmax {
                return Err(ModelError::Geometry {
                    layer: i,
                    kind: "softmax",
                    message: "softmax is only allowed as the final layer".into(),
                });
            }
            let next = layer.output_shape(&shape).map_err(|message| ModelError::Geometry {
                layer: i,
                kind: layer.kind(),
                message,
            })?;
            match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let w = he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, &mut rng);
                    params.push(Param {
                        name: format!("layer{i}.conv.weight"),
                        tensor: w,
                    });
                    params.push(Param {
                        name: format!("layer{i}.conv.bias"),
                        tensor: Tensor::zeros(&[out_channels]),
                    });
                }
                LayerSpec::Dense { inputs, outputs } => {
                    params.push(Param {
                        name: format!("layer{i}.dense.weight"),
                        tensor: he_normal(&[inputs, outputs], inputs, &mut rng),
                    });
                    params.push(Param {
                        name: format!("layer{i}.dense.bias"),
                        tensor: Tensor::zeros(&[outputs]),
                    });
                }
                _ => {}
            }
            shape = next;
        }
        Ok(Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            num_classes: shape[0],
            layers,
            params,
            seed,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces all parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, records: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        if records.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter records for model {:?}, found {}",
                self.params.len(),
                self.name,
                records.len()
            )));
        }
        for (param, (name, tensor)) in self.params.iter().zip(&records) {
            if param.name != *name || param.tensor.shape() != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "record {name:?} {:?} does not match parameter {:?} {:?}",
                    tensor.shape(),
                    param.name,
                    param.tensor.shape()
                )));
            }
        }
        for (param, (_, tensor)) in self.params.iter_mut().zip(records) {
            param.tensor = tensor;
        }
        Ok(())
    }

    /// Records every parameter on the graph as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams(self.params.iter().map(|p| graph.param(p.tensor.clone())).collect())
    }

    /// Runs the stack on a `[batch, ...input_shape]` value.
    pub fn forward(&self, graph: &mut Graph, params: &BoundParams, x: Var) -> Result<ForwardOutput, ModelError> {
        let in_shape = graph.shape(x);
        if in_shape.len() != self.input_shape.len() + 1 || in_shape[1..] != self.input_shape[..] {
            return Err(ModelError::Geometry {
                layer: 0,
                kind: self.layers[0].kind(),
                message: format!(
                    "input shape {in_shape:?} does not match [batch, {}]",
                    self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
                ),
            });
        }
        let batch = in_shape[0];
        let mut h = x;
        let mut logits = x;
        let mut next_param = params.0.iter().copied();
        let mut take = || next_param.next().expect("bound params match layers");
        for layer in &self.layers {
            h = match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let (w, b) = (take(), take());
                    let y = graph.conv2d(h, w, stride, padding)?;
                    graph.bias_add(y, b)?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (take(), take());
                    let y = graph.matmul(h, w)?;
                    graph.bias_add(y, b)?
                }
                LayerSpec::Relu => graph.relu(h)?,
                LayerSpec::Flatten => {
                    let n = graph.value(h).row_len();
                    graph.reshape(h, &[batch, n])?
                }
                LayerSpec::Softmax => {
                    logits = h;
                    graph.softmax(h)?
                }
            };
        }
        Ok(ForwardOutput { logits, probs: h })
    }

    /// Probability rows for a batch, without gradient tracking.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.outputs(x)?.1)
    }

    /// `(logits, probabilities)` for a batch, without gradient tracking.
    pub fn outputs(&self, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut graph = Graph::no_grad();
        let params = self.bind(&mut graph);
        let xv = graph.constant(x.clone());
        let out = self.forward(&mut graph, &params, xv)?;
        Ok((graph.value(out.logits).clone(), graph.value(out.probs).clone()))
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
    t
}

/// Argmax labels and their probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Prediction {
    let classes = probs.row_len();
    let mut labels = Vec::with_capacity(probs.shape()[0]);
    let mut confidences = Vec::with_capacity(probs.shape()[0]);
    for row in probs.data().chunks(classes) {
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        labels.push(best);
        confidences.push(row[best]);
    }
    Prediction { labels, confidences }
}

pub fn predict(model: &Model, x: &Tensor) -> Result<Prediction, ModelError> {
    Ok(argmax_rows(&model.probabilities(x)?))
}

/// conv(1→8, 5×5, stride 2, pad 2) → relu → flatten → dense(1568→128) →
/// relu → dense(128→10) → softmax.
pub fn build_mnist_model(seed: u64) -> Result<Model, ModelError> {
    Model::build(
        "mnist",
        &[1, 28, 28],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 8,
                kernel: 5,
                stride: 2,
                padding: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 8 * 14 * 14,
                outputs: 128,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 128,
                outputs: 10,
            },
            LayerSpec::Softmax,
        ],
        seed,
    )
}

/// Small MLP for the 2-D two-blob dataset.
pub fn build_blobs_model(seed: u64) -> Result<Model, ModelError> {
    Model::build(
        "blobs-mlp",
        &[2],
        vec![
            LayerSpec::Dense { inputs: 2, outputs: 16 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 16, outputs: 2 },
            LayerSpec::Softmax,
        ],
        seed,
    )
}

pub type ModelBuilder = fn(u64) -> Result<Model, ModelError>;

/// Named model constructors, so experiment drivers can target any
/// registered architecture.
#[derive(Clone, Debug)]
pub struct ModelRegistry {
    builders: BTreeMap<String, ModelBuilder>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("mnist", build_mnist_model);
        r.register("blobs-mlp", build_blobs_model);
        r
    }
}

impl ModelRegistry {
    pub fn register(&mut self, name: &str, builder: ModelBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn get(&self, name: &str) -> Result<ModelBuilder, ModelError> {
        self.builders
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownModel(name.to_string()))
    }

    pub fn build(&self, name: &str, seed: u64) -> Result<Model, ModelError> {
        self.get(name)?(seed)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }
}
