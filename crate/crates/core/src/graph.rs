//! Tape-style reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and the operand
//! handles its backward rule needs. Operands always precede their consumers,
//! so a single reverse sweep over the tape visits nodes in topological order.
//! The tape is rebuilt on every forward pass.

use crate::error::TensorError;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a recorded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(TensorError::Geometry(format!(
                "expected rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Geometry("stride must be positive".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if h < kernel[2] || w < kernel[3] {
            return Err(TensorError::Geometry(format!(
                "kernel {}x{} does not fit padded input {h}x{w}",
                kernel[2], kernel[3]
            )));
        }
        let out_h = (h - kernel[2]) / stride + 1;
        let out_w = (w - kernel[3]) / stride + 1;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Geometry("zero-extent output".into()));
        }
        Ok(Self {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unrolls the input into a `[patch_len, batch * positions]` matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let cols_n = self.batch * self.positions();
        let mut cols = vec![0.0; self.patch_len() * cols_n];
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..self.batch {
                        let src = &input[(n * self.channels + c) * plane..][..plane];
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let base = n * self.positions() + oy * self.out_w;
                            let src_row = &src[iy as usize * self.width..][..self.width];
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.width as isize {
                                    dst[base + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds an unrolled gradient back onto the input layout.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let cols_n = self.batch * self.positions();
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.batch * self.channels * plane];
        for c in 0..self.channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..self.batch {
                        let dst = &mut out[(n * self.channels + c) * plane..][..plane];
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let base = n * self.positions() + oy * self.out_w;
                            let dst_row = &mut dst[iy as usize * self.width..][..self.width];
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.width as isize {
                                    dst_row[ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Norms below this are treated as zero; their gradient is defined as zero.
pub const NORM_EPS: f64 = 1e-12;

// Probabilities are clamped here before taking the log.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    BiasAdd { x: Var, bias: Var, inner: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, kernel: Var, cols: Vec<f64>, geom: ConvGeometry },
    Relu(Var),
    Softmax(Var),
    CrossEntropy { probs: Var, labels: Vec<usize> },
    L2Norm(Var),
    RowL2Norm(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only operation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
    rules_run: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            rules_run: 0,
        }
    }

    /// A graph that never tracks gradients; used for evaluation.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are tracked if the tensor asks for them.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<f64, TensorError> {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` for values
    /// that do not track gradients. Tracked leaves with no path to the loss
    /// report zeros.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let node = &self.nodes[v.0];
        if node.needs_grad {
            node.value.grad()
        } else {
            None
        }
    }

    /// Number of backward rules executed by the last backward pass.
    pub fn backward_rules_run(&self) -> usize {
        self.rules_run
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.backward_done = false;
        self.rules_run = 0;
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, rule: Op) -> Result<Var, TensorError> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let value = Tensor::new(shape, data)?;
        let needs_grad = self.grad_enabled && operands(&rule).iter().any(|&v| self.needs(v));
        // Saved buffers are only needed for the backward pass.
        let rule = match rule {
            Op::Conv2d { input, kernel, geom, .. } if !needs_grad => Op::Conv2d {
                input,
                kernel,
                cols: Vec::new(),
                geom,
            },
            Op::CrossEntropy { probs, .. } if !needs_grad => Op::CrossEntropy {
                probs,
                labels: Vec::new(),
            },
            Op::MulConst(a, _) if !needs_grad => Op::MulConst(a, Vec::new()),
            other => other,
        };
        self.nodes.push(Node {
            value,
            op: rule,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, rule: Op) -> Result<Var, TensorError> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, data, rule)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(a))
    }

    /// Elementwise product with a constant (non-differentiable) factor array.
    pub fn mul_const(&mut self, a: Var, factors: &[f64]) -> Result<Var, TensorError> {
        if factors.len() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                left: self.shape(a).to_vec(),
                right: vec![factors.len()],
            });
        }
        let data = self.data(a).iter().zip(factors).map(|(x, f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_const", shape, data, Op::MulConst(a, factors.to_vec()))
    }

    /// Adds `bias[c]` along axis 1 of a `[batch, channels, ...]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                left: shape,
                right: self.shape(bias).to_vec(),
            });
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        self.push("bias_add", shape, data, Op::BiasAdd { x, bias, inner })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[F, C, kh, kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let cols = geom.im2col(self.data(input));
        let p = geom.positions();
        let np = geom.batch * p;
        let mut tmp = vec![0.0; geom.filters * np];
        gemm(geom.filters, geom.patch_len(), np, self.data(kernel), false, &cols, false, &mut tmp, false);
        let mut out = vec![0.0; tmp.len()];
        for f in 0..geom.filters {
            for n in 0..geom.batch {
                out[(n * geom.filters + f) * p..][..p].copy_from_slice(&tmp[f * np + n * p..][..p]);
            }
        }
        let shape = vec![geom.batch, geom.filters, geom.out_h, geom.out_w];
        self.push("conv2d", shape, out, Op::Conv2d { input, kernel, cols, geom })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, data, Op::Relu(a))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor, computed with
    /// the row maximum subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape(shape));
        }
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(shape[1]) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push("softmax", shape, data, Op::Softmax(a))
    }

    /// Mean over rows of `-ln p[row, label]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let p = self.data(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -p[r * classes + y].max(PROB_FLOOR).ln())
            .sum();
        let loss = total / labels.len() as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let norm = self.value(a).norm();
        self.push("l2_norm", vec![1], vec![norm], Op::L2Norm(a))
    }

    /// Euclidean norm of each leading-axis slice; output shape `[rows]`.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let rows = t.shape()[0];
        let data = t
            .data()
            .chunks(t.row_len())
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push("row_l2_norm", vec![rows], data, Op::RowL2Norm(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.data(a).iter().sum();
        let m = s / self.value(a).len() as f64;
        self.push("mean", vec![1], vec![m], Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Backpropagates from a scalar loss, accumulating gradients into every
    /// tracked value that reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.rules_run = 0;
        for node in &mut self.nodes {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                node.value.grad_mut_or_zero();
            }
        }
        if !self.needs(loss) {
            return Ok(());
        }
        *self.nodes[loss.0].value.grad_mut_or_zero() = vec![1.0];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.rule(i, &g);
            self.rules_run += 1;
            for (v, contrib) in contributions {
                self.accumulate(v, contrib);
            }
            self.nodes[i].value.grad_mut_or_zero().copy_from_slice(&g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let value = &mut self.nodes[v.0].value;
        match value.grad() {
            None => {
                *value.grad_mut_or_zero() = contrib;
            }
            Some(_) => {
                for (g, c) in value.grad_mut_or_zero().iter_mut().zip(contrib) {
                    *g += c;
                }
            }
        }
    }

    /// Evaluates the backward rule of node `i` for upstream gradient `g`.
    fn rule(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if self.needs(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect());
                emit(*b, &|| g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => emit(*a, &|| g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => emit(*a, &|| g.to_vec()),
            Op::MulConst(a, f) => emit(*a, &|| g.iter().zip(f).map(|(x, y)| x * y).collect()),
            Op::BiasAdd { x, bias, inner } => {
                emit(*x, &|| g.to_vec());
                emit(*bias, &|| {
                    let channels = self.value(*bias).len();
                    let mut gb = vec![0.0; channels];
                    for (j, chunk) in g.chunks(*inner).enumerate() {
                        gb[j % channels] += chunk.iter().sum::<f64>();
                    }
                    gb
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                emit(*a, &|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(*m, *n, *k, g, false, self.data(*b), true, &mut ga, false);
                    ga
                });
                emit(*b, &|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(*k, *m, *n, self.data(*a), true, g, false, &mut gb, false);
                    gb
                });
            }
            Op::Conv2d { input, kernel, cols, geom } => {
                let p = geom.positions();
                let np = geom.batch * p;
                let mut dtmp = vec![0.0; geom.filters * np];
                for f in 0..geom.filters {
                    for n in 0..geom.batch {
                        dtmp[f * np + n * p..][..p].copy_from_slice(&g[(n * geom.filters + f) * p..][..p]);
                    }
                }
                emit(*kernel, &|| {
                    let mut gk = vec![0.0; geom.filters * geom.patch_len()];
                    gemm(geom.filters, np, geom.patch_len(), &dtmp, false, cols, true, &mut gk, false);
                    gk
                });
                emit(*input, &|| {
                    let mut dcols = vec![0.0; geom.patch_len() * np];
                    gemm(geom.patch_len(), geom.filters, np, self.data(*kernel), true, &dtmp, false, &mut dcols, false);
                    geom.col2im(&dcols)
                });
            }
            Op::Relu(a) => emit(*a, &|| {
                g.iter()
                    .zip(node.value.data())
                    .map(|(&x, &y)| if y > 0.0 { x } else { 0.0 })
                    .collect()
            }),
            Op::Softmax(a) => emit(*a, &|| {
                let cols = node.value.shape()[1];
                let mut ga = vec![0.0; g.len()];
                for ((gr, pr), out) in g.chunks(cols).zip(node.value.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                    for ((o, &gi), &pi) in out.iter_mut().zip(gr).zip(pr) {
                        *o = pi * (gi - dot);
                    }
                }
                ga
            }),
            Op::CrossEntropy { probs, labels } => emit(*probs, &|| {
                let p = self.data(*probs);
                let classes = self.shape(*probs)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gp = vec![0.0; p.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let idx = r * classes + y;
                    if p[idx] > PROB_FLOOR {
                        gp[idx] = -scale / p[idx];
                    }
                }
                gp
            }),
            Op::L2Norm(a) => emit(*a, &|| {
                let norm = node.value.data()[0];
                if norm < NORM_EPS {
                    vec![0.0; self.value(*a).len()]
                } else {
                    self.data(*a).iter().map(|x| g[0] * x / norm).collect()
                }
            }),
            Op::RowL2Norm(a) => emit(*a, &|| {
                let t = self.value(*a);
                let mut ga = vec![0.0; t.len()];
                let norms = node.value.data();
                for (r, (row, out)) in t.data().chunks(t.row_len()).zip(ga.chunks_mut(t.row_len())).enumerate() {
                    if norms[r] >= NORM_EPS {
                        let s = g[r] / norms[r];
                        for (o, x) in out.iter_mut().zip(row) {
                            *o = s * x;
                        }
                    }
                }
                ga
            }),
            Op::Sum(a) => emit(*a, &|| vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => emit(*a, &|| {
                let n = self.value(*a).len();
                vec![g[0] / n as f64; n]
            }),
        }
        out
    }
}

fn operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::BiasAdd { x, bias, .. } => vec![*x, *bias],
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::MulConst(a, _)
        | Op::Relu(a)
        | Op::Softmax(a)
        | Op::L2Norm(a)
        | Op::RowL2Norm(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![*a],
        Op::CrossEntropy { probs, .. } => vec![*probs],
    }
}
