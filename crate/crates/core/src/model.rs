//! Feed-forward classifier (feature extractor + linear head) with exact
//! softmax cross-entropy backpropagation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{param, shape, Error, Result};
use crate::linalg::{self, pairwise_sum, Matrix, RandomSource, Vector};

/// Losses above this are reported as capped instead of growing without bound.
pub const LOSS_CAP: f64 = 700.0;

/// Mini-batch size used by [`train_sgd`].
pub const TRAIN_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    a
                } else {
                    0.0
                }
            }
            Activation::Identity => a,
        }
    }

    // ReLU'(0) = 0.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

/// Layer sizes of the default classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub feature_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 32],
            feature_dim: 16,
            n_classes: 20,
            feature_activation: Activation::Relu,
        }
    }
}

/// Extractor layers followed by the classification head `(W, b)`.
///
/// Hidden layers use ReLU. The last extractor layer produces the features
/// and uses [`Architecture::feature_activation`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    pub head_weight: Matrix,
    pub head_bias: Vector,
}

impl ModelParams {
    /// He-normal weights, zero biases.
    pub fn init(arch: &Architecture, src: RandomSource) -> Result<Self> {
        if arch.n_classes < 2 {
            return Err(param("need at least two classes"));
        }
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.hidden.contains(&0) {
            return Err(param("zero-width layer"));
        }
        let mut rng = src.rng();
        let mut dense = |rows: usize, cols: usize, gain: f64| {
            let std = libm::sqrt(gain / cols as f64);
            let data = (0..rows * cols)
                .map(|_| std * linalg::standard_normal(&mut rng))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized above")
        };
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.hidden);
        dims.push(arch.feature_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let last = i == dims.len() - 2;
            layers.push(DenseLayer {
                weight: dense(
                    w[1],
                    w[0],
                    if last && arch.feature_activation == Activation::Identity {
                        1.0
                    } else {
                        2.0
                    },
                ),
                bias: Vector::zeros(w[1]),
                activation: if last {
                    arch.feature_activation
                } else {
                    Activation::Relu
                },
            });
        }
        let head_weight = dense(arch.n_classes, arch.feature_dim, 1.0);
        Ok(Self {
            layers,
            head_weight,
            head_bias: Vector::zeros(arch.n_classes),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.head_weight.cols(), |l| l.weight.cols())
    }

    pub fn feature_dim(&self) -> usize {
        self.head_weight.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.head_weight.rows()
    }

    /// Checks that layer dimensions chain and the head has at least two rows.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.cols() != width || l.bias.len() != l.weight.rows() {
                return Err(shape(alloc::format!("layer {i} does not chain")));
            }
            width = l.weight.rows();
        }
        if self.head_weight.cols() != width || self.head_bias.len() != self.head_weight.rows() {
            return Err(shape("head does not match feature width"));
        }
        if self.n_classes() < 2 {
            return Err(param("need at least two classes"));
        }
        Ok(())
    }

    /// Parameter blocks in canonical order: each layer's weight then bias,
    /// then head weight and head bias. Mirrors [`GradientUpdate::blocks`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias[..]);
        }
        out.push(self.head_weight.as_slice());
        out.push(&self.head_bias[..]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias[..]);
        }
        out.push(self.head_weight.as_mut_slice());
        out.push(&mut self.head_bias[..]);
        out
    }

    /// `self -= lr * g`.
    pub fn step(&mut self, g: &GradientUpdate, lr: f64) {
        for (p, d) in self.blocks_mut().into_iter().zip(g.blocks()) {
            for (a, b) in p.iter_mut().zip(d) {
                *a -= lr * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vector,
    pub y: usize,
}

impl Example {
    pub fn new(x: impl Into<Vector>, y: usize) -> Self {
        Self { x: x.into(), y }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vector,
    pub pre_activations: Vec<Vector>,
    pub activations: Vec<Vector>,
    pub logits: Vector,
    pub probs: Vector,
}

impl ForwardTrace {
    /// The extractor output `f`.
    pub fn feature(&self) -> &Vector {
        self.activations.last().unwrap_or(&self.input)
    }
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(shape(alloc::format!(
            "input of length {} for input dim {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations: Vec<Vector> = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let input = activations.last().map_or(x, |a| &a[..]);
        let mut pre = linalg::matvec(&layer.weight, input)?;
        for (p, b) in pre.iter_mut().zip(layer.bias.iter()) {
            *p += b;
        }
        if !pre.is_finite() {
            return Err(Error::NonFinite { layer: i });
        }
        let post: Vector = pre
            .iter()
            .map(|&a| layer.activation.apply(a))
            .collect::<Vec<_>>()
            .into();
        pre_activations.push(pre);
        activations.push(post);
    }
    let feature = activations.last().map_or(x, |a| &a[..]);
    let mut logits = linalg::matvec(&params.head_weight, feature)?;
    for (l, b) in logits.iter_mut().zip(params.head_bias.iter()) {
        *l += b;
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            layer: params.layers.len(),
        });
    }
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        input: x.into(),
        pre_activations,
        activations,
        logits,
        probs,
    })
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let total = pairwise_sum(&exps);
    exps.into_iter().map(|e| e / total).collect::<Vec<_>>().into()
}

/// Cross-entropy value; `capped` is set when `-log p_y` exceeded [`LOSS_CAP`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub capped: bool,
}

/// `-log p_y`, evaluated in the log domain as `logsumexp(l) - l_y`.
pub fn loss(trace: &ForwardTrace, y: usize) -> Result<Loss> {
    let l = &trace.logits;
    if y >= l.len() {
        return Err(param(alloc::format!("label {y} out of range")));
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = l.iter().map(|&v| libm::exp(v - max)).collect();
    let value = (max + libm::log(pairwise_sum(&shifted)) - l[y]).max(0.0);
    Ok(if value > LOSS_CAP {
        Loss {
            value: LOSS_CAP,
            capped: true,
        }
    } else {
        Loss { value, capped: false }
    })
}

/// ∂L/∂logits = p − onehot(y).
pub fn grad_logits(trace: &ForwardTrace, y: usize) -> Vector {
    let mut g = trace.probs.clone();
    g[y] -= 1.0;
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weight: Matrix,
    pub bias: Vector,
}

/// Gradients for every parameter of a [`ModelParams`], averaged over
/// `batch_size` examples.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub layers: Vec<LayerGradient>,
    pub head_weight: Matrix,
    pub head_bias: Vector,
    pub batch_size: usize,
}

impl GradientUpdate {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Vector::zeros(l.bias.len()),
                })
                .collect(),
            head_weight: Matrix::zeros(params.head_weight.rows(), params.head_weight.cols()),
            head_bias: Vector::zeros(params.head_bias.len()),
            batch_size: 0,
        }
    }

    /// Same block order as [`ModelParams::blocks`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias[..]);
        }
        out.push(self.head_weight.as_slice());
        out.push(&self.head_bias[..]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias[..]);
        }
        out.push(self.head_weight.as_mut_slice());
        out.push(&mut self.head_bias[..]);
        out
    }

    /// All entries flattened in block order.
    pub fn values(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// Extractor (φ) entries only.
    pub fn extractor_values(&self) -> Vec<f64> {
        let blocks = self.blocks();
        blocks[..blocks.len() - 2].concat()
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &GradientUpdate) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.same_shape(&b.weight) && a.bias.len() == b.bias.len())
            && self.head_weight.same_shape(&other.head_weight)
            && self.head_bias.len() == other.head_bias.len()
    }

    pub fn check_shape(&self, other: &GradientUpdate) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape("gradient updates have different shapes"))
        }
    }

    pub fn dot(&self, other: &GradientUpdate) -> f64 {
        let terms: Vec<f64> = self
            .blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| linalg::dot(a, b))
            .collect();
        pairwise_sum(&terms)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.map_in_place(|v| v * s);
        self
    }

    pub fn map_in_place(&mut self, mut f: impl FnMut(f64) -> f64) {
        for b in self.blocks_mut() {
            for v in b.iter_mut() {
                *v = f(*v);
            }
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &GradientUpdate, s: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn difference(&self, other: &GradientUpdate) -> GradientUpdate {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    /// Pairwise (tree) sum; the result depends only on the order of `updates`.
    pub fn sum_of(updates: &[GradientUpdate]) -> Result<GradientUpdate> {
        match updates {
            [] => Err(param("empty update list")),
            [one] => Ok(one.clone()),
            _ => {
                let (a, b) = updates.split_at(updates.len() / 2);
                let mut left = Self::sum_of(a)?;
                let right = Self::sum_of(b)?;
                left.check_shape(&right)?;
                left.add_scaled(&right, 1.0);
                left.batch_size += right.batch_size;
                Ok(left)
            }
        }
    }

    /// Elementwise mean with pairwise summation; `batch_size` is the total.
    pub fn mean_of(updates: &[GradientUpdate]) -> Result<GradientUpdate> {
        let sum = Self::sum_of(updates)?;
        let inv = 1.0 / updates.len() as f64;
        let batch = sum.batch_size;
        let mut out = sum.scaled(inv);
        out.batch_size = batch;
        Ok(out)
    }
}

/// Exact gradient of the loss of one example, by reverse-mode chain rule.
pub fn backward(params: &ModelParams, trace: &ForwardTrace, y: usize) -> Result<GradientUpdate> {
    if y >= params.n_classes() {
        return Err(param(alloc::format!("label {y} out of range")));
    }
    if trace.activations.len() != params.layers.len()
        || trace.logits.len() != params.n_classes()
        || trace.feature().len() != params.feature_dim()
        || trace.input.len() != params.input_dim()
    {
        return Err(shape("trace was not produced by these parameters"));
    }
    let mut grad = GradientUpdate::zeros_like(params);
    grad.batch_size = 1;

    let delta_logits = grad_logits(trace, y);
    grad.head_weight.add_outer(1.0, &delta_logits, trace.feature());
    grad.head_bias = delta_logits.clone();
    let mut delta = linalg::matvec_transposed(&params.head_weight, &delta_logits)?;

    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        for (d, &a) in delta.iter_mut().zip(trace.pre_activations[i].iter()) {
            *d *= layer.activation.derivative(a);
        }
        let input = if i == 0 {
            &trace.input
        } else {
            &trace.activations[i - 1]
        };
        grad.layers[i].weight.add_outer(1.0, &delta, input);
        grad.layers[i].bias = delta.clone();
        if i > 0 {
            delta = linalg::matvec_transposed(&layer.weight, &delta)?;
        }
    }
    Ok(grad)
}

/// Gradient of a single example under `params`.
pub fn example_gradient(params: &ModelParams, example: &Example) -> Result<GradientUpdate> {
    let trace = forward(params, &example.x)?;
    backward(params, &trace, example.y)
}

/// One gradient per example, in batch order.
pub fn per_example_gradients(params: &ModelParams, batch: &[Example]) -> Result<Vec<GradientUpdate>> {
    batch.iter().map(|e| example_gradient(params, e)).collect()
}

/// Mean gradient over `batch`, the update a fedSGD user returns.
pub fn batch_gradient(params: &ModelParams, batch: &[Example]) -> Result<GradientUpdate> {
    if batch.is_empty() {
        return Err(param("empty batch"));
    }
    GradientUpdate::mean_of(&per_example_gradients(params, batch)?)
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy(params: &ModelParams, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in data {
        if forward(params, &e.x)?.logits.argmax() == e.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub fn mean_loss(params: &ModelParams, data: &[Example]) -> Result<f64> {
    let losses = data
        .iter()
        .map(|e| Ok(loss(&forward(params, &e.x)?, e.y)?.value))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&losses) / data.len().max(1) as f64)
}

/// Plain mini-batch SGD. Returns the trained parameters and the mean
/// training loss after each epoch.
pub fn train_sgd_with_history(
    params: &ModelParams,
    dataset: &[Example],
    epochs: usize,
    lr: f64,
    src: RandomSource,
) -> Result<(ModelParams, Vec<f64>)> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(param(alloc::format!("learning rate {lr} must be positive")));
    }
    let mut params = params.clone();
    let mut history = Vec::with_capacity(epochs);
    if epochs == 0 || dataset.is_empty() {
        return Ok((params, history));
    }
    let mut rng = src.rng();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(TRAIN_BATCH) {
            let batch: Vec<Example> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let g = match batch_gradient(&params, &batch) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            params.step(&g, lr);
        }
        let l = match mean_loss(&params, dataset) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        if !l.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(l);
    }
    Ok((params, history))
}

pub fn train_sgd(
    params: &ModelParams,
    dataset: &[Example],
    epochs: usize,
    lr: f64,
    src: RandomSource,
) -> Result<ModelParams> {
    train_sgd_with_history(params, dataset, epochs, lr, src).map(|(p, _)| p)
}
