//! Feed-forward networks: forward evaluation, mini-batch SGD training and exact
//! gradients of a loss with respect to the network input.
//!
//! Weights of a layer are stored `output_dim x input_dim`, row-major, so a batch
//! `X` (one sample per row) maps to `X W^T + b`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{gemm_nn, gemm_nt, gemm_tn, Matrix};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Builds a chain of layer specs from widths, e.g. `[784, 256, 64]` with a hidden
/// activation and a final one.
pub fn chain(widths: &[usize], hidden: Activation, last: Activation) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let act = if i + 1 == n { last } else { hidden };
            LayerSpec::new(widths[i], widths[i + 1], act)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    Decoder,
    Classifier,
    AttributeExtractor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `D(y, t) = sum_j (y_j - t_j)^2`. Training minimizes its per-element mean.
    SquaredError,
    /// `-sum_j t_j ln y_j` on a softmax output.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Classical momentum coefficient; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, loss: Loss) -> Self {
        Self {
            learning_rate,
            batch_size,
            epochs,
            loss,
            shuffle_seed: 0,
            momentum: 0.0,
        }
    }

    pub fn with_seed(mut self, shuffle_seed: u64) -> Self {
        self.shuffle_seed = shuffle_seed;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("layer {layer} has a zero dimension")]
    ZeroDim { layer: usize },
    #[error("layer {layer} expects input dim {expected} but previous layer emits {found}")]
    BrokenChain {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("softmax is only allowed on the final layer (found on layer {layer})")]
    MisplacedSoftmax { layer: usize },
    #[error("input has dimension {found}, network expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("target has dimension {found}, network emits {expected}")]
    TargetDim { expected: usize, found: usize },
    #[error("layer {layer}: parameter buffer has length {found}, expected {expected}")]
    ParamShape {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("layer {layer} holds non-finite parameters")]
    NonFiniteParams { layer: usize },
    #[error("{0}")]
    LossPairing(&'static str),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{inputs} inputs but {targets} targets")]
    CountMismatch { inputs: usize, targets: usize },
    #[error("loss became non-finite ({loss}) at epoch {epoch}, batch {batch}; learning rate {learning_rate} is probably too high")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        learning_rate: f64,
    },
    #[error("non-finite input gradient first appeared below layer {layer}")]
    NonFiniteGradient { layer: usize },
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    spec: LayerSpec,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// A feed-forward network. Values are immutable; [`NeuralNet::train`] returns a new one.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralNet {
    layers: Vec<Layer>,
    role: Role,
    seed: u64,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), NnError> {
    if specs.is_empty() {
        return Err(NnError::EmptyNetwork);
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(NnError::ZeroDim { layer: i });
        }
        if s.activation == Activation::Softmax && i + 1 != specs.len() {
            return Err(NnError::MisplacedSoftmax { layer: i });
        }
        if i > 0 && specs[i - 1].output_dim != s.input_dim {
            return Err(NnError::BrokenChain {
                layer: i,
                expected: s.input_dim,
                found: specs[i - 1].output_dim,
            });
        }
    }
    Ok(())
}

/// Forward pass record: `outputs[0]` is the batch input, `outputs[i + 1]` the
/// post-activation output of layer `i`. `logits` keeps the final pre-activation
/// when the last layer is a softmax.
struct Trace {
    outputs: Vec<Matrix>,
    logits: Option<Matrix>,
}

struct Grads {
    weights: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
}

impl NeuralNet {
    /// Creates a network with Glorot-uniform weights drawn from `seed` and zero biases.
    pub fn new(specs: Vec<LayerSpec>, role: Role, seed: u64) -> Result<Self, NnError> {
        validate_specs(&specs)?;
        let mut rng = seed::rng(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let limit = libm::sqrt(6.0 / (spec.input_dim + spec.output_dim) as f64);
                let weights = (0..spec.input_dim * spec.output_dim)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    spec,
                    weights,
                    bias: vec![0.0; spec.output_dim],
                }
            })
            .collect();
        Ok(Self { layers, role, seed })
    }

    /// Rebuilds a network from explicit parameters (`(weights, bias)` per layer).
    pub fn from_parameters(
        specs: Vec<LayerSpec>,
        params: Vec<(Vec<f64>, Vec<f64>)>,
        role: Role,
        seed: u64,
    ) -> Result<Self, NnError> {
        validate_specs(&specs)?;
        if params.len() != specs.len() {
            return Err(NnError::ParamShape {
                layer: params.len().min(specs.len()),
                expected: specs.len(),
                found: params.len(),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, (spec, (weights, bias))) in specs.into_iter().zip(params).enumerate() {
            if weights.len() != spec.input_dim * spec.output_dim {
                return Err(NnError::ParamShape {
                    layer: i,
                    expected: spec.input_dim * spec.output_dim,
                    found: weights.len(),
                });
            }
            if bias.len() != spec.output_dim {
                return Err(NnError::ParamShape {
                    layer: i,
                    expected: spec.output_dim,
                    found: bias.len(),
                });
            }
            if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
                return Err(NnError::NonFiniteParams { layer: i });
            }
            layers.push(Layer {
                spec,
                weights,
                bias,
            });
        }
        Ok(Self { layers, role, seed })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(weights, bias)` of layer `i`.
    pub fn parameters(&self, i: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[i];
        (&l.weights, &l.bias)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    fn last_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].spec.activation
    }

    /// Concatenates two networks (`self` then `next`). Role and seed come from `self`.
    pub fn stack(&self, next: &NeuralNet) -> Result<NeuralNet, NnError> {
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        Ok(NeuralNet {
            layers,
            role: self.role,
            seed: self.seed,
        })
    }

    /// Splits into the first `at` layers and the rest.
    pub fn split_at(&self, at: usize, first_role: Role, second_role: Role) -> (NeuralNet, NeuralNet) {
        assert!(at > 0 && at < self.layers.len(), "split point out of range");
        let (a, b) = self.layers.split_at(at);
        (
            NeuralNet {
                layers: a.to_vec(),
                role: first_role,
                seed: self.seed,
            },
            NeuralNet {
                layers: b.to_vec(),
                role: second_role,
                seed: self.seed,
            },
        )
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_batch(&Matrix::row_vector(input))?.into_vec())
    }

    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(inputs.cols())?;
        let mut trace = self.trace(inputs.clone(), false);
        Ok(trace.outputs.pop().expect("trace holds the output"))
    }

    /// Index of the largest output per row.
    pub fn predict_classes(&self, inputs: &Matrix) -> Result<Vec<usize>, NnError> {
        let out = self.forward_batch(inputs)?;
        Ok(out.iter_rows().map(argmax).collect())
    }

    fn check_input(&self, dim: usize) -> Result<(), NnError> {
        if dim != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                found: dim,
            });
        }
        Ok(())
    }

    fn check_target(&self, dim: usize) -> Result<(), NnError> {
        if dim != self.output_dim() {
            return Err(NnError::TargetDim {
                expected: self.output_dim(),
                found: dim,
            });
        }
        Ok(())
    }

    fn check_loss_for_training(&self, loss: Loss) -> Result<(), NnError> {
        match (loss, self.last_activation()) {
            (Loss::CrossEntropy, Activation::Softmax) => Ok(()),
            (Loss::CrossEntropy, _) => Err(NnError::LossPairing(
                "cross_entropy requires a softmax output layer",
            )),
            (Loss::SquaredError, Activation::Softmax) => Err(NnError::LossPairing(
                "softmax outputs are trained with cross_entropy only",
            )),
            (Loss::SquaredError, _) => Ok(()),
        }
    }

    fn trace(&self, input: Matrix, keep_all: bool) -> Trace {
        let batch = input.rows();
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut logits = None;
        outputs.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = &outputs[outputs.len() - 1];
            let out_dim = layer.spec.output_dim;
            let mut pre = Matrix::zeros(batch, out_dim);
            gemm_nt(
                batch,
                layer.spec.input_dim,
                out_dim,
                prev.as_slice(),
                &layer.weights,
                pre.as_mut_slice(),
            );
            for r in 0..batch {
                for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let is_last = i + 1 == self.layers.len();
            if is_last && layer.spec.activation == Activation::Softmax {
                logits = Some(pre.clone());
            }
            apply_activation(layer.spec.activation, &mut pre);
            if !keep_all && outputs.len() > 1 {
                outputs.pop();
            }
            outputs.push(pre);
        }
        Trace { outputs, logits }
    }

    /// Back-propagates `seed_grad` (gradient w.r.t. the final output, or w.r.t. the
    /// final pre-activation when `seed_is_pre` is set). Returns parameter gradients
    /// when requested and the gradient w.r.t. the input.
    fn backward(
        &self,
        trace: &Trace,
        seed_grad: Matrix,
        seed_is_pre: bool,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<Grads>, Option<Matrix>), NnError> {
        let batch = seed_grad.rows();
        let mut grads = want_params.then(|| Grads {
            weights: vec![Vec::new(); self.layers.len()],
            bias: vec![Vec::new(); self.layers.len()],
        });
        let mut upstream = seed_grad;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let out = &trace.outputs[i + 1];
            let d_pre = if seed_is_pre && i + 1 == self.layers.len() {
                upstream
            } else {
                activation_backward(layer.spec.activation, out, upstream)
            };
            let input = &trace.outputs[i];
            if let Some(g) = grads.as_mut() {
                let mut gw = vec![0.0; layer.weights.len()];
                gemm_tn(
                    layer.spec.output_dim,
                    batch,
                    layer.spec.input_dim,
                    d_pre.as_slice(),
                    input.as_slice(),
                    &mut gw,
                );
                let mut gb = vec![0.0; layer.spec.output_dim];
                for r in d_pre.iter_rows() {
                    for (acc, v) in gb.iter_mut().zip(r) {
                        *acc += v;
                    }
                }
                g.weights[i] = gw;
                g.bias[i] = gb;
            }
            if i == 0 && !want_input {
                return Ok((grads, None));
            }
            let mut d_in = Matrix::zeros(batch, layer.spec.input_dim);
            gemm_nn(
                batch,
                layer.spec.output_dim,
                layer.spec.input_dim,
                d_pre.as_slice(),
                &layer.weights,
                d_in.as_mut_slice(),
            );
            if want_input && !d_in.all_finite() {
                return Err(NnError::NonFiniteGradient { layer: i });
            }
            upstream = d_in;
        }
        Ok((grads, want_input.then_some(upstream)))
    }

    /// Gradient of `loss(net(input), target)` with respect to `input`.
    ///
    /// Squared error uses the unnormalized `D(y, t) = sum_j (y_j - t_j)^2`, so an
    /// identity network gives `2 (z - t)`. Cross entropy needs a softmax output.
    /// ReLU uses the subgradient 0 at 0.
    pub fn input_gradient(&self, input: &[f64], loss: Loss, target: &[f64]) -> Result<Vec<f64>, NnError> {
        let g = self.input_gradient_batch(&Matrix::row_vector(input), loss, &Matrix::row_vector(target))?;
        Ok(g.into_vec())
    }

    /// Row-wise [`NeuralNet::input_gradient`] over a batch.
    pub fn input_gradient_batch(&self, inputs: &Matrix, loss: Loss, targets: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(inputs.cols())?;
        self.check_target(targets.cols())?;
        if inputs.rows() != targets.rows() {
            return Err(NnError::CountMismatch {
                inputs: inputs.rows(),
                targets: targets.rows(),
            });
        }
        if loss == Loss::CrossEntropy && self.last_activation() != Activation::Softmax {
            return Err(NnError::LossPairing(
                "cross_entropy requires a softmax output layer",
            ));
        }
        let trace = self.trace(inputs.clone(), true);
        let (seed_grad, is_pre) = output_gradient(&trace, loss, targets, 1.0);
        let (_, g) = self.backward(&trace, seed_grad, is_pre, false, true)?;
        Ok(g.expect("input gradient requested"))
    }

    /// Mean training objective over a data set: per-element MSE for squared
    /// error, per-sample mean for cross entropy.
    pub fn mean_loss(&self, inputs: &Matrix, targets: &Matrix, loss: Loss) -> Result<f64, NnError> {
        self.check_input(inputs.cols())?;
        self.check_target(targets.cols())?;
        if inputs.rows() != targets.rows() {
            return Err(NnError::CountMismatch {
                inputs: inputs.rows(),
                targets: targets.rows(),
            });
        }
        if inputs.is_empty() {
            return Err(NnError::EmptyTrainingSet);
        }
        let trace = self.trace(inputs.clone(), false);
        Ok(batch_loss(&trace, loss, targets) / inputs.rows() as f64)
    }

    /// Mini-batch SGD. Returns the trained network; `self` is untouched.
    pub fn train(&self, inputs: &Matrix, targets: &Matrix, cfg: &TrainConfig) -> Result<NeuralNet, NnError> {
        self.train_with_history(inputs, targets, cfg).map(|(net, _)| net)
    }

    /// As [`NeuralNet::train`], also returning the mean objective of every epoch.
    pub fn train_with_history(
        &self,
        inputs: &Matrix,
        targets: &Matrix,
        cfg: &TrainConfig,
    ) -> Result<(NeuralNet, Vec<f64>), NnError> {
        if inputs.rows() != targets.rows() {
            return Err(NnError::CountMismatch {
                inputs: inputs.rows(),
                targets: targets.rows(),
            });
        }
        if inputs.is_empty() {
            return Err(NnError::EmptyTrainingSet);
        }
        self.check_input(inputs.cols())?;
        self.check_target(targets.cols())?;
        self.check_loss_for_training(cfg.loss)?;
        if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig(alloc::format!(
                "learning_rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        if cfg.batch_size == 0 || cfg.batch_size > inputs.rows() {
            return Err(NnError::InvalidConfig(alloc::format!(
                "batch_size must be in 1..={}, got {}",
                inputs.rows(),
                cfg.batch_size
            )));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(NnError::InvalidConfig(alloc::format!(
                "momentum must be in [0, 1), got {}",
                cfg.momentum
            )));
        }

        let mut net = self.clone();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut velocity: Option<Vec<(Vec<f64>, Vec<f64>)>> = (cfg.momentum > 0.0).then(|| {
            net.layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect()
        });
        let mut order: Vec<usize> = (0..inputs.rows()).collect();
        let mut rng = seed::rng(cfg.shuffle_seed);
        let scale_out = match cfg.loss {
            Loss::SquaredError => net.output_dim() as f64,
            Loss::CrossEntropy => 1.0,
        };

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let x = inputs.select_rows(chunk);
                let t = targets.select_rows(chunk);
                let trace = net.trace(x, true);
                let total = batch_loss(&trace, cfg.loss, &t);
                let mean = total / (chunk.len() as f64 * scale_out);
                if !mean.is_finite() {
                    return Err(NnError::Diverged {
                        epoch,
                        batch: batch_idx,
                        loss: mean,
                        learning_rate: cfg.learning_rate,
                    });
                }
                epoch_loss += total;
                let (seed_grad, is_pre) =
                    output_gradient(&trace, cfg.loss, &t, 1.0 / (chunk.len() as f64 * scale_out));
                let (grads, _) = net.backward(&trace, seed_grad, is_pre, true, false)?;
                let grads = grads.expect("parameter gradients requested");
                net.apply_update(&grads, cfg, velocity.as_mut());
            }
            history.push(epoch_loss / (inputs.rows() as f64 * scale_out));
        }
        for (i, l) in net.layers.iter().enumerate() {
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(NnError::NonFiniteParams { layer: i });
            }
        }
        Ok((net, history))
    }

    fn apply_update(&mut self, grads: &Grads, cfg: &TrainConfig, velocity: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>) {
        let lr = cfg.learning_rate;
        match velocity {
            None => {
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    for (w, g) in layer.weights.iter_mut().zip(&grads.weights[i]) {
                        *w -= lr * g;
                    }
                    for (b, g) in layer.bias.iter_mut().zip(&grads.bias[i]) {
                        *b -= lr * g;
                    }
                }
            }
            Some(vel) => {
                let mu = cfg.momentum;
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    let (vw, vb) = &mut vel[i];
                    for ((w, g), v) in layer.weights.iter_mut().zip(&grads.weights[i]).zip(vw.iter_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                    for ((b, g), v) in layer.bias.iter_mut().zip(&grads.bias[i]).zip(vb.iter_mut()) {
                        *v = mu * *v + g;
                        *b -= lr * *v;
                    }
                }
            }
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn apply_activation(act: Activation, m: &mut Matrix) {
    match act {
        Activation::Identity => {}
        Activation::Relu => m.as_mut_slice().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        }),
        Activation::Sigmoid => m
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = sigmoid(*v)),
        Activation::Tanh => m.as_mut_slice().iter_mut().for_each(|v| *v = libm::tanh(*v)),
        Activation::Softmax => {
            for r in 0..m.rows() {
                softmax_in_place(m.row_mut(r));
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Maps `dL/d(out)` to `dL/d(pre)` given the layer's post-activation output.
fn activation_backward(act: Activation, out: &Matrix, mut upstream: Matrix) -> Matrix {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, &y) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &y) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *g *= y * (1.0 - y);
            }
        }
        Activation::Tanh => {
            for (g, &y) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *g *= 1.0 - y * y;
            }
        }
        Activation::Softmax => {
            for r in 0..upstream.rows() {
                let p = out.row(r);
                let g = upstream.row_mut(r);
                let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                for (gi, pi) in g.iter_mut().zip(p) {
                    *gi = pi * (*gi - dot);
                }
            }
        }
    }
    upstream
}

/// Sum over the batch of the per-sample loss.
fn batch_loss(trace: &Trace, loss: Loss, targets: &Matrix) -> f64 {
    let out = &trace.outputs[trace.outputs.len() - 1];
    match loss {
        Loss::SquaredError => out
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(y, t)| (y - t) * (y - t))
            .sum(),
        Loss::CrossEntropy => {
            let logits = trace.logits.as_ref().expect("cross entropy runs on softmax logits");
            let mut total = 0.0;
            for (z, t) in logits.iter_rows().zip(targets.iter_rows()) {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                total += z.iter().zip(t).map(|(zi, ti)| ti * (lse - zi)).sum::<f64>();
            }
            total
        }
    }
}

/// Gradient seed for back-propagation, scaled by `scale`. Cross entropy on a
/// softmax is fused and seeds the pre-activation (`p - t`).
fn output_gradient(trace: &Trace, loss: Loss, targets: &Matrix, scale: f64) -> (Matrix, bool) {
    let out = &trace.outputs[trace.outputs.len() - 1];
    let mut g = Matrix::zeros(out.rows(), out.cols());
    match loss {
        Loss::SquaredError => {
            for ((gi, y), t) in g.as_mut_slice().iter_mut().zip(out.as_slice()).zip(targets.as_slice()) {
                *gi = 2.0 * (y - t) * scale;
            }
            (g, false)
        }
        Loss::CrossEntropy => {
            for (r, t_row) in targets.iter_rows().enumerate() {
                // d/dz of sum_j t_j (lse - z_j) = p * sum(t) - t
                let t_sum: f64 = t_row.iter().sum();
                let p = out.row(r);
                for ((gi, pi), ti) in g.row_mut(r).iter_mut().zip(p).zip(t_row) {
                    *gi = (pi * t_sum - ti) * scale;
                }
            }
            (g, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn identity_net(dim: usize, act: Activation) -> NeuralNet {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        NeuralNet::from_parameters(
            vec![LayerSpec::new(dim, dim, act)],
            vec![(w, vec![0.0; dim])],
            Role::Decoder,
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_and_relu_layers() {
        assert_eq!(identity_net(2, Activation::Identity).forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(identity_net(2, Activation::Relu).forward(&[-3.0, 4.0]).unwrap(), vec![0.0, 4.0]);
    }

    #[test]
    fn seeded_two_layer_net_matches_hand_evaluation() {
        let net = NeuralNet::new(chain(&[2, 2, 2], Activation::Relu, Activation::Sigmoid), Role::Classifier, 11).unwrap();
        let x = [0.5, -0.5];
        // Hand evaluation of relu(W1 x + b1) then sigmoid(W2 h + b2).
        let (w1, b1) = net.parameters(0);
        let h: Vec<f64> = (0..2)
            .map(|o| (w1[o * 2] * x[0] + w1[o * 2 + 1] * x[1] + b1[o]).max(0.0))
            .collect();
        let (w2, b2) = net.parameters(1);
        let want: Vec<f64> = (0..2)
            .map(|o| 1.0 / (1.0 + (-(w2[o * 2] * h[0] + w2[o * 2 + 1] * h[1] + b2[o])).exp()))
            .collect();
        let got = net.forward(&x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_errors_are_descriptive() {
        let net = identity_net(2, Activation::Identity);
        assert_eq!(net.forward(&[1.0]), Err(NnError::InputDim { expected: 2, found: 1 }));
        assert!(matches!(
            NeuralNet::new(vec![LayerSpec::new(2, 3, Activation::Relu), LayerSpec::new(2, 1, Activation::Identity)], Role::Encoder, 0),
            Err(NnError::BrokenChain { layer: 1, expected: 2, found: 3 })
        ));
        assert!(matches!(
            NeuralNet::new(chain(&[2, 3, 1], Activation::Softmax, Activation::Identity), Role::Classifier, 0),
            Err(NnError::MisplacedSoftmax { layer: 0 })
        ));
        assert!(matches!(
            NeuralNet::new(vec![LayerSpec::new(0, 1, Activation::Identity)], Role::Encoder, 0),
            Err(NnError::ZeroDim { layer: 0 })
        ));
    }

    #[test]
    fn linear_fit_recovers_slope() {
        // Closed-form least squares on y = 2x gives slope 2 and intercept 0.
        let xs: Vec<[f64; 1]> = (0..20).map(|i| [i as f64 / 20.0]).collect();
        let ys: Vec<[f64; 1]> = xs.iter().map(|x| [2.0 * x[0]]).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().map(|x| x[0]).sum::<f64>() / n;
        let my = ys.iter().map(|y| y[0]).sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x[0] - mx) * (y[0] - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x[0] - mx).powi(2)).sum();
        let oracle_slope = sxy / sxx;
        assert!((oracle_slope - 2.0).abs() < 1e-12);

        let net = NeuralNet::new(vec![LayerSpec::new(1, 1, Activation::Identity)], Role::Classifier, 3).unwrap();
        let cfg = TrainConfig::new(0.5, 4, 200, Loss::SquaredError).with_seed(1);
        let trained = net.train(&Matrix::from_rows(&xs), &Matrix::from_rows(&ys), &cfg).unwrap();
        let (w, _) = trained.parameters(0);
        assert!((w[0] - oracle_slope).abs() < 0.05, "slope {}", w[0]);
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let net = NeuralNet::new(chain(&[3, 4, 2], Activation::Tanh, Activation::Identity), Role::Decoder, 5).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]);
        let y = Matrix::from_rows(&[[1.0, 0.0]]);
        let cfg = TrainConfig::new(0.1, 1, 0, Loss::SquaredError);
        assert_eq!(net.train(&x, &y, &cfg).unwrap(), net);
    }

    #[test]
    fn divergence_is_reported() {
        let net = NeuralNet::new(chain(&[1, 8, 1], Activation::Relu, Activation::Identity), Role::Decoder, 2).unwrap();
        let xs: Vec<[f64; 1]> = (0..16).map(|i| [i as f64]).collect();
        let ys: Vec<[f64; 1]> = xs.iter().map(|x| [x[0] * 100.0]).collect();
        let cfg = TrainConfig::new(1e3, 4, 50, Loss::SquaredError);
        let err = net.train(&Matrix::from_rows(&xs), &Matrix::from_rows(&ys), &cfg).unwrap_err();
        assert!(matches!(err, NnError::Diverged { .. } | NnError::NonFiniteParams { .. }), "{err:?}");
    }

    #[test]
    fn loss_pairing_is_enforced_for_training() {
        let soft = NeuralNet::new(chain(&[2, 2], Activation::Relu, Activation::Softmax), Role::Classifier, 0).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0]]);
        let y = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!(matches!(
            soft.train(&x, &y, &TrainConfig::new(0.1, 1, 1, Loss::SquaredError)),
            Err(NnError::LossPairing(_))
        ));
        let lin = identity_net(2, Activation::Identity);
        assert!(matches!(
            lin.train(&x, &y, &TrainConfig::new(0.1, 1, 1, Loss::CrossEntropy)),
            Err(NnError::LossPairing(_))
        ));
        assert!(matches!(
            lin.train(&x, &y, &TrainConfig::new(0.1, 2, 1, Loss::SquaredError)),
            Err(NnError::InvalidConfig(_))
        ));
    }

    #[test]
    fn identity_gradient_is_twice_the_residual() {
        let net = identity_net(3, Activation::Identity);
        let z = [0.3, -1.0, 2.0];
        let t = [0.1, 0.5, 2.0];
        let g = net.input_gradient(&z, Loss::SquaredError, &t).unwrap();
        for i in 0..3 {
            assert!((g[i] - 2.0 * (z[i] - t[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_region_has_zero_gradient() {
        // All-negative pre-activations: relu output is constant 0.
        let net = identity_net(2, Activation::Relu);
        let g = net.input_gradient(&[-1.0, -2.0], Loss::SquaredError, &[0.5, 0.5]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let specs = chain(&[4, 6, 3], Activation::Tanh, Activation::Softmax);
        let net = NeuralNet::new(specs.clone(), Role::Classifier, 9).unwrap();
        let x = Matrix::from_rows(&(0..12).map(|i| [i as f64 * 0.1, 1.0 - i as f64 * 0.05, (i % 3) as f64, 0.2]).collect::<Vec<_>>());
        let y = Matrix::from_rows(&(0..12).map(|i| {
            let mut r = [0.0; 3];
            r[i % 3] = 1.0;
            r
        }).collect::<Vec<_>>());
        let cfg = TrainConfig::new(0.2, 5, 7, Loss::CrossEntropy).with_seed(4);
        let a = net.train(&x, &y, &cfg).unwrap();
        let b = NeuralNet::new(specs, Role::Classifier, 9).unwrap().train(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let (_, hist) = net.train_with_history(&x, &y, &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
    }

    fn finite_difference(net: &NeuralNet, x: &[f64], loss: Loss, t: &[f64], h: f64) -> Vec<f64> {
        let value = |v: &[f64]| {
            let y = net.forward(v).unwrap();
            match loss {
                Loss::SquaredError => y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                Loss::CrossEntropy => -y.iter().zip(t).map(|(a, b)| b * a.ln()).sum::<f64>(),
            }
        };
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (value(&p) - value(&m)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn input_gradient_matches_finite_differences(seed in any::<u64>(), act in 0usize..3, softmax in any::<bool>()) {
            let hidden = [Activation::Tanh, Activation::Sigmoid, Activation::Relu][act];
            let last = if softmax { Activation::Softmax } else { Activation::Sigmoid };
            let net = NeuralNet::new(chain(&[5, 7, 4], hidden, last), Role::AttributeExtractor, seed).unwrap();
            let mut rng = seed::rng(seed ^ 1);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut t = vec![0.0; 4];
            t[(seed % 4) as usize] = 1.0;
            let losses: &[Loss] = if softmax { &[Loss::SquaredError, Loss::CrossEntropy] } else { &[Loss::SquaredError] };
            for &loss in losses {
                let g = net.input_gradient(&x, loss, &t).unwrap();
                let fd = finite_difference(&net, &x, loss, &t, 1e-5);
                for (a, b) in g.iter().zip(&fd) {
                    if a.abs() < 1e-8 && b.abs() < 1e-8 {
                        continue;
                    }
                    let rel = (a - b).abs() / a.abs().max(b.abs());
                    prop_assert!(rel < 1e-4, "analytic {} fd {}", a, b);
                }
            }
        }
    }
}
