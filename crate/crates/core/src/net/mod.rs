//! From-scratch feed-forward network.
//!
//! Dense layers compute `a = act(x W^T + b)`. Weights are stored row-major with
//! shape `(output_dim, input_dim)`. Hidden activations may be passed through
//! inverted dropout in training mode; the output layer never is.
//!
//! All numerics are `f64`, and every random draw goes through a seeded
//! ChaCha generator, so identical inputs give bit-identical parameters.

mod adam;
mod backprop;
mod gradcheck;
pub mod io;
mod kernels;
mod matrix;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// 2^32: dropout thresholds compare against uniform `u32` draws.
const DROP_SCALE: f64 = 4_294_967_296.0;

pub use adam::{adam_step, AdamState};
pub use backprop::{backward, ForwardTrace, Gradients, LayerGradient};
pub use gradcheck::{compare_gradients, gradient_check, numerical_gradients};
pub use matrix::Matrix;
pub use train::{train, Dataset, EarlyStopping, StopDecision, TrainHistory, TrainSpec};

/// Width of the feature vector fed to the network.
pub const INPUT_FEATURES: usize = 26;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("layer {prev} outputs {prev_out} values but layer {next} expects {next_in}")]
    DimensionChain {
        prev: usize,
        next: usize,
        prev_out: usize,
        next_in: usize,
    },
    #[error("layer {layer} has a zero dimension")]
    ZeroDimension { layer: usize },
    #[error("network must have at least one layer")]
    EmptyNetwork,
    #[error("input width {got} does not match network input {expected} (row {row})")]
    InputWidth { row: usize, got: usize, expected: usize },
    #[error("non-finite input at row {row}")]
    NonFiniteInput { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frozen mask has {got} entries for a {expected}-layer network")]
    MaskLength { got: usize, expected: usize },
    #[error("invalid training spec: {0}")]
    InvalidSpec(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("architecture mismatch at layer {layer}: {detail}")]
    Architecture { layer: usize, detail: String },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    /// Derivative expressed through the activation's output `a = act(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// The forecasting architecture: 26 -> 256 (tanh) -> 128 (relu) -> 64 (tanh) -> 1 (tanh).
pub fn default_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(INPUT_FEATURES, 256, Activation::Tanh),
        LayerSpec::new(256, 128, Activation::Relu),
        LayerSpec::new(128, 64, Activation::Tanh),
        LayerSpec::new(64, 1, Activation::Tanh),
    ]
}

/// Checks that every layer is non-empty and the dimensions chain end to end.
pub fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(NetError::EmptyNetwork);
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(NetError::ZeroDimension { layer: i });
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(NetError::DimensionChain {
                prev: i,
                next: i + 1,
                prev_out: pair[0].output_dim,
                next_in: pair[1].input_dim,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Row-major `(output_dim, input_dim)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![0.0; spec.input_dim * spec.output_dim],
            biases: vec![0.0; spec.output_dim],
        }
    }

    fn is_consistent(&self) -> bool {
        self.weights.len() == self.spec.input_dim * self.spec.output_dim
            && self.biases.len() == self.spec.output_dim
    }
}

/// Ordered dense layers; the unit that gets saved, transferred and fine-tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    layers: Vec<Layer>,
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases, drawn from a generator seeded by `seed`.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_chain(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
                let weights = (0..spec.input_dim * spec.output_dim)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    spec,
                    weights,
                    biases: vec![0.0; spec.output_dim],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// All-zero network with the given architecture.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_chain(specs)?;
        Ok(Self {
            layers: specs.iter().map(|&s| Layer::zeros(s)).collect(),
        })
    }

    /// Assembles a network from explicit layers, validating shapes and finiteness.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_chain(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if !l.is_consistent() {
                return Err(NetError::Shape(format!(
                    "layer {i} buffers do not match {}x{}",
                    l.spec.output_dim, l.spec.input_dim
                )));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(NetError::Shape(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Number of parameters updated when training under `mask`.
    pub fn trainable_param_count(&self, mask: &FrozenMask) -> usize {
        self.layers
            .iter()
            .zip(mask.as_slice())
            .filter(|(_, &frozen)| !frozen)
            .map(|(l, _)| l.spec.param_count())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Checks the width and finiteness of a batch before it enters the network.
    pub fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(NetError::InputWidth {
                row: 0,
                got: inputs.cols(),
                expected: self.input_dim(),
            });
        }
        for i in 0..inputs.rows() {
            if inputs.row(i).iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteInput { row: i });
            }
        }
        Ok(())
    }

    /// Forward pass returning the `n x output_dim` predictions.
    pub fn forward(&self, inputs: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        Ok(match mode {
            Mode::Infer => self.infer_unchecked(inputs),
            Mode::Train { dropout_rate, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.forward_trace(inputs, dropout_rate, &mut rng).output().clone()
            }
        })
    }

    /// Infer-mode predictions for a single-output network, flattened.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(inputs, Mode::Infer)?.into_vec())
    }

    pub(crate) fn infer_unchecked(&self, inputs: &Matrix) -> Matrix {
        let n = inputs.rows();
        let mut current = Matrix::default();
        let mut next = Matrix::default();
        for (k, layer) in self.layers.iter().enumerate() {
            let x = if k == 0 { inputs } else { &current };
            affine_activate_into(layer, x, n, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    /// Train-mode forward pass recording everything `backward` needs.
    pub fn forward_trace<R: Rng + ?Sized>(&self, inputs: &Matrix, dropout_rate: f64, rng: &mut R) -> ForwardTrace {
        let mut trace = ForwardTrace::default();
        self.forward_trace_into(inputs, dropout_rate, rng, &mut trace);
        trace
    }

    /// [`Self::forward_trace`] refilling an existing trace.
    pub(crate) fn forward_trace_into<R: Rng + ?Sized>(
        &self,
        inputs: &Matrix,
        dropout_rate: f64,
        rng: &mut R,
        trace: &mut ForwardTrace,
    ) {
        let n = inputs.rows();
        let last = self.layers.len() - 1;
        let keep_scale = if dropout_rate > 0.0 {
            1.0 / (1.0 - dropout_rate)
        } else {
            1.0
        };
        let threshold = (dropout_rate * DROP_SCALE) as u32;
        trace.prepare(self.layers.len(), inputs);
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = std::mem::take(&mut trace.activations[k]);
            affine_activate_into(layer, trace.layer_input(k), n, &mut out);
            trace.activations[k] = out;
            let mask = &mut trace.masks[k];
            mask.clear();
            if k < last && dropout_rate > 0.0 {
                let a = trace.activations[k].as_slice();
                trace.draws.resize(a.len(), 0);
                rng.fill(&mut trace.draws[..]);
                mask.extend(
                    trace
                        .draws
                        .iter()
                        .map(|&d| if d >= threshold { keep_scale } else { 0.0 }),
                );
                let h = &mut trace.dropped[k];
                h.reshape_for_overwrite(n, layer.spec.output_dim);
                for ((o, v), m) in h.as_mut_slice().iter_mut().zip(a).zip(mask.iter()) {
                    *o = v * m;
                }
            }
        }
    }
}

fn affine_activate_into(layer: &Layer, x: &Matrix, n: usize, out: &mut Matrix) {
    let (k, m) = (layer.spec.input_dim, layer.spec.output_dim);
    out.reshape_for_overwrite(n, m);
    matrix::matmul_transposed_rhs(x.as_slice(), &layer.weights, n, k, m, out.as_mut_slice());
    for row in out.as_mut_slice().chunks_exact_mut(m) {
        for (v, b) in row.iter_mut().zip(&layer.biases) {
            *v += b;
        }
    }
    match layer.spec.activation {
        Activation::Tanh => kernels::tanh_in_place(out.as_mut_slice()),
        Activation::Relu => out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Identity => {}
    }
}

/// Forward-pass mode. Train mode draws dropout masks from a generator seeded by `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { dropout_rate: f64, seed: u64 },
    Infer,
}

/// Per-layer freeze flags; `true` means the layer is not updated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenMask(Vec<bool>);

impl FrozenMask {
    pub fn new(frozen: Vec<bool>) -> Self {
        Self(frozen)
    }

    pub fn none(layers: usize) -> Self {
        Self(vec![false; layers])
    }

    pub fn all(layers: usize) -> Self {
        Self(vec![true; layers])
    }

    /// Freezes the first `count` layers.
    pub fn leading(layers: usize, count: usize) -> Self {
        Self((0..layers).map(|i| i < count).collect())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.0[layer]
    }

    pub fn all_frozen(&self) -> bool {
        self.0.iter().all(|&f| f)
    }

    pub(crate) fn check(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(NetError::MaskLength {
                got: self.0.len(),
                expected: layers,
            });
        }
        Ok(())
    }
}
