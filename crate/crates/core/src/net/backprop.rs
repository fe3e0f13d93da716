use super::matrix::{matmul, matmul_transposed_lhs};
use super::{Activation, FrozenMask, Matrix, NetError, NetworkParams, Result};

/// Everything recorded by a train-mode forward pass.
///
/// `activations[k]` is layer k's output before dropout. Where dropout was
/// applied, `masks[k]` holds the scale mask and `dropped[k]` the masked output.
/// A trace can be refilled by later passes without reallocating.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub(crate) inputs: Matrix,
    pub(crate) activations: Vec<Matrix>,
    pub(crate) dropped: Vec<Matrix>,
    pub(crate) masks: Vec<Vec<f64>>,
    pub(crate) draws: Vec<u32>,
}

impl ForwardTrace {
    pub(crate) fn prepare(&mut self, layers: usize, inputs: &Matrix) {
        self.inputs.assign(inputs);
        self.activations.resize_with(layers, Matrix::default);
        self.dropped.resize_with(layers, Matrix::default);
        self.masks.resize_with(layers, Vec::new);
        self.activations.truncate(layers);
        self.dropped.truncate(layers);
        self.masks.truncate(layers);
    }

    /// Network output (`n x output_dim`).
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("non-empty trace")
    }

    /// What layer `k` passed on to layer `k + 1` (after dropout, if any).
    pub fn layer_output(&self, k: usize) -> &Matrix {
        if self.masks[k].is_empty() {
            &self.activations[k]
        } else {
            &self.dropped[k]
        }
    }

    /// Dropout scale mask applied after layer `k`, if any.
    pub fn dropout_mask(&self, k: usize) -> Option<&[f64]> {
        Some(self.masks[k].as_slice()).filter(|m| !m.is_empty())
    }

    pub(crate) fn layer_input(&self, k: usize) -> &Matrix {
        if k == 0 {
            &self.inputs
        } else {
            self.layer_output(k - 1)
        }
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients with the same shapes as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Gradients of the batch-mean squared error `(1/N) * sum (yhat - y)^2`, where
/// `N` counts every output element, using the activations and dropout masks
/// stored in `trace`.
///
/// Frozen layers (if a mask is given) get zero gradients, and backpropagation
/// stops below the lowest trainable layer.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    targets: &[f64],
    frozen: Option<&FrozenMask>,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    backward_into(params, trace, targets, frozen, &mut grads, &mut BackwardScratch::default())?;
    Ok(grads)
}

/// Reusable buffers for [`backward_into`].
#[derive(Debug, Default)]
pub(crate) struct BackwardScratch {
    delta: Vec<f64>,
    upstream: Vec<f64>,
}

/// [`backward`] writing into existing gradient buffers shaped like `params`.
pub(crate) fn backward_into(
    params: &NetworkParams,
    trace: &ForwardTrace,
    targets: &[f64],
    frozen: Option<&FrozenMask>,
    grads: &mut Gradients,
    scratch: &mut BackwardScratch,
) -> Result<()> {
    let layers = params.layers();
    if trace.num_layers() != layers.len() {
        return Err(NetError::Shape(format!(
            "trace has {} layers, network {}",
            trace.num_layers(),
            layers.len()
        )));
    }
    if let Some(mask) = frozen {
        mask.check(layers.len())?;
    }
    let n = trace.batch_size();
    for (k, layer) in layers.iter().enumerate() {
        let a = &trace.activations[k];
        if a.rows() != n || a.cols() != layer.spec.output_dim {
            return Err(NetError::Shape(format!(
                "stored activation {k} is {}x{}, expected {n}x{}",
                a.rows(),
                a.cols(),
                layer.spec.output_dim
            )));
        }
    }
    let out = trace.output();
    if targets.len() != out.as_slice().len() {
        return Err(NetError::Shape(format!(
            "{} targets for {} outputs",
            targets.len(),
            out.as_slice().len()
        )));
    }

    let is_frozen = |k: usize| frozen.is_some_and(|m| m.is_frozen(k));
    let lowest = (0..layers.len()).find(|&k| !is_frozen(k));
    for (k, g) in grads.layers.iter_mut().enumerate() {
        g.biases.fill(0.0);
        if is_frozen(k) || n == 0 {
            g.weights.fill(0.0);
        }
    }
    let Some(lowest) = lowest else {
        return Ok(());
    };
    if n == 0 {
        return Ok(());
    }

    let last = layers.len() - 1;
    let scale = 2.0 / targets.len() as f64;
    let out_act = layers[last].spec.activation;
    let BackwardScratch { delta, upstream } = scratch;
    delta.clear();
    delta.extend(
        out.as_slice()
            .iter()
            .zip(targets)
            .map(|(&a, &y)| scale * (a - y) * out_act.derivative_from_output(a)),
    );

    for k in (lowest..=last).rev() {
        let layer = &layers[k];
        let (fan_in, fan_out) = (layer.spec.input_dim, layer.spec.output_dim);
        if !is_frozen(k) {
            let x = trace.layer_input(k);
            let g = &mut grads.layers[k];
            matmul_transposed_lhs(delta, x.as_slice(), n, fan_out, fan_in, &mut g.weights);
            for row in delta.chunks_exact(fan_out) {
                for (b, d) in g.biases.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        if k == lowest {
            break;
        }
        upstream.resize(n * fan_in, 0.0);
        matmul(delta, &layer.weights, n, fan_out, fan_in, upstream);
        if let Some(mask) = trace.dropout_mask(k - 1) {
            for (u, m) in upstream.iter_mut().zip(mask) {
                *u *= m;
            }
        }
        scale_by_derivative(layers[k - 1].spec.activation, upstream, trace.activations[k - 1].as_slice());
        std::mem::swap(delta, upstream);
    }
    Ok(())
}

/// `u *= act'(z)`, with the derivative taken from the stored output `a = act(z)`.
fn scale_by_derivative(act: Activation, upstream: &mut [f64], outputs: &[f64]) {
    let pairs = upstream.iter_mut().zip(outputs);
    match act {
        Activation::Tanh => pairs.for_each(|(u, a)| *u *= 1.0 - a * a),
        Activation::Relu => pairs.for_each(|(u, &a)| {
            if !(a > 0.0) {
                *u = 0.0;
            }
        }),
        Activation::Identity => {}
    }
}
