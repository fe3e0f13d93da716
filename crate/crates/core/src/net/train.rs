use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{backward_into, BackwardScratch};
use super::{adam_step, AdamState, ForwardTrace, FrozenMask, Gradients, Matrix, NetError, NetworkParams, Result};

/// Optimizer, regularization and stopping settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Zero means "do not train": the input parameters are returned unchanged.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            dropout_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NetError::InvalidSpec(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} must lie in (0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} must lie in [0, 1)", self.dropout_rate));
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if self.max_epochs > 0 && self.patience >= self.max_epochs {
            return bad(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        Ok(())
    }
}

/// Feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(NetError::Shape(format!(
                "{} feature rows but {} targets",
                x.rows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a strictly decreasing validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

const EVAL_CHUNK: usize = 4096;

/// Mean squared error of infer-mode predictions over a dataset, in the
/// network's (scaled) target space.
pub(crate) fn dataset_mse(params: &NetworkParams, data: &Dataset) -> f64 {
    let mut sum = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let pred = params.infer_unchecked(&data.x.row_range(start, end));
        sum += pred
            .as_slice()
            .iter()
            .zip(&data.y[start..end])
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
        start = end;
    }
    sum / data.len() as f64
}

/// Mini-batch Adam training with dropout and early stopping.
///
/// Returns the parameters of the epoch with the lowest validation loss.
/// Layers frozen in `mask` come back bit-identical to the input.
pub fn train(
    params: &NetworkParams,
    train_set: &Dataset,
    validation_set: &Dataset,
    spec: &TrainSpec,
    mask: &FrozenMask,
) -> Result<(NetworkParams, TrainHistory)> {
    spec.validate()?;
    mask.check(params.num_layers())?;
    if train_set.is_empty() {
        return Err(NetError::EmptyDataset("training"));
    }
    if validation_set.is_empty() {
        return Err(NetError::EmptyDataset("validation"));
    }
    if params.output_dim() != 1 {
        return Err(NetError::Shape(format!(
            "training expects one output, network has {}",
            params.output_dim()
        )));
    }
    params.check_inputs(&train_set.x)?;
    params.check_inputs(&validation_set.x)?;

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    if spec.max_epochs == 0 {
        return Ok((params.clone(), history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut current = params.clone();
    let mut best = params.clone();
    let mut state = AdamState::new(params);
    let mut stopper = EarlyStopping::new(spec.patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let frozen_all = mask.all_frozen();
    let mut x = Matrix::default();
    let mut y: Vec<f64> = Vec::with_capacity(spec.batch_size);
    let mut trace = ForwardTrace::default();
    let mut grads = Gradients::zeros_like(params);
    let mut scratch = BackwardScratch::default();

    for epoch in 1..=spec.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(spec.batch_size) {
            x.assign_rows(&train_set.x, batch);
            y.clear();
            y.extend(batch.iter().map(|&i| train_set.y[i]));
            current.forward_trace_into(&x, spec.dropout_rate, &mut rng, &mut trace);
            loss_sum += trace
                .output()
                .as_slice()
                .iter()
                .zip(&y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
            if frozen_all {
                continue;
            }
            backward_into(&current, &trace, &y, Some(mask), &mut grads, &mut scratch)?;
            adam_step(&mut current, &grads, &mut state, spec, mask)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = dataset_mse(&current, validation_set);
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NetError::NonFiniteLoss { epoch });
        }
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best.clone_from(&current),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = epoch < spec.max_epochs;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}
