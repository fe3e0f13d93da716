use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, Dataset, Gradients, NetworkParams};

/// Central-difference step.
const STEP: f64 = 1e-6;
/// Denominator floor: gradients smaller than this are compared absolutely.
const MAGNITUDE_FLOOR: f64 = 1e-6;

fn batch_loss(params: &NetworkParams, batch: &Dataset) -> f64 {
    let pred = params.infer_unchecked(&batch.x);
    pred.as_slice()
        .iter()
        .zip(&batch.y)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / batch.len() as f64
}

fn param_mut(p: &mut NetworkParams, layer: usize, which: usize, i: usize) -> &mut f64 {
    let l = &mut p.layers_mut()[layer];
    if which == 0 {
        &mut l.weights[i]
    } else {
        &mut l.biases[i]
    }
}

fn param_mut_grad(g: &mut Gradients, layer: usize, which: usize, i: usize) -> &mut f64 {
    let l = &mut g.layers[layer];
    if which == 0 {
        &mut l.weights[i]
    } else {
        &mut l.biases[i]
    }
}

/// Central finite differences of the batch MSE for every weight and bias.
pub fn numerical_gradients(params: &NetworkParams, batch: &Dataset) -> Gradients {
    let mut probe = params.clone();
    let mut grads = Gradients::zeros_like(params);
    for k in 0..params.num_layers() {
        for which in 0..2 {
            let len = if which == 0 {
                params.layers()[k].weights.len()
            } else {
                params.layers()[k].biases.len()
            };
            for i in 0..len {
                let original = *param_mut(&mut probe, k, which, i);
                *param_mut(&mut probe, k, which, i) = original + STEP;
                let plus = batch_loss(&probe, batch);
                *param_mut(&mut probe, k, which, i) = original - STEP;
                let minus = batch_loss(&probe, batch);
                *param_mut(&mut probe, k, which, i) = original;
                *param_mut_grad(&mut grads, k, which, i) = (plus - minus) / (2.0 * STEP);
            }
        }
    }
    grads
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-6)` over all parameters.
pub fn compare_gradients(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst = 0.0_f64;
    for (a, n) in analytic.layers.iter().zip(&numeric.layers) {
        for (x, y) in a
            .weights
            .iter()
            .chain(&a.biases)
            .zip(n.weights.iter().chain(&n.biases))
        {
            let denom = x.abs().max(y.abs()).max(MAGNITUDE_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Compares backpropagation against finite differences on a small batch
/// (no dropout) and returns the worst relative error.
pub fn gradient_check(params: &NetworkParams, batch: &Dataset) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = params.forward_trace(&batch.x, 0.0, &mut rng);
    let analytic = match backward(params, &trace, &batch.y, None) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    compare_gradients(&analytic, &numerical_gradients(params, batch))
}

#[cfg(test)]
mod tests {
    use super::super::{default_architecture, Activation, LayerSpec, Matrix};
    use super::*;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y = (0..rows).map(|_| rng.random_range(-0.9..0.9)).collect();
        Dataset::new(Matrix::from_vec(rows, cols, x), y).unwrap()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let specs = [
            LayerSpec::new(4, 6, Activation::Tanh),
            LayerSpec::new(6, 5, Activation::Relu),
            LayerSpec::new(5, 3, Activation::Tanh),
            LayerSpec::new(3, 1, Activation::Tanh),
        ];
        let params = NetworkParams::init(&specs, 8).unwrap();
        let err = gradient_check(&params, &random_batch(7, 4, 9));
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn perturbed_gradient_is_caught() {
        let specs = [
            LayerSpec::new(3, 4, Activation::Tanh),
            LayerSpec::new(4, 1, Activation::Tanh),
        ];
        let params = NetworkParams::init(&specs, 2).unwrap();
        let batch = random_batch(5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = params.forward_trace(&batch.x, 0.0, &mut rng);
        let mut analytic = backward(&params, &trace, &batch.y, None).unwrap();
        analytic.layers[0].weights[2] *= 1.5;
        analytic.layers[0].weights[2] += 1e-3;
        let err = compare_gradients(&analytic, &numerical_gradients(&params, &batch));
        assert!(err > 1e-2, "relative error {err}");
    }

    #[test]
    fn zero_network_and_targets_check_vacuously() {
        let params = NetworkParams::zeros(&default_architecture()[2..]).unwrap();
        let batch = Dataset::new(Matrix::zeros(3, 128), vec![0.0; 3]).unwrap();
        assert_eq!(gradient_check(&params, &batch), 0.0);
    }
}
