use super::{FrozenMask, Gradients, LayerGradient, NetError, NetworkParams, Result, TrainSpec};

/// First and second moment accumulators mirroring the network's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<LayerGradient>,
    pub second: Vec<LayerGradient>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros = Gradients::zeros_like(params).layers;
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One Adam update with bias correction.
///
/// Layers flagged in `mask` are skipped entirely: their parameters and moment
/// accumulators are left untouched. The step counter advances once per call.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    spec: &TrainSpec,
    mask: &FrozenMask,
) -> Result<()> {
    let n = params.num_layers();
    mask.check(n)?;
    if grads.layers.len() != n || state.first.len() != n || state.second.len() != n {
        return Err(NetError::Shape(
            "gradient/optimizer state layer count differs from network".into(),
        ));
    }
    for (k, layer) in params.layers().iter().enumerate() {
        let expect = (layer.weights.len(), layer.biases.len());
        for (what, g) in [
            ("gradient", &grads.layers[k]),
            ("first moment", &state.first[k]),
            ("second moment", &state.second[k]),
        ] {
            if (g.weights.len(), g.biases.len()) != expect {
                return Err(NetError::Shape(format!("{what} of layer {k} has wrong shape")));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (spec.beta1, spec.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let (lr, eps) = (spec.learning_rate, spec.epsilon);

    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };

    for (k, layer) in params.layers_mut().iter_mut().enumerate() {
        if mask.is_frozen(k) {
            continue;
        }
        let g = &grads.layers[k];
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
        update(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{Activation, Layer, LayerSpec};
    use super::*;

    fn scalar_net(w: f64) -> NetworkParams {
        NetworkParams::from_layers(vec![Layer {
            spec: LayerSpec::new(1, 1, Activation::Identity),
            weights: vec![w],
            biases: vec![0.0],
        }])
        .unwrap()
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            layers: vec![LayerGradient {
                weights: vec![g],
                biases: vec![0.0],
            }],
        }
    }

    /// Plain recurrence for a single scalar, written independently of `adam_step`.
    fn reference_adam(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
        let (mut m, mut v, mut theta) = (0.0, 0.0, 0.0);
        let mut trajectory = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            trajectory.push(theta);
        }
        trajectory
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let spec = TrainSpec::default();
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net);
        adam_step(&mut net, &scalar_grad(1.0), &mut state, &spec, &FrozenMask::none(1)).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((net.layers()[0].weights[0] - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn momentum_keeps_moving_after_gradient_vanishes() {
        let spec = TrainSpec::default();
        let grads = [1.0, 0.0, 0.0];
        let reference = reference_adam(&grads, 1e-3, 0.9, 0.999, 1e-8);
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net);
        let mut trajectory = Vec::new();
        for &g in &grads {
            adam_step(&mut net, &scalar_grad(g), &mut state, &spec, &FrozenMask::none(1)).unwrap();
            trajectory.push(net.layers()[0].weights[0]);
        }
        for (a, b) in trajectory.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(trajectory[1] < trajectory[0]);
        assert!(trajectory[2] < trajectory[1]);
    }

    #[test]
    fn frozen_layers_are_bitwise_untouched() {
        let spec = TrainSpec::default();
        let mut net = NetworkParams::init(
            &[
                LayerSpec::new(3, 4, Activation::Tanh),
                LayerSpec::new(4, 1, Activation::Tanh),
            ],
            1,
        )
        .unwrap();
        let before = net.clone();
        let mut grads = Gradients::zeros_like(&net);
        for l in &mut grads.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.3);
            l.biases.iter_mut().for_each(|b| *b = -0.2);
        }
        let mut state = AdamState::new(&net);
        adam_step(&mut net, &grads, &mut state, &spec, &FrozenMask::all(2)).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.first, AdamState::new(&before).first);

        adam_step(&mut net, &grads, &mut state, &spec, &FrozenMask::leading(2, 1)).unwrap();
        assert_eq!(net.layers()[0], before.layers()[0]);
        assert_ne!(net.layers()[1], before.layers()[1]);
        assert!(state.first[0].weights.iter().all(|&v| v == 0.0));
    }
}
