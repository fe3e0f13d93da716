use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use proptest::prelude::*;
use sales_transfer::features::{aggregate_features, lag_features, ProductMeta, SalesPanel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sales_transfer::net::{
    backward, train, Activation, Dataset, FrozenMask, LayerSpec, Matrix, NetworkParams, TrainSpec,
};

fn meta(promo: &BTreeSet<i64>) -> ProductMeta {
    ProductMeta {
        product_id: "p".into(),
        base_price: 2.0,
        introduced: NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(),
        promo_calendar: promo.iter().map(|&w| (w, 1.5)).collect(),
        subgroup: "g".into(),
    }
}

/// Store 1 open 8-16 every day for weeks 1..=8; `units` is indexed by day then hour.
fn panel(m: &ProductMeta, units: &[u8]) -> SalesPanel {
    let mut p = SalesPanel::new("p");
    for (i, u) in units.iter().enumerate() {
        let (day, hour) = (i / 8, 8 + (i % 8) as u8);
        p.insert(1, m.introduced + Duration::days(day as i64), hour, f64::from(*u)).unwrap();
    }
    p
}

fn loss(net: &NetworkParams, data: &Dataset) -> f64 {
    let p = net.predict(&data.x).unwrap();
    p.iter().zip(&data.y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / data.len() as f64
}

/// Worst relative error of backprop against a fourth-order central difference.
/// At h = 1e-3 its truncation and rounding errors are both far below the
/// tolerance, so tiny gradients deep in saturated tanh chains stay comparable.
fn worst_gradient_error(net: &NetworkParams, data: &Dataset) -> f64 {
    let h = 1e-3;
    let trace = net.forward_trace(&data.x, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    let grads = backward(net, &trace, &data.y, None).unwrap();
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for k in 0..net.num_layers() {
        let n_w = net.layers()[k].weights.len();
        let analytic: Vec<f64> = grads.layers[k].weights.iter().chain(&grads.layers[k].biases).copied().collect();
        for (i, a) in analytic.iter().enumerate() {
            let mut at = |delta: f64| {
                let l = &mut probe.layers_mut()[k];
                let slot = if i < n_w { &mut l.weights[i] } else { &mut l.biases[i - n_w] };
                let orig = *slot;
                *slot = orig + delta;
                let v = loss(&probe, data);
                let l = &mut probe.layers_mut()[k];
                *(if i < n_w { &mut l.weights[i] } else { &mut l.biases[i - n_w] }) = orig;
                v
            };
            let n = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
    }
    worst
}

fn units() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..20, 8 * 7 * 8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lags_look_back_at_matching_weeks_only(
        promo in proptest::collection::btree_set(2i64..=8, 0..5),
        sales in units(),
        noise in units(),
        week in 2i64..=8,
        day in 0i64..7,
        hour in 8u8..16,
    ) {
        let m = meta(&promo);
        let date = m.week_start(week) + Duration::days(day);
        let p = panel(&m, &sales);
        let lags = lag_features(&p, &m, 1, date, hour);

        let used: Vec<i64> = lags.window.iter().flatten().copied().collect();
        prop_assert!(!used.is_empty() && used.len() <= 4);
        prop_assert!(used.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(used.iter().all(|&w| w >= 1 && w < week));
        let same = used.iter().all(|&w| m.is_promo_week(w) == m.is_promo_week(week));
        if !lags.fallback {
            prop_assert!(same);
        } else {
            prop_assert!((1..week).all(|w| m.is_promo_week(w) != m.is_promo_week(week)));
        }
        prop_assert!(lags.latest_input.is_none_or(|d| d < m.week_start(week)));

        // Replacing everything from the predicted week on changes nothing.
        let cut = (m.week_start(week) - m.introduced).num_days() as usize * 8;
        let mut mixed = sales.clone();
        mixed[cut..].copy_from_slice(&noise[cut..]);
        let again = lag_features(&panel(&m, &mixed), &m, 1, date, hour);
        prop_assert_eq!(lags, again);
    }

    #[test]
    fn aggregates_ignore_records_from_the_cutoff_on(
        sales in units(),
        noise in units(),
        cutoff_day in 0i64..56,
        day in 0i64..56,
        hour in 8u8..16,
    ) {
        let m = meta(&BTreeSet::new());
        let as_of = m.introduced + Duration::days(cutoff_day);
        let date = m.introduced + Duration::days(day);
        let a = aggregate_features(&panel(&m, &sales), &m, 1, date, hour, as_of);
        let cut = cutoff_day as usize * 8;
        let mut mixed = sales.clone();
        mixed[cut..].copy_from_slice(&noise[cut..]);
        let b = aggregate_features(&panel(&m, &mixed), &m, 1, date, hour, as_of);
        prop_assert_eq!(a, b);
        if cutoff_day == 0 {
            prop_assert!(a.missing_history && a.values == [0.0; 3]);
        }
        prop_assert!(a.latest_input.is_none_or(|d| d < as_of));
    }

    #[test]
    fn frozen_layers_survive_training_bit_for_bit(
        widths in proptest::collection::vec(1usize..12, 2..5),
        frozen in 0usize..4,
        seed in any::<u64>(),
    ) {
        let mut dims = vec![5];
        dims.extend(&widths);
        dims.push(1);
        let specs: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| LayerSpec::new(d[0], d[1], if i % 2 == 0 { Activation::Tanh } else { Activation::Relu }))
            .collect();
        let layers = specs.len();
        let frozen = frozen.min(layers - 1);
        let net = NetworkParams::init(&specs, seed).unwrap();
        let rows = 40;
        let x: Vec<f64> = (0..rows * 5).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
        let y: Vec<f64> = (0..rows).map(|i| (x[i * 5] * 0.7).tanh()).collect();
        let data = Dataset::new(Matrix::from_vec(rows, 5, x), y).unwrap();
        let spec = TrainSpec { max_epochs: 2, patience: 1, batch_size: 8, seed, ..TrainSpec::default() };
        let mask = FrozenMask::leading(layers, frozen);
        let (trained, _) = train(&net, &data, &data, &spec, &mask).unwrap();
        for k in 0..frozen {
            let (a, b) = (&trained.layers()[k], &net.layers()[k]);
            prop_assert!(a.weights.iter().zip(&b.weights).all(|(p, q)| p.to_bits() == q.to_bits()));
            prop_assert!(a.biases.iter().zip(&b.biases).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        prop_assert_eq!(trained.trainable_param_count(&mask),
            specs[frozen..].iter().map(|s| s.input_dim * s.output_dim + s.output_dim).sum::<usize>());
    }

    #[test]
    fn backprop_agrees_with_finite_differences(
        widths in proptest::collection::vec(1usize..10, 1..4),
        seed in any::<u64>(),
    ) {
        let mut dims = vec![4];
        dims.extend(&widths);
        dims.push(1);
        let specs: Vec<LayerSpec> = dims
            .windows(2)
            .map(|d| LayerSpec::new(d[0], d[1], Activation::Tanh))
            .collect();
        let net = NetworkParams::init(&specs, seed).unwrap();
        let x: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.61 + (seed % 97) as f64).cos()).collect();
        let y: Vec<f64> = (0..5).map(|i| (i as f64 * 0.3).sin() * 0.5).collect();
        let data = Dataset::new(Matrix::from_vec(5, 4, x), y).unwrap();
        prop_assert!(worst_gradient_error(&net, &data) < 1e-5);
    }
}
