use std::collections::BTreeMap;

use sales_transfer::datagen::{generate_universe, Universe};
use sales_transfer::eval::{write_records_csv, AggregateScope, EvalRecord, ModelKind, MA, WO_TL};
use sales_transfer::experiment::{run_experiment, train_sources, ExperimentConfig, ExperimentOutcome};
use sales_transfer::features::SalesPanel;
use sales_transfer::net::TrainSpec;
use sales_transfer::seed;
use sales_transfer::transfer::ModelBundle;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(seed);
    cfg.generator.n_stores = 1;
    cfg.generator.source_history_weeks = 60;
    cfg.sources.train = TrainSpec {
        max_epochs: 2,
        patience: 1,
        ..TrainSpec::default()
    };
    let wf = &mut cfg.walk_forward;
    wf.first_week = 3;
    wf.last_week = 6;
    wf.n_splits = 2;
    wf.train = TrainSpec {
        max_epochs: 2,
        patience: 1,
        batch_size: 64,
        ..TrainSpec::default()
    };
    cfg.validate().unwrap();
    cfg
}

struct Fixture {
    cfg: ExperimentConfig,
    universe: Universe,
    sources: Vec<ModelBundle>,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = small_config(seed);
    let universe = generate_universe(&cfg.generator).unwrap();
    let sources = train_sources(&universe, &cfg).unwrap();
    Fixture { cfg, universe, sources }
}

fn run(f: &Fixture, cfg: &ExperimentConfig) -> ExperimentOutcome {
    run_experiment(&f.universe, &f.sources, cfg).unwrap()
}

fn csv_bytes(records: &[EvalRecord]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_records_csv(&path, records).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn grid_is_complete_deterministic_and_leak_free() {
    let f = fixture(4);
    let a = run(&f, &f.cfg);
    assert!(a.audit.checks > 0);
    assert!(a.audit.violations.is_empty(), "{:?}", a.audit.violations);
    assert_eq!(a.failed_records(), 0);

    // one no-transfer model, 14 sources x 3 configs, 9 cluster ensembles and the
    // all-source ensemble per (week, split); MA once per week
    let weeks = 4;
    let per_cell = 1 + 42 + 9 + 1;
    let count = |kind: ModelKind| a.records.iter().filter(|r| r.kind == kind).count();
    assert_eq!(count(ModelKind::WoTl), weeks * 2);
    assert_eq!(count(ModelKind::Tl), weeks * 2 * 42);
    assert_eq!(count(ModelKind::Ensemble), weeks * 2 * 10);
    assert_eq!(count(ModelKind::Ma), weeks);
    assert_eq!(a.records.len(), weeks * 2 * per_cell + weeks);

    let b = run(&f, &f.cfg);
    assert_eq!(csv_bytes(&a.records), csv_bytes(&b.records));

    let mut parallel = f.cfg.clone();
    parallel.jobs = 3;
    assert_eq!(run(&f, &parallel).records, a.records);
}

#[test]
fn future_target_sales_do_not_change_scores() {
    let f = fixture(5);
    let mut cfg = f.cfg.clone();
    cfg.walk_forward.last_week = 4;
    let before = run(&f, &cfg);

    // Rewrite every target record from week 5 on.
    let mut altered = Fixture {
        cfg: cfg.clone(),
        universe: f.universe.clone(),
        sources: f.sources.clone(),
    };
    let meta = altered.universe.target.meta.clone();
    let records = altered.universe.target.panel.records().into_iter().map(|mut r| {
        if meta.week_of(r.date) >= 5 {
            r.units = r.units * 3.0 + 7.0;
        }
        r
    });
    altered.universe.target.panel = SalesPanel::from_records(meta.product_id.clone(), records).unwrap();
    assert_ne!(altered.universe.target.panel, f.universe.target.panel);

    let after = run(&altered, &cfg);
    assert_eq!(before.records, after.records);
}

/// Recomputes every cell and aggregate straight from the records.
#[test]
fn report_matches_an_independent_aggregation() {
    let f = fixture(6);
    let out = run(&f, &f.cfg);
    let mut by_cell: BTreeMap<(String, i64), Vec<f64>> = BTreeMap::new();
    for r in &out.records {
        by_cell.entry((r.model_id.clone(), r.week)).or_default().extend(r.mse);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base: BTreeMap<i64, f64> = by_cell
        .iter()
        .filter(|((id, _), _)| id == WO_TL)
        .map(|((_, w), v)| (*w, mean(v)))
        .collect();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());

    for ((id, week), v) in &by_cell {
        let cell = out.report.cell(id, *week).unwrap();
        let m = mean(v);
        assert!(close(cell.mean_mse, m), "{id} week {week}");
        assert!(close(cell.improvement, 100.0 * (base[week] - m) / base[week]));
        if v.len() > 1 {
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            assert!(close(cell.std_mse, var.sqrt()));
        }
    }

    let promo: Vec<i64> = (3..=6).filter(|w| f.universe.target.meta.is_promo_week(*w)).collect();
    assert_eq!(promo, vec![6]);
    for id in [WO_TL, MA, "ens_all", "tl_source_03_config2"] {
        for (scope, weeks) in [
            (AggregateScope::All, vec![3, 4, 5, 6]),
            (AggregateScope::Promo, vec![6]),
            (AggregateScope::NonPromo, vec![3, 4, 5]),
        ] {
            let model = weeks.iter().map(|w| mean(&by_cell[&(id.to_string(), *w)])).sum::<f64>() / weeks.len() as f64;
            let b = weeks.iter().map(|w| base[w]).sum::<f64>() / weeks.len() as f64;
            let agg = out.report.aggregate(id, scope).unwrap();
            assert_eq!(agg.weeks, weeks.len());
            assert!(close(agg.mean_mse, model), "{id} {scope:?}");
            assert!(close(agg.improvement, 100.0 * (b - model) / b), "{id} {scope:?}");
        }
    }
}

#[test]
fn source_training_is_reproducible_and_seeded() {
    let cfg = small_config(8);
    let u = generate_universe(&cfg.generator).unwrap();
    let a = train_sources(&u, &cfg).unwrap();
    let mut parallel = cfg.clone();
    parallel.jobs = 2;
    let b = train_sources(&u, &parallel).unwrap();
    assert_eq!(a.len(), 14);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((&x.network, &x.scaler, &x.history), (&y.network, &y.scaler, &y.history));
    }
    for b in &a {
        assert_eq!(b.seed, seed::derive(cfg.source_seed(&b.product_id), &[1]));
        assert_eq!(b.train_weeks, (2, 60));
        assert!(b.notes.contains_key("config"));
    }
}
