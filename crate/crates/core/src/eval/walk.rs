use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ma_baseline, mse, EvalError, EvalRecord, ModelKind, MA, WO_TL};
use crate::features::{build_features, FeatureRow, HolidayCalendar, ProductMeta, SalesPanel, Scaler, StoreMeta};
use crate::net::{train, Dataset, FrozenMask, LayerSpec, NetworkParams, TrainHistory, TrainSpec};
use crate::seed;
use crate::transfer::{average, fine_tune, EnsembleSpec, TransferConfig};

/// Something that produces a trained network for one walk-forward cell.
pub trait ModelFactory: Send + Sync {
    fn model_id(&self) -> String;
    fn kind(&self) -> ModelKind;
    fn source(&self) -> Option<&str> {
        None
    }
    fn config(&self) -> Option<TransferConfig> {
        None
    }
    /// Latest record date behind any pre-trained parameters.
    fn data_horizon(&self) -> Option<NaiveDate> {
        None
    }
    fn fit(
        &self,
        train_set: &Dataset,
        validation_set: &Dataset,
        spec: &TrainSpec,
        init_seed: u64,
    ) -> Result<(NetworkParams, TrainHistory), String>;
}

/// Fresh random initialisation: the no-transfer model.
pub struct FreshFactory {
    pub architecture: Vec<LayerSpec>,
}

impl ModelFactory for FreshFactory {
    fn model_id(&self) -> String {
        WO_TL.to_string()
    }

    fn kind(&self) -> ModelKind {
        ModelKind::WoTl
    }

    fn fit(
        &self,
        train_set: &Dataset,
        validation_set: &Dataset,
        spec: &TrainSpec,
        init_seed: u64,
    ) -> Result<(NetworkParams, TrainHistory), String> {
        let init = NetworkParams::init(&self.architecture, init_seed).map_err(|e| e.to_string())?;
        let mask = FrozenMask::none(init.num_layers());
        train(&init, train_set, validation_set, spec, &mask).map_err(|e| e.to_string())
    }
}

/// Fine-tuning of a pre-trained source network under one freezing configuration.
pub struct TransferFactory {
    pub source_id: String,
    pub params: NetworkParams,
    pub config: TransferConfig,
    pub horizon: NaiveDate,
}

impl TransferFactory {
    pub fn id(source: &str, config: TransferConfig) -> String {
        format!("tl_{source}_{config}")
    }
}

impl ModelFactory for TransferFactory {
    fn model_id(&self) -> String {
        Self::id(&self.source_id, self.config)
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Tl
    }

    fn source(&self) -> Option<&str> {
        Some(&self.source_id)
    }

    fn config(&self) -> Option<TransferConfig> {
        Some(self.config)
    }

    fn data_horizon(&self) -> Option<NaiveDate> {
        Some(self.horizon)
    }

    fn fit(
        &self,
        train_set: &Dataset,
        validation_set: &Dataset,
        spec: &TrainSpec,
        _init_seed: u64,
    ) -> Result<(NetworkParams, TrainHistory), String> {
        fine_tune(&self.params, self.config, train_set, validation_set, spec).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardOptions {
    pub weeks: RangeInclusive<i64>,
    pub n_splits: usize,
    pub base_seed: u64,
    pub train_fraction: f64,
    pub train_spec: TrainSpec,
    pub ensembles: Vec<EnsembleSpec>,
    pub include_ma: bool,
    /// Worker threads for the cell fan-out; 1 runs serially.
    pub jobs: usize,
}

/// Counts of anti-leakage assertions made during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub checks: u64,
    pub violations: Vec<String>,
}

impl LeakageAudit {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.violations.push(what());
        }
    }

    fn merge(&mut self, other: LeakageAudit) {
        self.checks += other.checks;
        self.violations.extend(other.violations);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkForwardResult {
    pub records: Vec<EvalRecord>,
    pub audit: LeakageAudit,
}

struct Cell<'a> {
    week: i64,
    split: usize,
    cutoff: NaiveDate,
    pool: Vec<&'a FeatureRow>,
    test: &'a [FeatureRow],
}

fn failed(factory: &dyn ModelFactory, week: i64, split: usize, error: String) -> EvalRecord {
    EvalRecord {
        model_id: factory.model_id(),
        kind: factory.kind(),
        source: factory.source().map(str::to_string),
        config: factory.config(),
        week,
        split_id: Some(split),
        mse: None,
        best_epoch: None,
        error: Some(error),
    }
}

fn run_cell(
    cell: &Cell<'_>,
    factories: &[Box<dyn ModelFactory>],
    opts: &WalkForwardOptions,
) -> (Vec<EvalRecord>, LeakageAudit) {
    let mut audit = LeakageAudit::default();
    let (w, s) = (cell.week, cell.split);
    let cell_seed = seed::derive(opts.base_seed, &[w as u64, s as u64]);

    let mut order: Vec<usize> = (0..cell.pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cell_seed));
    let n = order.len();
    let n_train = ((n as f64 * opts.train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train_rows: Vec<&FeatureRow> = order[..n_train].iter().map(|&i| cell.pool[i]).collect();
    let val_rows: Vec<&FeatureRow> = order[n_train..].iter().map(|&i| cell.pool[i]).collect();

    for r in train_rows.iter().chain(&val_rows) {
        audit.check(r.week < w && r.date < cell.cutoff, || {
            format!("week {w} split {s}: training row dated {} (week {})", r.date, r.week)
        });
    }
    for r in train_rows.iter().chain(&val_rows).copied().chain(cell.test) {
        audit.check(r.max_input_date.is_none_or(|d| d < cell.cutoff), || {
            format!("week {w} split {s}: features of {} read sales from {:?}", r.date, r.max_input_date)
        });
    }
    for f in factories {
        if let Some(h) = f.data_horizon() {
            audit.check(h < cell.cutoff, || format!("{}: trained on data up to {h}", f.model_id()));
        }
    }

    let scaler = match Scaler::fit(train_rows.iter().copied()) {
        Ok(s) => s,
        Err(e) => {
            let recs = factories.iter().map(|f| failed(f.as_ref(), w, s, e.to_string())).collect();
            return (recs, audit);
        }
    };
    let train_set = scaler.dataset(train_rows.iter().copied());
    let val_set = if val_rows.is_empty() {
        train_set.clone()
    } else {
        scaler.dataset(val_rows.iter().copied())
    };
    let test_set = scaler.dataset(cell.test);
    let truth: Vec<f64> = cell.test.iter().map(|r| r.y).collect();
    let spec = opts.train_spec.with_seed(seed::derive(cell_seed, &[1]));
    let init_seed = seed::derive(cell_seed, &[2]);

    let mut records = Vec::with_capacity(factories.len() + opts.ensembles.len());
    let mut predictions: HashMap<(String, TransferConfig), Vec<f64>> = HashMap::new();
    for f in factories {
        let outcome = f
            .fit(&train_set, &val_set, &spec, init_seed)
            .and_then(|(net, hist)| {
                let scaled = net.predict(&test_set.x).map_err(|e| e.to_string())?;
                let pred: Vec<f64> = scaled.into_iter().map(|p| scaler.invert_target(p)).collect();
                let score = mse(&truth, &pred).map_err(|e| e.to_string())?;
                if !score.is_finite() {
                    return Err(format!("non-finite MSE {score}"));
                }
                Ok((pred, score, hist.best_epoch))
            });
        match outcome {
            Ok((pred, score, best_epoch)) => {
                if let (Some(src), Some(cfg)) = (f.source(), f.config()) {
                    predictions.insert((src.to_string(), cfg), pred);
                }
                records.push(EvalRecord {
                    model_id: f.model_id(),
                    kind: f.kind(),
                    source: f.source().map(str::to_string),
                    config: f.config(),
                    week: w,
                    split_id: Some(s),
                    mse: Some(score),
                    best_epoch: Some(best_epoch),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("{} failed at week {w} split {s}: {e}", f.model_id());
                records.push(failed(f.as_ref(), w, s, e));
            }
        }
    }

    for ens in &opts.ensembles {
        let members: Option<Vec<Vec<f64>>> = ens
            .members
            .iter()
            .map(|m| predictions.get(&(m.clone(), ens.config)).cloned())
            .collect();
        let (score, error) = match members.map(|m| average(&m)) {
            Some(Ok(pred)) => match mse(&truth, &pred) {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            },
            Some(Err(e)) => (None, Some(e.to_string())),
            None => (None, Some("member model missing".to_string())),
        };
        records.push(EvalRecord {
            model_id: ens.id(),
            kind: ModelKind::Ensemble,
            source: None,
            config: Some(ens.config),
            week: w,
            split_id: Some(s),
            mse: score,
            best_epoch: None,
            error,
        });
    }
    (records, audit)
}

/// Scores every factory (and ensemble) for every predicted week and split.
///
/// Within a (week, split) cell all models share the row partition, the scaler
/// and the training seed.
pub fn walk_forward(
    panel: &SalesPanel,
    meta: &ProductMeta,
    stores: &[StoreMeta],
    cal: &HolidayCalendar,
    factories: &[Box<dyn ModelFactory>],
    opts: &WalkForwardOptions,
) -> Result<WalkForwardResult, EvalError> {
    let (first, last) = (*opts.weeks.start(), *opts.weeks.end());
    let rows = build_features(panel, meta, stores, cal, 2..=last)?;
    let mut by_week: BTreeMap<i64, Vec<FeatureRow>> = BTreeMap::new();
    for r in rows {
        by_week.entry(r.week).or_default().push(r);
    }
    let empty = Vec::new();
    let mut cells = Vec::new();
    for w in first.max(3)..=last {
        let pool: Vec<&FeatureRow> = by_week.range(2..w).flat_map(|(_, v)| v.iter()).collect();
        for split in 0..opts.n_splits {
            cells.push(Cell {
                week: w,
                split,
                cutoff: meta.week_start(w),
                pool: pool.clone(),
                test: by_week.get(&w).unwrap_or(&empty),
            });
        }
    }

    let run = |cell: &Cell<'_>| {
        let started = std::time::Instant::now();
        let out = run_cell(cell, factories, opts);
        log::info!(
            "week {} split {} done in {:.1}s",
            cell.week,
            cell.split,
            started.elapsed().as_secs_f64()
        );
        out
    };
    let results: Vec<(Vec<EvalRecord>, LeakageAudit)> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| EvalError::Io {
                path: "thread pool".into(),
                source: std::io::Error::other(e),
            })?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };

    let mut records = Vec::new();
    let mut audit = LeakageAudit::default();
    for (recs, a) in results {
        records.extend(recs);
        audit.merge(a);
    }
    if opts.include_ma {
        for w in first.max(3)..=last {
            let Some(test) = by_week.get(&w) else { continue };
            let pred = ma_baseline(panel, meta, stores, w)?;
            let truth: Vec<f64> = test.iter().map(|r| r.y).collect();
            let y_hat: Vec<f64> = test.iter().map(|r| pred[&(r.store_id, r.date, r.hour)]).collect();
            records.push(EvalRecord {
                model_id: MA.to_string(),
                kind: ModelKind::Ma,
                source: None,
                config: None,
                week: w,
                split_id: None,
                mse: Some(mse(&truth, &y_hat)?),
                best_epoch: None,
                error: None,
            });
        }
    }
    super::sort_records(&mut records);
    Ok(WalkForwardResult { records, audit })
}
