//! Walk-forward evaluation, the moving-average baseline and improvement reporting.

mod report;
mod walk;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::features::{ProductMeta, SalesPanel, StoreId, StoreMeta};
use crate::transfer::TransferConfig;

pub use report::{improvement_report, AggregateScope, EvalReport, ReportAggregate, ReportCell};
pub use walk::{
    walk_forward, FreshFactory, LeakageAudit, ModelFactory, TransferFactory, WalkForwardOptions, WalkForwardResult,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction length {predicted} differs from truth length {truth}")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("cannot score an empty prediction")]
    Empty,
    #[error("no prior week of sales before week {0}")]
    NoHistory(i64),
    #[error("no baseline record for week {week}")]
    MissingBaseline { week: i64 },
    #[error("{0}")]
    Feature(#[from] crate::features::FeatureError),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Mean squared error.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != y_hat.len() {
        return Err(EvalError::LengthMismatch {
            truth: y.len(),
            predicted: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Hourly predictions keyed by (store, date, hour).
pub type HourlyPredictions = BTreeMap<(StoreId, NaiveDate, u8), f64>;

/// Two-week moving average of same-weekday daily totals, spread evenly over the opening hours.
pub fn ma_baseline(
    panel: &SalesPanel,
    meta: &ProductMeta,
    stores: &[StoreMeta],
    predict_week: i64,
) -> Result<HourlyPredictions, EvalError> {
    let prior: Vec<i64> = (1..predict_week).rev().take(2).collect();
    if prior.is_empty() {
        return Err(EvalError::NoHistory(predict_week));
    }
    let mut out = BTreeMap::new();
    for store in stores {
        for offset in 0..7 {
            let date = meta.week_start(predict_week) + Duration::days(offset);
            let open = store.open_hours(date.weekday());
            if open.is_empty() {
                continue;
            }
            let total: f64 = prior
                .iter()
                .map(|&w| {
                    let day = meta.week_start(w) + Duration::days(offset);
                    (0..24).filter_map(|h| panel.units(store.store_id, day, h)).sum::<f64>()
                })
                .sum();
            let hourly = total / prior.len() as f64 / open.len() as f64;
            for hour in open {
                out.insert((store.store_id, date, hour), hourly);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Fresh initialisation, no transfer.
    WoTl,
    Tl,
    Ensemble,
    Ma,
}

/// Model id of the no-transfer baseline.
pub const WO_TL: &str = "wo_tl";
/// Model id of the moving-average baseline.
pub const MA: &str = "ma";

/// One scored (model, week, split) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub kind: ModelKind,
    pub source: Option<String>,
    pub config: Option<TransferConfig>,
    pub week: i64,
    /// Absent for the moving-average baseline.
    pub split_id: Option<usize>,
    /// Absent when training failed.
    pub mse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

impl EvalRecord {
    fn sort_key(&self) -> (i64, Option<usize>, ModelKind, String) {
        (self.week, self.split_id, self.kind, self.model_id.clone())
    }
}

pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by_key(EvalRecord::sort_key);
}

pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2019, 1, day).unwrap()
    }

    #[test]
    fn mse_by_hand() {
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((mse(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mse(&[1.0], &[]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(mse(&[], &[]), Err(EvalError::Empty)));
    }

    proptest! {
        #[test]
        fn mse_ignores_joint_permutation(
            pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..30),
            rot in 0usize..30,
        ) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
            let k = rot % pairs.len();
            let mut q = pairs.clone();
            q.rotate_left(k);
            q.reverse();
            let (y2, p2): (Vec<f64>, Vec<f64>) = q.into_iter().unzip();
            let a = mse(&y, &p).unwrap();
            let b = mse(&y2, &p2).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    fn meta() -> ProductMeta {
        ProductMeta {
            product_id: "t".into(),
            base_price: 1.0,
            introduced: d(7),
            promo_calendar: Default::default(),
            subgroup: String::new(),
        }
    }

    fn store() -> StoreMeta {
        let mut opening_hours = [Some((8, 18)); 7];
        opening_hours[6] = None;
        StoreMeta {
            store_id: 1,
            state: 1,
            opening_hours,
        }
    }

    #[test]
    fn monday_totals_40_and_60_give_5_per_hour() {
        let m = meta();
        let mut p = SalesPanel::new("t");
        for (w, per_hour) in [(1, 4.0), (2, 6.0)] {
            for h in 8..18 {
                p.insert(1, m.week_start(w), h, per_hour).unwrap();
            }
        }
        let pred = ma_baseline(&p, &m, &[store()], 3).unwrap();
        let monday = m.week_start(3);
        assert_eq!(pred[&(1, monday, 8)], 5.0);
        assert_eq!(pred[&(1, monday, 17)], 5.0);
        // no Tuesday sales recorded
        assert_eq!(pred[&(1, monday + Duration::days(1), 8)], 0.0);
        assert!(!pred.contains_key(&(1, monday + Duration::days(6), 9)));
        assert_eq!(pred.len(), 60);
    }

    #[test]
    fn constant_series_and_short_history() {
        let m = meta();
        let mut p = SalesPanel::new("t");
        for w in 1..=3 {
            for k in 0..6 {
                for h in 8..18 {
                    p.insert(1, m.week_start(w) + Duration::days(k), h, 3.0).unwrap();
                }
            }
        }
        let pred = ma_baseline(&p, &m, &[store()], 4).unwrap();
        assert!(pred.values().all(|v| *v == 3.0));
        assert!(ma_baseline(&p, &m, &[store()], 2).unwrap().values().all(|v| *v == 3.0));
        assert!(matches!(ma_baseline(&p, &m, &[store()], 1), Err(EvalError::NoHistory(1))));
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = vec![
            EvalRecord {
                model_id: "tl_source_01_config2".into(),
                kind: ModelKind::Tl,
                source: Some("source_01".into()),
                config: Some(TransferConfig::Config2),
                week: 3,
                split_id: Some(0),
                mse: Some(1.25),
                best_epoch: Some(4),
                error: None,
            },
            EvalRecord {
                model_id: MA.into(),
                kind: ModelKind::Ma,
                source: None,
                config: None,
                week: 3,
                split_id: None,
                mse: Some(0.1 + 0.2),
                best_epoch: None,
                error: None,
            },
        ];
        write_records_csv(&path, &recs).unwrap();
        assert_eq!(read_records_csv(&path).unwrap(), recs);
    }
}
