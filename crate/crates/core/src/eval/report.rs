use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord, ModelKind, WO_TL};
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model_id: String,
    pub kind: ModelKind,
    pub source: Option<String>,
    pub config: Option<TransferConfig>,
    pub week: i64,
    /// Scored splits.
    pub n: usize,
    pub failures: usize,
    pub mean_mse: f64,
    /// Sample standard deviation over splits (0 for a single split).
    pub std_mse: f64,
    /// Percentage MSE reduction relative to the no-transfer model.
    pub improvement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateScope {
    All,
    Promo,
    NonPromo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregate {
    pub model_id: String,
    pub scope: AggregateScope,
    pub weeks: usize,
    /// Mean over weeks of the split-mean MSE.
    pub mean_mse: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub baseline: String,
    pub promo_weeks: Vec<i64>,
    pub cells: Vec<ReportCell>,
    pub aggregates: Vec<ReportAggregate>,
}

impl EvalReport {
    pub fn cell(&self, model_id: &str, week: i64) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.model_id == model_id && c.week == week)
    }

    pub fn aggregate(&self, model_id: &str, scope: AggregateScope) -> Option<&ReportAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.model_id == model_id && a.scope == scope)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// One row per (model, week) cell.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn improvement(base: f64, model: f64) -> f64 {
    100.0 * (base - model) / base
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-(model, week) MSE statistics and improvements over the no-transfer model.
/// Split MSEs are averaged before improvements are taken.
pub fn improvement_report(records: &[EvalRecord], promo_weeks: &[i64]) -> Result<EvalReport, EvalError> {
    struct Acc<'a> {
        first: &'a EvalRecord,
        values: Vec<f64>,
        failures: usize,
    }
    let mut groups: BTreeMap<(String, i64), Acc<'_>> = BTreeMap::new();
    for r in records {
        let acc = groups.entry((r.model_id.clone(), r.week)).or_insert(Acc {
            first: r,
            values: Vec::new(),
            failures: 0,
        });
        match r.mse {
            Some(v) => acc.values.push(v),
            None => acc.failures += 1,
        }
    }
    let baseline: BTreeMap<i64, f64> = groups
        .iter()
        .filter(|((id, _), acc)| id == WO_TL && !acc.values.is_empty())
        .map(|((_, w), acc)| (*w, mean_std(&acc.values).0))
        .collect();

    let mut cells = Vec::new();
    for ((id, week), acc) in &groups {
        if acc.values.is_empty() {
            continue;
        }
        let base = *baseline
            .get(week)
            .ok_or(EvalError::MissingBaseline { week: *week })?;
        let (mean, std) = mean_std(&acc.values);
        cells.push(ReportCell {
            model_id: id.clone(),
            kind: acc.first.kind,
            source: acc.first.source.clone(),
            config: acc.first.config,
            week: *week,
            n: acc.values.len(),
            failures: acc.failures,
            mean_mse: mean,
            std_mse: std,
            improvement: improvement(base, mean),
        });
    }

    let promo: BTreeSet<i64> = promo_weeks.iter().copied().collect();
    let mut per_model: BTreeMap<&str, Vec<&ReportCell>> = BTreeMap::new();
    for c in &cells {
        per_model.entry(&c.model_id).or_default().push(c);
    }
    let mut aggregates = Vec::new();
    for (id, model_cells) in &per_model {
        for scope in [AggregateScope::All, AggregateScope::Promo, AggregateScope::NonPromo] {
            let chosen: Vec<&&ReportCell> = model_cells
                .iter()
                .filter(|c| match scope {
                    AggregateScope::All => true,
                    AggregateScope::Promo => promo.contains(&c.week),
                    AggregateScope::NonPromo => !promo.contains(&c.week),
                })
                .collect();
            if chosen.is_empty() {
                continue;
            }
            let k = chosen.len() as f64;
            let model = chosen.iter().map(|c| c.mean_mse).sum::<f64>() / k;
            let base = chosen.iter().map(|c| baseline[&c.week]).sum::<f64>() / k;
            aggregates.push(ReportAggregate {
                model_id: id.to_string(),
                scope,
                weeks: chosen.len(),
                mean_mse: model,
                improvement: improvement(base, model),
            });
        }
    }
    Ok(EvalReport {
        baseline: WO_TL.to_string(),
        promo_weeks: promo.into_iter().collect(),
        cells,
        aggregates,
    })
}
