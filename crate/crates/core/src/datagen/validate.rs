use std::path::Path;

use serde::Serialize;

use super::{Calibration, ProductData, Universe};
use crate::similarity::{assign_clusters, compute_stats, ClusterThresholds, Dimension, Level, ProductStats};

/// Promotion-week mean must exceed non-promotion mean by this factor.
pub const UPLIFT_THRESHOLD: f64 = 1.10;
const MEAN_STD_BAND: f64 = 0.10;
const PROMO_SHARE_BAND: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationCheck {
    pub product_id: String,
    pub target_mean: f64,
    pub target_std: f64,
    pub target_price: f64,
    pub target_promo_share: f64,
    pub mean: f64,
    pub std: f64,
    pub price: f64,
    pub promo_share: f64,
    pub mean_ok: bool,
    pub std_ok: bool,
    pub promo_ok: bool,
    pub uplift_ratio: Option<f64>,
    pub uplift_ok: Option<bool>,
    pub mean_cluster: Level,
    pub expected_mean_cluster: Level,
}

impl CalibrationCheck {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.std_ok && self.promo_ok && self.uplift_ok.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Sources in order, then the target.
    pub checks: Vec<CalibrationCheck>,
    /// Low/Medium/High counts of realised source means under tertile clustering.
    pub source_mean_split: [usize; 3],
    pub mean_labels_match: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.mean_labels_match && self.checks.iter().all(CalibrationCheck::passed)
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| {
                format!(
                    "{}: mean {:.3}/{:.3} std {:.3}/{:.3} promo {:.4}/{:.4} uplift {:?}",
                    c.product_id, c.mean, c.target_mean, c.std, c.target_std, c.promo_share, c.target_promo_share, c.uplift_ratio
                )
            })
            .collect();
        if !self.mean_labels_match {
            out.push(format!("mean-sales split {:?} does not match the reference labels", self.source_mean_split));
        }
        out
    }

    /// Writes the replica table: targets, realised values, cluster and pass flags per product.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.checks {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn uplift_ratio(p: &ProductData) -> Option<f64> {
    let (mut promo, mut normal) = ((0.0, 0usize), (0.0, 0usize));
    for (_, date, _, units) in p.panel.iter() {
        let acc = if p.meta.is_promo_week(p.meta.week_of(date)) {
            &mut promo
        } else {
            &mut normal
        };
        acc.0 += units;
        acc.1 += 1;
    }
    (promo.1 > 0 && normal.1 > 0 && normal.0 > 0.0).then(|| (promo.0 / promo.1 as f64) / (normal.0 / normal.1 as f64))
}

fn reference_stats(c: &Calibration) -> ProductStats {
    ProductStats {
        product_id: c.product_id.clone(),
        mean_hourly_sales: c.mean_hourly,
        std_hourly_sales: c.std_hourly,
        sales_price: c.price,
        promo_share: c.promo_share,
    }
}

/// Recomputes per-product statistics and checks them against the calibration targets.
pub fn validate_universe(u: &Universe) -> ValidationReport {
    let spec = &u.spec;
    let windows = u
        .sources
        .iter()
        .map(|_| 1..=spec.source_history_weeks)
        .chain([1..=spec.target_calibration_weeks]);
    let calibrations: Vec<&Calibration> = spec.sources.iter().chain([&spec.target]).collect();
    let stats: Vec<Option<ProductStats>> = u
        .products()
        .zip(windows)
        .map(|(p, w)| compute_stats(&p.panel, &p.meta, w).ok())
        .collect();

    let realised: Vec<ProductStats> = stats
        .iter()
        .zip(&calibrations)
        .map(|(s, c)| {
            s.clone().unwrap_or_else(|| ProductStats {
                product_id: c.product_id.clone(),
                mean_hourly_sales: f64::NAN,
                std_hourly_sales: f64::NAN,
                sales_price: f64::NAN,
                promo_share: f64::NAN,
            })
        })
        .collect();
    let reference: Vec<ProductStats> = calibrations.iter().map(|c| reference_stats(c)).collect();
    let n_src = u.sources.len();
    let thresholds = ClusterThresholds::default();
    let labels = |all: &[ProductStats]| -> Option<Vec<Level>> {
        let bp = thresholds.resolve(&all[..n_src]).ok()?;
        Some(assign_clusters(all, &bp).iter().map(|a| a.level(Dimension::MeanSales)).collect())
    };
    let got = labels(&realised);
    let expected = labels(&reference);
    let mut split = [0usize; 3];
    if let Some(g) = &got {
        for l in &g[..n_src] {
            split[*l as usize] += 1;
        }
    }
    let mean_labels_match = got.is_some() && got.as_ref().map(|g| &g[..n_src]) == expected.as_ref().map(|e| &e[..n_src]);

    let within = |got: f64, want: f64| (got - want).abs() <= MEAN_STD_BAND * want;
    let checks = u
        .products()
        .zip(&realised)
        .zip(&calibrations)
        .enumerate()
        .map(|(i, ((p, s), c))| {
            let ratio = if p.meta.promo_calendar.is_empty() {
                None
            } else {
                uplift_ratio(p)
            };
            let has_promo = !p.meta.promo_calendar.is_empty();
            CalibrationCheck {
                product_id: c.product_id.clone(),
                target_mean: c.mean_hourly,
                target_std: c.std_hourly,
                target_price: c.price,
                target_promo_share: c.promo_share,
                mean: s.mean_hourly_sales,
                std: s.std_hourly_sales,
                price: s.sales_price,
                promo_share: s.promo_share,
                mean_ok: within(s.mean_hourly_sales, c.mean_hourly),
                std_ok: within(s.std_hourly_sales, c.std_hourly),
                promo_ok: (s.promo_share - c.promo_share).abs() <= PROMO_SHARE_BAND,
                uplift_ratio: ratio,
                uplift_ok: has_promo.then(|| ratio.is_some_and(|r| r > UPLIFT_THRESHOLD)),
                mean_cluster: got.as_ref().map_or(Level::Low, |g| g[i]),
                expected_mean_cluster: expected.as_ref().map_or(Level::Low, |e| e[i]),
            }
        })
        .collect();
    ValidationReport {
        checks,
        source_mean_split: split,
        mean_labels_match,
    }
}
