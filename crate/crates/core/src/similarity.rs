//! Product statistics and Low/Medium/High clustering along three similarity dimensions.

use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{ProductMeta, SalesPanel};

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("no records for {product} in weeks {start}..={end}")]
    EmptyWindow { product: String, start: i64, end: i64 },
    #[error("{dimension} breakpoints {low_upper} and {medium_upper} are not increasing")]
    NonMonotone {
        dimension: Dimension,
        low_upper: f64,
        medium_upper: f64,
    },
    #[error("tertile breakpoints need at least 3 source products, got {0}")]
    TooFewSources(usize),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductStats {
    pub product_id: String,
    pub mean_hourly_sales: f64,
    pub std_hourly_sales: f64,
    pub sales_price: f64,
    pub promo_share: f64,
}

impl ProductStats {
    pub fn value(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::MeanSales => self.mean_hourly_sales,
            Dimension::Price => self.sales_price,
            Dimension::Promotion => self.promo_share,
        }
    }
}

/// Mean and population std of hourly units, base price and share of records in promotion weeks.
pub fn compute_stats(
    panel: &SalesPanel,
    meta: &ProductMeta,
    window: RangeInclusive<i64>,
) -> Result<ProductStats, SimilarityError> {
    let (lo, hi) = (meta.week_start(*window.start()), meta.week_start(*window.end() + 1));
    let mut n = 0usize;
    let mut promo = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut values = Vec::new();
    for (_, date, _, units) in panel.iter() {
        if date < lo || date >= hi {
            continue;
        }
        n += 1;
        sum += units;
        values.push(units);
        if meta.is_promo_week(meta.week_of(date)) {
            promo += 1;
        }
    }
    if n == 0 {
        return Err(SimilarityError::EmptyWindow {
            product: meta.product_id.clone(),
            start: *window.start(),
            end: *window.end(),
        });
    }
    let mean = sum / n as f64;
    for v in &values {
        sum_sq += (v - mean) * (v - mean);
    }
    Ok(ProductStats {
        product_id: meta.product_id.clone(),
        mean_hourly_sales: mean,
        std_hourly_sales: (sum_sq / n as f64).sqrt(),
        sales_price: meta.base_price,
        promo_share: promo as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    MeanSales,
    Price,
    Promotion,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::MeanSales, Dimension::Price, Dimension::Promotion];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::MeanSales => "mean_sales",
            Dimension::Price => "price",
            Dimension::Promotion => "promotion",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];

    pub fn name(self) -> &'static str {
        match self {
            Level::Low => "Low",
            Level::Medium => "Medium",
            Level::High => "High",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the two breakpoints of one dimension are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Threshold {
    /// Split the sorted source values into groups of floor(n/3), floor(2n/3) - floor(n/3)
    /// and the rest; breakpoints sit halfway between neighbouring groups.
    Tertiles,
    Explicit { low_upper: f64, medium_upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterThresholds {
    pub mean_sales: Threshold,
    pub price: Threshold,
    pub promotion: Threshold,
}

impl Default for ClusterThresholds {
    fn default() -> Self {
        Self {
            mean_sales: Threshold::Tertiles,
            price: Threshold::Tertiles,
            promotion: Threshold::Tertiles,
        }
    }
}

impl ClusterThresholds {
    /// Tertiles for mean sales, explicit breakpoints that reproduce the reference
    /// price and promotion clusters.
    pub fn reference() -> Self {
        Self {
            mean_sales: Threshold::Tertiles,
            price: Threshold::Explicit {
                low_upper: 0.52,
                medium_upper: 0.64,
            },
            promotion: Threshold::Explicit {
                low_upper: 0.03,
                medium_upper: 0.075,
            },
        }
    }

    pub fn get(&self, dim: Dimension) -> Threshold {
        match dim {
            Dimension::MeanSales => self.mean_sales,
            Dimension::Price => self.price,
            Dimension::Promotion => self.promotion,
        }
    }

    /// Fixes every dimension's breakpoints against the source products.
    pub fn resolve(&self, sources: &[ProductStats]) -> Result<Breakpoints, SimilarityError> {
        let mut out = [(0.0, 0.0); 3];
        for (slot, dim) in out.iter_mut().zip(Dimension::ALL) {
            let (low_upper, medium_upper) = match self.get(dim) {
                Threshold::Explicit {
                    low_upper,
                    medium_upper,
                } => (low_upper, medium_upper),
                Threshold::Tertiles => {
                    let values: Vec<f64> = sources.iter().map(|s| s.value(dim)).collect();
                    tertile_breakpoints(&values)?
                }
            };
            if !(low_upper < medium_upper) {
                return Err(SimilarityError::NonMonotone {
                    dimension: dim,
                    low_upper,
                    medium_upper,
                });
            }
            *slot = (low_upper, medium_upper);
        }
        Ok(Breakpoints(out))
    }
}

pub fn tertile_breakpoints(values: &[f64]) -> Result<(f64, f64), SimilarityError> {
    let n = values.len();
    if n < 3 {
        return Err(SimilarityError::TooFewSources(n));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let a = n / 3;
    let b = 2 * n / 3;
    Ok(((v[a - 1] + v[a]) / 2.0, (v[b - 1] + v[b]) / 2.0))
}

/// Resolved (low_upper, medium_upper) per dimension, in [`Dimension::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoints(pub [(f64, f64); 3]);

impl Breakpoints {
    pub fn level(&self, dim: Dimension, value: f64) -> Level {
        let (low, medium) = self.0[dim as usize];
        if value <= low {
            Level::Low
        } else if value <= medium {
            Level::Medium
        } else {
            Level::High
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub product_id: String,
    pub mean_sales: Level,
    pub price: Level,
    pub promotion: Level,
}

impl ClusterAssignment {
    pub fn level(&self, dim: Dimension) -> Level {
        match dim {
            Dimension::MeanSales => self.mean_sales,
            Dimension::Price => self.price,
            Dimension::Promotion => self.promotion,
        }
    }
}

pub fn assign_clusters(stats: &[ProductStats], breakpoints: &Breakpoints) -> Vec<ClusterAssignment> {
    stats
        .iter()
        .map(|s| ClusterAssignment {
            product_id: s.product_id.clone(),
            mean_sales: breakpoints.level(Dimension::MeanSales, s.mean_hourly_sales),
            price: breakpoints.level(Dimension::Price, s.sales_price),
            promotion: breakpoints.level(Dimension::Promotion, s.promo_share),
        })
        .collect()
}

#[derive(Serialize)]
struct ClusterRow<'a> {
    product_id: &'a str,
    mean_hourly_sales: f64,
    std_hourly_sales: f64,
    sales_price: f64,
    promo_share: f64,
    mean_sales_cluster: Level,
    price_cluster: Level,
    promotion_cluster: Level,
}

/// Writes one row per product: statistics followed by the three cluster labels.
pub fn write_cluster_table(
    path: &Path,
    stats: &[ProductStats],
    assignments: &[ClusterAssignment],
) -> Result<(), SimilarityError> {
    let mut w = csv::Writer::from_path(path)?;
    for (s, a) in stats.iter().zip(assignments) {
        w.serialize(ClusterRow {
            product_id: &s.product_id,
            mean_hourly_sales: s.mean_hourly_sales,
            std_hourly_sales: s.std_hourly_sales,
            sales_price: s.sales_price,
            promo_share: s.promo_share,
            mean_sales_cluster: a.mean_sales,
            price_cluster: a.price,
            promotion_cluster: a.promotion,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
