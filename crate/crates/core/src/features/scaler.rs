use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureRow, FEATURE_NAMES, NUM_FEATURES};
use crate::net::{Dataset, Matrix};

pub const TARGET_LOW: f64 = -0.9;
pub const TARGET_HIGH: f64 = 0.9;

/// Per-feature z-scoring plus a min-max map of the target onto [-0.9, 0.9].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub shift: [f64; NUM_FEATURES],
    pub scale: [f64; NUM_FEATURES],
    pub y_min: f64,
    pub y_max: f64,
}

impl Scaler {
    pub fn fit<'a, I>(rows: I) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = &'a FeatureRow>,
    {
        let mut n = 0usize;
        let mut sum = [0.0; NUM_FEATURES];
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        let rows: Vec<&FeatureRow> = rows.into_iter().collect();
        for r in &rows {
            n += 1;
            for (s, v) in sum.iter_mut().zip(&r.x) {
                *s += v;
            }
            y_min = y_min.min(r.y);
            y_max = y_max.max(r.y);
        }
        if n == 0 {
            return Err(FeatureError::EmptyRows);
        }
        let shift = sum.map(|s| s / n as f64);
        let mut sq = [0.0; NUM_FEATURES];
        for r in &rows {
            for j in 0..NUM_FEATURES {
                let d = r.x[j] - shift[j];
                sq[j] += d * d;
            }
        }
        let mut scale = [1.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            let std = (sq[j] / n as f64).sqrt();
            if std > 1e-12 {
                scale[j] = std;
            } else {
                log::debug!("feature {} has zero variance; scale set to 1", FEATURE_NAMES[j]);
            }
        }
        if y_max <= y_min {
            log::debug!("constant training target {y_min}; target range widened to 1");
            y_max = y_min + 1.0;
        }
        Ok(Self {
            shift,
            scale,
            y_min,
            y_max,
        })
    }

    pub fn transform_x(&self, x: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| (x[j] - self.shift[j]) / self.scale[j])
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        TARGET_LOW + (y - self.y_min) / (self.y_max - self.y_min) * (TARGET_HIGH - TARGET_LOW)
    }

    pub fn invert_target(&self, scaled: f64) -> f64 {
        self.y_min + (scaled - TARGET_LOW) / (TARGET_HIGH - TARGET_LOW) * (self.y_max - self.y_min)
    }

    /// Scaled inputs and targets of `rows`, in order.
    pub fn dataset<'a, I>(&self, rows: I) -> Dataset
    where
        I: IntoIterator<Item = &'a FeatureRow>,
    {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in rows {
            x.extend_from_slice(&self.transform_x(&r.x));
            y.push(self.scale_target(r.y));
        }
        let n = y.len();
        Dataset {
            x: Matrix::from_vec(n, NUM_FEATURES, x),
            y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn row(x0: f64, y: f64) -> FeatureRow {
        let mut x = [7.0; NUM_FEATURES];
        x[0] = x0;
        FeatureRow {
            store_id: 1,
            date: NaiveDate::from_ymd_opt(2019, 1, 7).unwrap(),
            hour: 8,
            week: 2,
            x,
            y,
            lag_fallback: false,
            max_input_date: None,
        }
    }

    #[test]
    fn target_range_maps_onto_tanh_band() {
        let rows = [row(0.0, 0.0), row(1.0, 10.0)];
        let s = Scaler::fit(&rows).unwrap();
        assert_eq!(s.scale_target(5.0), 0.0);
        assert!((s.scale_target(10.0) - 0.9).abs() < 1e-15);
        assert!((s.scale_target(0.0) + 0.9).abs() < 1e-15);
        // unseen targets are not clipped
        assert!(s.scale_target(20.0) > 2.0);
    }

    #[test]
    fn constant_columns_scale_to_zero() {
        let rows = [row(0.0, 1.0), row(2.0, 3.0), row(4.0, 2.0)];
        let s = Scaler::fit(&rows).unwrap();
        assert_eq!(s.scale[1], 1.0);
        let t = s.transform_x(&rows[2].x);
        assert!(t[1..].iter().all(|v| *v == 0.0));
        let ds = s.dataset(&rows);
        let col0: Vec<f64> = (0..3).map(|i| ds.x.get(i, 0)).collect();
        let mean = col0.iter().sum::<f64>() / 3.0;
        let var = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_target_and_empty_input() {
        let s = Scaler::fit(&[row(0.0, 3.0), row(1.0, 3.0)]).unwrap();
        assert_eq!((s.y_min, s.y_max), (3.0, 4.0));
        assert!(Scaler::fit(&[]).is_err());
    }

    proptest! {
        #[test]
        fn target_round_trip(ys in proptest::collection::vec(0.0f64..500.0, 2..40), probe in -100.0f64..1000.0) {
            let rows: Vec<FeatureRow> = ys.iter().map(|&y| row(y, y)).collect();
            let s = Scaler::fit(&rows).unwrap();
            for &y in ys.iter().chain([probe].iter()) {
                prop_assert!((s.invert_target(s.scale_target(y)) - y).abs() < 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
