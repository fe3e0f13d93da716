//! Seeded synthetic sales universe: 14 long-history source products and one newly
//! introduced target product, calibrated to reference per-product statistics.
//!
//! Expected hourly demand is a product of a product base level, store size,
//! store weekday and hour-of-day curves, a product-specific hour tilt, a yearly
//! seasonal term, holiday effects and a promotion uplift. Units are drawn from a
//! negative binomial around that demand (a Poisson-Gamma mixture).

mod calendar;
pub mod io;
mod validate;

use std::f64::consts::PI;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::features::{HolidayCalendar, ProductMeta, SalesPanel, StoreId, StoreMeta};
use crate::seed;

pub use calendar::{calendar, easter, public_holidays, school_holidays};
pub use io::{read_universe, write_universe, UniverseIoError};
pub use validate::{validate_universe, CalibrationCheck, ValidationReport, UPLIFT_THRESHOLD};

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("{product}: target std {std} is unreachable (demand structure alone gives variance {floor:.3})")]
    Infeasible { product: String, std: f64, floor: f64 },
    #[error("{product}: calibration did not converge (achieved mean {mean:.3}, std {std:.3})")]
    Calibration { product: String, mean: f64, std: f64 },
}

/// Calibration target for one product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub product_id: String,
    pub mean_hourly: f64,
    pub std_hourly: f64,
    pub price: f64,
    pub promo_share: f64,
}

impl Calibration {
    fn new(id: &str, mean_hourly: f64, std_hourly: f64, price: f64, promo_share: f64) -> Self {
        Self {
            product_id: id.into(),
            mean_hourly,
            std_hourly,
            price,
            promo_share,
        }
    }
}

/// Reference statistics of the 14 source products.
pub fn reference_sources() -> Vec<Calibration> {
    [
        (2.42, 1.88, 0.99, 0.01),
        (3.8, 3.47, 0.79, 0.02),
        (4.24, 3.28, 0.59, 0.04),
        (4.66, 3.67, 0.55, 0.02),
        (5.32, 4.27, 0.59, 0.09),
        (5.7, 4.56, 0.55, 0.04),
        (5.77, 4.79, 0.39, 0.05),
        (5.77, 4.61, 0.49, 0.09),
        (5.92, 4.80, 0.45, 0.04),
        (6.46, 5.20, 0.49, 0.06),
        (7.01, 5.59, 0.39, 0.06),
        (7.06, 5.57, 0.69, 0.05),
        (7.37, 7.28, 0.49, 0.06),
        (7.46, 5.62, 0.59, 0.05),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(m, s, p, q))| Calibration::new(&format!("source_{:02}", i + 1), m, s, p, q))
    .collect()
}

pub fn reference_target() -> Calibration {
    Calibration::new("target", 3.13, 2.44, 0.59, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_stores: usize,
    pub source_history_weeks: i64,
    pub target_weeks: i64,
    /// Monday on which the target is introduced; source history ends the day before.
    pub target_introduction: NaiveDate,
    /// Leading target weeks whose statistics are calibrated.
    pub target_calibration_weeks: i64,
    pub target_promo_weeks: Vec<i64>,
    pub promo_uplift_factor: f64,
    /// Promotion price as a fraction of the base price.
    pub promo_price_factor: f64,
    pub sources: Vec<Calibration>,
    pub target: Calibration,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_stores: 10,
            source_history_weeks: 104,
            target_weeks: 17,
            target_introduction: NaiveDate::from_ymd_opt(2019, 1, 7).expect("valid date"),
            target_calibration_weeks: 2,
            target_promo_weeks: vec![6, 7, 8, 9, 10, 12],
            promo_uplift_factor: 1.8,
            promo_price_factor: 0.75,
            sources: reference_sources(),
            target: reference_target(),
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidSpec(m));
        if self.n_stores == 0 {
            return bad("n_stores must be positive".into());
        }
        if self.source_history_weeks < 1 || self.target_weeks < self.target_calibration_weeks.max(1) {
            return bad("history lengths must cover the calibration window".into());
        }
        if self.target_introduction.weekday() != chrono::Weekday::Mon {
            return bad(format!("target introduction {} is not a Monday", self.target_introduction));
        }
        if !(self.promo_uplift_factor > 0.0) || !(self.promo_price_factor > 0.0 && self.promo_price_factor < 1.0) {
            return bad("promo uplift must be positive and the price factor in (0, 1)".into());
        }
        if self
            .target_promo_weeks
            .iter()
            .any(|&w| w <= self.target_calibration_weeks || w > self.target_weeks)
        {
            return bad("target promo weeks must fall after the calibration window".into());
        }
        for c in self.sources.iter().chain([&self.target]) {
            if !(c.mean_hourly > 0.0 && c.std_hourly > 0.0 && c.price > 0.0 && (0.0..=1.0).contains(&c.promo_share)) {
                return bad(format!("{}: calibration values out of range", c.product_id));
            }
        }
        for c in &self.sources {
            if c.promo_share > 0.0 && promo_week_count(c.promo_share, self.source_history_weeks) < 1 {
                return bad(format!(
                    "{}: promo share {} gives no promo week in {} weeks",
                    c.product_id, c.promo_share, self.source_history_weeks
                ));
            }
        }
        Ok(())
    }

    pub fn source_start(&self) -> NaiveDate {
        self.target_introduction - Duration::weeks(self.source_history_weeks)
    }
}

fn promo_week_count(share: f64, weeks: i64) -> usize {
    (share * weeks as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreProfile {
    pub store_id: StoreId,
    pub state: u32,
    pub opening_hours: [Option<(u8, u8)>; 7],
    pub size: f64,
    /// Mean over the store's weekday opening hours is 1.
    pub hour_curve: [f64; 24],
    /// Mean over open weekdays is 1.
    pub weekday_curve: [f64; 7],
}

impl StoreProfile {
    pub fn meta(&self) -> StoreMeta {
        StoreMeta {
            store_id: self.store_id,
            state: self.state,
            opening_hours: self.opening_hours,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductData {
    pub meta: ProductMeta,
    pub panel: SalesPanel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub spec: GeneratorSpec,
    pub stores: Vec<StoreProfile>,
    pub calendar: HolidayCalendar,
    pub sources: Vec<ProductData>,
    pub target: ProductData,
}

impl Universe {
    pub fn store_metas(&self) -> Vec<StoreMeta> {
        self.stores.iter().map(StoreProfile::meta).collect()
    }

    pub fn products(&self) -> impl Iterator<Item = &ProductData> {
        self.sources.iter().chain([&self.target])
    }
}

fn store_profiles(spec: &GeneratorSpec) -> Vec<StoreProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[seed::str_key("stores")]));
    let size_noise = Normal::new(0.0, 0.15).expect("valid normal");
    let curve_noise = Normal::new(0.0, 0.05).expect("valid normal");
    let weekday_shape = [0.95, 0.9, 0.95, 1.0, 1.15, 1.25, 0.9];
    let mut stores: Vec<StoreProfile> = (1..=spec.n_stores as StoreId)
        .map(|store_id| {
            let first: u8 = rng.random_range(6..=7);
            let last: u8 = rng.random_range(18..=20);
            let sat_last: u8 = rng.random_range(16..=18);
            let sunday = rng.random_bool(0.25).then_some((first, 11));
            let mut opening_hours = [Some((first, last)); 7];
            opening_hours[5] = Some((first, sat_last));
            opening_hours[6] = sunday;

            let mut hour_curve = [0.0; 24];
            for (h, v) in hour_curve.iter_mut().enumerate().take(last as usize).skip(first as usize) {
                let h = h as f64;
                let shape = 1.0 + 0.35 * (-(h - 8.0).powi(2) / 4.0).exp() + 0.25 * (-(h - 17.0).powi(2) / 4.0).exp();
                *v = shape * f64::exp(curve_noise.sample(&mut rng));
            }
            let mean = hour_curve.iter().sum::<f64>() / (last - first) as f64;
            hour_curve.iter_mut().for_each(|v| *v /= mean);

            let mut weekday_curve = [0.0; 7];
            for (d, v) in weekday_curve.iter_mut().enumerate() {
                if opening_hours[d].is_some() {
                    *v = weekday_shape[d] * f64::exp(curve_noise.sample(&mut rng));
                }
            }
            let open_days = opening_hours.iter().filter(|h| h.is_some()).count() as f64;
            let mean = weekday_curve.iter().sum::<f64>() / open_days;
            weekday_curve.iter_mut().for_each(|v| *v /= mean);

            StoreProfile {
                store_id,
                state: rng.random_range(1..=9),
                opening_hours,
                size: f64::exp(size_noise.sample(&mut rng)),
                hour_curve,
                weekday_curve,
            }
        })
        .collect();
    let mean = stores.iter().map(|s| s.size).sum::<f64>() / stores.len() as f64;
    stores.iter_mut().for_each(|s| s.size /= mean);
    stores
}

fn holiday_factor(cal: &HolidayCalendar, date: NaiveDate) -> f64 {
    let mut f = 1.0;
    if cal.is_public_holiday(date) {
        f *= 0.6;
    } else if cal.is_public_holiday(date + Duration::days(1)) {
        f *= 1.2;
    }
    if cal.is_school_holiday(date) {
        f *= 0.92;
    }
    f
}

fn season_factor(date: NaiveDate) -> f64 {
    1.0 + 0.08 * (2.0 * PI * (date.ordinal() as f64 - 80.0) / 365.25).sin()
}

/// One open hourly slot with its demand multiplier (everything except the base level).
struct Slot {
    store: StoreId,
    date: NaiveDate,
    hour: u8,
    multiplier: f64,
    calibrated: bool,
}

struct ProductPlan<'a> {
    calibration: &'a Calibration,
    meta: ProductMeta,
    weeks: i64,
    calibration_weeks: i64,
}

fn slots(plan: &ProductPlan<'_>, spec: &GeneratorSpec, stores: &[StoreProfile], cal: &HolidayCalendar, tilt: f64) -> Vec<Slot> {
    let mut out = Vec::new();
    for store in stores {
        for week in 1..=plan.weeks {
            let promo = if plan.meta.is_promo_week(week) {
                spec.promo_uplift_factor
            } else {
                1.0
            };
            for k in 0..7 {
                let date = plan.meta.week_start(week) + Duration::days(k);
                let wd = date.weekday().num_days_from_monday() as usize;
                let Some((first, last)) = store.opening_hours[wd] else {
                    continue;
                };
                let day = store.size * store.weekday_curve[wd] * promo * holiday_factor(cal, date) * season_factor(date);
                for hour in first..last {
                    let tilted = 1.0 + tilt * (hour as f64 - 13.0) / 6.0;
                    out.push(Slot {
                        store: store.store_id,
                        date,
                        hour,
                        multiplier: day * store.hour_curve[hour as usize] * tilted,
                        calibrated: week <= plan.calibration_weeks,
                    });
                }
            }
        }
    }
    out
}

fn draw(slots: &[Slot], base: f64, r: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    slots
        .iter()
        .map(|s| {
            let lambda = base * s.multiplier;
            let rate = Gamma::new(r, lambda / r).expect("positive gamma parameters").sample(rng);
            if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(rng)
            } else {
                0.0
            }
        })
        .collect()
}

fn window_stats(slots: &[Slot], units: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = slots
        .iter()
        .zip(units)
        .filter(|(s, _)| s.calibrated)
        .map(|(_, u)| *u)
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

const MEAN_TOLERANCE: f64 = 0.03;
const STD_TOLERANCE: f64 = 0.04;
const MAX_CALIBRATION_ROUNDS: usize = 40;

fn generate_product(
    plan: ProductPlan<'_>,
    spec: &GeneratorSpec,
    stores: &[StoreProfile],
    cal: &HolidayCalendar,
) -> Result<ProductData, GeneratorError> {
    let c = plan.calibration;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[seed::str_key(&c.product_id)]));
    let tilt = rng.random_range(-0.15..0.15);
    let slots = slots(&plan, spec, stores, cal, tilt);

    let (n, m1, m2) = slots
        .iter()
        .filter(|s| s.calibrated)
        .fold((0.0, 0.0, 0.0), |(n, a, b), s| (n + 1.0, a + s.multiplier, b + s.multiplier * s.multiplier));
    let (m1, m2) = (m1 / n, m2 / n);
    let mut base = c.mean_hourly / m1;
    let structural_var = |base: f64| base * base * (m2 - m1 * m1);
    let target_var = c.std_hourly * c.std_hourly;
    let excess = target_var - c.mean_hourly - structural_var(base);
    if excess <= 0.0 {
        return Err(GeneratorError::Infeasible {
            product: c.product_id.clone(),
            std: c.std_hourly,
            floor: c.mean_hourly + structural_var(base),
        });
    }
    let mut r = base * base * m2 / excess;

    for _ in 0..MAX_CALIBRATION_ROUNDS {
        let units = draw(&slots, base, r, &mut rng);
        let (mean, std) = window_stats(&slots, &units);
        if (mean / c.mean_hourly - 1.0).abs() <= MEAN_TOLERANCE && (std / c.std_hourly - 1.0).abs() <= STD_TOLERANCE {
            let mut panel = SalesPanel::new(&c.product_id);
            for (s, u) in slots.iter().zip(units) {
                panel
                    .insert(s.store, s.date, s.hour, u)
                    .expect("generated slots are unique and valid");
            }
            return Ok(ProductData { meta: plan.meta, panel });
        }
        base *= c.mean_hourly / mean;
        let achieved = std * std - mean - structural_var(base);
        let wanted = target_var - c.mean_hourly - structural_var(base);
        r = if achieved > 0.0 && wanted > 0.0 {
            (r * achieved / wanted).clamp(0.05, 1e6)
        } else {
            r * 4.0
        };
        log::debug!("{}: recalibrating (mean {mean:.3}, std {std:.3})", c.product_id);
    }
    Err(GeneratorError::Calibration {
        product: c.product_id.clone(),
        mean: c.mean_hourly,
        std: c.std_hourly,
    })
}

/// Builds the full universe. A pure function of `spec`.
pub fn generate_universe(spec: &GeneratorSpec) -> Result<Universe, GeneratorError> {
    spec.validate()?;
    let stores = store_profiles(spec);
    let start = spec.source_start();
    let end = spec.target_introduction + Duration::weeks(spec.target_weeks);
    let cal = calendar(start.year(), end.year());

    let mut sources = Vec::with_capacity(spec.sources.len());
    for c in &spec.sources {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[seed::str_key(&c.product_id), 1]));
        let count = promo_week_count(c.promo_share, spec.source_history_weeks);
        let eligible = (spec.source_history_weeks - 2).max(0) as usize;
        let weeks: Vec<i64> = sample(&mut rng, eligible, count.min(eligible))
            .into_iter()
            .map(|i| i as i64 + 3)
            .collect();
        let meta = ProductMeta {
            product_id: c.product_id.clone(),
            base_price: c.price,
            introduced: start,
            promo_calendar: weeks.into_iter().map(|w| (w, c.price * spec.promo_price_factor)).collect(),
            subgroup: "bakery".into(),
        };
        let plan = ProductPlan {
            calibration: c,
            meta,
            weeks: spec.source_history_weeks,
            calibration_weeks: spec.source_history_weeks,
        };
        sources.push(generate_product(plan, spec, &stores, &cal)?);
    }

    let t = &spec.target;
    let meta = ProductMeta {
        product_id: t.product_id.clone(),
        base_price: t.price,
        introduced: spec.target_introduction,
        promo_calendar: spec
            .target_promo_weeks
            .iter()
            .map(|&w| (w, t.price * spec.promo_price_factor))
            .collect(),
        subgroup: "bakery".into(),
    };
    let plan = ProductPlan {
        calibration: t,
        meta,
        weeks: spec.target_weeks,
        calibration_weeks: spec.target_calibration_weeks,
    };
    let target = generate_product(plan, spec, &stores, &cal)?;

    Ok(Universe {
        spec: spec.clone(),
        stores,
        calendar: cal,
        sources,
        target,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n_stores: 2,
            seed,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn store_curves_are_normalised() {
        for s in store_profiles(&GeneratorSpec::default()) {
            let (first, last) = s.opening_hours[0].unwrap();
            let mean: f64 = s.hour_curve[first as usize..last as usize].iter().sum::<f64>() / (last - first) as f64;
            assert!((mean - 1.0).abs() < 1e-12);
            let open: Vec<f64> = (0..7).filter(|&d| s.opening_hours[d].is_some()).map(|d| s.weekday_curve[d]).collect();
            assert!((open.iter().sum::<f64>() / open.len() as f64 - 1.0).abs() < 1e-12);
            assert!(s.hour_curve.iter().chain(&s.weekday_curve).all(|v| *v >= 0.0));
            s.meta().validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_universe() {
        let a = generate_universe(&small_spec(3)).unwrap();
        let b = generate_universe(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_universe(&small_spec(4)).unwrap();
        assert_ne!(a.target.panel, c.target.panel);
    }

    #[test]
    fn timeline_and_promotions() {
        let u = generate_universe(&small_spec(1)).unwrap();
        let intro = u.spec.target_introduction;
        for s in &u.sources {
            assert!(s.panel.iter().all(|(_, d, _, _)| d < intro));
            assert_eq!(s.meta.introduced, NaiveDate::from_ymd_opt(2017, 1, 9).unwrap());
            s.meta.validate().unwrap();
        }
        let t = &u.target.meta;
        assert_eq!(t.promo_calendar.keys().copied().collect::<Vec<_>>(), vec![6, 7, 8, 9, 10, 12]);
        assert!((t.price_in_week(6) - 0.4425).abs() < 1e-12);
        assert!(u.target.panel.iter().all(|(_, d, _, _)| t.week_of(d) >= 1 && t.week_of(d) <= 17));
        assert_eq!(u.sources[0].meta.promo_calendar.len(), 1);
        assert_eq!(u.sources[4].meta.promo_calendar.len(), 9);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = GeneratorSpec {
            source_history_weeks: 20,
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate_universe(&spec), Err(GeneratorError::InvalidSpec(_))));
        let mut spec = GeneratorSpec::default();
        spec.target.std_hourly = 0.5;
        assert!(matches!(generate_universe(&spec), Err(GeneratorError::Infeasible { .. })));
    }
}
