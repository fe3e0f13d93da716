use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Datelike, NaiveDate};

use super::{FeatureError, ProductMeta, SalesRecord, StoreId};

/// All hourly records of one product, keyed by (store, date, hour).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SalesPanel {
    product_id: String,
    records: BTreeMap<(StoreId, NaiveDate, u8), f64>,
}

impl SalesPanel {
    pub fn new(product_id: impl Into<String>) -> Self {
        Self {
            product_id: product_id.into(),
            records: BTreeMap::new(),
        }
    }

    pub fn from_records<I>(product_id: impl Into<String>, records: I) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = SalesRecord>,
    {
        let mut panel = Self::new(product_id);
        for r in records {
            if r.product_id != panel.product_id {
                return Err(FeatureError::MixedProducts {
                    expected: panel.product_id.clone(),
                    found: r.product_id,
                });
            }
            panel.insert(r.store_id, r.date, r.hour, r.units)?;
        }
        Ok(panel)
    }

    pub fn insert(&mut self, store: StoreId, date: NaiveDate, hour: u8, units: f64) -> Result<(), FeatureError> {
        if hour > 23 {
            return Err(FeatureError::BadHour { date, hour });
        }
        if !(units.is_finite() && units >= 0.0) {
            return Err(FeatureError::BadUnits {
                store,
                date,
                hour,
                units,
            });
        }
        if self.records.insert((store, date, hour), units).is_some() {
            return Err(FeatureError::DuplicateRecord { store, date, hour });
        }
        Ok(())
    }

    pub fn product_id(&self) -> &str {
        &self.product_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn units(&self, store: StoreId, date: NaiveDate, hour: u8) -> Option<f64> {
        self.records.get(&(store, date, hour)).copied()
    }

    /// Records in (store, date, hour) order.
    pub fn iter(&self) -> impl Iterator<Item = (StoreId, NaiveDate, u8, f64)> + '_ {
        self.records.iter().map(|(&(s, d, h), &u)| (s, d, h, u))
    }

    pub fn records(&self) -> Vec<SalesRecord> {
        self.iter()
            .map(|(store_id, date, hour, units)| SalesRecord {
                product_id: self.product_id.clone(),
                store_id,
                date,
                hour,
                units,
            })
            .collect()
    }

    pub fn stores(&self) -> BTreeSet<StoreId> {
        self.records.keys().map(|k| k.0).collect()
    }

    pub fn has_day(&self, store: StoreId, date: NaiveDate) -> bool {
        self.records
            .range((store, date, 0)..=(store, date, 23))
            .next()
            .is_some()
    }

    /// Copy restricted to records dated strictly before `cutoff`.
    pub fn truncated_before(&self, cutoff: NaiveDate) -> Self {
        Self {
            product_id: self.product_id.clone(),
            records: self
                .records
                .iter()
                .filter(|(k, _)| k.1 < cutoff)
                .map(|(k, v)| (*k, *v))
                .collect(),
        }
    }
}

/// Promotion-conditioned moving averages plus bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagValues {
    /// Same weekday and hour, 2 weeks; daily total, 2 weeks; weekly total, 2 weeks;
    /// same weekday and hour, 4 weeks.
    pub values: [f64; 4],
    /// No prior week shared the current promotion status; unconditioned weeks were used.
    pub fallback: bool,
    /// Weeks feeding the 4-week window, most recent first.
    pub window: [Option<i64>; 4],
    /// Latest record date that contributed.
    pub latest_input: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateValues {
    /// Store, store x weekday and store x hour-of-day mean hourly units.
    pub values: [f64; 3],
    /// Some aggregate had no prior data and was set to zero.
    pub missing_history: bool,
    pub latest_input: Option<NaiveDate>,
}

#[derive(Debug, Clone, Default)]
struct Cumulative {
    total: (f64, f64),
    weekday: [(f64, f64); 7],
    hour: [(f64, f64); 24],
}

#[derive(Debug, Clone)]
struct DayCumulative {
    date: NaiveDate,
    acc: Cumulative,
}

/// Precomputed per-store daily totals and running aggregates for one product.
pub struct FeatureContext<'a> {
    panel: &'a SalesPanel,
    meta: &'a ProductMeta,
    daily: HashMap<(StoreId, NaiveDate), f64>,
    cumulative: HashMap<StoreId, Vec<DayCumulative>>,
}

impl<'a> FeatureContext<'a> {
    pub fn new(panel: &'a SalesPanel, meta: &'a ProductMeta) -> Self {
        let mut daily: HashMap<(StoreId, NaiveDate), f64> = HashMap::new();
        let mut cumulative: HashMap<StoreId, Vec<DayCumulative>> = HashMap::new();
        for (store, date, hour, units) in panel.iter() {
            *daily.entry((store, date)).or_insert(0.0) += units;
            let days = cumulative.entry(store).or_default();
            if days.last().is_none_or(|d| d.date != date) {
                let acc = days.last().map(|d| d.acc.clone()).unwrap_or_default();
                days.push(DayCumulative { date, acc });
            }
            let acc = &mut days.last_mut().expect("pushed above").acc;
            let wd = date.weekday().num_days_from_monday() as usize;
            acc.total.0 += units;
            acc.total.1 += 1.0;
            acc.weekday[wd].0 += units;
            acc.weekday[wd].1 += 1.0;
            acc.hour[hour as usize].0 += units;
            acc.hour[hour as usize].1 += 1.0;
        }
        Self {
            panel,
            meta,
            daily,
            cumulative,
        }
    }

    pub fn panel(&self) -> &SalesPanel {
        self.panel
    }

    pub fn meta(&self) -> &ProductMeta {
        self.meta
    }

    fn daily_total(&self, store: StoreId, date: NaiveDate) -> Option<f64> {
        self.daily.get(&(store, date)).copied()
    }

    /// Prior weeks (most recent first) used for the lags of `week`.
    fn window_weeks(&self, week: i64) -> (Vec<i64>, bool) {
        let promo = self.meta.is_promo_week(week);
        let same: Vec<i64> = (1..week)
            .rev()
            .filter(|&w| self.meta.is_promo_week(w) == promo)
            .take(4)
            .collect();
        if same.is_empty() {
            ((1..week).rev().take(4).collect(), true)
        } else {
            (same, false)
        }
    }

    pub fn lag_features(&self, store: StoreId, date: NaiveDate, hour: u8) -> LagValues {
        let week = self.meta.week_of(date);
        let offset = (date - self.meta.week_start(week)).num_days();
        let (weeks, fallback) = self.window_weeks(week);
        let mut latest: Option<NaiveDate> = None;
        let mut touch = |d: NaiveDate| latest = Some(latest.map_or(d, |l: NaiveDate| l.max(d)));

        let mut same_hour = Vec::with_capacity(4);
        let mut day_totals = Vec::with_capacity(2);
        let mut week_totals = Vec::with_capacity(2);
        for (i, &w) in weeks.iter().enumerate() {
            let start = self.meta.week_start(w);
            let day = start + chrono::Duration::days(offset);
            let units = self.panel.units(store, day, hour);
            if units.is_some() {
                touch(day);
            }
            same_hour.push(units.unwrap_or(0.0));
            if i < 2 {
                let total = self.daily_total(store, day);
                if total.is_some() {
                    touch(day);
                }
                day_totals.push(total.unwrap_or(0.0));
                let mut week_total = 0.0;
                for k in 0..7 {
                    let d = start + chrono::Duration::days(k);
                    if let Some(t) = self.daily_total(store, d) {
                        week_total += t;
                        touch(d);
                    }
                }
                week_totals.push(week_total);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let two = same_hour.len().min(2);
        let mut window = [None; 4];
        for (slot, &w) in window.iter_mut().zip(&weeks) {
            *slot = Some(w);
        }
        LagValues {
            values: [
                mean(&same_hour[..two]),
                mean(&day_totals),
                mean(&week_totals),
                mean(&same_hour),
            ],
            fallback: fallback || weeks.is_empty(),
            window,
            latest_input: latest,
        }
    }

    /// Means over all of the store's records dated strictly before `as_of`.
    pub fn aggregate_features(&self, store: StoreId, date: NaiveDate, hour: u8, as_of: NaiveDate) -> AggregateValues {
        let days = self.cumulative.get(&store).map(Vec::as_slice).unwrap_or(&[]);
        let idx = days.partition_point(|d| d.date < as_of);
        if idx == 0 {
            return AggregateValues {
                values: [0.0; 3],
                missing_history: true,
                latest_input: None,
            };
        }
        let day = &days[idx - 1];
        let ratio = |(sum, count): (f64, f64)| if count > 0.0 { Some(sum / count) } else { None };
        let wd = date.weekday().num_days_from_monday() as usize;
        let parts = [
            ratio(day.acc.total),
            ratio(day.acc.weekday[wd]),
            ratio(day.acc.hour[hour as usize]),
        ];
        AggregateValues {
            values: parts.map(|p| p.unwrap_or(0.0)),
            missing_history: parts.iter().any(Option::is_none),
            latest_input: Some(day.date),
        }
    }
}

/// Promotion-conditioned lag features for a single (store, date, hour).
pub fn lag_features(
    panel: &SalesPanel,
    meta: &ProductMeta,
    store: StoreId,
    date: NaiveDate,
    hour: u8,
) -> LagValues {
    FeatureContext::new(panel, meta).lag_features(store, date, hour)
}

/// Store, store x weekday and store x hour means of all records before `as_of`.
pub fn aggregate_features(
    panel: &SalesPanel,
    meta: &ProductMeta,
    store: StoreId,
    date: NaiveDate,
    hour: u8,
    as_of: NaiveDate,
) -> AggregateValues {
    let values = FeatureContext::new(panel, meta).aggregate_features(store, date, hour, as_of);
    if values.missing_history {
        log::warn!(
            "no sales history for store {store} before {as_of} ({}); aggregates zeroed",
            panel.product_id()
        );
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn meta(promo: &[i64]) -> ProductMeta {
        ProductMeta {
            product_id: "p".into(),
            base_price: 1.0,
            introduced: d(2019, 1, 7),
            promo_calendar: promo.iter().map(|&w| (w, 0.75)).collect(),
            subgroup: String::new(),
        }
    }

    /// Units encode the week so window selection is visible in the averages.
    fn week_coded_panel(meta: &ProductMeta, weeks: i64) -> SalesPanel {
        let mut p = SalesPanel::new("p");
        for w in 1..=weeks {
            for k in 0..6 {
                let day = meta.week_start(w) + Duration::days(k);
                for h in 8..10 {
                    p.insert(1, day, h, w as f64).unwrap();
                }
            }
        }
        p
    }

    #[test]
    fn lag_windows_follow_promotion_status() {
        let m = meta(&[6, 7, 8, 9, 10, 12]);
        let p = week_coded_panel(&m, 12);
        let ctx = FeatureContext::new(&p, &m);
        // week 5 (no promo) <- weeks 4 and 3
        let w5 = ctx.lag_features(1, m.week_start(5), 8);
        assert_eq!(w5.window[..2], [Some(4), Some(3)]);
        assert_eq!(w5.values[0], 3.5);
        assert!(!w5.fallback);
        // week 12 (promo) <- weeks 10 and 9, skipping 11
        let w12 = ctx.lag_features(1, m.week_start(12) + Duration::days(2), 9);
        assert_eq!(w12.window, [Some(10), Some(9), Some(8), Some(7)]);
        assert_eq!(w12.values[0], 9.5);
        assert_eq!(w12.values[3], 8.5);
        // week 11 (no promo) <- weeks 5 and 4
        let w11 = ctx.lag_features(1, m.week_start(11), 8);
        assert_eq!(w11.window[..2], [Some(5), Some(4)]);
        // first promo week has no same-status history
        let w6 = ctx.lag_features(1, m.week_start(6), 8);
        assert!(w6.fallback);
        assert_eq!(w6.window, [Some(5), Some(4), Some(3), Some(2)]);
        assert!(w6.latest_input.unwrap() < m.week_start(6));
    }

    #[test]
    fn constant_sales_give_aggregation_identities() {
        let m = meta(&[]);
        let mut p = SalesPanel::new("p");
        // 6 open days x 10 hours
        for w in 1..=5 {
            for k in 0..6 {
                for h in 8..18 {
                    p.insert(1, m.week_start(w) + Duration::days(k), h, 4.0).unwrap();
                }
            }
        }
        let ctx = FeatureContext::new(&p, &m);
        let lag = ctx.lag_features(1, m.week_start(5) + Duration::days(1), 12);
        assert_eq!(lag.values, [4.0, 40.0, 240.0, 4.0]);
        let agg = ctx.aggregate_features(1, m.week_start(5), 12, m.week_start(5));
        assert_eq!(agg.values, [4.0, 4.0, 4.0]);
        assert!(!agg.missing_history);
    }

    #[test]
    fn aggregates_without_history_are_zero() {
        let m = meta(&[]);
        let p = week_coded_panel(&m, 2);
        let agg = aggregate_features(&p, &m, 1, m.introduced, 8, m.introduced);
        assert_eq!(agg.values, [0.0; 3]);
        assert!(agg.missing_history);
        assert_eq!(agg.latest_input, None);
    }

    #[test]
    fn aggregates_see_only_the_past() {
        let m = meta(&[]);
        let p = week_coded_panel(&m, 4);
        let as_of = m.week_start(3);
        let agg = aggregate_features(&p, &m, 1, as_of, 8, as_of);
        // weeks 1 and 2 have equal record counts
        assert_eq!(agg.values[0], 1.5);
        assert!(agg.latest_input.unwrap() < as_of);
    }

    #[test]
    fn panel_rejects_duplicates_and_bad_values() {
        let mut p = SalesPanel::new("p");
        p.insert(1, d(2019, 1, 7), 8, 1.0).unwrap();
        assert!(matches!(
            p.insert(1, d(2019, 1, 7), 8, 2.0),
            Err(FeatureError::DuplicateRecord { .. })
        ));
        assert!(p.insert(1, d(2019, 1, 7), 24, 2.0).is_err());
        assert!(p.insert(1, d(2019, 1, 7), 9, -1.0).is_err());
        assert!(p.insert(1, d(2019, 1, 7), 9, f64::NAN).is_err());
    }
}
