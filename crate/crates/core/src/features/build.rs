use std::f64::consts::PI;
use std::ops::RangeInclusive;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use super::{FeatureContext, FeatureError, HolidayCalendar, ProductMeta, SalesPanel, StoreId, StoreMeta, NUM_FEATURES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub store_id: StoreId,
    pub date: NaiveDate,
    pub hour: u8,
    /// Introduction-relative week.
    pub week: i64,
    pub x: [f64; NUM_FEATURES],
    pub y: f64,
    /// Lags used the unconditioned window.
    pub lag_fallback: bool,
    /// Latest sales record date read while computing `x`.
    pub max_input_date: Option<NaiveDate>,
}

/// Builds one row per open (store, date, hour) in `weeks`.
pub fn build_features(
    panel: &SalesPanel,
    meta: &ProductMeta,
    stores: &[StoreMeta],
    cal: &HolidayCalendar,
    weeks: RangeInclusive<i64>,
) -> Result<Vec<FeatureRow>, FeatureError> {
    let (start, end) = (*weeks.start(), *weeks.end());
    if start < 2 {
        return Err(FeatureError::NoLagHistory { start, end });
    }
    let ctx = FeatureContext::new(panel, meta);
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for store in stores {
        for week in weeks.clone() {
            let week_start = meta.week_start(week);
            for offset in 0..7 {
                let date = week_start + Duration::days(offset);
                let open = store.open_hours(date.weekday());
                if open.is_empty() {
                    continue;
                }
                let day_start = rows.len();
                for hour in open {
                    let Some(y) = panel.units(store.store_id, date, hour) else {
                        missing.push((store.store_id, date));
                        rows.truncate(day_start);
                        break;
                    };
                    rows.push(build_row(&ctx, store, cal, week, date, hour, y));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(FeatureError::MissingSales(missing));
    }
    Ok(rows)
}

fn build_row(
    ctx: &FeatureContext<'_>,
    store: &StoreMeta,
    cal: &HolidayCalendar,
    week: i64,
    date: NaiveDate,
    hour: u8,
    y: f64,
) -> FeatureRow {
    let meta = ctx.meta();
    let dow = date.weekday().num_days_from_monday() as f64;
    let weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
    let promo = meta.is_promo_week(week);
    let price = meta.price_in_week(week);
    let lag = ctx.lag_features(store.store_id, date, hour);
    let agg = ctx.aggregate_features(store.store_id, date, hour, meta.week_start(week));

    let x = [
        hour as f64,
        dow,
        date.day() as f64,
        date.month() as f64,
        date.iso_week().week() as f64,
        flag(weekend),
        (2.0 * PI * dow / 7.0).sin(),
        (2.0 * PI * dow / 7.0).cos(),
        price,
        flag(promo),
        if promo { price } else { 0.0 },
        (meta.base_price - price) / meta.base_price,
        meta.weeks_into_promo(week) as f64,
        meta.prior_promo_weeks(week) as f64,
        store.store_id as f64,
        store.state as f64,
        lag.values[0],
        lag.values[1],
        lag.values[2],
        lag.values[3],
        agg.values[0],
        agg.values[1],
        agg.values[2],
        cal.days_until_public_holiday(date) as f64,
        cal.days_since_public_holiday(date) as f64,
        flag(cal.is_school_holiday(date)),
    ];
    FeatureRow {
        store_id: store.store_id,
        date,
        hour,
        week,
        x,
        y,
        lag_fallback: lag.fallback,
        max_input_date: lag.latest_input.max(agg.latest_input),
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}
