//! Raw sales data types and the 26-feature input rows built from them.
//!
//! Feature order is fixed by [`FEATURE_NAMES`]:
//!
//! | block            | count | features |
//! |------------------|-------|----------|
//! | date             | 8     | hour, weekday, day of month, month, ISO week, weekend flag, weekday sin/cos |
//! | price/promotion  | 6     | price, promo flag, promo price, discount, weeks into current promo, prior promo weeks |
//! | identity         | 2     | store number, state |
//! | lag              | 4     | promotion-conditioned moving averages (see [`lag_features`]) |
//! | aggregates       | 3     | store, store x weekday and store x hour means of all prior data |
//! | external         | 3     | days until / since public holiday (capped at 30), school holiday flag |
//!
//! Weeks are counted from a product's introduction: week 1 starts on the
//! (Monday) introduction date. Lag and aggregate values for any date only use
//! records from before the start of that date's week.

mod build;
pub mod io;
mod panel;
mod scaler;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

pub use build::{build_features, FeatureRow};
pub use panel::{aggregate_features, lag_features, AggregateValues, FeatureContext, LagValues, SalesPanel};
pub use scaler::{Scaler, TARGET_HIGH, TARGET_LOW};

pub type StoreId = u32;

pub const NUM_FEATURES: usize = 26;

/// Registry order of the input features.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "hour_of_day",
    "day_of_week",
    "day_of_month",
    "month",
    "week_of_year",
    "is_weekend",
    "dow_sin",
    "dow_cos",
    "price",
    "is_promo",
    "promo_price",
    "discount",
    "weeks_since_promo_start",
    "prior_promo_weeks",
    "store_number",
    "state",
    "lag_hour_2w",
    "lag_day_2w",
    "lag_week_2w",
    "lag_hour_4w",
    "agg_store",
    "agg_store_weekday",
    "agg_store_hour",
    "days_until_public_holiday",
    "days_since_public_holiday",
    "is_school_holiday",
];

/// Sizes of the date, price/promotion, identity, lag, aggregate and external blocks.
pub const FEATURE_BLOCKS: [(&str, usize); 6] = [
    ("date", 8),
    ("price_promotion", 6),
    ("identity", 2),
    ("lag", 4),
    ("aggregate", 3),
    ("external", 3),
];

/// Holiday distances are capped at this many days.
pub const HOLIDAY_DISTANCE_CAP: i64 = 30;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("duplicate record for store {store} on {date} hour {hour}")]
    DuplicateRecord { store: StoreId, date: NaiveDate, hour: u8 },
    #[error("hour {hour} out of range on {date}")]
    BadHour { date: NaiveDate, hour: u8 },
    #[error("negative or non-finite units {units} for store {store} on {date} hour {hour}")]
    BadUnits {
        store: StoreId,
        date: NaiveDate,
        hour: u8,
        units: f64,
    },
    #[error("records for product {found} in panel of {expected}")]
    MixedProducts { expected: String, found: String },
    #[error("week range {start}..={end} must start at week 2 or later so lags have history")]
    NoLagHistory { start: i64, end: i64 },
    #[error("missing sales for {} store-days, e.g. {:?}", .0.len(), .0.first())]
    MissingSales(Vec<(StoreId, NaiveDate)>),
    #[error("no feature rows to fit a scaler on")]
    EmptyRows,
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
}

/// One observation of units sold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalesRecord {
    pub product_id: String,
    pub store_id: StoreId,
    pub date: NaiveDate,
    pub hour: u8,
    pub units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMeta {
    pub product_id: String,
    pub base_price: f64,
    /// First day (a Monday) of week 1.
    pub introduced: NaiveDate,
    /// Promotion weeks (1-based, introduction-relative) and their prices.
    pub promo_calendar: BTreeMap<i64, f64>,
    pub subgroup: String,
}

impl ProductMeta {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.base_price.is_finite() && self.base_price > 0.0) {
            return Err(FeatureError::InvalidMeta(format!(
                "{}: base price {} must be positive",
                self.product_id, self.base_price
            )));
        }
        if self.introduced.weekday() != Weekday::Mon {
            return Err(FeatureError::InvalidMeta(format!(
                "{}: introduction {} is not a Monday",
                self.product_id, self.introduced
            )));
        }
        for (&week, &price) in &self.promo_calendar {
            if !(price > 0.0 && price < self.base_price) {
                return Err(FeatureError::InvalidMeta(format!(
                    "{}: promo price {price} in week {week} must lie in (0, {})",
                    self.product_id, self.base_price
                )));
            }
        }
        Ok(())
    }

    /// Introduction-relative week index (week 1 = first week; <= 0 before introduction).
    pub fn week_of(&self, date: NaiveDate) -> i64 {
        (date - self.introduced).num_days().div_euclid(7) + 1
    }

    pub fn week_start(&self, week: i64) -> NaiveDate {
        self.introduced + chrono::Duration::days((week - 1) * 7)
    }

    pub fn is_promo_week(&self, week: i64) -> bool {
        self.promo_calendar.contains_key(&week)
    }

    pub fn price_in_week(&self, week: i64) -> f64 {
        self.promo_calendar
            .get(&week)
            .copied()
            .unwrap_or(self.base_price)
    }

    /// Weeks since the current run of consecutive promotion weeks began (0 outside promotions).
    pub fn weeks_into_promo(&self, week: i64) -> i64 {
        if !self.is_promo_week(week) {
            return 0;
        }
        let mut start = week;
        while self.is_promo_week(start - 1) {
            start -= 1;
        }
        week - start
    }

    /// Number of promotion weeks strictly before `week` (from week 1).
    pub fn prior_promo_weeks(&self, week: i64) -> usize {
        self.promo_calendar.range(1..week).count()
    }
}

/// Opening hours per weekday, Monday first. `(first, last)` opens the hourly
/// slots `first..last`; `None` means closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub store_id: StoreId,
    pub state: u32,
    pub opening_hours: [Option<(u8, u8)>; 7],
}

impl StoreMeta {
    pub fn validate(&self) -> Result<(), FeatureError> {
        for (d, h) in self.opening_hours.iter().enumerate() {
            if let Some((first, last)) = *h {
                if first >= last || last > 24 {
                    return Err(FeatureError::InvalidMeta(format!(
                        "store {}: weekday {d} hours {first}..{last} invalid",
                        self.store_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn open_hours(&self, weekday: Weekday) -> Range<u8> {
        match self.opening_hours[weekday.num_days_from_monday() as usize] {
            Some((first, last)) => first..last,
            None => 0..0,
        }
    }

    pub fn hours_open(&self, weekday: Weekday) -> usize {
        self.open_hours(weekday).len()
    }

    pub fn is_open(&self, weekday: Weekday, hour: u8) -> bool {
        self.open_hours(weekday).contains(&hour)
    }

    pub fn weekly_open_hours(&self) -> usize {
        self.opening_hours
            .iter()
            .map(|h| h.map_or(0, |(a, b)| (b - a) as usize))
            .sum()
    }
}

/// Closed date interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DateInterval {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateInterval {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HolidayCalendar {
    pub public_holidays: BTreeSet<NaiveDate>,
    pub school_holidays: Vec<DateInterval>,
}

impl HolidayCalendar {
    pub fn validate(&self) -> Result<(), FeatureError> {
        for iv in &self.school_holidays {
            if iv.start > iv.end {
                return Err(FeatureError::InvalidMeta(format!(
                    "school holiday {}..{} ends before it starts",
                    iv.start, iv.end
                )));
            }
        }
        Ok(())
    }

    /// Days until the next public holiday on or after `date`, capped.
    pub fn days_until_public_holiday(&self, date: NaiveDate) -> i64 {
        self.public_holidays
            .range(date..)
            .next()
            .map_or(HOLIDAY_DISTANCE_CAP, |h| (*h - date).num_days().min(HOLIDAY_DISTANCE_CAP))
    }

    /// Days since the last public holiday on or before `date`, capped.
    pub fn days_since_public_holiday(&self, date: NaiveDate) -> i64 {
        self.public_holidays
            .range(..=date)
            .next_back()
            .map_or(HOLIDAY_DISTANCE_CAP, |h| (date - *h).num_days().min(HOLIDAY_DISTANCE_CAP))
    }

    pub fn is_public_holiday(&self, date: NaiveDate) -> bool {
        self.public_holidays.contains(&date)
    }

    pub fn is_school_holiday(&self, date: NaiveDate) -> bool {
        self.school_holidays.iter().any(|iv| iv.contains(date))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn registry_has_26_features_in_six_blocks() {
        assert_eq!(FEATURE_NAMES.len(), 26);
        assert_eq!(FEATURE_BLOCKS.iter().map(|b| b.1).sum::<usize>(), 26);
        assert_eq!(
            FEATURE_BLOCKS.iter().map(|b| b.1).collect::<Vec<_>>(),
            vec![8, 6, 2, 4, 3, 3]
        );
        let unique: BTreeSet<_> = FEATURE_NAMES.iter().collect();
        assert_eq!(unique.len(), 26);
    }

    #[test]
    fn week_indexing_is_introduction_relative() {
        let meta = ProductMeta {
            product_id: "p".into(),
            base_price: 0.59,
            introduced: d(2019, 1, 7),
            promo_calendar: [(6, 0.44), (7, 0.44), (9, 0.44)].into_iter().collect(),
            subgroup: "bakery".into(),
        };
        meta.validate().unwrap();
        assert_eq!(meta.week_of(d(2019, 1, 7)), 1);
        assert_eq!(meta.week_of(d(2019, 1, 13)), 1);
        assert_eq!(meta.week_of(d(2019, 1, 14)), 2);
        assert_eq!(meta.week_of(d(2019, 1, 6)), 0);
        assert_eq!(meta.week_start(3), d(2019, 1, 21));
        assert_eq!(meta.weeks_into_promo(6), 0);
        assert_eq!(meta.weeks_into_promo(7), 1);
        assert_eq!(meta.weeks_into_promo(8), 0);
        assert_eq!(meta.weeks_into_promo(9), 0);
        assert_eq!(meta.prior_promo_weeks(9), 2);
        assert_eq!(meta.price_in_week(6), 0.44);
        assert_eq!(meta.price_in_week(8), 0.59);
    }

    #[test]
    fn promo_price_must_undercut_base() {
        let meta = ProductMeta {
            product_id: "p".into(),
            base_price: 0.59,
            introduced: d(2019, 1, 7),
            promo_calendar: [(6, 0.69)].into_iter().collect(),
            subgroup: String::new(),
        };
        assert!(meta.validate().is_err());
    }

    #[test]
    fn holiday_distances_are_capped() {
        let cal = HolidayCalendar {
            public_holidays: [d(2019, 1, 1), d(2019, 1, 6)].into_iter().collect(),
            school_holidays: vec![DateInterval {
                start: d(2019, 2, 4),
                end: d(2019, 2, 9),
            }],
        };
        assert_eq!(cal.days_until_public_holiday(d(2019, 1, 3)), 3);
        assert_eq!(cal.days_since_public_holiday(d(2019, 1, 3)), 2);
        assert_eq!(cal.days_until_public_holiday(d(2019, 1, 6)), 0);
        assert_eq!(cal.days_until_public_holiday(d(2019, 3, 1)), 30);
        assert_eq!(cal.days_since_public_holiday(d(2019, 3, 1)), 30);
        assert!(cal.is_school_holiday(d(2019, 2, 9)));
        assert!(!cal.is_school_holiday(d(2019, 2, 10)));
    }

    #[test]
    fn opening_hours_define_slots() {
        let store = StoreMeta {
            store_id: 1,
            state: 3,
            opening_hours: [
                Some((7, 19)),
                Some((7, 19)),
                Some((7, 19)),
                Some((7, 19)),
                Some((7, 19)),
                Some((7, 17)),
                None,
            ],
        };
        store.validate().unwrap();
        assert_eq!(store.hours_open(Weekday::Mon), 12);
        assert_eq!(store.hours_open(Weekday::Sun), 0);
        assert!(store.is_open(Weekday::Sat, 16));
        assert!(!store.is_open(Weekday::Sat, 17));
        assert_eq!(store.weekly_open_hours(), 70);
    }
}
