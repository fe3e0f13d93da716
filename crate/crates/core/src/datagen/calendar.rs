use chrono::{Datelike, Duration, NaiveDate, Weekday};

use crate::features::{DateInterval, HolidayCalendar};

/// Easter Sunday (Gregorian calendar).
pub fn easter(year: i32) -> NaiveDate {
    let a = year % 19;
    let b = year / 100;
    let c = year % 100;
    let d = b / 4;
    let e = b % 4;
    let f = (b + 8) / 25;
    let g = (b - f + 1) / 3;
    let h = (19 * a + b - d - g + 15) % 30;
    let i = c / 4;
    let k = c % 4;
    let l = (32 + 2 * e + 2 * i - h - k) % 7;
    let m = (a + 11 * h + 22 * l) / 451;
    let month = (h + l - 7 * m + 114) / 31;
    let day = (h + l - 7 * m + 114) % 31 + 1;
    NaiveDate::from_ymd_opt(year, month as u32, day as u32).expect("valid Easter date")
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

fn first_weekday_on_or_after(date: NaiveDate, weekday: Weekday) -> NaiveDate {
    let shift = (7 + weekday.num_days_from_monday() as i64 - date.weekday().num_days_from_monday() as i64) % 7;
    date + Duration::days(shift)
}

pub fn public_holidays(year: i32) -> Vec<NaiveDate> {
    let e = easter(year);
    let mut days = vec![
        ymd(year, 1, 1),
        ymd(year, 1, 6),
        e + Duration::days(1),
        ymd(year, 5, 1),
        e + Duration::days(39),
        e + Duration::days(50),
        e + Duration::days(60),
        ymd(year, 8, 15),
        ymd(year, 10, 26),
        ymd(year, 11, 1),
        ymd(year, 12, 8),
        ymd(year, 12, 25),
        ymd(year, 12, 26),
    ];
    days.sort();
    days
}

/// Christmas, semester, Easter, Whitsun and summer breaks starting in `year`.
pub fn school_holidays(year: i32) -> Vec<DateInterval> {
    let e = easter(year);
    let semester = first_weekday_on_or_after(ymd(year, 2, 1), Weekday::Mon);
    let summer = first_weekday_on_or_after(ymd(year, 6, 28), Weekday::Sat);
    let september = first_weekday_on_or_after(ymd(year, 9, 1), Weekday::Mon);
    vec![
        DateInterval {
            start: semester,
            end: semester + Duration::days(6),
        },
        DateInterval {
            start: e - Duration::days(8),
            end: e + Duration::days(1),
        },
        DateInterval {
            start: e + Duration::days(48),
            end: e + Duration::days(50),
        },
        DateInterval {
            start: summer,
            end: september - Duration::days(1),
        },
        DateInterval {
            start: ymd(year, 12, 24),
            end: ymd(year + 1, 1, 6),
        },
    ]
}

/// Calendar covering every year from `first` to `last`, plus the break spilling in from `first - 1`.
pub fn calendar(first: i32, last: i32) -> HolidayCalendar {
    let mut cal = HolidayCalendar::default();
    for year in first..=last {
        cal.public_holidays.extend(public_holidays(year));
        cal.school_holidays.extend(school_holidays(year));
    }
    cal.school_holidays.push(DateInterval {
        start: ymd(first - 1, 12, 24),
        end: ymd(first, 1, 6),
    });
    cal.school_holidays.sort();
    cal
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn easter_dates() {
        assert_eq!(easter(2017), ymd(2017, 4, 16));
        assert_eq!(easter(2018), ymd(2018, 4, 1));
        assert_eq!(easter(2019), ymd(2019, 4, 21));
        assert_eq!(easter(2000), ymd(2000, 4, 23));
    }

    #[test]
    fn calendar_contents() {
        let cal = calendar(2017, 2019);
        cal.validate().unwrap();
        assert_eq!(cal.public_holidays.len(), 39);
        assert!(cal.is_public_holiday(ymd(2019, 4, 22)));
        assert!(cal.is_public_holiday(ymd(2018, 5, 31)));
        assert!(cal.is_school_holiday(ymd(2017, 1, 3)));
        assert!(cal.is_school_holiday(ymd(2019, 2, 5)));
        assert!(cal.is_school_holiday(ymd(2018, 8, 15)));
        assert!(!cal.is_school_holiday(ymd(2018, 10, 10)));
    }
}
