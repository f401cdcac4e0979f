//! UTC calendar bucketing: calendar months for the monthly panel, ISO weeks
//! for the weekly panel.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_DAY: i64 = 86_400;

/// A calendar month, stored as `year * 12 + (month - 1)` so consecutive months
/// differ by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Month(pub i32);

impl Month {
    pub fn from_ymd(year: i32, month: u32) -> Self {
        Month(year * 12 + month as i32 - 1)
    }

    pub fn from_timestamp(ts: i64) -> Self {
        let d = date_of(ts);
        Month::from_ymd(d.year(), d.month())
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(self) -> u32 {
        (self.0.rem_euclid(12) + 1) as u32
    }

    pub fn offset(self, delta: i32) -> Self {
        Month(self.0 + delta)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("invalid month `{s}`, expected YYYY-MM"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Month::from_ymd(year, month))
    }
}

/// An ISO week, stored as the number of whole weeks since the Monday
/// 1969-12-29 so consecutive weeks differ by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Week(pub i64);

impl Week {
    pub fn from_timestamp(ts: i64) -> Self {
        // 1970-01-01 was a Thursday, three days after the epoch Monday.
        Week((ts.div_euclid(SECONDS_PER_DAY) + 3).div_euclid(7))
    }

    pub fn monday(self) -> NaiveDate {
        let days = self.0 * 7 - 3;
        date_of(days * SECONDS_PER_DAY)
    }

    pub fn offset(self, delta: i64) -> Self {
        Week(self.0 + delta)
    }
}

impl fmt::Display for Week {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let iso = self.monday().iso_week();
        write!(f, "{:04}-W{:02}", iso.year(), iso.week())
    }
}

impl FromStr for Week {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("invalid ISO week `{s}`, expected YYYY-Www"));
        let (y, w) = s.split_once("-W").ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let week: u32 = w.parse().map_err(|_| bad())?;
        let monday = NaiveDate::from_isoywd_opt(year, week, chrono::Weekday::Mon).ok_or_else(bad)?;
        Ok(Week::from_timestamp(timestamp_of(monday)))
    }
}

pub fn date_of(ts: i64) -> NaiveDate {
    DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

pub fn timestamp_of(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0)
        .expect("midnight is valid")
        .and_utc()
        .timestamp()
}

pub fn year_of(ts: i64) -> i32 {
    date_of(ts).year()
}

/// Whole weeks between a release date and a listen date; negative when the
/// listen precedes the release.
pub fn weeks_between(release: NaiveDate, listen: NaiveDate) -> i64 {
    (listen - release).num_days().div_euclid(7)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn month_round_trip() {
        let m: Month = "2020-03".parse().unwrap();
        assert_eq!(m.to_string(), "2020-03");
        assert_eq!(m.offset(-3).to_string(), "2019-12");
        assert_eq!(Month::from_timestamp(1_583_020_800), m); // 2020-03-01T00:00:00Z
    }

    #[test]
    fn iso_week_labels() {
        // 2020-03-26 is a Thursday in ISO week 13.
        let ts = timestamp_of(NaiveDate::from_ymd_opt(2020, 3, 26).unwrap());
        let w = Week::from_timestamp(ts);
        assert_eq!(w.to_string(), "2020-W13");
        assert_eq!("2020-W13".parse::<Week>().unwrap(), w);
        // 2021-01-03 is a Sunday that belongs to 2020-W53.
        let ts = timestamp_of(NaiveDate::from_ymd_opt(2021, 1, 3).unwrap());
        assert_eq!(Week::from_timestamp(ts).to_string(), "2020-W53");
        assert_eq!(Week::from_timestamp(ts).offset(1).to_string(), "2021-W01");
    }

    #[test]
    fn weeks_between_floors() {
        let r = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        assert_eq!(weeks_between(r, r), 0);
        assert_eq!(weeks_between(r, NaiveDate::from_ymd_opt(2020, 1, 7).unwrap()), 0);
        assert_eq!(weeks_between(r, NaiveDate::from_ymd_opt(2020, 1, 8).unwrap()), 1);
        assert_eq!(weeks_between(r, NaiveDate::from_ymd_opt(2019, 12, 31).unwrap()), -1);
    }
}
