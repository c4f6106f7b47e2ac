//! Shared domain types: the category taxonomy, the observation calendar,
//! per-region visit logs and the week × weekday × hour visit tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of region function categories.
pub const N_CATEGORIES: usize = 9;
pub const HOURS_PER_DAY: usize = 24;
pub const DAYS_PER_WEEK: usize = 7;
/// Default observation window length (26 weeks).
pub const DEFAULT_NUM_DAYS: u32 = 182;

/// Region function category. The discriminant is the class index used by
/// every model and file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Res = 0,
    Sch = 1,
    Ind = 2,
    Rail = 3,
    Air = 4,
    Park = 5,
    Shop = 6,
    Adm = 7,
    Hos = 8,
}

impl Category {
    pub const ALL: [Category; N_CATEGORIES] = [
        Category::Res,
        Category::Sch,
        Category::Ind,
        Category::Rail,
        Category::Air,
        Category::Park,
        Category::Shop,
        Category::Adm,
        Category::Hos,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Category> {
        Category::ALL.get(index).copied().ok_or_else(|| Error::Range(format!("category index {index} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Res => "Res",
            Category::Sch => "Sch",
            Category::Ind => "Ind",
            Category::Rail => "Rail",
            Category::Air => "Air",
            Category::Park => "Park",
            Category::Shop => "Shop",
            Category::Adm => "Adm",
            Category::Hos => "Hos",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Category> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown category label {s:?}")))
    }
}

/// The observation calendar. Day offsets are relative to `start_date`, and
/// weekdays are offsets modulo 7 rather than civil weekdays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarWindow {
    pub start_date: NaiveDate,
    pub num_days: u32,
}

impl Default for CalendarWindow {
    fn default() -> Self {
        CalendarWindow {
            // A Monday, so weekday offsets 5 and 6 are the weekend.
            start_date: NaiveDate::from_ymd_opt(2018, 10, 1).expect("valid date"),
            num_days: DEFAULT_NUM_DAYS,
        }
    }
}

impl CalendarWindow {
    pub fn new(start_date: NaiveDate, num_days: u32) -> Result<Self> {
        if num_days == 0 {
            return Err(Error::Invalid("calendar window must span at least one day".into()));
        }
        Ok(CalendarWindow { start_date, num_days })
    }

    /// Number of (possibly partial) weeks covered by the window.
    pub fn num_weeks(&self) -> usize {
        (self.num_days as usize).div_ceil(DAYS_PER_WEEK)
    }

    pub fn day_offset_to_week_weekday(&self, day: u32) -> Result<(u32, u32)> {
        if day >= self.num_days {
            return Err(Error::Range(format!("day offset {day} outside window of {} days", self.num_days)));
        }
        Ok((day / 7, day % 7))
    }

    pub fn week_weekday_to_day_offset(&self, week: u32, weekday: u32) -> Result<u32> {
        if weekday >= 7 {
            return Err(Error::Range(format!("weekday {weekday} out of range")));
        }
        let day = week * 7 + weekday;
        if day >= self.num_days {
            return Err(Error::Range(format!("week {week} weekday {weekday} outside window")));
        }
        Ok(day)
    }

    pub fn day_offset(&self, date: NaiveDate) -> Result<u32> {
        let delta = (date - self.start_date).num_days();
        if delta < 0 || delta >= i64::from(self.num_days) {
            return Err(Error::Range(format!(
                "date {} outside window starting {} ({} days)",
                date.format("%Y%m%d"),
                self.start_date.format("%Y%m%d"),
                self.num_days
            )));
        }
        Ok(delta as u32)
    }

    pub fn date_of(&self, day: u32) -> NaiveDate {
        self.start_date + chrono::Days::new(u64::from(day))
    }
}

/// Weekday offset of a day (0..7), relative to the window start.
pub fn weekday_of(day: u32) -> usize {
    (day % 7) as usize
}

pub fn is_weekend(day: u32) -> bool {
    weekday_of(day) >= 5
}

/// One visit event: a user present in the region during `hour` of day `day`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Visit {
    pub day: u32,
    pub hour: u8,
}

impl Visit {
    pub fn new(day: u32, hour: u8) -> Self {
        Visit { day, hour }
    }
}

/// All visit events observed in one region, keyed by user.
///
/// Presence is binary per (user, day, hour): repeated events collapse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitLog {
    pub region_id: String,
    pub window: CalendarWindow,
    visits: BTreeMap<String, BTreeSet<Visit>>,
}

impl VisitLog {
    pub fn new(region_id: impl Into<String>, window: CalendarWindow) -> Self {
        VisitLog { region_id: region_id.into(), window, visits: BTreeMap::new() }
    }

    /// Adds one event. Returns `false` when it was already present.
    pub fn insert(&mut self, user: &str, visit: Visit) -> Result<bool> {
        if user.is_empty() {
            return Err(Error::Invalid("empty user id".into()));
        }
        if visit.hour as usize >= HOURS_PER_DAY {
            return Err(Error::Range(format!("hour {} out of range", visit.hour)));
        }
        self.window.day_offset_to_week_weekday(visit.day)?;
        if let Some(set) = self.visits.get_mut(user) {
            return Ok(set.insert(visit));
        }
        self.visits.insert(user.to_owned(), BTreeSet::from([visit]));
        Ok(true)
    }

    pub fn users(&self) -> impl ExactSizeIterator<Item = (&str, &BTreeSet<Visit>)> {
        self.visits.iter().map(|(u, v)| (u.as_str(), v))
    }

    pub fn user_visits(&self, user: &str) -> Option<&BTreeSet<Visit>> {
        self.visits.get(user)
    }

    pub fn num_users(&self) -> usize {
        self.visits.len()
    }

    pub fn num_events(&self) -> usize {
        self.visits.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn events(&self) -> impl Iterator<Item = Visit> + '_ {
        self.visits.values().flat_map(|s| s.iter().copied())
    }
}

/// Visit counts indexed by (week, weekday, hour).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalTensor {
    weeks: usize,
    counts: Vec<u32>,
}

impl TemporalTensor {
    pub fn zeros(weeks: usize) -> Self {
        TemporalTensor { weeks, counts: vec![0; weeks * DAYS_PER_WEEK * HOURS_PER_DAY] }
    }

    pub fn weeks(&self) -> usize {
        self.weeks
    }

    fn offset(&self, week: usize, weekday: usize, hour: usize) -> usize {
        assert!(week < self.weeks && weekday < DAYS_PER_WEEK && hour < HOURS_PER_DAY);
        (week * DAYS_PER_WEEK + weekday) * HOURS_PER_DAY + hour
    }

    pub fn get(&self, week: usize, weekday: usize, hour: usize) -> u32 {
        self.counts[self.offset(week, weekday, hour)]
    }

    pub fn increment(&mut self, week: usize, weekday: usize, hour: usize) {
        let i = self.offset(week, weekday, hour);
        self.counts[i] += 1;
    }

    /// Row-major (week, weekday, hour) cell counts.
    pub fn as_slice(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// One row of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionRecord {
    pub region_id: String,
    /// `None` for regions whose function is to be predicted.
    pub label: Option<Category>,
    pub visit_path: PathBuf,
    pub image_path: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_names_round_trip() {
        for (i, c) in Category::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(Category::from_index(i).unwrap(), *c);
            assert_eq!(c.name().parse::<Category>().unwrap(), *c);
        }
        assert!("Farm".parse::<Category>().is_err());
        assert!(Category::from_index(9).is_err());
    }

    #[test]
    fn day_offsets_map_to_week_and_weekday() {
        let w = CalendarWindow::default();
        assert_eq!(w.num_weeks(), 26);
        assert_eq!(w.day_offset_to_week_weekday(0).unwrap(), (0, 0));
        assert_eq!(w.day_offset_to_week_weekday(181).unwrap(), (25, 6));
        assert_eq!(w.day_offset_to_week_weekday(9).unwrap(), (1, 2));
        assert!(w.day_offset_to_week_weekday(182).is_err());
    }

    #[test]
    fn calendar_is_a_bijection() {
        let w = CalendarWindow::default();
        for d in 0..w.num_days {
            let (week, weekday) = w.day_offset_to_week_weekday(d).unwrap();
            assert_eq!(w.week_weekday_to_day_offset(week, weekday).unwrap(), d);
        }
    }

    #[test]
    fn dates_outside_window_are_rejected() {
        let w = CalendarWindow::default();
        let before = NaiveDate::from_ymd_opt(2018, 9, 30).unwrap();
        let last = NaiveDate::from_ymd_opt(2019, 3, 31).unwrap();
        assert!(w.day_offset(before).is_err());
        assert_eq!(w.day_offset(last).unwrap(), 181);
        assert!(w.day_offset(last + chrono::Days::new(1)).is_err());
        assert_eq!(w.date_of(181), last);
    }

    #[test]
    fn visit_log_collapses_duplicates() {
        let mut log = VisitLog::new("r", CalendarWindow::default());
        assert!(log.insert("u", Visit::new(0, 9)).unwrap());
        assert!(!log.insert("u", Visit::new(0, 9)).unwrap());
        assert_eq!(log.num_events(), 1);
        assert!(log.insert("", Visit::new(0, 9)).is_err());
        assert!(log.insert("u", Visit::new(0, 24)).is_err());
        assert!(log.insert("u", Visit::new(182, 0)).is_err());
    }
}
