//! Visit-log feature families.
//!
//! * statistical feature: a fixed 45-value summary of one region's log;
//! * activity profile: for one user, a 9 × 5 matrix of visit statistics
//!   broken down by the categories of the labeled regions they visit;
//! * user activity feature: the mean activity profile over a region's users;
//! * region graph feature: for each category, the mean statistical feature
//!   of the labeled regions co-visited by the region's users.
//!
//! Activity profiles and the region graph both read a [`UserIndex`] built
//! from labeled regions only. The target region is always excluded from its
//! own profile and graph so its label never feeds its own features.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::{is_weekend, weekday_of, Category, VisitLog, HOURS_PER_DAY, N_CATEGORIES};

/// Length of the statistical feature.
pub const N_STAT: usize = 45;
/// Statistics per category in an activity profile.
pub const N_ACTIVITY: usize = 5;
pub const ACTIVITY_DIM: usize = N_CATEGORIES * N_ACTIVITY;
pub const GRAPH_DIM: usize = N_CATEGORIES * N_STAT;
pub const MULTI_DIM: usize = N_STAT + ACTIVITY_DIM + GRAPH_DIM;

pub mod stat_layout {
    pub const TOTAL_EVENTS: usize = 0;
    pub const UNIQUE_USERS: usize = 1;
    pub const ACTIVE_DAYS: usize = 2;
    pub const MEAN_EVENTS_PER_USER: usize = 3;
    pub const STD_EVENTS_PER_USER: usize = 4;
    pub const MAX_EVENTS_PER_USER: usize = 5;
    pub const MIN_EVENTS_PER_USER: usize = 6;
    pub const MEAN_HOUR: usize = 7;
    pub const STD_HOUR: usize = 8;
    pub const MIN_HOUR: usize = 9;
    pub const MAX_HOUR: usize = 10;
    pub const HOUR_HIST: usize = 11;
    pub const WEEKDAY_HIST: usize = 35;
    pub const WEEKEND_RATIO: usize = 42;
    pub const WORK_HOUR_RATIO: usize = 43;
    pub const NIGHT_RATIO: usize = 44;
}

/// Statistical summary of one region's visit log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatFeature(pub [f64; N_STAT]);

impl StatFeature {
    pub fn zeros() -> Self {
        StatFeature([0.0; N_STAT])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn extract_statistical(log: &VisitLog) -> StatFeature {
    use stat_layout::*;

    let mut f = [0.0; N_STAT];
    let total = log.num_events();
    if total == 0 {
        return StatFeature(f);
    }
    let n = total as f64;

    let per_user: Vec<f64> = log.users().map(|(_, v)| v.len() as f64).collect();
    let (mean_u, std_u) = mean_std(&per_user);
    let days: BTreeSet<u32> = log.events().map(|v| v.day).collect();
    let hours: Vec<f64> = log.events().map(|v| f64::from(v.hour)).collect();
    let (mean_h, std_h) = mean_std(&hours);

    f[TOTAL_EVENTS] = n;
    f[UNIQUE_USERS] = log.num_users() as f64;
    f[ACTIVE_DAYS] = days.len() as f64;
    f[MEAN_EVENTS_PER_USER] = mean_u;
    f[STD_EVENTS_PER_USER] = std_u;
    f[MAX_EVENTS_PER_USER] = per_user.iter().copied().fold(f64::MIN, f64::max);
    f[MIN_EVENTS_PER_USER] = per_user.iter().copied().fold(f64::MAX, f64::min);
    f[MEAN_HOUR] = mean_h;
    f[STD_HOUR] = std_h;
    f[MIN_HOUR] = hours.iter().copied().fold(f64::MAX, f64::min);
    f[MAX_HOUR] = hours.iter().copied().fold(f64::MIN, f64::max);

    let mut hour_counts = [0u32; HOURS_PER_DAY];
    let mut weekday_counts = [0u32; 7];
    let (mut weekend, mut work, mut night) = (0u32, 0u32, 0u32);
    for v in log.events() {
        hour_counts[usize::from(v.hour)] += 1;
        weekday_counts[weekday_of(v.day)] += 1;
        weekend += u32::from(is_weekend(v.day));
        work += u32::from((9..17).contains(&v.hour));
        night += u32::from(v.hour < 6);
    }
    for (h, &c) in hour_counts.iter().enumerate() {
        f[HOUR_HIST + h] = f64::from(c) / n;
    }
    for (k, &c) in weekday_counts.iter().enumerate() {
        f[WEEKDAY_HIST + k] = f64::from(c) / n;
    }
    f[WEEKEND_RATIO] = f64::from(weekend) / n;
    f[WORK_HOUR_RATIO] = f64::from(work) / n;
    f[NIGHT_RATIO] = f64::from(night) / n;
    StatFeature(f)
}

/// One user's visits to one labeled region.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRegionVisits {
    pub region_id: String,
    pub label: Category,
    pub events: u32,
    /// Distinct day offsets, ascending.
    pub days: Vec<u32>,
    /// Hour of every event.
    pub hours: Vec<u8>,
    pub weekend_events: u32,
}

/// Inverted index from user to the labeled regions they visited.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserIndex {
    users: BTreeMap<String, Vec<UserRegionVisits>>,
}

impl UserIndex {
    /// Builds the index from labeled region logs.
    pub fn build<'a>(regions: impl IntoIterator<Item = (&'a VisitLog, Category)>) -> Result<Self> {
        let mut users: BTreeMap<String, Vec<UserRegionVisits>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (log, label) in regions {
            if !seen.insert(log.region_id.clone()) {
                return Err(Error::Invalid(format!("region {} indexed twice", log.region_id)));
            }
            for (user, visits) in log.users() {
                let mut days: Vec<u32> = visits.iter().map(|v| v.day).collect();
                days.dedup();
                let entry = UserRegionVisits {
                    region_id: log.region_id.clone(),
                    label,
                    events: visits.len() as u32,
                    days,
                    hours: visits.iter().map(|v| v.hour).collect(),
                    weekend_events: visits.iter().filter(|v| is_weekend(v.day)).count() as u32,
                };
                users.entry(user.to_owned()).or_default().push(entry);
            }
        }
        for entries in users.values_mut() {
            entries.sort_by(|a, b| a.region_id.cmp(&b.region_id));
        }
        Ok(UserIndex { users })
    }

    pub fn regions_of(&self, user: &str) -> &[UserRegionVisits] {
        self.users.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_entries(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }
}

/// Per-category activity statistics of one user, row-major 9 × 5:
/// `[regions visited, events, distinct active days, mean hour, weekend ratio]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityProfile(pub [[f64; N_ACTIVITY]; N_CATEGORIES]);

impl ActivityProfile {
    pub fn zeros() -> Self {
        ActivityProfile([[0.0; N_ACTIVITY]; N_CATEGORIES])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

pub fn user_activity_profile(user: &str, index: &UserIndex, exclude_region: Option<&str>) -> ActivityProfile {
    let mut regions = [0u32; N_CATEGORIES];
    let mut events = [0u64; N_CATEGORIES];
    let mut hour_sum = [0u64; N_CATEGORIES];
    let mut weekend = [0u64; N_CATEGORIES];
    let mut days: [Vec<u32>; N_CATEGORIES] = Default::default();
    for entry in index.regions_of(user) {
        if Some(entry.region_id.as_str()) == exclude_region {
            continue;
        }
        let c = entry.label.index();
        regions[c] += 1;
        events[c] += u64::from(entry.events);
        hour_sum[c] += entry.hours.iter().map(|&h| u64::from(h)).sum::<u64>();
        weekend[c] += u64::from(entry.weekend_events);
        days[c].extend_from_slice(&entry.days);
    }
    let mut profile = ActivityProfile::zeros();
    for c in 0..N_CATEGORIES {
        if regions[c] == 0 {
            continue;
        }
        days[c].sort_unstable();
        days[c].dedup();
        let n = events[c] as f64;
        let row = &mut profile.0[c];
        row[0] = f64::from(regions[c]);
        row[1] = n;
        row[2] = days[c].len() as f64;
        if events[c] > 0 {
            row[3] = hour_sum[c] as f64 / n;
            row[4] = weekend[c] as f64 / n;
        }
    }
    profile
}

/// Mean activity profile over every user in `log`, flattened row-major.
/// Users unknown to the index contribute zero profiles.
pub fn extract_user_activity(log: &VisitLog, index: &UserIndex, self_region: &str) -> Vec<f64> {
    let mut sum = vec![0.0; ACTIVITY_DIM];
    if log.is_empty() {
        return sum;
    }
    for (user, _) in log.users() {
        let profile = user_activity_profile(user, index, Some(self_region));
        for (s, v) in sum.iter_mut().zip(profile.0.iter().flatten()) {
            *s += v;
        }
    }
    let n = log.num_users() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

/// Region ids co-visited with `log` by at least one of its users, minus the
/// region itself, with their labels.
pub fn related_regions<'a>(log: &VisitLog, index: &'a UserIndex, self_region: &str) -> BTreeMap<&'a str, Category> {
    let mut related = BTreeMap::new();
    for (user, _) in log.users() {
        for entry in index.regions_of(user) {
            if entry.region_id != self_region {
                related.insert(entry.region_id.as_str(), entry.label);
            }
        }
    }
    related
}

/// Per-category mean statistical feature over related regions, flattened
/// row-major (9 × 45).
pub fn extract_region_graph(
    log: &VisitLog,
    index: &UserIndex,
    stat_store: &HashMap<String, StatFeature>,
    self_region: &str,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; GRAPH_DIM];
    let mut counts = [0usize; N_CATEGORIES];
    for (region, label) in related_regions(log, index, self_region) {
        let stat = stat_store
            .get(region)
            .ok_or_else(|| Error::Invalid(format!("no statistical feature for related region {region}")))?;
        let c = label.index();
        counts[c] += 1;
        for (s, v) in sums[c * N_STAT..(c + 1) * N_STAT].iter_mut().zip(stat.as_slice()) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums[c * N_STAT..(c + 1) * N_STAT].iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    Ok(sums)
}

/// Concatenates the three visit feature blocks in the order stat, activity, graph.
pub fn concat_multidim(stat: &[f64], activity: &[f64], graph: &[f64]) -> Result<Vec<f64>> {
    for (block, expected) in [(stat, N_STAT), (activity, ACTIVITY_DIM), (graph, GRAPH_DIM)] {
        if block.len() != expected {
            return Err(Error::Dimension { expected, actual: block.len() });
        }
    }
    let mut out = Vec::with_capacity(MULTI_DIM);
    out.extend_from_slice(stat);
    out.extend_from_slice(activity);
    out.extend_from_slice(graph);
    Ok(out)
}
