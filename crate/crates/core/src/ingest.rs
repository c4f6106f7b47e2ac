//! Visit-log and manifest ingestion.
//!
//! Visit files hold one user per line:
//!
//! ```text
//! USER_ID<TAB>YYYYMMDD&hh|hh|hh,YYYYMMDD&hh|...
//! ```
//!
//! Hours are two-digit, zero-padded and in `00..=23`. A user may appear on
//! several lines; events are merged and duplicates collapse. Blank lines are
//! ignored. Parsing is line-at-a-time, so memory tracks the size of the
//! resulting log rather than the size of the file.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{CalendarWindow, Category, RegionRecord, TemporalTensor, Visit, VisitLog};
use crate::seed::stage_rng;

pub const MANIFEST_HEADER: [&str; 4] = ["region_id", "label", "visit_path", "image_path"];

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_date(field: &str, line: usize) -> Result<NaiveDate> {
    if field.len() != 8 || !field.bytes().all(|b| b.is_ascii_digit()) {
        return Err(parse_err(line, format!("malformed date {field:?}")));
    }
    NaiveDate::parse_from_str(field, "%Y%m%d").map_err(|_| parse_err(line, format!("invalid date {field:?}")))
}

fn parse_hour(field: &str, line: usize) -> Result<u8> {
    let b = field.as_bytes();
    if b.len() != 2 || !b.iter().all(u8::is_ascii_digit) {
        return Err(parse_err(line, format!("malformed hour {field:?}")));
    }
    let hour = (b[0] - b'0') * 10 + (b[1] - b'0');
    if hour >= 24 {
        return Err(parse_err(line, format!("hour {hour} out of range")));
    }
    Ok(hour)
}

fn parse_line(text: &str, line: usize, window: &CalendarWindow, log: &mut VisitLog) -> Result<()> {
    let (user, rest) = text.split_once('\t').ok_or_else(|| parse_err(line, "missing tab after user id"))?;
    if user.is_empty() {
        return Err(parse_err(line, "empty user id"));
    }
    if rest.is_empty() {
        return Err(parse_err(line, "no visit records"));
    }
    for record in rest.split(',') {
        let (date, hours) =
            record.split_once('&').ok_or_else(|| parse_err(line, format!("missing '&' in {record:?}")))?;
        let date = parse_date(date, line)?;
        let day = window.day_offset(date).map_err(|e| Error::Range(format!("line {line}: {e}")))?;
        if hours.is_empty() {
            return Err(parse_err(line, "empty hour list"));
        }
        for h in hours.split('|') {
            let hour = parse_hour(h, line)?;
            log.insert(user, Visit::new(day, hour))?;
        }
    }
    Ok(())
}

/// Parses one region's visit file.
pub fn parse_visit_file<R: BufRead>(mut reader: R, region_id: &str, window: CalendarWindow) -> Result<VisitLog> {
    let mut log = VisitLog::new(region_id, window);
    let mut buf = String::new();
    let mut line = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line += 1;
        let text = buf.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        parse_line(text, line, &window, &mut log)?;
    }
    Ok(log)
}

pub fn parse_visit_str(text: &str, region_id: &str, window: CalendarWindow) -> Result<VisitLog> {
    parse_visit_file(text.as_bytes(), region_id, window)
}

pub fn read_visit_log(path: &Path, region_id: &str, window: CalendarWindow) -> Result<VisitLog> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    parse_visit_file(BufReader::new(file), region_id, window).map_err(|e| match e {
        Error::Parse { line, message } => Error::file(path, format!("line {line}: {message}")),
        Error::Range(m) => Error::file(path, m),
        other => other,
    })
}

/// Canonical text form: users in lexical order, dates ascending, hours
/// ascending, one line per user.
pub fn serialize_visit_log(log: &VisitLog) -> String {
    let mut out = String::new();
    for (user, visits) in log.users() {
        out.push_str(user);
        out.push('\t');
        let mut current: Option<u32> = None;
        for v in visits {
            if current == Some(v.day) {
                let _ = write!(out, "|{:02}", v.hour);
            } else {
                if current.is_some() {
                    out.push(',');
                }
                let date = log.window.date_of(v.day);
                let _ = write!(out, "{}&{:02}", date.format("%Y%m%d"), v.hour);
                current = Some(v.day);
            }
        }
        out.push('\n');
    }
    out
}

pub fn build_temporal_tensor(log: &VisitLog) -> TemporalTensor {
    let mut tensor = TemporalTensor::zeros(log.window.num_weeks());
    for v in log.events() {
        let (week, weekday) = (v.day / 7, v.day % 7);
        tensor.increment(week as usize, weekday as usize, usize::from(v.hour));
    }
    tensor
}

/// The manifest plus fold assignment for every labeled record.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub window: CalendarWindow,
    pub records: Vec<RegionRecord>,
    /// Fold of each record; `None` for unlabeled records.
    pub folds: Vec<Option<usize>>,
    pub k_folds: usize,
}

impl DatasetIndex {
    pub fn training_indices(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].label.is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].label.is_none()).collect()
    }

    pub fn visit_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].visit_path)
    }

    pub fn image_path(&self, i: usize) -> Option<PathBuf> {
        self.records[i].image_path.as_ref().map(|p| self.root.join(p))
    }

    pub fn load_visit_log(&self, i: usize) -> Result<VisitLog> {
        read_visit_log(&self.visit_path(i), &self.records[i].region_id, self.window)
    }
}

/// Reads a manifest CSV (`region_id,label,visit_path,image_path`).
pub fn read_manifest(path: &Path) -> Result<Vec<RegionRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| Error::file(path, e))?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::file(path, format!("expected header {:?}, found {:?}", MANIFEST_HEADER.join(","), header)));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let region_id = row[0].trim().to_owned();
        if region_id.is_empty() {
            return Err(Error::file(path, format!("line {line}: empty region_id")));
        }
        let label = match row[1].trim() {
            "" => None,
            name => Some(name.parse::<Category>().map_err(|e| Error::file(path, format!("line {line}: {e}")))?),
        };
        let visit_path = PathBuf::from(row[2].trim());
        let image_path = match row[3].trim() {
            "" => None,
            p => Some(PathBuf::from(p)),
        };
        records.push(RegionRecord { region_id, label, visit_path, image_path });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[RegionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        w.write_record([
            r.region_id.as_str(),
            r.label.map(Category::name).unwrap_or(""),
            &r.visit_path.to_string_lossy(),
            &r.image_path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Stratified fold assignment: labeled records of each category are
/// shuffled and dealt round-robin, the deal continuing across categories.
pub fn assign_folds(records: &[RegionRecord], k_folds: usize, seed: u64) -> Result<Vec<Option<usize>>> {
    if k_folds < 2 {
        return Err(Error::Invalid(format!("k_folds must be at least 2, got {k_folds}")));
    }
    let mut rng = stage_rng(seed, "folds");
    let mut folds = vec![None; records.len()];
    let mut next = 0usize;
    for category in Category::ALL {
        let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == Some(category)).collect();
        members.sort_by(|&a, &b| records[a].region_id.cmp(&records[b].region_id));
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = Some(next % k_folds);
            next += 1;
        }
    }
    Ok(folds)
}

pub fn load_dataset(
    root: &Path,
    manifest_path: &Path,
    window: CalendarWindow,
    k_folds: usize,
    seed: u64,
) -> Result<DatasetIndex> {
    let records = read_manifest(manifest_path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.region_id.as_str()) {
            return Err(Error::file(manifest_path, format!("duplicate region_id {:?}", r.region_id)));
        }
        let visit = root.join(&r.visit_path);
        if !visit.is_file() {
            return Err(Error::file(visit, format!("visit file for region {} not found", r.region_id)));
        }
        if let Some(image) = &r.image_path {
            let image = root.join(image);
            if !image.is_file() {
                return Err(Error::file(image, format!("image for region {} not found", r.region_id)));
            }
        }
    }
    let folds = assign_folds(&records, k_folds, seed)?;
    Ok(DatasetIndex { root: root.to_owned(), window, records, folds, k_folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window() -> CalendarWindow {
        CalendarWindow::default()
    }

    #[test]
    fn parses_minimal_line() {
        let log = parse_visit_str("U001\t20181001&09|10", "r", window()).unwrap();
        assert_eq!(log.num_users(), 1);
        let visits: Vec<_> = log.user_visits("U001").unwrap().iter().copied().collect();
        assert_eq!(visits, vec![Visit::new(0, 9), Visit::new(0, 10)]);
    }

    #[test]
    fn empty_input_gives_empty_log() {
        let log = parse_visit_str("", "r", window()).unwrap();
        assert!(log.is_empty());
        assert_eq!(log.num_events(), 0);
    }

    #[test]
    fn rejects_bad_hours_and_dates_with_line_numbers() {
        let cases = [
            "U001\t20181001&25",
            "U001\t20181001&9",
            "U001\t2018101&09",
            "U001\t20181345&09",
            "U001 20181001&09",
            "U001\t20181001",
            "U001\t20181001&",
            "\t20181001&09",
        ];
        for case in cases {
            let text = format!("U000\t20181002&01\n{case}\n");
            match parse_visit_str(&text, "r", window()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2, "{case}"),
                other => panic!("{case}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn out_of_window_dates_are_range_errors() {
        let err = parse_visit_str("U1\t20180930&01", "r", window()).unwrap_err();
        assert!(matches!(err, Error::Range(ref m) if m.starts_with("line 1")), "{err}");
        let err = parse_visit_str("U1\t20190401&01", "r", window()).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn merges_repeated_users_and_collapses_duplicates() {
        let text = "B\t20181002&03|03\nA\t20181001&05\r\n\nB\t20181002&03,20181001&23\n";
        let log = parse_visit_str(text, "r", window()).unwrap();
        assert_eq!(log.num_users(), 2);
        assert_eq!(log.num_events(), 3);
        assert_eq!(serialize_visit_log(&log), "A\t20181001&05\nB\t20181001&23,20181002&03\n");
    }

    #[test]
    fn tensor_cells_follow_calendar() {
        let log = parse_visit_str("U1\t20181001&09", "r", window()).unwrap();
        let t = build_temporal_tensor(&log);
        assert_eq!(t.get(0, 0, 9), 1);
        assert_eq!(t.total(), 1);

        // day 8 = week 1, weekday 1
        let log = parse_visit_str("U1\t20181009&07\nU2\t20181009&07", "r", window()).unwrap();
        let t = build_temporal_tensor(&log);
        assert_eq!(t.get(1, 1, 7), 2);
        assert_eq!(t.total(), 2);

        let t = build_temporal_tensor(&VisitLog::new("r", window()));
        assert_eq!(t.total(), 0);
        assert_eq!(t.as_slice().len(), 26 * 7 * 24);
    }

    fn arb_log() -> impl Strategy<Value = Vec<(String, u32, u8)>> {
        prop::collection::vec(("[A-Za-z0-9_]{1,6}", 0u32..182, 0u8..24), 0..60)
    }

    proptest! {
        #[test]
        fn canonical_serialization_round_trips(events in arb_log()) {
            let mut log = VisitLog::new("r", window());
            for (u, d, h) in &events {
                log.insert(u, Visit::new(*d, *h)).unwrap();
            }
            let text = serialize_visit_log(&log);
            let parsed = parse_visit_str(&text, "r", window()).unwrap();
            prop_assert_eq!(&parsed, &log);
            prop_assert_eq!(serialize_visit_log(&parsed), text);
        }

        #[test]
        fn tensor_conserves_mass(events in arb_log()) {
            let mut log = VisitLog::new("r", window());
            for (u, d, h) in &events {
                log.insert(u, Visit::new(*d, *h)).unwrap();
            }
            let t = build_temporal_tensor(&log);
            prop_assert_eq!(t.total() as usize, log.num_events());
        }
    }

    fn record(id: &str, label: Option<Category>) -> RegionRecord {
        RegionRecord { region_id: id.into(), label, visit_path: format!("visits/{id}.txt").into(), image_path: None }
    }

    #[test]
    fn folds_are_stratified_and_deterministic() {
        let mut records: Vec<_> = (0..90).map(|i| record(&format!("R{i:03}"), Some(Category::ALL[i % 9]))).collect();
        records.push(record("T", None));
        let a = assign_folds(&records, 5, 7).unwrap();
        let b = assign_folds(&records, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[90], None);
        for f in 0..5 {
            assert_eq!(a.iter().filter(|x| **x == Some(f)).count(), 18);
        }
        for c in Category::ALL {
            let per_fold: Vec<usize> =
                (0..5).map(|f| (0..90).filter(|&i| records[i].label == Some(c) && a[i] == Some(f)).count()).collect();
            assert_eq!(per_fold.iter().sum::<usize>(), 10);
            assert!(per_fold.iter().all(|&n| n == 2), "{c}: {per_fold:?}");
        }
        assert!(assign_folds(&records, 1, 7).is_err());
    }

    #[test]
    fn folds_nonempty_when_k_does_not_exceed_records() {
        let records: Vec<_> = (0..9).map(|i| record(&format!("R{i}"), Some(Category::ALL[i]))).collect();
        let folds = assign_folds(&records, 9, 1).unwrap();
        let mut seen: Vec<usize> = folds.iter().map(|f| f.unwrap()).collect();
        seen.sort();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
    }
}
