//! Interaction events, vocabularies, temporal slicing and scoring perimeters.
//!
//! Every [`EventLog`] keeps its events sorted by day (stable within a day)
//! and owns dense, contiguous user and item vocabularies. Slicing a log
//! re-densifies the vocabularies to the entities present in the slice while
//! preserving their relative order, so tables sized from a slice match its
//! perimeter exactly and ties broken by dense id stay consistent.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Day = u32;

/// One implicit-feedback event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub day: Day,
    pub user: u32,
    pub item: u32,
}

/// Bidirectional map between external ids and dense ids `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for name in names {
            vocab.intern(&name.into());
        }
        vocab
    }

    /// Dense id for `name`, allocating the next id when unseen.
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.lookup.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.lookup.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Chronologically sorted interaction log.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    events: Vec<Interaction>,
    users: Vocab,
    items: Vocab,
    origin: NaiveDate,
}

impl EventLog {
    /// Builds a log, stably sorting `events` by day.
    ///
    /// Panics if an event references an id outside the vocabularies.
    pub fn new(mut events: Vec<Interaction>, users: Vocab, items: Vocab, origin: NaiveDate) -> Self {
        events.sort_by_key(|e| e.day);
        for e in &events {
            assert!(
                (e.user as usize) < users.len() && (e.item as usize) < items.len(),
                "event {e:?} outside vocabularies"
            );
        }
        EventLog {
            events,
            users,
            items,
            origin,
        }
    }

    /// Log over anonymous ids `u0..`, `i0..` with the given sizes; handy for tests.
    pub fn from_triples(num_users: usize, num_items: usize, triples: &[(Day, u32, u32)]) -> Self {
        let users = Vocab::from_names((0..num_users).map(|u| format!("u{u}")));
        let items = Vocab::from_names((0..num_items).map(|i| format!("i{i}")));
        let events = triples
            .iter()
            .map(|&(day, user, item)| Interaction { day, user, item })
            .collect();
        EventLog::new(events, users, items, default_origin())
    }

    pub fn events(&self) -> &[Interaction] {
        &self.events
    }

    pub fn users(&self) -> &Vocab {
        &self.users
    }

    pub fn items(&self) -> &Vocab {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Calendar date of day index 0.
    pub fn origin(&self) -> NaiveDate {
        self.origin
    }

    /// `(first_day, last_day)` of the events, `None` when empty.
    pub fn day_range(&self) -> Option<(Day, Day)> {
        Some((self.events.first()?.day, self.events.last()?.day))
    }

    /// Events with `day` in the closed interval `[first, last]`.
    pub fn events_between(&self, first: Day, last: Day) -> &[Interaction] {
        let lo = self.events.partition_point(|e| e.day < first);
        let hi = self.events.partition_point(|e| e.day <= last);
        if lo >= hi {
            &[]
        } else {
            &self.events[lo..hi]
        }
    }

    /// Sub-log over `[first, last]` with vocabularies restricted to the
    /// entities present, in their original relative order.
    pub fn restrict_days(&self, first: Day, last: Day) -> EventLog {
        let slice = self.events_between(first, last);
        let mut user_seen = vec![false; self.users.len()];
        let mut item_seen = vec![false; self.items.len()];
        for e in slice {
            user_seen[e.user as usize] = true;
            item_seen[e.item as usize] = true;
        }
        let (users, user_map) = restrict_vocab(&self.users, &user_seen);
        let (items, item_map) = restrict_vocab(&self.items, &item_seen);
        let events = slice
            .iter()
            .map(|e| Interaction {
                day: e.day,
                user: user_map[e.user as usize],
                item: item_map[e.item as usize],
            })
            .collect();
        EventLog {
            events,
            users,
            items,
            origin: self.origin,
        }
    }

    /// Re-expresses the log in the id spaces of `users` and `items`, dropping
    /// every event whose user or item is unknown there.
    pub fn project_onto(&self, users: &Vocab, items: &Vocab) -> EventLog {
        let user_map: Vec<Option<u32>> = self.users.names.iter().map(|n| users.get(n)).collect();
        let item_map: Vec<Option<u32>> = self.items.names.iter().map(|n| items.get(n)).collect();
        let events = self
            .events
            .iter()
            .filter_map(|e| {
                Some(Interaction {
                    day: e.day,
                    user: user_map[e.user as usize]?,
                    item: item_map[e.item as usize]?,
                })
            })
            .collect();
        EventLog {
            events,
            users: users.clone(),
            items: items.clone(),
            origin: self.origin,
        }
    }

    /// The same events with user and item roles exchanged.
    pub fn transposed(&self) -> EventLog {
        let events = self
            .events
            .iter()
            .map(|e| Interaction {
                day: e.day,
                user: e.item,
                item: e.user,
            })
            .collect();
        EventLog {
            events,
            users: self.items.clone(),
            items: self.users.clone(),
            origin: self.origin,
        }
    }

    pub fn date_of(&self, day: Day) -> NaiveDate {
        self.origin + chrono::Days::new(u64::from(day))
    }

    /// Writes `date,user_id,item_id` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["date", "user_id", "item_id"])?;
        for e in &self.events {
            let date = self.date_of(e.day).format("%Y-%m-%d").to_string();
            writer.write_record([
                date.as_str(),
                self.users.names[e.user as usize].as_str(),
                self.items.names[e.item as usize].as_str(),
            ])?;
        }
        writer.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub(crate) fn default_origin() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")
}

fn restrict_vocab(vocab: &Vocab, keep: &[bool]) -> (Vocab, Vec<u32>) {
    let mut restricted = Vocab::new();
    let mut map = vec![u32::MAX; vocab.len()];
    for (old, name) in vocab.names.iter().enumerate() {
        if keep[old] {
            map[old] = restricted.intern(name);
        }
    }
    (restricted, map)
}

/// Column names of the `date,user,item` triple in an input CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvFormat {
    pub date: String,
    pub user: String,
    pub item: String,
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat {
            date: "date".into(),
            user: "user_id".into(),
            item: "item_id".into(),
        }
    }
}

/// Reads an interaction CSV. Dates become day offsets from the earliest date.
pub fn ingest_csv(path: &Path, format: &CsvFormat) -> Result<EventLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, format, &path.display().to_string())
}

pub fn read_csv<R: std::io::Read>(input: R, format: &CsvFormat, source: &str) -> Result<EventLog> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_owned(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (date_col, user_col, item_col) = (column(&format.date)?, column(&format.user)?, column(&format.item)?);

    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let mut raw = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |col: usize, what: &str| -> Result<&str> {
            match record.get(col).map(str::trim) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(parse_err(line, format!("missing {what}"))),
            }
        };
        let date_str = field(date_col, "date")?;
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("bad date `{date_str}`: {e}")))?;
        let user = users.intern(field(user_col, "user id")?);
        let item = items.intern(field(item_col, "item id")?);
        raw.push((date, user, item));
    }
    let origin = raw
        .iter()
        .map(|r| r.0)
        .min()
        .ok_or_else(|| Error::EmptyLog(source.to_owned()))?;
    let events = raw
        .into_iter()
        .map(|(date, user, item)| Interaction {
            day: (date - origin).num_days() as Day,
            user,
            item,
        })
        .collect();
    Ok(EventLog::new(events, users, items, origin))
}

/// Result of [`slice_window`]; an empty slice is reported rather than an error.
#[derive(Clone, Debug)]
pub struct WindowSlice {
    pub log: EventLog,
    /// The requested window started before the first event of the source log.
    pub truncated: bool,
}

impl WindowSlice {
    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }
}

/// Events with day in `[end_day - size_days + 1, end_day]`.
pub fn slice_window(log: &EventLog, end_day: Day, size_days: u32) -> WindowSlice {
    assert!(size_days >= 1, "window size must be at least one day");
    let start = (i64::from(end_day) - i64::from(size_days) + 1).max(0) as Day;
    let truncated = match log.day_range() {
        Some((first, _)) => i64::from(end_day) - i64::from(size_days) + 1 < i64::from(first),
        None => true,
    };
    WindowSlice {
        log: log.restrict_days(start, end_day),
        truncated,
    }
}

/// Contiguous train / validation / test day ranges (closed intervals).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train: (Day, Day),
    pub valid: (Day, Day),
    pub test: (Day, Day),
}

impl TemporalSplit {
    pub fn new(train: (Day, Day), valid: (Day, Day), test: (Day, Day)) -> Result<Self> {
        let split = TemporalSplit { train, valid, test };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.train.0 <= self.train.1
            && self.train.1 < self.valid.0
            && self.valid.0 <= self.valid.1
            && self.valid.1 < self.test.0
            && self.test.0 <= self.test.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "split ranges overlap or are out of order: {self:?}"
            )))
        }
    }
}

/// Users and items a model can score: those seen in its training window.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Perimeter {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
}

impl Perimeter {
    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }
}

pub fn perimeter_of(log: &EventLog) -> Perimeter {
    let mut users = vec![false; log.num_users()];
    let mut items = vec![false; log.num_items()];
    for e in log.events() {
        users[e.user as usize] = true;
        items[e.item as usize] = true;
    }
    let collect = |seen: Vec<bool>| {
        seen.iter()
            .enumerate()
            .filter_map(|(id, &s)| s.then_some(id as u32))
            .collect()
    };
    Perimeter {
        users: collect(users),
        items: collect(items),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EventLog> {
        read_csv(text.as_bytes(), &CsvFormat::default(), "mem")
    }

    #[test]
    fn ingest_maps_dates_to_offsets() {
        let log = parse("date,user_id,item_id\n2021-03-01,a,x\n2021-03-02,b,y\n2021-03-01,a,y\n").unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.day_range(), Some((0, 1)));
        assert_eq!(log.num_users(), 2);
        assert_eq!(log.num_items(), 2);
    }

    #[test]
    fn ingest_sorts_stably_within_day() {
        let log = parse("date,user_id,item_id\n2021-03-03,c,z\n2021-03-01,a,x\n2021-03-01,b,y\n").unwrap();
        let days: Vec<_> = log.events().iter().map(|e| e.day).collect();
        assert_eq!(days, vec![0, 0, 2]);
        let users: Vec<_> = log.events().iter().map(|e| log.users().name(e.user).unwrap()).collect();
        assert_eq!(users, vec!["a", "b", "c"]);
    }

    #[test]
    fn ingest_reports_line_of_missing_item() {
        let err = parse("date,user_id,item_id\n2021-03-01,a,x\n2021-03-02,b\n").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("item"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_empty_and_bad_dates() {
        assert!(matches!(parse("date,user_id,item_id\n"), Err(Error::EmptyLog(_))));
        assert!(matches!(
            parse("date,user_id,item_id\n03/01/2021,a,x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicates_are_kept() {
        let log = parse("date,user_id,item_id\n2021-03-01,a,x\n2021-03-01,a,x\n").unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let log = EventLog::from_triples(2, 3, &[(0, 0, 1), (2, 1, 2), (2, 0, 0)]);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in log.events().iter().zip(back.events()) {
            assert_eq!(a.day, b.day);
            assert_eq!(log.users().name(a.user), back.users().name(b.user));
            assert_eq!(log.items().name(a.item), back.items().name(b.item));
        }
    }

    fn ten_days() -> EventLog {
        let triples: Vec<_> = (0..10).map(|d| (d, d % 3, d % 4)).collect();
        EventLog::from_triples(3, 4, &triples)
    }

    #[test]
    fn slice_interval() {
        let log = ten_days();
        let slice = slice_window(&log, 9, 5);
        let days: Vec<_> = slice.log.events().iter().map(|e| e.day).collect();
        assert_eq!(days, vec![5, 6, 7, 8, 9]);
        assert!(!slice.truncated);
        assert_eq!(log.len(), 10);
    }

    #[test]
    fn slice_clamps_and_flags() {
        let log = ten_days();
        let slice = slice_window(&log, 9, 50);
        assert_eq!(slice.log.len(), 10);
        assert!(slice.truncated);

        let shifted = EventLog::from_triples(1, 1, &[(5, 0, 0), (6, 0, 0)]);
        let empty = slice_window(&shifted, 3, 2);
        assert!(empty.is_empty());
    }

    #[test]
    fn slice_restricts_vocab_in_order() {
        let log = EventLog::from_triples(3, 3, &[(0, 0, 0), (1, 2, 2), (2, 1, 2)]);
        let slice = slice_window(&log, 2, 2).log;
        assert_eq!(slice.users().names(), &["u1".to_string(), "u2".to_string()]);
        assert_eq!(slice.items().names(), &["i2".to_string()]);
        assert_eq!(
            slice.events()[0],
            Interaction {
                day: 1,
                user: 1,
                item: 0
            }
        );
    }

    #[test]
    fn perimeter_examples() {
        let log = parse("date,user_id,item_id\n2021-01-01,a,x\n2021-01-02,b,x\n").unwrap();
        let p = perimeter_of(&log);
        assert_eq!(p.users.len(), 2);
        assert_eq!(p.items, vec![0]);

        let empty = EventLog::from_triples(0, 0, &[]);
        assert!(perimeter_of(&empty).is_empty());

        let day1 = slice_window(&log, 1, 1).log;
        let p1 = perimeter_of(&day1);
        assert_eq!(day1.users().name(p1.users[0]), Some("b"));
        assert_eq!(p1.users.len(), 1);
    }

    #[test]
    fn projection_drops_unknown_entities() {
        let log = EventLog::from_triples(3, 2, &[(0, 0, 0), (1, 1, 1), (2, 2, 0)]);
        let users = Vocab::from_names(["u2", "u0"]);
        let items = Vocab::from_names(["i0"]);
        let p = log.project_onto(&users, &items);
        assert_eq!(
            p.events(),
            &[
                Interaction {
                    day: 0,
                    user: 1,
                    item: 0
                },
                Interaction {
                    day: 2,
                    user: 0,
                    item: 0
                }
            ]
        );
    }

    #[test]
    fn split_ordering() {
        assert!(TemporalSplit::new((0, 9), (10, 14), (15, 20)).is_ok());
        assert!(TemporalSplit::new((0, 10), (10, 14), (15, 20)).is_err());
        assert!(TemporalSplit::new((0, 9), (10, 14), (14, 20)).is_err());
    }
}
