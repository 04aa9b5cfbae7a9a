//! Event logs: parsing, cleaning, sessionization, splitting and the cycle
//! rearrangement used by the dynamic environment.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SyntheticConfig, SyntheticData, UserGenerator};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Default window under which repeated launches of one app are collapsed.
pub const DEDUP_WINDOW_SECS: i64 = 3;
/// Default idle gap that closes a session (15 minutes).
pub const SESSION_GAP_SECS: i64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub user: usize,
    pub app: usize,
    pub timestamp: i64,
}

/// Bijection between raw identifiers and dense indices, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        for name in names {
            let name = name.into();
            if vocab.index.contains_key(&name) {
                return Err(Error::Config(format!("duplicate identifier `{name}`")));
            }
            vocab.intern(&name);
        }
        Ok(vocab)
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Timestamped launch records with dense user and app vocabularies.
///
/// Events are kept in non-decreasing timestamp order; ties keep their input
/// order, so every per-user stream is sorted as well.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
    apps: Vocabulary,
    users: Vocabulary,
}

impl EventLog {
    pub fn new(mut events: Vec<Event>, users: Vocabulary, apps: Vocabulary) -> Result<Self> {
        for e in &events {
            if e.user >= users.len() {
                return Err(Error::Index {
                    index: e.user,
                    bound: users.len(),
                });
            }
            if e.app >= apps.len() {
                return Err(Error::Index {
                    index: e.app,
                    bound: apps.len(),
                });
            }
        }
        events.sort_by_key(|e| e.timestamp);
        Ok(EventLog {
            events,
            apps,
            users,
        })
    }

    /// Builds a log over `n_users` x `n_apps` with generated names `u<i>` / `a<i>`.
    pub fn from_indexed(events: Vec<Event>, n_users: usize, n_apps: usize) -> Result<Self> {
        let users = Vocabulary::from_names((0..n_users).map(|i| format!("u{i}")))?;
        let apps = Vocabulary::from_names((0..n_apps).map(|i| format!("a{i}")))?;
        EventLog::new(events, users, apps)
    }

    /// A log over the same vocabularies holding a subset of events.
    pub fn with_events(&self, events: Vec<Event>) -> EventLog {
        let mut events = events;
        events.sort_by_key(|e| e.timestamp);
        EventLog {
            events,
            apps: self.apps.clone(),
            users: self.users.clone(),
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn apps(&self) -> &Vocabulary {
        &self.apps
    }

    pub fn users(&self) -> &Vocabulary {
        &self.users
    }

    pub fn n_apps(&self) -> usize {
        self.apps.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-user event streams, indexed by user.
    pub fn user_streams(&self) -> Vec<Vec<Event>> {
        let mut streams = vec![Vec::new(); self.n_users()];
        for e in &self.events {
            streams[e.user].push(*e);
        }
        streams
    }

    /// Per-user app sequences, indexed by user.
    pub fn user_histories(&self) -> Vec<Vec<usize>> {
        let mut histories = vec![Vec::new(); self.n_users()];
        for e in &self.events {
            histories[e.user].push(e.app);
        }
        histories
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimeFormat {
    Unix,
    Iso8601,
}

fn parse_iso8601(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn detect_delimiter(header: &str) -> u8 {
    b"\t;,"
        .iter()
        .copied()
        .find(|&d| header.as_bytes().contains(&d))
        .unwrap_or(b',')
}

/// Reads a `user_id,app_id,timestamp` file.
///
/// The delimiter (comma, tab or semicolon) is taken from the header line and
/// the timestamp format (Unix seconds or ISO-8601) from the first data row;
/// every later row must use the same format.
pub fn parse_events(path: impl AsRef<Path>) -> Result<EventLog> {
    let path = path.as_ref();
    let mut header = String::new();
    BufReader::new(File::open(path)?).read_line(&mut header)?;
    if header.trim().is_empty() {
        return Err(Error::EmptyLog(path.to_owned()));
    }

    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(&header))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (user_col, app_col, ts_col) = (column("user_id")?, column("app_id")?, column("timestamp")?);
    let width = headers.len();

    let mut users = Vocabulary::default();
    let mut apps = Vocabulary::default();
    let mut events = Vec::new();
    let mut format = None;

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let raw_ts = &record[ts_col];
        let fmt = *format.get_or_insert(if raw_ts.parse::<i64>().is_ok() {
            TimeFormat::Unix
        } else {
            TimeFormat::Iso8601
        });
        let timestamp = match fmt {
            TimeFormat::Unix => raw_ts.parse::<i64>().ok(),
            TimeFormat::Iso8601 => parse_iso8601(raw_ts),
        }
        .ok_or_else(|| parse_err(line, format!("unparseable timestamp `{raw_ts}`")))?;

        let (user, app) = (&record[user_col], &record[app_col]);
        if user.is_empty() || app.is_empty() {
            return Err(parse_err(line, "empty user or app identifier".into()));
        }
        events.push(Event {
            user: users.intern(user),
            app: apps.intern(app),
            timestamp,
        });
    }

    if events.is_empty() {
        return Err(Error::EmptyLog(path.to_owned()));
    }
    EventLog::new(events, users, apps)
}

/// Writes the log in the same format `parse_events` reads (Unix seconds).
pub fn write_events(log: &EventLog, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    writeln!(out, "user_id,app_id,timestamp")?;
    for e in log.events() {
        writeln!(
            out,
            "{},{},{}",
            log.users().name(e.user),
            log.apps().name(e.app),
            e.timestamp
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Collapses bursts of the same app: an event is dropped when the user's
/// previous event is the same app and less than `window` seconds earlier.
/// A whole chain of such events reduces to its first one.
pub fn deduplicate(log: &EventLog, window: i64) -> EventLog {
    let mut last: Vec<Option<Event>> = vec![None; log.n_users()];
    let kept = log
        .events()
        .iter()
        .filter(|e| {
            let prev = last[e.user].replace(**e);
            !matches!(prev, Some(p) if p.app == e.app && e.timestamp - p.timestamp < window)
        })
        .copied()
        .collect();
    log.with_events(kept)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user: usize,
    pub apps: Vec<usize>,
    pub start: i64,
    pub end: i64,
}

impl Session {
    pub fn len(&self) -> usize {
        self.apps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apps.is_empty()
    }
}

/// Splits time-ordered events into per-user sessions. A new session starts
/// when the gap after the user's previous event exceeds `threshold` seconds.
///
/// Sessions are returned grouped by user (ascending), chronological within a user.
pub fn sessionize_events<'a, I>(events: I, threshold: i64) -> Vec<Session>
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut per_user: BTreeMap<usize, Vec<Session>> = BTreeMap::new();
    for e in events {
        let sessions = per_user.entry(e.user).or_default();
        match sessions.last_mut() {
            Some(s) if e.timestamp - s.end <= threshold => {
                s.apps.push(e.app);
                s.end = e.timestamp;
            }
            _ => sessions.push(Session {
                user: e.user,
                apps: vec![e.app],
                start: e.timestamp,
                end: e.timestamp,
            }),
        }
    }
    per_user.into_values().flatten().collect()
}

pub fn sessionize(log: &EventLog, threshold: i64) -> Vec<Session> {
    sessionize_events(log.events(), threshold)
}

/// Mean number of sessions over users that have at least one session.
pub fn mean_sessions_per_user(sessions: &[Session]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in sessions {
        *counts.entry(s.user).or_default() += 1;
    }
    if counts.is_empty() {
        return 0.0;
    }
    sessions.len() as f64 / counts.len() as f64
}

/// UTC calendar day index of a timestamp.
pub fn utc_day(timestamp: i64) -> i64 {
    timestamp.div_euclid(SECONDS_PER_DAY)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitDays {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

#[derive(Debug, Clone)]
pub struct StaticSplit {
    pub train: EventLog,
    pub validation: EventLog,
    pub test: EventLog,
}

/// Chronological split by UTC calendar days counted from the day of the
/// first event.
pub fn split_static(log: &EventLog, days: SplitDays) -> Result<StaticSplit> {
    let first_day = match log.events().first() {
        Some(e) => utc_day(e.timestamp),
        None => return Err(Error::Config("cannot split an empty log".into())),
    };
    let train_end = i64::from(days.train);
    let val_end = train_end + i64::from(days.validation);
    let test_end = val_end + i64::from(days.test);

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for e in log.events() {
        let day = utc_day(e.timestamp) - first_day;
        if day < train_end {
            train.push(*e);
        } else if day < val_end {
            val.push(*e);
        } else if day < test_end {
            test.push(*e);
        } else {
            return Err(Error::Config(format!(
                "split of {}+{}+{} days does not cover the log ({} days)",
                days.train,
                days.validation,
                days.test,
                utc_day(log.events().last().map_or(0, |e| e.timestamp)) - first_day + 1
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Config("static split leaves the train set empty".into()));
    }
    Ok(StaticSplit {
        train: log.with_events(train),
        validation: log.with_events(val),
        test: log.with_events(test),
    })
}

/// One unit of the rearranged event stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub index: usize,
    /// Events of each active user, in their original order.
    pub events: BTreeMap<usize, Vec<Event>>,
}

impl Cycle {
    pub fn active_users(&self) -> usize {
        self.events.len()
    }

    /// All events of the cycle, user-major.
    pub fn iter_events(&self) -> impl Iterator<Item = &Event> {
        self.events.values().flatten()
    }

    pub fn sessions(&self, threshold: i64) -> Vec<Session> {
        sessionize_events(self.iter_events(), threshold)
    }
}

#[derive(Debug, Clone)]
pub struct Rebalanced {
    pub cycles: Vec<Cycle>,
    pub target: usize,
    /// Achieved distinct active users per cycle.
    pub active_users: Vec<usize>,
}

impl Rebalanced {
    /// Fraction of cycles whose active-user count is within ±20% of the target.
    pub fn within_tolerance(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        let lo = 0.8 * self.target as f64;
        let hi = 1.2 * self.target as f64;
        let ok = self
            .active_users
            .iter()
            .filter(|&&n| (lo..=hi).contains(&(n as f64)))
            .count();
        ok as f64 / self.cycles.len() as f64
    }
}

/// Rearranges the log into cycles with roughly `target` active users each.
///
/// Every user's events are cut into day-level blocks. Each cycle takes the
/// next block of up to `target` users, preferring the earliest pending block,
/// then the user with the most blocks left, then the lower user index. A user
/// contributes at most one block per cycle, so per-user order is preserved.
pub fn rebalance_cycles(log: &EventLog, target: usize) -> Result<Rebalanced> {
    if target == 0 || target > log.n_users() {
        return Err(Error::Config(format!(
            "target of {target} active users per cycle is outside 1..={}",
            log.n_users()
        )));
    }

    let mut blocks: Vec<std::collections::VecDeque<(i64, Vec<Event>)>> =
        vec![Default::default(); log.n_users()];
    for stream in log.user_streams() {
        for e in stream {
            let day = utc_day(e.timestamp);
            let queue = &mut blocks[e.user];
            match queue.back_mut() {
                Some((d, evs)) if *d == day => evs.push(e),
                _ => queue.push_back((day, vec![e])),
            }
        }
    }

    let mut cycles = Vec::new();
    loop {
        let mut pending: Vec<(i64, std::cmp::Reverse<usize>, usize)> = blocks
            .iter()
            .enumerate()
            .filter_map(|(u, q)| q.front().map(|(day, _)| (*day, std::cmp::Reverse(q.len()), u)))
            .collect();
        if pending.is_empty() {
            break;
        }
        pending.sort();
        let mut events = BTreeMap::new();
        for &(_, _, u) in pending.iter().take(target) {
            let (_, evs) = blocks[u].pop_front().expect("pending block");
            events.insert(u, evs);
        }
        cycles.push(Cycle {
            index: cycles.len(),
            events,
        });
    }

    let active_users = cycles.iter().map(Cycle::active_users).collect();
    Ok(Rebalanced {
        cycles,
        target,
        active_users,
    })
}

/// Distinct active users per UTC day, from the first to the last day of the log.
pub fn daily_active_users(log: &EventLog) -> Vec<usize> {
    let (Some(first), Some(last)) = (log.events().first(), log.events().last()) else {
        return Vec::new();
    };
    let first_day = utc_day(first.timestamp);
    let mut seen = vec![std::collections::BTreeSet::new(); (utc_day(last.timestamp) - first_day + 1) as usize];
    for e in log.events() {
        seen[(utc_day(e.timestamp) - first_day) as usize].insert(e.user);
    }
    seen.iter().map(|s| s.len()).collect()
}

pub fn coefficient_of_variation(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}
