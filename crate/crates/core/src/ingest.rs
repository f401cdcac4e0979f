//! Listening-log ingestion: parsing, validation, duration filtering and
//! gap-based sessionization.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Streams shorter than this are excluded before sessionization and training.
pub const TRAINING_MIN_DURATION: u32 = 60;
/// Streams shorter than this are excluded before metric computation.
pub const METRIC_MIN_DURATION: u32 = 30;
/// A session ends when the next stream starts more than this many seconds
/// after the previous one ended.
pub const SESSION_GAP_SECONDS: i64 = 300;

const MAX_REJECT_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Collection,
    Editorial,
    Algorithmic,
    Other,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Collection => "collection",
            Origin::Editorial => "editorial",
            Origin::Algorithmic => "algorithmic",
            Origin::Other => "other",
        }
    }

    fn canonical(s: &str) -> Option<Self> {
        match s {
            "collection" => Some(Origin::Collection),
            "editorial" => Some(Origin::Editorial),
            "algorithmic" => Some(Origin::Algorithmic),
            "other" => Some(Origin::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One listening-log record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub user_id: String,
    pub track_id: String,
    pub artist_id: String,
    pub origin: Origin,
    /// UTC seconds.
    pub start: i64,
    /// Seconds listened.
    pub duration: u32,
    pub skipped: bool,
    pub platform: String,
    pub city_id: String,
    pub release_date: Option<NaiveDate>,
}

impl StreamEvent {
    pub fn end(&self) -> i64 {
        self.start + i64::from(self.duration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    /// Delimiter-separated with a header row.
    #[default]
    Tsv,
    Csv,
    /// One JSON object per line.
    JsonLines,
}

impl LogFormat {
    fn delimiter(self) -> u8 {
        match self {
            LogFormat::Csv => b',',
            _ => b'\t',
        }
    }
}

/// Maps each record field onto a column (or JSON key) of the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub user_id: String,
    pub track_id: String,
    pub artist_id: String,
    pub origin: String,
    pub start: String,
    pub duration: String,
    pub skipped: String,
    pub platform: String,
    pub city_id: String,
    /// Only present in files written after metadata has been joined.
    pub release_date: Option<String>,
    /// Only present in sessionized files.
    pub session_id: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            user_id: "user_id".into(),
            track_id: "track_id".into(),
            artist_id: "artist_id".into(),
            origin: "origin".into(),
            start: "timestamp".into(),
            duration: "duration".into(),
            skipped: "skipped".into(),
            platform: "platform".into(),
            city_id: "city_id".into(),
            release_date: None,
            session_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LogSchema {
    pub format: LogFormat,
    pub columns: ColumnMap,
    /// Raw origin strings mapped onto origin categories. Canonical names
    /// ("collection", "editorial", "algorithmic", "other") are always accepted.
    pub origin_map: BTreeMap<String, Origin>,
}

impl LogSchema {
    /// The schema of files this module writes: `self` plus release-date and
    /// session-id columns.
    pub fn sessionized(&self) -> LogSchema {
        let mut s = self.clone();
        s.columns.release_date.get_or_insert_with(|| "release_date".into());
        s.columns.session_id.get_or_insert_with(|| "session_id".into());
        s
    }

    fn map_origin(&self, raw: &str) -> Option<Origin> {
        self.origin_map
            .get(raw)
            .copied()
            .or_else(|| Origin::canonical(&raw.to_ascii_lowercase()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParseOptions {
    /// Fatal when more than this fraction of rows is rejected.
    pub max_malformed_fraction: f64,
    /// Inclusive-exclusive `[start, end)` UTC-second window.
    pub window: Option<(i64, i64)>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            max_malformed_fraction: 0.01,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseReport {
    pub rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub unknown_origin: usize,
    pub reject_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub events: Vec<StreamEvent>,
    /// Parallel to `events`; only filled when the schema declares a
    /// session-id column.
    pub session_ids: Option<Vec<u32>>,
    pub report: ParseReport,
}

struct RowError {
    reason: &'static str,
    detail: String,
}

fn row_err(reason: &'static str, detail: impl Into<String>) -> RowError {
    RowError {
        reason,
        detail: detail.into(),
    }
}

/// Accumulates parsed rows and enforces the malformed-row tolerance.
struct Collector<'a> {
    schema: &'a LogSchema,
    options: ParseOptions,
    events: Vec<StreamEvent>,
    session_ids: Vec<u32>,
    report: ParseReport,
    samples: Vec<String>,
    warned_origins: BTreeSet<String>,
}

impl<'a> Collector<'a> {
    fn new(schema: &'a LogSchema, options: ParseOptions) -> Self {
        Collector {
            schema,
            options,
            events: Vec::new(),
            session_ids: Vec::new(),
            report: ParseReport::default(),
            samples: Vec::new(),
            warned_origins: BTreeSet::new(),
        }
    }

    fn push<F>(&mut self, line: usize, field: F)
    where
        F: Fn(&str) -> Option<String>,
    {
        self.report.rows += 1;
        match self.build(&field) {
            Ok((event, session)) => {
                self.report.accepted += 1;
                self.events.push(event);
                if let Some(s) = session {
                    self.session_ids.push(s);
                }
            }
            Err(e) => {
                self.report.rejected += 1;
                *self.report.reject_reasons.entry(e.reason.to_string()).or_default() += 1;
                if self.samples.len() < MAX_REJECT_SAMPLES {
                    self.samples.push(format!("line {line}: {} ({})", e.reason, e.detail));
                }
            }
        }
    }

    fn build<F>(&mut self, field: &F) -> std::result::Result<(StreamEvent, Option<u32>), RowError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let cols = &self.schema.columns;
        let get = |name: &str| field(name).ok_or_else(|| row_err("missing field", name.to_string()));

        let user_id = get(&cols.user_id)?;
        if user_id.is_empty() {
            return Err(row_err("empty user_id", ""));
        }
        let city_id = get(&cols.city_id)?;
        if city_id.is_empty() {
            return Err(row_err("empty city_id", ""));
        }
        let track_id = get(&cols.track_id)?;
        if track_id.is_empty() {
            return Err(row_err("empty track_id", ""));
        }
        let start_raw = get(&cols.start)?;
        let start: i64 = start_raw
            .trim()
            .parse()
            .map_err(|_| row_err("bad timestamp", start_raw.clone()))?;
        if let Some((lo, hi)) = self.options.window {
            if start < lo || start >= hi {
                return Err(row_err("outside observation window", start_raw));
            }
        }
        let duration_raw = get(&cols.duration)?;
        let duration: i64 = duration_raw
            .trim()
            .parse()
            .map_err(|_| row_err("bad duration", duration_raw.clone()))?;
        if duration < 0 {
            return Err(row_err("negative duration", duration_raw));
        }
        let duration = u32::try_from(duration).map_err(|_| row_err("bad duration", duration_raw))?;
        let skipped_raw = get(&cols.skipped)?;
        let skipped = match skipped_raw.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "t" | "yes" => true,
            "0" | "false" | "f" | "no" | "" => false,
            _ => return Err(row_err("bad skipped flag", skipped_raw)),
        };
        let origin_raw = get(&cols.origin)?;
        let origin = match self.schema.map_origin(&origin_raw) {
            Some(o) => o,
            None => {
                self.report.unknown_origin += 1;
                if self.warned_origins.insert(origin_raw.clone()) {
                    log::warn!("unknown origin `{origin_raw}` mapped to `other`");
                }
                Origin::Other
            }
        };
        let release_date = match &cols.release_date {
            Some(c) => match field(c) {
                Some(s) if !s.is_empty() => Some(
                    NaiveDate::parse_from_str(&s, "%Y-%m-%d")
                        .map_err(|_| row_err("bad release date", s))?,
                ),
                _ => None,
            },
            None => None,
        };
        let session = match &cols.session_id {
            Some(c) => {
                let raw = get(c)?;
                Some(raw.trim().parse().map_err(|_| row_err("bad session id", raw))?)
            }
            None => None,
        };
        Ok((
            StreamEvent {
                user_id,
                track_id,
                artist_id: field(&cols.artist_id).unwrap_or_default(),
                origin,
                start,
                duration,
                skipped,
                platform: field(&cols.platform).unwrap_or_default(),
                city_id,
                release_date,
            },
            session,
        ))
    }

    fn finish(self) -> Result<ParsedLog> {
        let r = &self.report;
        if r.rows > 0 && r.rejected as f64 / r.rows as f64 > self.options.max_malformed_fraction {
            return Err(Error::MalformedInput {
                rejected: r.rejected,
                total: r.rows,
                tolerance: self.options.max_malformed_fraction,
                samples: self.samples,
            });
        }
        if r.rejected > 0 {
            log::warn!("{} of {} rows rejected: {:?}", r.rejected, r.rows, r.reject_reasons);
        }
        let session_ids = self.schema.columns.session_id.as_ref().map(|_| self.session_ids);
        Ok(ParsedLog {
            events: self.events,
            session_ids,
            report: self.report,
        })
    }
}

/// Parses a listening log in a single streaming pass. Events come back in
/// file order; rejected rows are counted in the report.
pub fn parse_stream_log(path: &Path, schema: &LogSchema, options: ParseOptions) -> Result<ParsedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut collector = Collector::new(schema, options);
    match schema.format {
        LogFormat::Tsv | LogFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(schema.format.delimiter())
                .flexible(true)
                .quoting(schema.format == LogFormat::Csv)
                .from_reader(BufReader::new(file));
            let header: HashMap<String, usize> = reader
                .headers()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
                .iter()
                .enumerate()
                .map(|(i, h)| (h.to_string(), i))
                .collect();
            require_columns(schema, |c| header.contains_key(c))?;
            for (i, record) in reader.records().enumerate() {
                let line = i + 2;
                match record {
                    Ok(rec) => collector.push(line, |name| {
                        header.get(name).and_then(|&idx| rec.get(idx)).map(str::to_string)
                    }),
                    Err(e) => {
                        if e.is_io_error() {
                            return Err(Error::Format(format!("{}: {e}", path.display())));
                        }
                        collector.push(line, |_| None)
                    }
                }
            }
        }
        LogFormat::JsonLines => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line_text = line.map_err(|e| Error::io(path, e))?;
                if line_text.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&line_text) {
                    Ok(obj) => collector.push(i + 1, |name| obj.get(name).map(json_scalar)),
                    Err(_) => collector.push(i + 1, |_| None),
                }
            }
        }
    }
    collector.finish()
}

fn json_scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn require_columns(schema: &LogSchema, has: impl Fn(&str) -> bool) -> Result<()> {
    let c = &schema.columns;
    let mandatory = [
        &c.user_id,
        &c.track_id,
        &c.origin,
        &c.start,
        &c.duration,
        &c.skipped,
        &c.city_id,
    ];
    let missing: Vec<&str> = mandatory
        .iter()
        .map(|s| s.as_str())
        .chain(c.session_id.as_deref())
        .filter(|col| !has(col))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("schema columns missing from header: {missing:?}")))
    }
}

/// Writes events in `schema`'s record format. Release dates are always
/// written; session ids only when given.
pub fn write_stream_log<W: Write>(
    out: W,
    schema: &LogSchema,
    events: &[StreamEvent],
    session_ids: Option<&[u32]>,
) -> Result<()> {
    let schema = schema.sessionized();
    let c = &schema.columns;
    let mut names: Vec<&str> = vec![
        &c.user_id,
        &c.track_id,
        &c.artist_id,
        &c.origin,
        &c.start,
        &c.duration,
        &c.skipped,
        &c.platform,
        &c.city_id,
        c.release_date.as_deref().unwrap_or("release_date"),
    ];
    if session_ids.is_some() {
        names.push(c.session_id.as_deref().unwrap_or("session_id"));
    }
    let row = |i: usize, e: &StreamEvent| -> Vec<String> {
        let mut v = vec![
            e.user_id.clone(),
            e.track_id.clone(),
            e.artist_id.clone(),
            e.origin.to_string(),
            e.start.to_string(),
            e.duration.to_string(),
            (e.skipped as u8).to_string(),
            e.platform.clone(),
            e.city_id.clone(),
            e.release_date.map(|d| d.to_string()).unwrap_or_default(),
        ];
        if let Some(ids) = session_ids {
            v.push(ids[i].to_string());
        }
        v
    };
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    match schema.format {
        LogFormat::Tsv | LogFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .delimiter(schema.format.delimiter())
                .quote_style(if schema.format == LogFormat::Csv {
                    csv::QuoteStyle::Necessary
                } else {
                    csv::QuoteStyle::Never
                })
                .from_writer(out);
            w.write_record(&names).map_err(fmt_err)?;
            for (i, e) in events.iter().enumerate() {
                w.write_record(row(i, e)).map_err(fmt_err)?;
            }
            w.flush().map_err(|e| Error::Format(e.to_string()))?;
        }
        LogFormat::JsonLines => {
            let mut w = BufWriter::new(out);
            for (i, e) in events.iter().enumerate() {
                let obj: serde_json::Map<String, serde_json::Value> = names
                    .iter()
                    .zip(row(i, e))
                    .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                    .collect();
                serde_json::to_writer(&mut w, &obj).map_err(|e| Error::Format(e.to_string()))?;
                w.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackMeta {
    pub track_id: String,
    pub artist_id: String,
    pub release_date: Option<NaiveDate>,
}

/// Reads a tab-separated `track_id, artist_id, release_date` table. Empty or
/// unparseable release dates are kept as unknown.
pub fn parse_track_metadata(path: &Path) -> Result<HashMap<String, TrackMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let track_id = rec.get(0).unwrap_or_default().to_string();
        if track_id.is_empty() {
            continue;
        }
        let release_date = rec
            .get(2)
            .and_then(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok());
        out.insert(
            track_id.clone(),
            TrackMeta {
                track_id,
                artist_id: rec.get(1).unwrap_or_default().to_string(),
                release_date,
            },
        );
    }
    Ok(out)
}

pub fn write_track_metadata<W: Write>(out: W, tracks: &[TrackMeta]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["track_id", "artist_id", "release_date"]).map_err(fmt_err)?;
    for t in tracks {
        let date = t.release_date.map(|d| d.to_string()).unwrap_or_default();
        w.write_record([t.track_id.as_str(), t.artist_id.as_str(), date.as_str()])
            .map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Fills release dates (and missing artist ids) from track metadata. Returns
/// the number of events whose track has no known release date.
pub fn join_track_metadata(events: &mut [StreamEvent], meta: &HashMap<String, TrackMeta>) -> usize {
    let mut missing = 0;
    for e in events.iter_mut() {
        match meta.get(&e.track_id) {
            Some(m) => {
                if e.release_date.is_none() {
                    e.release_date = m.release_date;
                }
                if e.artist_id.is_empty() {
                    e.artist_id = m.artist_id.clone();
                }
            }
            None => {}
        }
        if e.release_date.is_none() {
            missing += 1;
        }
    }
    missing
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps events with `duration >= min_duration`.
pub fn filter_streams(events: Vec<StreamEvent>, min_duration: u32) -> (Vec<StreamEvent>, FilterReport) {
    let before = events.len();
    let kept: Vec<StreamEvent> = events.into_iter().filter(|e| e.duration >= min_duration).collect();
    let report = FilterReport {
        kept: kept.len(),
        dropped: before - kept.len(),
    };
    (kept, report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionItem {
    pub track_id: String,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    pub session_id: u32,
    pub items: Vec<SessionItem>,
}

/// Incremental sessionizer for one user's time-ordered events.
#[derive(Debug)]
pub struct Sessionizer {
    gap_threshold: i64,
    user_id: Option<String>,
    current: Vec<SessionItem>,
    last_end: Option<i64>,
    next_id: u32,
    overlaps: usize,
}

impl Sessionizer {
    pub fn new(gap_threshold: i64) -> Self {
        Sessionizer {
            gap_threshold,
            user_id: None,
            current: Vec::new(),
            last_end: None,
            next_id: 0,
            overlaps: 0,
        }
    }

    /// Feeds the next event, returning the session it closed, if any.
    pub fn push(&mut self, event: &StreamEvent) -> Option<Session> {
        if self.user_id.is_none() {
            self.user_id = Some(event.user_id.clone());
        }
        let mut closed = None;
        if let Some(prev_end) = self.last_end {
            let mut gap = event.start - prev_end;
            if gap < 0 {
                self.overlaps += 1;
                gap = 0;
            }
            if gap > self.gap_threshold {
                closed = self.close();
            }
        }
        self.current.push(SessionItem {
            track_id: event.track_id.clone(),
            start: event.start,
            end: event.end(),
        });
        // An event fully inside its predecessor must not shorten the running
        // end, otherwise the next gap would be overstated.
        self.last_end = Some(self.last_end.map_or(event.end(), |e| e.max(event.end())));
        closed
    }

    /// The id the next session will receive (the id of the open session, if any).
    pub fn current_id(&self) -> u32 {
        self.next_id
    }

    pub fn overlaps(&self) -> usize {
        self.overlaps
    }

    fn close(&mut self) -> Option<Session> {
        if self.current.is_empty() {
            return None;
        }
        let s = Session {
            user_id: self.user_id.clone().unwrap_or_default(),
            session_id: self.next_id,
            items: std::mem::take(&mut self.current),
        };
        self.next_id += 1;
        Some(s)
    }

    pub fn finish(mut self) -> (Option<Session>, usize) {
        let last = self.close();
        (last, self.overlaps)
    }
}

/// Sessionization of one user's events.
#[derive(Debug, Clone)]
pub struct UserSessions {
    /// The input events, sorted by start time (stable).
    pub events: Vec<StreamEvent>,
    /// Session id of each event in `events`.
    pub session_ids: Vec<u32>,
    pub sessions: Vec<Session>,
    /// Events that started before their predecessor ended.
    pub overlaps: usize,
}

/// Splits one user's events into sessions: a new session starts whenever
/// `next.start - prev.end > gap_threshold`. Overlapping events count as a
/// zero gap.
pub fn segment_sessions(mut events: Vec<StreamEvent>, gap_threshold: i64) -> UserSessions {
    events.sort_by_key(|e| e.start);
    let mut sessionizer = Sessionizer::new(gap_threshold);
    let mut sessions = Vec::new();
    let mut session_ids = Vec::with_capacity(events.len());
    for e in &events {
        if let Some(s) = sessionizer.push(e) {
            sessions.push(s);
        }
        session_ids.push(sessionizer.current_id());
    }
    let (last, overlaps) = sessionizer.finish();
    sessions.extend(last);
    UserSessions {
        events,
        session_ids,
        sessions,
        overlaps,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SessionReport {
    pub users: usize,
    pub events: usize,
    pub sessions: usize,
    pub mean_session_length: f64,
    pub overlaps: usize,
}

/// Groups events by user and sessionizes each user independently (in
/// parallel). Output is ordered by user id, then time.
pub fn sessionize_all(events: Vec<StreamEvent>, gap_threshold: i64) -> (Vec<UserSessions>, SessionReport) {
    use rayon::prelude::*;

    let mut by_user: BTreeMap<String, Vec<StreamEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user_id.clone()).or_default().push(e);
    }
    let users: Vec<UserSessions> = by_user
        .into_par_iter()
        .map(|(_, evs)| segment_sessions(evs, gap_threshold))
        .collect();
    let n_events: usize = users.iter().map(|u| u.events.len()).sum();
    let n_sessions: usize = users.iter().map(|u| u.sessions.len()).sum();
    let report = SessionReport {
        users: users.len(),
        events: n_events,
        sessions: n_sessions,
        mean_session_length: if n_sessions == 0 {
            0.0
        } else {
            n_events as f64 / n_sessions as f64
        },
        overlaps: users.iter().map(|u| u.overlaps).sum(),
    };
    (users, report)
}
