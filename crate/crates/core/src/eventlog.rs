//! Event log ingestion from XES (XML) and CSV.
//!
//! Every parser produces an [`EventLog`] whose events are sorted by timestamp
//! (stable with respect to input order). Individually malformed events or rows
//! are skipped and reported through [`EventLog::diagnostics`]; only structural
//! failures (broken XML, missing CSV columns) and logs with no usable events
//! abort the parse.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, Read};
use std::path::Path;

use chrono::{DateTime, FixedOffset, NaiveDateTime, TimeZone, Utc};
use chrono_tz::Tz;
use quick_xml::events::{BytesStart, Event as XmlEvent};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEY_NAME: &str = "concept:name";
pub const KEY_TIMESTAMP: &str = "time:timestamp";
pub const KEY_LIFECYCLE: &str = "lifecycle:transition";

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("malformed XML at line {line}, column {column}: {message}")]
    Xml {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column mapping error: {0}")]
    Config(String),
    #[error("event log contains no usable events ({skipped} skipped)")]
    Empty { skipped: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A typed attribute value attached to an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Time(DateTime<Utc>),
    Str(String),
}

impl AttrValue {
    /// Infers a typed value from a CSV cell. Strings that look like booleans,
    /// integers, floats or RFC 3339 instants are converted; everything else stays text.
    pub fn infer(raw: &str) -> AttrValue {
        match raw {
            "true" => return AttrValue::Bool(true),
            "false" => return AttrValue::Bool(false),
            _ => {}
        }
        if let Ok(i) = raw.parse::<i64>() {
            return AttrValue::Int(i);
        }
        if looks_numeric(raw) {
            if let Ok(f) = raw.parse::<f64>() {
                if f.is_finite() {
                    return AttrValue::Float(f);
                }
            }
        }
        if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
            return AttrValue::Time(t.with_timezone(&Utc));
        }
        AttrValue::Str(raw.to_string())
    }
}

fn looks_numeric(raw: &str) -> bool {
    !raw.is_empty()
        && raw
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
        && raw.chars().any(|c| c.is_ascii_digit())
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Int(i) => write!(f, "{i}"),
            // Debug keeps a trailing ".0" so the value is re-read as a float.
            AttrValue::Float(x) => write!(f, "{x:?}"),
            AttrValue::Time(t) => write!(f, "{}", format_timestamp(t)),
            AttrValue::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub case_id: String,
    pub activity: String,
    pub timestamp: DateTime<Utc>,
    pub lifecycle: Option<String>,
    pub attributes: BTreeMap<String, AttrValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Xes,
    Csv,
}

impl std::str::FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xes" => Ok(LogFormat::Xes),
            "csv" => Ok(LogFormat::Csv),
            other => Err(format!("unknown log format '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub file_name: String,
    pub format: LogFormat,
    /// Number of input records seen (XES event elements or CSV data rows).
    pub row_count: usize,
}

/// A skipped record and the reason it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// XES: 1-based event index within the file; CSV: 1-based data row.
    pub record: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub source_meta: SourceMeta,
    pub diagnostics: Vec<Diagnostic>,
}

impl EventLog {
    /// Builds a log from already-normalized events, applying the global sort.
    pub fn from_events(mut events: Vec<Event>, source_meta: SourceMeta) -> Self {
        sort_events(&mut events);
        EventLog {
            events,
            source_meta,
            diagnostics: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }
}

/// Sorts by timestamp. The sort is stable, so equal instants keep input order.
fn sort_events(events: &mut [Event]) {
    events.sort_by_key(|e| e.timestamp);
}

fn finish(
    events: Vec<Event>,
    diagnostics: Vec<Diagnostic>,
    source_meta: SourceMeta,
) -> Result<EventLog, EventLogError> {
    if events.is_empty() {
        return Err(EventLogError::Empty {
            skipped: diagnostics.len(),
        });
    }
    let mut log = EventLog::from_events(events, source_meta);
    log.diagnostics = diagnostics;
    Ok(log)
}

/// Parses an XES timestamp. Accepts RFC 3339 plus the common variants found in
/// public logs (offset without colon, missing offset meaning UTC).
pub fn parse_xes_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%z"] {
        if let Ok(t) = DateTime::<FixedOffset>::parse_from_str(raw, fmt) {
            return Some(t.with_timezone(&Utc));
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

/// RFC 3339 with millisecond precision and a `Z` suffix when sub-second data is present.
pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true)
}

fn line_col(bytes: &[u8], pos: usize) -> (usize, usize) {
    let pos = pos.min(bytes.len());
    let before = &bytes[..pos];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let column = pos - before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

#[derive(Default)]
struct PendingEvent {
    index: usize,
    attrs: BTreeMap<String, AttrValue>,
}

fn typed_attribute(tag: &[u8], value: &str) -> Option<AttrValue> {
    match tag {
        b"string" | b"id" => Some(AttrValue::Str(value.to_string())),
        b"date" => parse_xes_timestamp(value).map(AttrValue::Time),
        b"int" => value.trim().parse().ok().map(AttrValue::Int),
        b"float" => value.trim().parse().ok().map(AttrValue::Float),
        b"boolean" => match value.trim() {
            "true" => Some(AttrValue::Bool(true)),
            "false" => Some(AttrValue::Bool(false)),
            _ => None,
        },
        _ => None,
    }
}

fn key_value(start: &BytesStart<'_>) -> Result<(Option<String>, Option<String>), quick_xml::Error> {
    let mut key = None;
    let mut value = None;
    for attr in start.attributes() {
        let attr = attr.map_err(quick_xml::Error::from)?;
        let v = attr
            .decode_and_unescape_value(start.decoder())?
            .into_owned();
        match attr.key.as_ref() {
            b"key" => key = Some(v),
            b"value" => value = Some(v),
            _ => {}
        }
    }
    Ok((key, value))
}

enum Scope {
    Log,
    Trace,
    Event,
    /// Anything whose children are not event data (globals, nested lists, extensions).
    Ignored,
}

/// Parses an XES document.
///
/// Case ids come from the trace-level `concept:name`. Events lacking
/// `concept:name` or `time:timestamp` are skipped with a diagnostic.
pub fn parse_xes<R: Read>(mut reader: R, file_name: &str) -> Result<EventLog, EventLogError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    parse_xes_bytes(&bytes, file_name)
}

pub fn parse_xes_bytes(bytes: &[u8], file_name: &str) -> Result<EventLog, EventLogError> {
    let mut xml = Reader::from_reader(bytes);
    xml.config_mut().trim_text(true);

    let mut buf = Vec::new();
    let mut stack: Vec<Scope> = Vec::new();
    let mut saw_log = false;
    let mut trace_name: Option<String> = None;
    let mut trace_events: Vec<PendingEvent> = Vec::new();
    let mut current: Option<PendingEvent> = None;
    let mut event_counter = 0usize;
    let mut events = Vec::new();
    let mut diagnostics = Vec::new();

    let xml_err = |xml: &Reader<&[u8]>, message: String| {
        let (line, column) = line_col(bytes, xml.error_position() as usize);
        EventLogError::Xml {
            line,
            column,
            message,
        }
    };

    loop {
        let ev = match xml.read_event_into(&mut buf) {
            Ok(ev) => ev,
            Err(e) => return Err(xml_err(&xml, e.to_string())),
        };
        let (start, is_empty) = match &ev {
            XmlEvent::Start(s) => (Some(s.clone()), false),
            XmlEvent::Empty(s) => (Some(s.clone()), true),
            _ => (None, false),
        };
        if let Some(start) = start {
            let name = start.name().as_ref().to_vec();
            let parent = stack.last();
            let scope = match (parent, name.as_slice()) {
                (None, b"log") => {
                    saw_log = true;
                    Scope::Log
                }
                (None, _) => {
                    return Err(xml_err(
                        &xml,
                        format!("expected <log> root, found <{}>", String::from_utf8_lossy(&name)),
                    ))
                }
                (Some(Scope::Log), b"trace") => {
                    trace_name = None;
                    trace_events.clear();
                    Scope::Trace
                }
                (Some(Scope::Trace), b"event") => {
                    event_counter += 1;
                    current = Some(PendingEvent {
                        index: event_counter,
                        ..Default::default()
                    });
                    Scope::Event
                }
                (Some(Scope::Trace), tag) => {
                    let (key, value) = key_value(&start).map_err(|e| xml_err(&xml, e.to_string()))?;
                    if tag == b"string" && key.as_deref() == Some(KEY_NAME) {
                        trace_name = value;
                    }
                    Scope::Ignored
                }
                (Some(Scope::Event), tag) => {
                    let (key, value) = key_value(&start).map_err(|e| xml_err(&xml, e.to_string()))?;
                    if let (Some(key), Some(value), Some(pending)) = (key, value, current.as_mut()) {
                        match typed_attribute(tag, &value) {
                            Some(v) => {
                                pending.attrs.insert(key, v);
                            }
                            None if key == KEY_TIMESTAMP => {
                                // keep the raw text so the diagnostic can name it
                                pending.attrs.insert(key, AttrValue::Str(value));
                            }
                            None => {}
                        }
                    }
                    Scope::Ignored
                }
                _ => Scope::Ignored,
            };
            if is_empty {
                // Self-closing elements: close immediately.
                match scope {
                    Scope::Trace => flush_trace(
                        &mut trace_name,
                        &mut trace_events,
                        &mut events,
                        &mut diagnostics,
                    ),
                    Scope::Event => {
                        if let Some(p) = current.take() {
                            trace_events.push(p);
                        }
                    }
                    _ => {}
                }
            } else {
                stack.push(scope);
            }
        } else {
            match ev {
                XmlEvent::End(_) => match stack.pop() {
                    Some(Scope::Event) => {
                        if let Some(p) = current.take() {
                            trace_events.push(p);
                        }
                    }
                    Some(Scope::Trace) => flush_trace(
                        &mut trace_name,
                        &mut trace_events,
                        &mut events,
                        &mut diagnostics,
                    ),
                    Some(_) => {}
                    None => return Err(xml_err(&xml, "unexpected closing tag".into())),
                },
                XmlEvent::Eof => break,
                _ => {}
            }
        }
        buf.clear();
    }
    if !stack.is_empty() {
        return Err(xml_err(&xml, "unexpected end of document".into()));
    }
    if !saw_log {
        return Err(xml_err(&xml, "document has no <log> element".into()));
    }
    let meta = SourceMeta {
        file_name: file_name.to_string(),
        format: LogFormat::Xes,
        row_count: event_counter,
    };
    finish(events, diagnostics, meta)
}

fn flush_trace(
    trace_name: &mut Option<String>,
    pending: &mut Vec<PendingEvent>,
    events: &mut Vec<Event>,
    diagnostics: &mut Vec<Diagnostic>,
) {
    let case_id = trace_name.take().filter(|s| !s.is_empty());
    for p in pending.drain(..) {
        match build_event(case_id.as_deref(), p.attrs) {
            Ok(ev) => events.push(ev),
            Err(message) => diagnostics.push(Diagnostic {
                record: p.index,
                message,
            }),
        }
    }
}

fn build_event(case_id: Option<&str>, mut attrs: BTreeMap<String, AttrValue>) -> Result<Event, String> {
    let case_id = case_id.ok_or("trace has no concept:name")?.to_string();
    let activity = match attrs.remove(KEY_NAME) {
        Some(AttrValue::Str(s)) if !s.is_empty() => s,
        Some(other) => other.to_string(),
        None => return Err("event has no concept:name".into()),
    };
    let timestamp = match attrs.remove(KEY_TIMESTAMP) {
        Some(AttrValue::Time(t)) => t,
        Some(other) => return Err(format!("unparseable time:timestamp '{other}'")),
        None => return Err("event has no time:timestamp".into()),
    };
    let lifecycle = match attrs.remove(KEY_LIFECYCLE) {
        Some(AttrValue::Str(s)) => Some(s),
        Some(other) => Some(other.to_string()),
        None => None,
    };
    Ok(Event {
        case_id,
        activity,
        timestamp,
        lifecycle,
        attributes: attrs,
    })
}

/// Maps CSV columns onto event fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub case_id: String,
    pub activity: String,
    pub timestamp: String,
    pub lifecycle: Option<String>,
    /// chrono format string; `None` means RFC 3339 (with the same fallbacks as XES).
    pub timestamp_format: Option<String>,
    /// Zone used for timestamps that carry no offset.
    pub timezone: Tz,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            case_id: "case".into(),
            activity: "activity".into(),
            timestamp: "timestamp".into(),
            lifecycle: Some("lifecycle".into()),
            timestamp_format: None,
            timezone: Tz::UTC,
        }
    }
}

impl ColumnMapping {
    pub fn new(case_id: &str, activity: &str, timestamp: &str) -> Self {
        ColumnMapping {
            case_id: case_id.into(),
            activity: activity.into(),
            timestamp: timestamp.into(),
            lifecycle: None,
            ..Default::default()
        }
    }

    fn parse_timestamp(&self, raw: &str) -> Option<DateTime<Utc>> {
        let raw = raw.trim();
        match &self.timestamp_format {
            None => {
                if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
                    return Some(t.with_timezone(&Utc));
                }
                for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
                    if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
                        return self.localize(naive);
                    }
                }
                parse_xes_timestamp(raw)
            }
            Some(fmt) => {
                if let Ok(t) = DateTime::<FixedOffset>::parse_from_str(raw, fmt) {
                    return Some(t.with_timezone(&Utc));
                }
                NaiveDateTime::parse_from_str(raw, fmt)
                    .ok()
                    .and_then(|naive| self.localize(naive))
            }
        }
    }

    fn localize(&self, naive: NaiveDateTime) -> Option<DateTime<Utc>> {
        self.timezone
            .from_local_datetime(&naive)
            .earliest()
            .map(|t| t.with_timezone(&Utc))
    }
}

/// Parses a headered CSV event log. Unmapped columns become attributes with
/// inferred types; empty cells are treated as absent.
pub fn parse_csv<R: Read>(
    reader: R,
    mapping: &ColumnMapping,
    file_name: &str,
) -> Result<EventLog, EventLogError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EventLogError::Config(format!("column '{name}' not found in CSV header")))
    };
    let case_col = find(&mapping.case_id)?;
    let act_col = find(&mapping.activity)?;
    let ts_col = find(&mapping.timestamp)?;
    let life_col = match &mapping.lifecycle {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };
    let core: HashSet<usize> = [Some(case_col), Some(act_col), Some(ts_col), life_col]
        .into_iter()
        .flatten()
        .collect();

    let mut events = Vec::new();
    let mut diagnostics = Vec::new();
    let mut rows = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        rows += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(Diagnostic {
                    record: row,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let field = |c: usize| record.get(c).unwrap_or("");
        let case_id = field(case_col);
        let activity = field(act_col);
        if case_id.is_empty() || activity.is_empty() {
            diagnostics.push(Diagnostic {
                record: row,
                message: "empty case id or activity".into(),
            });
            continue;
        }
        let Some(timestamp) = mapping.parse_timestamp(field(ts_col)) else {
            diagnostics.push(Diagnostic {
                record: row,
                message: format!("unparseable timestamp '{}'", field(ts_col)),
            });
            continue;
        };
        let lifecycle = life_col.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        let attributes = headers
            .iter()
            .enumerate()
            .filter(|(c, _)| !core.contains(c))
            .filter_map(|(c, h)| {
                let v = field(c);
                (!v.is_empty()).then(|| (h.to_string(), AttrValue::infer(v)))
            })
            .collect();
        events.push(Event {
            case_id: case_id.to_string(),
            activity: activity.to_string(),
            timestamp,
            lifecycle,
            attributes,
        });
    }
    let meta = SourceMeta {
        file_name: file_name.to_string(),
        format: LogFormat::Csv,
        row_count: rows,
    };
    finish(events, diagnostics, meta)
}

/// Writes the log as CSV using the default [`ColumnMapping`] column names,
/// with one extra column per attribute key.
pub fn write_csv<W: io::Write>(log: &EventLog, writer: W) -> Result<(), EventLogError> {
    let keys: Vec<&String> = log
        .events
        .iter()
        .flat_map(|e| e.attributes.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["case", "activity", "timestamp", "lifecycle"];
    header.extend(keys.iter().map(|k| k.as_str()));
    w.write_record(&header)?;
    for e in &log.events {
        let mut row = vec![
            e.case_id.clone(),
            e.activity.clone(),
            format_timestamp(&e.timestamp),
            e.lifecycle.clone().unwrap_or_default(),
        ];
        row.extend(
            keys.iter()
                .map(|k| e.attributes.get(*k).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Opens a log file, dispatching on format; `.gz` files are decompressed.
pub fn read_log_file(
    path: &Path,
    format: Option<LogFormat>,
    mapping: &ColumnMapping,
) -> Result<EventLog, EventLogError> {
    let file = std::fs::File::open(path)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".gz").unwrap_or(&name).to_string();
    let mut bytes = Vec::new();
    if name.ends_with(".gz") {
        flate2::read::GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        io::BufReader::new(file).read_to_end(&mut bytes)?;
    }
    let format = format.unwrap_or(if stem.to_ascii_lowercase().ends_with(".csv") {
        LogFormat::Csv
    } else {
        LogFormat::Xes
    });
    match format {
        LogFormat::Xes => parse_xes_bytes(&bytes, &name),
        LogFormat::Csv => parse_csv(bytes.as_slice(), mapping, &name),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub event_count: usize,
    pub case_count: usize,
    pub first: Option<DateTime<Utc>>,
    pub last: Option<DateTime<Utc>>,
    /// Whole days between the first and last event dates (UTC), inclusive.
    pub span_days: usize,
    pub monotonic: bool,
    /// Events repeating an earlier (case id, activity, timestamp) triple.
    pub duplicate_count: usize,
}

pub fn validate(log: &EventLog) -> ValidationReport {
    let cases: HashSet<&str> = log.events.iter().map(|e| e.case_id.as_str()).collect();
    let mut seen = HashSet::new();
    let duplicate_count = log
        .events
        .iter()
        .filter(|e| !seen.insert((e.case_id.as_str(), e.activity.as_str(), e.timestamp)))
        .count();
    let first = log.events.first().map(|e| e.timestamp);
    let last = log.events.last().map(|e| e.timestamp);
    let span_days = match (first, last) {
        (Some(a), Some(b)) => (b.date_naive() - a.date_naive()).num_days() as usize + 1,
        _ => 0,
    };
    ValidationReport {
        event_count: log.events.len(),
        case_count: cases.len(),
        first,
        last,
        span_days,
        monotonic: log.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp),
        duplicate_count,
    }
}
