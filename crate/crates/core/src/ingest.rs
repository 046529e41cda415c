//! Timeline files and the value-cleaning rules applied before anything
//! touches the database.
//!
//! A timeline file looks like
//!
//! ```json
//! { "entity": "Arendia", "domain": "countries",
//!   "snapshots": [ { "timestamp": "2019-01-01", "fields": { "hdi": "0.879" } } ] }
//! ```
//!
//! The cleaning functions ([`normalize_null`], [`safe_int`], [`parse_composite`],
//! [`normalize_date`]) are total: they never fail on odd input, they map it to
//! [`Payload::Null`] instead. Every [`CleanValue`] keeps the exact input text in
//! [`CleanValue::raw`].

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("timeline structure: {0}")]
    Structure(String),
    #[error("snapshot {index} has no timestamp")]
    MissingTimestamp { index: usize },
    #[error("snapshot {index} has an unparseable timestamp {raw:?}")]
    InvalidTimestamp { index: usize, raw: String },
    #[error("snapshot {index} has an empty field name")]
    EmptyFieldName { index: usize },
    #[error("duplicate snapshot timestamp {0}")]
    DuplicateTimestamp(String),
    #[error("timeline has no snapshots")]
    EmptyTimeline,
    #[error("composite value {raw:?} does not contain exactly one {separator:?}")]
    CompositeShape { raw: String, separator: String },
    #[error("field pattern {0:?} must contain exactly one {{N}} placeholder")]
    Pattern(String),
}

/// When a snapshot was taken. Renders as the `snapshot_id` text stored in
/// the database: `YYYY-MM-DD` for midnight, `YYYY-MM-DDTHH:MM:SS` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SnapshotTime(NaiveDateTime);

impl SnapshotTime {
    pub fn parse(raw: &str) -> Option<Self> {
        let s = raw.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Some(Self(dt.naive_utc()));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(Self(dt));
            }
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Some(Self(d.and_time(NaiveTime::MIN)));
        }
        // "2019-01" and "2019"
        let re = regex!(r"^(\d{4})(?:-(\d{2}))?$");
        let caps = re.captures(s)?;
        let year: i32 = caps[1].parse().ok()?;
        let month: u32 = caps.get(2).map_or(Some(1), |m| m.as_str().parse().ok())?;
        NaiveDate::from_ymd_opt(year, month, 1).map(|d| Self(d.and_time(NaiveTime::MIN)))
    }

    pub fn datetime(&self) -> NaiveDateTime {
        self.0
    }

    pub fn as_snapshot_id(&self) -> String {
        if self.0.time() == NaiveTime::MIN {
            self.0.format("%Y-%m-%d").to_string()
        } else {
            self.0.format("%Y-%m-%dT%H:%M:%S").to_string()
        }
    }
}

impl fmt::Display for SnapshotTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_snapshot_id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSnapshot {
    pub timestamp: SnapshotTime,
    pub fields: Map<String, Value>,
}

impl RawSnapshot {
    /// Leaf fields in document order, nested maps flattened with dot-joined
    /// keys (`{"medal": {"year": ..}}` becomes `medal.year`).
    pub fn flattened(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        flatten_into(&mut out, None, &self.fields);
        out
    }
}

fn flatten_into(out: &mut Vec<(String, Value)>, prefix: Option<&str>, map: &Map<String, Value>) {
    for (k, v) in map {
        let key = match prefix {
            Some(p) => format!("{p}.{}", k.trim()),
            None => k.trim().to_string(),
        };
        match v {
            Value::Object(inner) => flatten_into(out, Some(&key), inner),
            other => out.push((key, other.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub entity_name: String,
    pub domain: String,
    /// Strictly ascending by timestamp, never empty.
    pub snapshots: Vec<RawSnapshot>,
}

impl Timeline {
    /// Every distinct flattened field name across snapshots, in first-seen order.
    pub fn field_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for snap in &self.snapshots {
            for (k, _) in snap.flattened() {
                if seen.insert(k.clone()) {
                    out.push(k);
                }
            }
        }
        out
    }
}

#[derive(Deserialize)]
struct TimelineFile {
    entity: Option<String>,
    domain: Option<String>,
    snapshots: Option<Vec<Value>>,
}

#[derive(Serialize)]
struct TimelineOut<'a> {
    entity: &'a str,
    domain: &'a str,
    snapshots: Vec<SnapshotOut<'a>>,
}

#[derive(Serialize)]
struct SnapshotOut<'a> {
    timestamp: String,
    fields: &'a Map<String, Value>,
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut cur_line = 1;
    let mut line_start = 0;
    for (i, b) in bytes.iter().enumerate() {
        if cur_line == line {
            break;
        }
        if *b == b'\n' {
            cur_line += 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

/// Parses one timeline file. Snapshots come back sorted by timestamp.
pub fn parse_timeline(bytes: &[u8]) -> Result<Timeline, IngestError> {
    let file: TimelineFile = serde_json::from_slice(bytes).map_err(|e| IngestError::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let entity_name = file
        .entity
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| IngestError::Structure("missing \"entity\"".into()))?;
    let domain = file
        .domain
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| IngestError::Structure("missing \"domain\"".into()))?;
    let raw_snaps = file
        .snapshots
        .ok_or_else(|| IngestError::Structure("missing \"snapshots\"".into()))?;

    let mut snapshots = Vec::with_capacity(raw_snaps.len());
    for (index, snap) in raw_snaps.into_iter().enumerate() {
        let Value::Object(mut obj) = snap else {
            return Err(IngestError::Structure(format!("snapshot {index} is not an object")));
        };
        let raw_ts = match obj.remove("timestamp") {
            Some(Value::String(s)) => s,
            Some(Value::Null) | None => return Err(IngestError::MissingTimestamp { index }),
            Some(other) => other.to_string(),
        };
        let timestamp = SnapshotTime::parse(&raw_ts)
            .ok_or(IngestError::InvalidTimestamp { index, raw: raw_ts })?;
        let fields = match obj.remove("fields") {
            Some(Value::Object(m)) => m,
            Some(Value::Null) | None => Map::new(),
            Some(_) => {
                return Err(IngestError::Structure(format!(
                    "snapshot {index}: \"fields\" is not an object"
                )))
            }
        };
        if fields.keys().any(|k| k.trim().is_empty()) {
            return Err(IngestError::EmptyFieldName { index });
        }
        snapshots.push(RawSnapshot { timestamp, fields });
    }
    if snapshots.is_empty() {
        return Err(IngestError::EmptyTimeline);
    }
    snapshots.sort_by_key(|s| s.timestamp);
    for pair in snapshots.windows(2) {
        if pair[0].timestamp == pair[1].timestamp {
            return Err(IngestError::DuplicateTimestamp(pair[0].timestamp.to_string()));
        }
    }
    Ok(Timeline { entity_name, domain, snapshots })
}

/// Inverse of [`parse_timeline`] up to timestamp canonicalization.
pub fn serialize_timeline(timeline: &Timeline) -> String {
    let out = TimelineOut {
        entity: &timeline.entity_name,
        domain: &timeline.domain,
        snapshots: timeline
            .snapshots
            .iter()
            .map(|s| SnapshotOut { timestamp: s.timestamp.as_snapshot_id(), fields: &s.fields })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&out).expect("timeline serializes");
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------
// Clean values

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatePrecision {
    Day,
    Year,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanKind {
    Integer,
    Real,
    Text,
    Date,
    Null,
    CompositePair,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Integer(i64),
    Real(f64),
    Text(String),
    Date { date: NaiveDate, precision: DatePrecision },
    Null,
    Pair(Option<i64>, Option<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanValue {
    pub value: Payload,
    /// The input, byte for byte.
    pub raw: String,
}

impl CleanValue {
    fn new(raw: &str, value: Payload) -> Self {
        Self { value, raw: raw.to_string() }
    }

    pub fn null(raw: &str) -> Self {
        Self::new(raw, Payload::Null)
    }

    pub fn kind(&self) -> CleanKind {
        match self.value {
            Payload::Integer(_) => CleanKind::Integer,
            Payload::Real(_) => CleanKind::Real,
            Payload::Text(_) => CleanKind::Text,
            Payload::Date { .. } => CleanKind::Date,
            Payload::Null => CleanKind::Null,
            Payload::Pair(..) => CleanKind::CompositePair,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self.value, Payload::Null)
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.value {
            Payload::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self.value {
            Payload::Integer(i) => Some(i),
            _ => None,
        }
    }
}

/// Sentinel spellings that mean "no value". Matching is on the trimmed,
/// lower-cased input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullVariants {
    variants: BTreeSet<String>,
}

impl Default for NullVariants {
    fn default() -> Self {
        Self::new(["n/a", "na", "--", "-", "vacant", "&ndash;", "\u{2013}", ""])
    }
}

impl NullVariants {
    pub fn new<I, S>(variants: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self { variants: variants.into_iter().map(|v| v.as_ref().trim().to_lowercase()).collect() }
    }

    pub fn with(mut self, variant: &str) -> Self {
        self.variants.insert(variant.trim().to_lowercase());
        self
    }

    pub fn is_null(&self, raw: &str) -> bool {
        self.variants.contains(&raw.trim().to_lowercase())
    }

    pub fn normalize(&self, raw: &str) -> CleanValue {
        if self.is_null(raw) {
            CleanValue::null(raw)
        } else {
            CleanValue::new(raw, Payload::Text(raw.trim().to_string()))
        }
    }
}

fn default_nulls() -> &'static NullVariants {
    static NULLS: OnceLock<NullVariants> = OnceLock::new();
    NULLS.get_or_init(NullVariants::default)
}

/// Null-variant detection with the default variant set.
pub fn normalize_null(raw: &str) -> CleanValue {
    default_nulls().normalize(raw)
}

fn strip_number_noise(raw: &str) -> String {
    raw.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Integer parse in the style infobox numbers need: commas and whitespace
/// are dropped, the rest is read as a decimal number and truncated.
/// Anything else (`"~100"`, `"abc"`, `"-"`) becomes null.
pub fn safe_int(raw: &str) -> CleanValue {
    let s = strip_number_noise(raw);
    if !regex!(r"^[0-9][0-9,]*(\.[0-9]+)?$").is_match(&s) {
        return CleanValue::null(raw);
    }
    let number: f64 = match s.replace(',', "").parse() {
        Ok(n) => n,
        Err(_) => return CleanValue::null(raw),
    };
    let truncated = number.trunc();
    if !truncated.is_finite() || truncated >= i64::MAX as f64 {
        return CleanValue::null(raw);
    }
    CleanValue::new(raw, Payload::Integer(truncated as i64))
}

/// Like [`safe_int`] but keeps the fraction and accepts a sign.
pub fn safe_real(raw: &str) -> CleanValue {
    let s = strip_number_noise(raw);
    if !regex!(r"^[+-]?[0-9][0-9,]*(\.[0-9]+)?$").is_match(&s) {
        return CleanValue::null(raw);
    }
    match s.replace(',', "").parse::<f64>() {
        Ok(n) if n.is_finite() => CleanValue::new(raw, Payload::Real(n)),
        _ => CleanValue::null(raw),
    }
}

/// Splits `"2/22"`-style statistics into two optional integers. Each side
/// goes through null normalization and then [`safe_int`]. A value that is a
/// null sentinel as a whole (`"n/a"`) comes back as null rather than a pair.
pub fn parse_composite(raw: &str, separator: &str) -> Result<CleanValue, IngestError> {
    let shape_err = || IngestError::CompositeShape { raw: raw.to_string(), separator: separator.to_string() };
    if separator.is_empty() {
        return Err(shape_err());
    }
    if normalize_null(raw).is_null() {
        return Ok(CleanValue::null(raw));
    }
    if raw.matches(separator).count() != 1 {
        return Err(shape_err());
    }
    let (left, right) = raw.split_once(separator).ok_or_else(shape_err)?;
    let side = |s: &str| {
        let n = normalize_null(s);
        if n.is_null() {
            None
        } else {
            safe_int(s).as_i64()
        }
    };
    Ok(CleanValue::new(raw, Payload::Pair(side(left), side(right))))
}

/// Finds `proyears1`, `proyears2`, ... for the pattern `proyears{N}`.
pub fn match_dynamic_fields(
    snapshot: &RawSnapshot,
    pattern: &str,
) -> Result<Vec<(u32, Value)>, IngestError> {
    let re = dynamic_field_regex(pattern)?;
    let mut out: Vec<(u32, Value)> = snapshot
        .flattened()
        .into_iter()
        .filter_map(|(k, v)| {
            let idx = re.captures(&k)?.get(1)?.as_str().parse().ok()?;
            Some((idx, v))
        })
        .collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

pub(crate) fn dynamic_field_regex(pattern: &str) -> Result<Regex, IngestError> {
    let parts: Vec<&str> = pattern.split("{N}").collect();
    if parts.len() != 2 {
        return Err(IngestError::Pattern(pattern.to_string()));
    }
    let re = format!("^{}([0-9]+){}$", regex::escape(parts[0]), regex::escape(parts[1]));
    Regex::new(&re).map_err(|_| IngestError::Pattern(pattern.to_string()))
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];

fn month_number(name: &str) -> Option<u32> {
    let name = name.trim_end_matches('.').to_lowercase();
    if name.len() < 3 {
        return None;
    }
    MONTHS
        .iter()
        .position(|m| *m == name || (name.len() == 3 && m.starts_with(&name)) || (name == "sept" && *m == "september"))
        .map(|i| i as u32 + 1)
}

/// Recognizes ISO-8601 (`2019-06-01`, optionally with a time part),
/// `1 June 2019`, `June 1, 2019` (full or three-letter month names), and a
/// bare `2019`, which becomes `2019-01-01` with year precision. Anything
/// else is null.
pub fn normalize_date(raw: &str) -> CleanValue {
    let s = raw.trim();
    let day = |date: Option<NaiveDate>| match date {
        Some(date) => CleanValue::new(raw, Payload::Date { date, precision: DatePrecision::Day }),
        None => CleanValue::null(raw),
    };
    if let Some(c) = regex!(r"^(\d{4})-(\d{2})-(\d{2})(?:[T ]\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?(?:Z|[+-]\d{2}:?\d{2})?)?$").captures(s) {
        return day(ymd(&c[1], &c[2], &c[3]));
    }
    if let Some(c) = regex!(r"^(\d{1,2})\s+([A-Za-z]+\.?)\s+(\d{4})$").captures(s) {
        return day(month_number(&c[2]).and_then(|m| ymd(&c[3], &m.to_string(), &c[1])));
    }
    if let Some(c) = regex!(r"^([A-Za-z]+\.?)\s+(\d{1,2}),?\s+(\d{4})$").captures(s) {
        return day(month_number(&c[1]).and_then(|m| ymd(&c[3], &m.to_string(), &c[2])));
    }
    if regex!(r"^\d{4}$").is_match(s) {
        if let Some(date) = ymd(s, "1", "1") {
            return CleanValue::new(raw, Payload::Date { date, precision: DatePrecision::Year });
        }
    }
    CleanValue::null(raw)
}

fn ymd(y: &str, m: &str, d: &str) -> Option<NaiveDate> {
    NaiveDate::from_ymd_opt(y.parse().ok()?, m.parse().ok()?, d.parse().ok()?)
}
