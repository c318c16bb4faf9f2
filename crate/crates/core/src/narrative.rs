//! Natural-language stories rendered from WiP days.
//!
//! Query stories describe a day (or window) as it is known; contextual stories
//! append the realized next-day close and make up the retrieval corpus. The
//! templates are fixed so that identical inputs always render identical bytes,
//! and [`StoryFacts::parse`] recovers every number from a rendered story.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{Duration, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatBackend, ChatRequest, LlmError};
use crate::wipseries::{WipEvent, WipSeries};

pub const DEFAULT_WINDOW: usize = 7;

#[derive(Debug, Error)]
pub enum NarrativeError {
    #[error("a windowed story needs at least one day")]
    EmptyWindow,
    #[error("{0} stories are rendered from a window, not a single day")]
    NeedsWindow(Granularity),
    #[error("unknown granularity '{0}'")]
    UnknownGranularity(String),
    #[error("story JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoryKind {
    Query,
    Contextual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Daily,
    Weekday,
    Windowed,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Daily, Granularity::Weekday, Granularity::Windowed];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Daily => "daily",
            Granularity::Weekday => "weekday",
            Granularity::Windowed => "windowed",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = NarrativeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| NarrativeError::UnknownGranularity(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub date: NaiveDate,
    pub kind: StoryKind,
    pub granularity: Granularity,
    pub text: String,
    pub target: Option<f64>,
}

/// Formats a number the way stories print it: integers without a decimal part
/// or thousands separators, everything else in shortest round-trip form.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

const TARGET_CLAUSE: &str = ", while the next WiP was expected to remain at ";

fn day_body(ev: &WipEvent) -> String {
    format!(
        "WiP items opened at {}, reached a high of {} and a low of {}, before closing at {}, \
         with {} items completed, {} new items added, and {} items started",
        ev.open, ev.high, ev.low, ev.close, ev.done, ev.new, ev.started
    )
}

fn day_sentence(ev: &WipEvent, granularity: Granularity) -> Result<String, NarrativeError> {
    match granularity {
        Granularity::Daily => Ok(format!("The {}", day_body(ev))),
        Granularity::Weekday => Ok(format!("On {}, the {}", ev.weekday_name(), day_body(ev))),
        Granularity::Windowed => Err(NarrativeError::NeedsWindow(granularity)),
    }
}

fn with_ending(sentence: String, target: Option<f64>) -> String {
    match target {
        Some(t) => format!("{sentence}{TARGET_CLAUSE}{}.", format_number(t)),
        None => format!("{sentence}."),
    }
}

pub fn render_query_story(ev: &WipEvent, granularity: Granularity) -> Result<Story, NarrativeError> {
    Ok(Story {
        date: ev.date,
        kind: StoryKind::Query,
        granularity,
        text: with_ending(day_sentence(ev, granularity)?, None),
        target: None,
    })
}

pub fn render_contextual_story(
    ev: &WipEvent,
    next_close: f64,
    granularity: Granularity,
) -> Result<Story, NarrativeError> {
    Ok(Story {
        date: ev.date,
        kind: StoryKind::Contextual,
        granularity,
        text: with_ending(day_sentence(ev, granularity)?, Some(next_close)),
        target: Some(next_close),
    })
}

/// Summarizes a window as one sentence: first open, lowest low, highest high,
/// last close and summed counts. Dated on the window's last day.
pub fn render_windowed_story(window: &[WipEvent], next_close: Option<f64>) -> Result<Story, NarrativeError> {
    let (first, last) = match (window.first(), window.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(NarrativeError::EmptyWindow),
    };
    let low = window.iter().map(|e| e.low).min().unwrap_or_default();
    let high = window.iter().map(|e| e.high).max().unwrap_or_default();
    let done: u64 = window.iter().map(|e| e.done).sum();
    let new: u64 = window.iter().map(|e| e.new).sum();
    let started: u64 = window.iter().map(|e| e.started).sum();
    let sentence = format!(
        "Over the past {} days, WiP opened at {}, ranged between a low of {} and a high of {}, \
         and closed at {}, with {} items completed, {} new items added, and {} items started",
        window.len(),
        first.open,
        low,
        high,
        last.close,
        done,
        new,
        started
    );
    Ok(Story {
        date: last.date,
        kind: if next_close.is_some() {
            StoryKind::Contextual
        } else {
            StoryKind::Query
        },
        granularity: Granularity::Windowed,
        text: with_ending(sentence, next_close),
        target: next_close,
    })
}

/// Numbers recovered from a rendered story.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryFacts {
    pub weekday: Option<String>,
    pub window_days: Option<u64>,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub done: f64,
    pub new: f64,
    pub started: f64,
    pub target: Option<f64>,
}

const NUM: &str = r"(-?\d+(?:\.\d+)?(?:e[+-]?\d+)?)";

fn day_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^(?:On ([A-Z][a-z]+day), the|The) WiP items opened at {NUM}, reached a high of {NUM} and a low of {NUM}, before closing at {NUM}, with {NUM} items completed, {NUM} new items added, and {NUM} items started(?:, while the next WiP was expected to remain at {NUM})?\.$"
        ))
        .expect("story regex")
    })
}

fn window_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"^Over the past (\d+) days, WiP opened at {NUM}, ranged between a low of {NUM} and a high of {NUM}, and closed at {NUM}, with {NUM} items completed, {NUM} new items added, and {NUM} items started(?:, while the next WiP was expected to remain at {NUM})?\.$"
        ))
        .expect("window regex")
    })
}

impl StoryFacts {
    /// Parses a story produced by the templates in this module; `None` for any other text.
    pub fn parse(text: &str) -> Option<StoryFacts> {
        let num = |c: &regex::Captures<'_>, i: usize| c.get(i).and_then(|m| m.as_str().parse::<f64>().ok());
        if let Some(c) = day_regex().captures(text) {
            return Some(StoryFacts {
                weekday: c.get(1).map(|m| m.as_str().to_string()),
                window_days: None,
                open: num(&c, 2)?,
                high: num(&c, 3)?,
                low: num(&c, 4)?,
                close: num(&c, 5)?,
                done: num(&c, 6)?,
                new: num(&c, 7)?,
                started: num(&c, 8)?,
                target: num(&c, 9),
            });
        }
        let c = window_regex().captures(text)?;
        Some(StoryFacts {
            weekday: None,
            window_days: c.get(1)?.as_str().parse().ok(),
            open: num(&c, 2)?,
            low: num(&c, 3)?,
            high: num(&c, 4)?,
            close: num(&c, 5)?,
            done: num(&c, 6)?,
            new: num(&c, 7)?,
            started: num(&c, 8)?,
            target: num(&c, 9),
        })
    }

    /// The seven state quantities in a fixed order.
    pub fn state(&self) -> [f64; 7] {
        [
            self.open,
            self.high,
            self.low,
            self.close,
            self.done,
            self.new,
            self.started,
        ]
    }
}

fn is_next_day(series: &WipSeries, i: usize) -> bool {
    i + 1 < series.len() && series.events[i + 1].date == series.events[i].date + Duration::days(1)
}

/// The window of `window` consecutive days ending at index `i`, if the series has one.
pub fn window_ending_at(series: &WipSeries, i: usize, window: usize) -> Option<&[WipEvent]> {
    if window == 0 || i + 1 < window || i >= series.len() {
        return None;
    }
    let slice = &series.events[i + 1 - window..=i];
    let span = (slice[slice.len() - 1].date - slice[0].date).num_days();
    (span == window as i64 - 1).then_some(slice)
}

/// The query story describing index `i` at the given granularity.
pub fn query_story_at(
    series: &WipSeries,
    i: usize,
    granularity: Granularity,
    window: usize,
) -> Option<Story> {
    match granularity {
        Granularity::Windowed => render_windowed_story(window_ending_at(series, i, window)?, None).ok(),
        g => render_query_story(series.events.get(i)?, g).ok(),
    }
}

/// The contextual story for index `i`, when the following calendar day is in the series.
pub fn contextual_story_at(
    series: &WipSeries,
    i: usize,
    granularity: Granularity,
    window: usize,
) -> Option<Story> {
    if !is_next_day(series, i) {
        return None;
    }
    let next_close = series.events[i + 1].close as f64;
    match granularity {
        Granularity::Windowed => render_windowed_story(window_ending_at(series, i, window)?, Some(next_close)).ok(),
        g => render_contextual_story(&series.events[i], next_close, g).ok(),
    }
}

/// Every query and contextual story the series supports at one granularity,
/// in date order (query before contextual for the same day).
pub fn render_series(series: &WipSeries, granularity: Granularity, window: usize) -> Vec<Story> {
    (0..series.len())
        .flat_map(|i| {
            [
                query_story_at(series, i, granularity, window),
                contextual_story_at(series, i, granularity, window),
            ]
        })
        .flatten()
        .collect()
}

pub fn write_jsonl<W: Write>(stories: &[Story], mut w: W) -> Result<(), NarrativeError> {
    for s in stories {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Story>, NarrativeError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

const PARAPHRASE_SYSTEM: &str = "Rewrite the following process description in fluent English. \
Keep every number exactly as written and do not add new facts.";

/// Optional rewording pass through a chat backend. The result keeps the
/// story's metadata; callers decide whether to trust the rewritten text.
pub fn paraphrase(story: &Story, backend: &dyn ChatBackend) -> Result<Story, NarrativeError> {
    let req = ChatRequest::new(PARAPHRASE_SYSTEM, &story.text);
    let resp = backend.chat(&req)?;
    Ok(Story {
        text: resp.text.trim().to_string(),
        ..story.clone()
    })
}
