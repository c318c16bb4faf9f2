//! Walk-forward evaluation: rolling forecasts, error metrics, the persistence
//! baseline and the CSV/SVG report.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    fuse, predict_all, trend_analyze, AgentError, AgentId, ForecastReport, FusionConfig, PredictorConfig,
    TrendConfig,
};
use crate::llm::ChatBackend;
use crate::memory::{EmbeddingProvider, MemoryError, ProcessMemory, Retention};
use crate::narrative::{contextual_story_at, Granularity};
use crate::wipseries::WipSeries;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no entries to score")]
    EmptyTrace,
    #[error("every actual value is zero; MAPE is undefined")]
    AllZeroActuals,
    #[error("{actual} actual values but {predicted} predictions")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("split date {0} is outside the series")]
    SplitOutOfRange(NaiveDate),
    #[error("split leaves no test days")]
    NoTestDays,
    #[error("only {have} days before the split; at least {need} are required")]
    InsufficientTraining { have: usize, need: usize },
    #[error("series is empty")]
    EmptySeries,
    #[error("causality violation while forecasting {date}: {detail}")]
    CausalityViolation { date: NaiveDate, detail: String },
    #[error("unknown trace source '{0}'")]
    UnknownSource(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    MultiAgent,
    DailyOnly,
    WeekdayOnly,
    WindowedOnly,
    Persistence,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::MultiAgent,
        Source::DailyOnly,
        Source::WeekdayOnly,
        Source::WindowedOnly,
        Source::Persistence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::MultiAgent => "multi_agent",
            Source::DailyOnly => "daily_only",
            Source::WeekdayOnly => "weekday_only",
            Source::WindowedOnly => "windowed_only",
            Source::Persistence => "persistence",
        }
    }

    pub fn single_agent(agent: AgentId) -> Source {
        match agent {
            AgentId::Daily => Source::DailyOnly,
            AgentId::Weekday => Source::WeekdayOnly,
            AgentId::Windowed => Source::WindowedOnly,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| EvalError::UnknownSource(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub date: NaiveDate,
    pub source: Source,
    pub actual: f64,
    pub predicted: f64,
}

/// Entries for one or more sources, ordered by date and then source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub entries: Vec<TraceEntry>,
}

impl PredictionTrace {
    pub fn from_entries(mut entries: Vec<TraceEntry>) -> Self {
        entries.sort_by(|a, b| a.date.cmp(&b.date).then(a.source.cmp(&b.source)));
        PredictionTrace { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sources present, in canonical order.
    pub fn sources(&self) -> Vec<Source> {
        Source::ALL
            .into_iter()
            .filter(|s| self.entries.iter().any(|e| e.source == *s))
            .collect()
    }

    pub fn for_source(&self, source: Source) -> Vec<TraceEntry> {
        self.entries.iter().filter(|e| e.source == source).copied().collect()
    }

    /// Distinct dates in order.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut d: Vec<NaiveDate> = self.entries.iter().map(|e| e.date).collect();
        d.dedup();
        d
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "source", "actual", "predicted"])?;
        for e in &self.entries {
            w.write_record([
                e.date.to_string(),
                e.source.to_string(),
                e.actual.to_string(),
                e.predicted.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, EvalError> {
        #[derive(Deserialize)]
        struct Row {
            date: NaiveDate,
            source: String,
            actual: f64,
            predicted: f64,
        }
        let mut entries = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            entries.push(TraceEntry {
                date: row.date,
                source: row.source.parse()?,
                actual: row.actual,
                predicted: row.predicted,
            });
        }
        Ok(PredictionTrace::from_entries(entries))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapeResult {
    pub mape: f64,
    pub skipped_zero_actuals: usize,
}

fn check_lengths(actual: &[f64], predicted: &[f64]) -> Result<(), EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    Ok(())
}

/// Mean absolute percentage error in percent. Zero actuals are excluded and counted.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<MapeResult, EvalError> {
    check_lengths(actual, predicted)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, p) in actual.iter().zip(predicted) {
        if *a != 0.0 {
            sum += (a - p).abs() / a.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::AllZeroActuals);
    }
    Ok(MapeResult {
        mape: 100.0 * sum / n as f64,
        skipped_zero_actuals: actual.len() - n,
    })
}

pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64, EvalError> {
    check_lengths(actual, predicted)?;
    Ok(actual.iter().zip(predicted).map(|(a, p)| (a - p).abs()).sum::<f64>() / actual.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub source: Source,
    pub mape: f64,
    pub mae: f64,
    pub n: usize,
    pub skipped_zero_actuals: usize,
}

pub fn summarize_entries(source: Source, entries: &[TraceEntry]) -> Result<MetricsSummary, EvalError> {
    let actual: Vec<f64> = entries.iter().map(|e| e.actual).collect();
    let predicted: Vec<f64> = entries.iter().map(|e| e.predicted).collect();
    let m = mape(&actual, &predicted)?;
    Ok(MetricsSummary {
        source,
        mape: m.mape,
        mae: mae(&actual, &predicted)?,
        n: entries.len(),
        skipped_zero_actuals: m.skipped_zero_actuals,
    })
}

/// One summary per source present in the trace.
pub fn summarize(trace: &PredictionTrace) -> Result<Vec<MetricsSummary>, EvalError> {
    if trace.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    trace
        .sources()
        .into_iter()
        .map(|s| summarize_entries(s, &trace.for_source(s)))
        .collect()
}

pub fn write_metrics_csv<W: io::Write>(metrics: &[MetricsSummary], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["source", "mape", "mae", "n", "skipped"])?;
    for m in metrics {
        w.write_record([
            m.source.to_string(),
            m.mape.to_string(),
            m.mae.to_string(),
            m.n.to_string(),
            m.skipped_zero_actuals.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Position of the last training day. Without an explicit date the last 20%
/// of rows (at least one) are held out.
pub fn split_position(series: &WipSeries, split_date: Option<NaiveDate>) -> Result<usize, EvalError> {
    if series.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    let n = series.len();
    let pos = match split_date {
        Some(d) => {
            let (first, last) = (series.events[0].date, series.events[n - 1].date);
            if d < first || d > last {
                return Err(EvalError::SplitOutOfRange(d));
            }
            series.events.partition_point(|e| e.date <= d) - 1
        }
        None => {
            let test = ((n as f64) * 0.2).round().max(1.0) as usize;
            n.checked_sub(test + 1).ok_or(EvalError::NoTestDays)?
        }
    };
    if pos + 1 >= n {
        return Err(EvalError::NoTestDays);
    }
    Ok(pos)
}

fn previous_day_position(series: &WipSeries, j: usize) -> Option<usize> {
    (j > 0 && series.events[j - 1].date + Duration::days(1) == series.events[j].date).then(|| j - 1)
}

/// Predicts each test day's close as the previous calendar day's close. Test
/// days whose previous day is missing from the series are skipped.
pub fn persistence_baseline(series: &WipSeries, split_date: Option<NaiveDate>) -> Result<PredictionTrace, EvalError> {
    let split = split_position(series, split_date)?;
    let entries = (split + 1..series.len())
        .filter_map(|j| {
            previous_day_position(series, j).map(|i| TraceEntry {
                date: series.events[j].date,
                source: Source::Persistence,
                actual: series.events[j].close as f64,
                predicted: series.events[i].close as f64,
            })
        })
        .collect();
    Ok(PredictionTrace { entries })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub predictor: PredictorConfig,
    pub trend: TrendConfig,
    pub fusion: FusionConfig,
    pub retention: Retention,
}

/// Corpus state observed just before one walk-forward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    /// The day being forecast.
    pub date: NaiveDate,
    /// Documents per index, in (daily, weekday, windowed) order.
    pub corpus_sizes: [usize; 3],
    pub max_story_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub split_date: NaiveDate,
    pub trace: PredictionTrace,
    pub reports: Vec<ForecastReport>,
    pub audits: Vec<StepAudit>,
    /// Test days that could not be forecast (previous day or window missing).
    pub skipped_days: Vec<NaiveDate>,
}

pub fn empty_memories(provider: Arc<dyn EmbeddingProvider>, retention: &Retention) -> [ProcessMemory; 3] {
    Granularity::ALL.map(|g| ProcessMemory::new(g, provider.clone(), retention.clone()))
}

/// Adds contextual stories for positions `from..` whose date is at most
/// `last_story_date`, returning the next unprocessed position.
fn extend_memories(
    memories: &mut [ProcessMemory; 3],
    series: &WipSeries,
    window: usize,
    from: usize,
    last_story_date: NaiveDate,
) -> Result<usize, MemoryError> {
    let end = series.events.partition_point(|e| e.date <= last_story_date).max(from);
    for memory in memories.iter_mut() {
        let stories = (from..end)
            .filter_map(|i| contextual_story_at(series, i, memory.granularity, window))
            .collect::<Vec<_>>();
        if !stories.is_empty() {
            memory.add_stories(stories)?;
        }
    }
    Ok(end)
}

fn audit(memories: &[ProcessMemory; 3], date: NaiveDate, current: NaiveDate) -> Result<StepAudit, EvalError> {
    let max_story_date = memories.iter().filter_map(|m| m.index.max_date()).max();
    if let Some(m) = max_story_date {
        if m >= current {
            return Err(EvalError::CausalityViolation {
                date,
                detail: format!("memory holds a story dated {m}, whose target is not yet known"),
            });
        }
    }
    Ok(StepAudit {
        date,
        corpus_sizes: [memories[0].len(), memories[1].len(), memories[2].len()],
        max_story_date,
    })
}

/// Runs the pipeline for the day after `current_date`, with memory built from
/// every contextual story whose target is known by then.
pub fn forecast_next(
    series: &WipSeries,
    current_date: NaiveDate,
    settings: &EvalSettings,
    provider: Arc<dyn EmbeddingProvider>,
    backend: &dyn ChatBackend,
) -> Result<ForecastReport, EvalError> {
    let history = history_until(series, current_date)?;
    let mut memories = empty_memories(provider, &settings.retention);
    extend_memories(&mut memories, &history, settings.predictor.window, 0, current_date - Duration::days(1))?;
    forecast_with_memories(&history, current_date, &memories, settings, backend)
}

/// As [`forecast_next`] with caller-supplied memories. Retrieval still only
/// sees stories dated before `current_date`.
pub fn forecast_with_memories(
    series: &WipSeries,
    current_date: NaiveDate,
    memories: &[ProcessMemory; 3],
    settings: &EvalSettings,
    backend: &dyn ChatBackend,
) -> Result<ForecastReport, EvalError> {
    let history = history_until(series, current_date)?;
    let preds = predict_all(current_date, &history, memories, backend, &settings.predictor)?;
    let trend = trend_analyze(&history.closes(), &settings.trend)?;
    Ok(fuse(&preds, &trend, Some(&memories[0]), backend, &settings.fusion)?)
}

fn history_until(series: &WipSeries, current_date: NaiveDate) -> Result<WipSeries, EvalError> {
    let pos = series
        .position(current_date)
        .ok_or(AgentError::UnknownDay(current_date))?;
    Ok(WipSeries {
        events: series.events[..=pos].to_vec(),
        ..series.clone()
    })
}

/// Walk-forward evaluation over every day after the split.
///
/// Forecasting day `d` uses the history up to `d - 1`; process memory holds
/// contextual stories up to `d - 2`, the latest whose next-day outcome is
/// known at `d - 1`. The multi-agent trace and the three single-agent traces
/// share one set of predictions per day.
pub fn rolling_forecast(
    series: &WipSeries,
    split_date: Option<NaiveDate>,
    settings: &EvalSettings,
    provider: Arc<dyn EmbeddingProvider>,
    backend: &dyn ChatBackend,
) -> Result<EvalRun, EvalError> {
    let split = split_position(series, split_date)?;
    let need = settings.trend.lookback.max(1);
    if split + 1 < need {
        return Err(EvalError::InsufficientTraining { have: split + 1, need });
    }
    let window = settings.predictor.window;
    let mut memories = empty_memories(provider, &settings.retention);
    let mut history = WipSeries {
        events: series.events[..split].to_vec(),
        ..series.clone()
    };
    let mut next_story = 0;
    let mut entries = Vec::new();
    let mut reports = Vec::new();
    let mut audits = Vec::new();
    let mut skipped_days = Vec::new();

    for j in split + 1..series.len() {
        history.events.push(series.events[j - 1]);
        let day = series.events[j];
        let Some(cur) = previous_day_position(series, j) else {
            skipped_days.push(day.date);
            continue;
        };
        let current_date = series.events[cur].date;
        next_story = extend_memories(&mut memories, &history, window, next_story, current_date - Duration::days(1))?;
        audits.push(audit(&memories, day.date, current_date)?);

        let preds = match predict_all(current_date, &history, &memories, backend, &settings.predictor) {
            Ok(p) => p,
            Err(AgentError::InsufficientHistory { .. }) => {
                skipped_days.push(day.date);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for p in &preds {
            if let Some(r) = p.retrieved.iter().find(|r| r.document.story.date >= current_date) {
                return Err(EvalError::CausalityViolation {
                    date: day.date,
                    detail: format!("{} agent retrieved a story dated {}", p.agent_id, r.document.story.date),
                });
            }
        }
        let trend = trend_analyze(&history.closes(), &settings.trend)?;
        let report = fuse(&preds, &trend, Some(&memories[0]), backend, &settings.fusion)?;

        let actual = day.close as f64;
        let entry = |source, predicted| TraceEntry {
            date: day.date,
            source,
            actual,
            predicted,
        };
        entries.push(entry(Source::MultiAgent, report.final_value));
        for p in &preds {
            entries.push(entry(Source::single_agent(p.agent_id), p.value));
        }
        entries.push(entry(Source::Persistence, series.events[cur].close as f64));
        reports.push(report);
    }
    if entries.is_empty() {
        return Err(EvalError::NoTestDays);
    }
    Ok(EvalRun {
        split_date: series.events[split].date,
        trace: PredictionTrace::from_entries(entries),
        reports,
        audits,
        skipped_days,
    })
}

pub const ROLLING_MAPE_WINDOW: usize = 7;

/// Trailing MAPE over up to `window` entries ending at each entry. Points whose
/// window holds only zero actuals are omitted.
pub fn rolling_mape(entries: &[TraceEntry], window: usize) -> Vec<(NaiveDate, f64)> {
    (0..entries.len())
        .filter_map(|t| {
            let w = &entries[(t + 1).saturating_sub(window.max(1))..=t];
            let actual: Vec<f64> = w.iter().map(|e| e.actual).collect();
            let predicted: Vec<f64> = w.iter().map(|e| e.predicted).collect();
            mape(&actual, &predicted).ok().map(|m| (entries[t].date, m.mape))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportHeader {
    pub split_date: Option<NaiveDate>,
    /// Rendered verbatim; callers freeze it for reproducible output.
    pub generated_at: String,
}

pub const FROZEN_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

impl ReportHeader {
    pub fn new(split_date: Option<NaiveDate>, freeze_timestamps: bool) -> Self {
        let generated_at = if freeze_timestamps {
            FROZEN_TIMESTAMP.to_string()
        } else {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        };
        ReportHeader {
            split_date,
            generated_at,
        }
    }
}

const SVG_WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 160.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const PANEL_GAP: f64 = 40.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#7f7f7f"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Panel<'a> {
    title: String,
    color: &'a str,
    points: Vec<(NaiveDate, f64)>,
}

fn render_panel(out: &mut String, top: f64, panel: &Panel<'_>, first: NaiveDate, days: f64) {
    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let (lo, hi) = panel
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let (lo, hi) = if panel.points.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    };
    let x = |d: NaiveDate| MARGIN_LEFT + plot_w * ((d - first).num_days() as f64 / days.max(1.0));
    let y = |v: f64| top + PANEL_HEIGHT * (1.0 - (v - lo) / (hi - lo));
    out.push_str(&format!(
        "  <g class=\"panel\">\n    <text x=\"{MARGIN_LEFT}\" y=\"{:.1}\" font-size=\"13\">{}</text>\n",
        top - 6.0,
        xml_escape(&panel.title)
    ));
    out.push_str(&format!(
        "    <rect x=\"{MARGIN_LEFT}\" y=\"{top:.1}\" width=\"{plot_w:.1}\" height=\"{PANEL_HEIGHT:.1}\" fill=\"none\" stroke=\"#cccccc\"/>\n"
    ));
    out.push_str(&format!(
        "    <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{:.2}</text>\n    <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{:.2}</text>\n",
        MARGIN_LEFT - 4.0,
        top + 10.0,
        hi,
        MARGIN_LEFT - 4.0,
        top + PANEL_HEIGHT,
        lo
    ));
    let pts: Vec<String> = panel
        .points
        .iter()
        .map(|(d, v)| format!("{:.2},{:.2}", x(*d), y(*v)))
        .collect();
    out.push_str(&format!(
        "    <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n  </g>\n",
        panel.color,
        pts.join(" ")
    ));
}

/// Top panel: actual WiP. One panel per source below it: rolling MAPE.
pub fn render_svg(trace: &PredictionTrace, header: &ReportHeader) -> String {
    let dates = trace.dates();
    let (first, last) = match (dates.first(), dates.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => (NaiveDate::MIN, NaiveDate::MIN),
    };
    let days = (last - first).num_days() as f64;
    let mut actual: Vec<(NaiveDate, f64)> = trace.entries.iter().map(|e| (e.date, e.actual)).collect();
    actual.dedup_by_key(|p| p.0);

    let mut panels = vec![Panel {
        title: "Actual WiP".into(),
        color: "#000000",
        points: actual,
    }];
    for source in trace.sources() {
        panels.push(Panel {
            title: format!("{source}: rolling {ROLLING_MAPE_WINDOW}-day MAPE (%)"),
            color: COLORS[source as usize],
            points: rolling_mape(&trace.for_source(source), ROLLING_MAPE_WINDOW),
        });
    }
    let height = PANEL_GAP + panels.len() as f64 * (PANEL_HEIGHT + PANEL_GAP);
    let split = header
        .split_date
        .map(|d| d.to_string())
        .unwrap_or_else(|| "default".into());
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{height}\" viewBox=\"0 0 {SVG_WIDTH} {height}\">\n  <desc>wipcast report; generated {}; split {split}; test days {first} to {last}</desc>\n  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        xml_escape(&header.generated_at)
    );
    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut out, PANEL_GAP + i as f64 * (PANEL_HEIGHT + PANEL_GAP), panel, first, days);
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `predictions.csv`, `metrics.csv` and `report.svg` into `out_dir`.
pub fn emit_report(trace: &PredictionTrace, out_dir: &Path, header: &ReportHeader) -> Result<Vec<PathBuf>, EvalError> {
    if trace.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let metrics = summarize(trace)?;
    fs::create_dir_all(out_dir)?;
    let predictions = out_dir.join("predictions.csv");
    trace.write_csv(fs::File::create(&predictions)?)?;
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics, fs::File::create(&metrics_path)?)?;
    let svg = out_dir.join("report.svg");
    fs::write(&svg, render_svg(trace, header))?;
    Ok(vec![predictions, metrics_path, svg])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::StubBackend;
    use crate::memory::HashingEmbedder;
    use crate::wipseries::{LifecycleConfig, WipEvent};

    fn series(closes: &[u64]) -> WipSeries {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let mut prev = closes.first().copied().unwrap_or(0);
        let events = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let e = WipEvent::on(start + Duration::days(i as i64))
                    .with_ohlc(prev, prev.max(c), prev.min(c), c)
                    .with_counts(c.saturating_sub(prev), prev.saturating_sub(c), 0);
                prev = c;
                e
            })
            .collect();
        WipSeries {
            events,
            lifecycle: LifecycleConfig::default(),
            timezone: chrono_tz::UTC,
            contiguous: true,
            diagnostics: vec![],
        }
    }

    #[test]
    fn metric_examples() {
        let m = mape(&[100.0, 200.0], &[110.0, 180.0]).unwrap();
        assert_eq!(m.mape, 10.0);
        assert_eq!(mae(&[100.0, 200.0], &[110.0, 180.0]).unwrap(), 15.0);
        let z = mape(&[0.0, 10.0], &[5.0, 10.0]).unwrap();
        assert_eq!((z.mape, z.skipped_zero_actuals), (0.0, 1));
        assert_eq!(mae(&[55.0], &[66.0]).unwrap(), 11.0);
        assert!(matches!(mape(&[0.0, 0.0], &[1.0, 2.0]), Err(EvalError::AllZeroActuals)));
        assert!(matches!(mae(&[], &[]), Err(EvalError::EmptyTrace)));
        assert!(matches!(mae(&[1.0], &[]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn persistence_example() {
        let s = series(&[10, 20, 30]);
        let t = persistence_baseline(&s, Some(s.events[0].date)).unwrap();
        let p: Vec<f64> = t.entries.iter().map(|e| e.predicted).collect();
        assert_eq!(p, vec![10.0, 20.0]);
        let m = summarize(&t).unwrap();
        assert!((m[0].mape - 100.0 * (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_split_holds_out_a_fifth() {
        let s = series(&[5; 20]);
        assert_eq!(split_position(&s, None).unwrap(), 15);
        assert!(matches!(split_position(&s, s.last_date()), Err(EvalError::NoTestDays)));
        let early = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
        assert!(matches!(split_position(&s, Some(early)), Err(EvalError::SplitOutOfRange(_))));
    }

    fn stub_run(s: &WipSeries, split: Option<NaiveDate>) -> EvalRun {
        rolling_forecast(s, split, &EvalSettings::default(), Arc::new(HashingEmbedder::default()), &StubBackend).unwrap()
    }

    #[test]
    fn twenty_day_walk_forward_audit() {
        let closes: Vec<u64> = (0..20).map(|i| 50 + (i * 7 % 11)).collect();
        let s = series(&closes);
        let run = stub_run(&s, Some(s.events[14].date));
        assert_eq!(run.trace.dates().len(), 5);
        assert_eq!(run.trace.len(), 25);
        for (step, a) in (15..20).zip(&run.audits) {
            assert_eq!(a.corpus_sizes[0], step - 1);
            assert_eq!(a.corpus_sizes[1], step - 1);
            assert_eq!(a.corpus_sizes[2], step - 1 - 6);
            assert!(a.max_story_date.unwrap() < a.date - Duration::days(1));
        }
    }

    #[test]
    fn constant_series_is_a_fixed_point() {
        let s = series(&[42; 30]);
        let run = stub_run(&s, None);
        for m in summarize(&run.trace).unwrap() {
            assert_eq!(m.mape, 0.0, "{}", m.source);
        }
        assert_eq!(run, stub_run(&s, None));
    }

    #[test]
    fn skipped_days_after_gaps() {
        let mut s = series(&(0..30).map(|i| 20 + i % 5).collect::<Vec<_>>());
        s.events.remove(26);
        s.contiguous = false;
        let run = stub_run(&s, Some(s.events[22].date));
        // day after the hole has no previous calendar day
        assert!(run.skipped_days.contains(&s.events[26].date));
        assert!(run.trace.dates().iter().all(|d| !run.skipped_days.contains(d)));
    }

    #[test]
    fn report_files_and_structure() {
        let s = series(&(0..30).map(|i| 30 + (i * 3 % 7)).collect::<Vec<_>>());
        let run = stub_run(&s, None);
        let dir = tempfile::tempdir().unwrap();
        let header = ReportHeader::new(Some(run.split_date), true);
        let files = emit_report(&run.trace, dir.path(), &header).unwrap();
        assert_eq!(files.len(), 3);
        let svg = fs::read_to_string(dir.path().join("report.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1 + 5);
        assert!(svg.contains(FROZEN_TIMESTAMP));
        let csv = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 5 * run.trace.dates().len());
        let back = PredictionTrace::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(back, run.trace);
    }
}
