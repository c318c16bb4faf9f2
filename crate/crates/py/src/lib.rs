//! Python bindings: event-log parsing, WiP series construction, story
//! rendering, embeddings, trend analysis, fusion and evaluation metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::NaiveDate;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wipcast_core::agents::{self, AgentId, FusionMode, TrendConfig, TrendLabel};
use wipcast_core::eval::{self, EvalSettings, PredictionTrace};
use wipcast_core::eventlog::{self, ColumnMapping, LogFormat};
use wipcast_core::llm::{self, StubBackend};
use wipcast_core::memory::{self, EmbeddingProvider, EmbeddingVector, HashingEmbedder};
use wipcast_core::narrative::{self, Granularity};
use wipcast_core::wipseries::{self, GapPolicy, LifecycleConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_date(s: &str) -> PyResult<NaiveDate> {
    s.parse().map_err(value_err)
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

/// An event log loaded from XES or CSV.
#[pyclass(name = "EventLog", module = "wipcast")]
pub struct PyEventLog {
    inner: eventlog::EventLog,
}

#[pymethods]
impl PyEventLog {
    /// Reads `.xes`, `.csv` or their `.gz` variants.
    #[staticmethod]
    #[pyo3(signature = (path, format=None, case_id="case", activity="activity", timestamp="timestamp", timezone="UTC"))]
    fn read(
        path: PathBuf,
        format: Option<&str>,
        case_id: &str,
        activity: &str,
        timestamp: &str,
        timezone: &str,
    ) -> PyResult<Self> {
        let mut mapping = ColumnMapping::new(case_id, activity, timestamp);
        mapping.timezone = parse(timezone)?;
        let format = format.map(parse::<LogFormat>).transpose()?;
        let inner = eventlog::read_log_file(&path, format, &mapping).map_err(|e| match e {
            eventlog::EventLogError::Io(io) => io_err(io),
            other => value_err(other),
        })?;
        Ok(PyEventLog { inner })
    }

    /// Parses XES text.
    #[staticmethod]
    fn from_xes(text: &str) -> PyResult<Self> {
        let inner = eventlog::parse_xes(text.as_bytes(), "<string>").map_err(value_err)?;
        Ok(PyEventLog { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn case_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.events.iter().map(|e| e.case_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// (case_id, activity, RFC 3339 timestamp) per event, in time order.
    fn events(&self) -> Vec<(String, String, String)> {
        self.inner
            .events
            .iter()
            .map(|e| (e.case_id.clone(), e.activity.clone(), eventlog::format_timestamp(&e.timestamp)))
            .collect()
    }

    #[pyo3(signature = (gap_policy="carry", timezone="UTC"))]
    fn wip_series(&self, gap_policy: &str, timezone: &str) -> PyResult<PyWipSeries> {
        let policy: GapPolicy = parse(gap_policy)?;
        let series = wipseries::build_wip_series(&self.inner, &LifecycleConfig::default(), policy, parse(timezone)?)
            .map_err(value_err)?;
        Ok(PyWipSeries { inner: series })
    }
}

/// One day of the WiP series.
#[pyclass(name = "WipEvent", module = "wipcast", skip_from_py_object)]
#[derive(Clone)]
pub struct PyWipEvent {
    inner: wipseries::WipEvent,
}

#[pymethods]
impl PyWipEvent {
    #[new]
    #[pyo3(signature = (date, open, high, low, close, new=0, done=0, started=0))]
    #[allow(clippy::too_many_arguments)]
    fn py_new(
        date: &str,
        open: u64,
        high: u64,
        low: u64,
        close: u64,
        new: u64,
        done: u64,
        started: u64,
    ) -> PyResult<Self> {
        let inner = wipseries::WipEvent::on(parse_date(date)?)
            .with_ohlc(open, high, low, close)
            .with_counts(new, done, started);
        inner.check().map_err(value_err)?;
        Ok(PyWipEvent { inner })
    }

    #[getter]
    fn date(&self) -> String {
        self.inner.date.to_string()
    }
    #[getter]
    fn open(&self) -> u64 {
        self.inner.open
    }
    #[getter]
    fn high(&self) -> u64 {
        self.inner.high
    }
    #[getter]
    fn low(&self) -> u64 {
        self.inner.low
    }
    #[getter]
    fn close(&self) -> u64 {
        self.inner.close
    }
    #[getter(new)]
    fn new_items(&self) -> u64 {
        self.inner.new
    }
    #[getter]
    fn done(&self) -> u64 {
        self.inner.done
    }
    #[getter]
    fn started(&self) -> u64 {
        self.inner.started
    }
    #[getter]
    fn weekday(&self) -> &'static str {
        self.inner.weekday_name()
    }

    /// The query sentence at `daily` or `weekday` granularity.
    #[pyo3(signature = (granularity="daily"))]
    fn query_story(&self, granularity: &str) -> PyResult<String> {
        let story = narrative::render_query_story(&self.inner, parse(granularity)?).map_err(value_err)?;
        Ok(story.text)
    }

    #[pyo3(signature = (next_close, granularity="daily"))]
    fn contextual_story(&self, next_close: f64, granularity: &str) -> PyResult<String> {
        let story =
            narrative::render_contextual_story(&self.inner, next_close, parse(granularity)?).map_err(value_err)?;
        Ok(story.text)
    }

    fn __repr__(&self) -> String {
        let e = &self.inner;
        format!(
            "WipEvent(date='{}', open={}, high={}, low={}, close={}, new={}, done={}, started={})",
            e.date, e.open, e.high, e.low, e.close, e.new, e.done, e.started
        )
    }
}

/// A daily WiP series.
/// (date, kind, text, target)
type StoryRow = (String, String, String, Option<f64>);

#[pyclass(name = "WipSeries", module = "wipcast")]
pub struct PyWipSeries {
    inner: wipseries::WipSeries,
}

#[pymethods]
impl PyWipSeries {
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let file = File::open(&path).map_err(io_err)?;
        let inner = wipseries::WipSeries::read_csv(BufReader::new(file)).map_err(value_err)?;
        Ok(PyWipSeries { inner })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = File::create(&path).map_err(io_err)?;
        self.inner.write_csv(BufWriter::new(file)).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: isize) -> PyResult<PyWipEvent> {
        let n = self.inner.len() as isize;
        let idx = if i < 0 { i + n } else { i };
        if !(0..n).contains(&idx) {
            return Err(pyo3::exceptions::PyIndexError::new_err("day index out of range"));
        }
        Ok(PyWipEvent {
            inner: self.inner.events[idx as usize],
        })
    }

    fn closes(&self) -> Vec<f64> {
        self.inner.closes()
    }

    fn dates(&self) -> Vec<String> {
        self.inner.events.iter().map(|e| e.date.to_string()).collect()
    }

    /// Every story at one granularity as (date, kind, text, target).
    #[pyo3(signature = (granularity="daily", window=7))]
    fn stories(&self, granularity: &str, window: usize) -> PyResult<Vec<StoryRow>> {
        let g: Granularity = parse(granularity)?;
        Ok(narrative::render_series(&self.inner, g, window)
            .into_iter()
            .map(|s| {
                let kind = match s.kind {
                    narrative::StoryKind::Query => "query",
                    narrative::StoryKind::Contextual => "contextual",
                };
                (s.date.to_string(), kind.to_string(), s.text, s.target)
            })
            .collect())
    }

    /// Walk-forward evaluation with the deterministic stub backend. Returns
    /// `{"split_date", "metrics": [...], "entries": [...]}`.
    #[pyo3(signature = (split_date=None, mode="rules"))]
    fn evaluate<'py>(&self, py: Python<'py>, split_date: Option<&str>, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        let mut settings = EvalSettings::default();
        settings.fusion.mode = parse::<FusionMode>(mode)?;
        let split = split_date.map(parse_date).transpose()?;
        let run = eval::rolling_forecast(
            &self.inner,
            split,
            &settings,
            Arc::new(HashingEmbedder::default()),
            &StubBackend,
        )
        .map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("split_date", run.split_date.to_string())?;
        out.set_item("metrics", metrics_rows(py, &run.trace)?)?;
        let entries: Vec<(String, String, f64, f64)> = run
            .trace
            .entries
            .iter()
            .map(|e| (e.date.to_string(), e.source.to_string(), e.actual, e.predicted))
            .collect();
        out.set_item("entries", entries)?;
        Ok(out)
    }

    /// Persistence-baseline MAPE and MAE over the test days.
    #[pyo3(signature = (split_date=None))]
    fn persistence<'py>(&self, py: Python<'py>, split_date: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let split = split_date.map(parse_date).transpose()?;
        let trace = eval::persistence_baseline(&self.inner, split).map_err(value_err)?;
        metrics_rows(py, &trace)
    }
}

fn metrics_rows<'py>(py: Python<'py>, trace: &PredictionTrace) -> PyResult<Vec<Bound<'py, PyDict>>> {
    eval::summarize(trace)
        .map_err(value_err)?
        .into_iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("source", m.source.to_string())?;
            d.set_item("mape", m.mape)?;
            d.set_item("mae", m.mae)?;
            d.set_item("n", m.n)?;
            d.set_item("skipped_zero_actuals", m.skipped_zero_actuals)?;
            Ok(d)
        })
        .collect()
}

/// The deterministic character-trigram plus numeric embedder.
#[pyfunction]
fn embed(text: &str) -> PyResult<Vec<f64>> {
    let v = HashingEmbedder::default().embed(text).map_err(value_err)?;
    Ok(v.0)
}

#[pyfunction]
fn cosine(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    let u = EmbeddingVector::new(u).map_err(value_err)?;
    let v = EmbeddingVector::new(v).map_err(value_err)?;
    memory::cosine(&u, &v).map_err(value_err)
}

/// Returns `{"label", "sma_first", "sma_last", "relative_change", "text"}`.
#[pyfunction]
#[pyo3(signature = (closes, window=7, lookback=14))]
fn trend_analyze<'py>(py: Python<'py>, closes: Vec<f64>, window: usize, lookback: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrendConfig {
        window,
        lookback,
        ..Default::default()
    };
    let t = agents::trend_analyze(&closes, &cfg).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("label", t.label.as_str())?;
    d.set_item("sma_first", t.sma_first)?;
    d.set_item("sma_last", t.sma_last)?;
    d.set_item("relative_change", t.relative_change)?;
    d.set_item("text", t.text)?;
    Ok(d)
}

/// Rules-mode fusion of the three agent values under a trend label.
#[pyfunction]
fn fuse(daily: f64, weekday: f64, windowed: f64, trend_label: &str) -> PyResult<f64> {
    let label: TrendLabel = serde_label(trend_label)?;
    let weights = agents::FusionWeights::default().for_label(label);
    Ok(agents::combine(
        weights,
        &[(AgentId::Daily, daily), (AgentId::Weekday, weekday), (AgentId::Windowed, windowed)],
    ))
}

fn serde_label(s: &str) -> PyResult<TrendLabel> {
    [
        TrendLabel::IncreasingSignificantly,
        TrendLabel::Increasing,
        TrendLabel::Stable,
        TrendLabel::Decreasing,
        TrendLabel::DecreasingSignificantly,
    ]
    .into_iter()
    .find(|l| l.as_str() == s)
    .ok_or_else(|| value_err(format!("unknown trend label '{s}'")))
}

/// Returns `(mape_percent, skipped_zero_actuals)`.
#[pyfunction]
fn mape(actual: Vec<f64>, predicted: Vec<f64>) -> PyResult<(f64, usize)> {
    let m = eval::mape(&actual, &predicted).map_err(value_err)?;
    Ok((m.mape, m.skipped_zero_actuals))
}

#[pyfunction]
fn mae(actual: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    eval::mae(&actual, &predicted).map_err(value_err)
}

#[pyfunction]
fn extract_prediction(text: &str) -> PyResult<f64> {
    llm::extract_prediction(text).map_err(value_err)
}

#[pymodule]
fn wipcast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEventLog>()?;
    m.add_class::<PyWipEvent>()?;
    m.add_class::<PyWipSeries>()?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(trend_analyze, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(mape, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(extract_prediction, m)?)?;
    Ok(())
}
