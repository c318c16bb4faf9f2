//! Predictor agents, the trend analyst and the fusion agent.
//!
//! Each predictor owns one granularity: it renders the current query story,
//! retrieves similar contextual stories from its own memory, prompts the chat
//! backend and reads back a next-day close. The trend analyst compares simple
//! moving averages at both ends of a short lookback. The fusion agent combines
//! the three predictions either with fixed per-trend weights (`rules`) or by
//! letting the backend drive a small tool loop (`react`) with a rules fallback.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{Duration, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{
    extract_prediction, AgentValue, ChatBackend, ChatRequest, Decoding, LlmError, RetrievedExample,
    StructuredContext, PREDICTION_MARKER,
};
use crate::memory::{MemoryError, ProcessMemory, RetrievalResult, DEFAULT_TOP_K};
use crate::narrative::{format_number, query_story_at, Granularity, DEFAULT_WINDOW};
use crate::wipseries::WipSeries;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no prediction from the {0} agent")]
    MissingPrediction(AgentId),
    #[error("more than one prediction from the {0} agent")]
    DuplicatePrediction(AgentId),
    #[error("{0} is not in the history")]
    UnknownDay(NaiveDate),
    #[error("the {agent} agent needs {needed} consecutive days of history ending at {date}")]
    InsufficientHistory {
        agent: AgentId,
        needed: usize,
        date: NaiveDate,
    },
    #[error("trend analysis needs at least one close value")]
    EmptyTrendInput,
    #[error("memory granularity {got} does not match the {agent} agent")]
    WrongMemory { agent: AgentId, got: Granularity },
    #[error("unknown agent '{0}'")]
    UnknownAgent(String),
    #[error("unknown fusion mode '{0}'")]
    UnknownMode(String),
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentId {
    Daily,
    Weekday,
    Windowed,
}

impl AgentId {
    pub const ALL: [AgentId; 3] = [AgentId::Daily, AgentId::Weekday, AgentId::Windowed];

    pub fn granularity(self) -> Granularity {
        match self {
            AgentId::Daily => Granularity::Daily,
            AgentId::Weekday => Granularity::Weekday,
            AgentId::Windowed => Granularity::Windowed,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.granularity().as_str()
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentId {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().trim_matches(|c| c == '"' || c == '\'');
        AgentId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| AgentError::UnknownAgent(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub agent_id: AgentId,
    /// The day being forecast (the day after the current day).
    pub date: NaiveDate,
    pub value: f64,
    pub retrieved: Vec<RetrievalResult>,
    pub prompt_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub k: usize,
    pub window: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            k: DEFAULT_TOP_K,
            window: DEFAULT_WINDOW,
        }
    }
}

const PREDICTOR_SYSTEM: &str = "You forecast the next day's Work-in-Progress (WiP) level of a business process. \
You are given a description of the current state and similar past situations together with the WiP level that followed each of them. \
Reason about the examples, then finish with a single line of the form 'PREDICTION: <number>'.";

fn predictor_prompt(query: &str, retrieved: &[RetrievalResult], forecast_date: NaiveDate) -> String {
    let mut out = format!("Current situation:\n{query}\n\nSimilar past situations and the WiP that followed:\n");
    if retrieved.is_empty() {
        out.push_str("No historical examples available.\n");
    }
    for (i, r) in retrieved.iter().enumerate() {
        out.push_str(&format!(
            "{}. [{} | similarity {:.4}] {}\n",
            i + 1,
            r.document.story.date,
            r.similarity,
            r.document.story.text
        ));
    }
    out.push_str(&format!(
        "\nPredict the WiP level at the close of {forecast_date}. End with '{PREDICTION_MARKER} <number>'."
    ));
    out
}

/// Runs one predictor for the day after `current_date`.
///
/// `history` must contain `current_date`; the windowed agent additionally needs
/// `window` consecutive days ending there.
pub fn predictor_predict(
    agent_id: AgentId,
    current_date: NaiveDate,
    history: &WipSeries,
    memory: &ProcessMemory,
    backend: &dyn ChatBackend,
    cfg: &PredictorConfig,
) -> Result<Prediction, AgentError> {
    if memory.granularity != agent_id.granularity() {
        return Err(AgentError::WrongMemory {
            agent: agent_id,
            got: memory.granularity,
        });
    }
    let pos = history.position(current_date).ok_or(AgentError::UnknownDay(current_date))?;
    let current = history.events[pos];
    let query = query_story_at(history, pos, agent_id.granularity(), cfg.window).ok_or(
        AgentError::InsufficientHistory {
            agent: agent_id,
            needed: cfg.window,
            date: current_date,
        },
    )?;
    let forecast_date = current_date + Duration::days(1);
    // stories dated current_date or later have targets at or beyond the forecast day
    let retrieved = memory.retrieve(&query, current_date, cfg.k)?;
    let examples = retrieved
        .iter()
        .map(|r| RetrievedExample {
            date: r.document.story.date,
            target: r.document.story.target.unwrap_or_default(),
            similarity: r.similarity,
        })
        .collect();
    let req = ChatRequest {
        system_text: PREDICTOR_SYSTEM.to_string(),
        user_text: predictor_prompt(&query.text, &retrieved, forecast_date),
        structured_context: Some(StructuredContext::Predictor {
            agent: agent_id,
            current_close: current.close as f64,
            retrieved: examples,
        }),
        decoding: Decoding::default(),
    };
    let resp = backend.chat(&req)?;
    let value = extract_prediction(&resp.text)?.max(0.0);
    Ok(Prediction {
        agent_id,
        date: forecast_date,
        value,
        retrieved,
        prompt_ref: req.prompt_ref(),
    })
}

/// Runs the three predictors concurrently. `memories` is indexed by agent
/// (daily, weekday, windowed).
pub fn predict_all(
    current_date: NaiveDate,
    history: &WipSeries,
    memories: &[ProcessMemory; 3],
    backend: &dyn ChatBackend,
    cfg: &PredictorConfig,
) -> Result<[Prediction; 3], AgentError> {
    let results: Vec<Result<Prediction, AgentError>> = std::thread::scope(|s| {
        let handles: Vec<_> = AgentId::ALL
            .iter()
            .map(|&agent| {
                let memory = &memories[agent.slot()];
                s.spawn(move || predictor_predict(agent, current_date, history, memory, backend, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("predictor thread panicked"))
            .collect()
    });
    let mut it = results.into_iter();
    Ok([
        it.next().expect("three results")?,
        it.next().expect("three results")?,
        it.next().expect("three results")?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendLabel {
    IncreasingSignificantly,
    Increasing,
    Stable,
    Decreasing,
    DecreasingSignificantly,
}

impl TrendLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrendLabel::IncreasingSignificantly => "increasing_significantly",
            TrendLabel::Increasing => "increasing",
            TrendLabel::Stable => "stable",
            TrendLabel::Decreasing => "decreasing",
            TrendLabel::DecreasingSignificantly => "decreasing_significantly",
        }
    }

    pub fn sentence(self) -> &'static str {
        match self {
            TrendLabel::IncreasingSignificantly => "WiP has been increasing significantly.",
            TrendLabel::Increasing => "WiP has been increasing.",
            TrendLabel::Stable => "WiP has been relatively stable.",
            TrendLabel::Decreasing => "WiP has been decreasing.",
            TrendLabel::DecreasingSignificantly => "WiP has been decreasing significantly.",
        }
    }
}

impl fmt::Display for TrendLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendConfig {
    pub window: usize,
    pub lookback: usize,
    /// |change| below this is stable.
    pub stable_threshold: f64,
    /// |change| at or above this is significant.
    pub significant_threshold: f64,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            window: 7,
            lookback: 14,
            stable_threshold: 0.01,
            significant_threshold: 0.05,
        }
    }
}

impl TrendConfig {
    /// Half-open bands: `|rc| < stable` is stable, `[stable, significant)` is a
    /// plain move, `>= significant` is significant; negative side mirrored.
    pub fn classify(&self, relative_change: f64) -> TrendLabel {
        let rc = relative_change;
        if rc >= self.significant_threshold {
            TrendLabel::IncreasingSignificantly
        } else if rc >= self.stable_threshold {
            TrendLabel::Increasing
        } else if rc <= -self.significant_threshold {
            TrendLabel::DecreasingSignificantly
        } else if rc <= -self.stable_threshold {
            TrendLabel::Decreasing
        } else {
            TrendLabel::Stable
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendInsight {
    pub label: TrendLabel,
    pub sma_first: f64,
    pub sma_last: f64,
    pub relative_change: f64,
    pub text: String,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Compares the SMA of the earliest and the latest `window` closes within the
/// trailing `lookback` values. With fewer than `window + 1` values there are
/// not two distinct SMA points and the result is stable with a note.
pub fn trend_analyze(closes: &[f64], cfg: &TrendConfig) -> Result<TrendInsight, AgentError> {
    if closes.is_empty() {
        return Err(AgentError::EmptyTrendInput);
    }
    let lookback = cfg.lookback.max(cfg.window);
    let span = &closes[closes.len().saturating_sub(lookback)..];
    let w = cfg.window.max(1);
    if span.len() < w + 1 {
        let m = mean(span);
        return Ok(TrendInsight {
            label: TrendLabel::Stable,
            sma_first: m,
            sma_last: m,
            relative_change: 0.0,
            text: format!(
                "{} (only {} days of history; not enough for a {w}-day comparison)",
                TrendLabel::Stable.sentence(),
                span.len()
            ),
        });
    }
    let sma_first = mean(&span[..w]);
    let sma_last = mean(&span[span.len() - w..]);
    let relative_change = (sma_last - sma_first) / sma_first.max(1e-9);
    let label = cfg.classify(relative_change);
    Ok(TrendInsight {
        label,
        sma_first,
        sma_last,
        relative_change,
        text: label.sentence().to_string(),
    })
}

/// Per-trend weights in (daily, weekday, windowed) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWeights {
    pub stable: [f64; 3],
    pub moderate: [f64; 3],
    pub significant: [f64; 3],
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            stable: [0.2, 0.2, 0.6],
            moderate: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            significant: [0.6, 0.2, 0.2],
        }
    }
}

impl FusionWeights {
    pub fn for_label(&self, label: TrendLabel) -> [f64; 3] {
        match label {
            TrendLabel::Stable => self.stable,
            TrendLabel::Increasing | TrendLabel::Decreasing => self.moderate,
            TrendLabel::IncreasingSignificantly | TrendLabel::DecreasingSignificantly => self.significant,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        for (name, w) in [("stable", self.stable), ("moderate", self.moderate), ("significant", self.significant)] {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(AgentError::InvalidWeights(format!("{name} weights must be non-negative")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(AgentError::InvalidWeights(format!("{name} weights sum to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// Convex combination of agent values. Computed as an offset from the minimum
/// and clamped, so consensus inputs come back unchanged and the result never
/// leaves `[min, max]` through rounding.
pub fn combine(weights: [f64; 3], values: &[(AgentId, f64)]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = values.iter().map(|(a, _)| weights[a.slot()]).sum();
    if total <= 0.0 {
        return lo;
    }
    let offset: f64 = values.iter().map(|(a, v)| weights[a.slot()] * (v - lo)).sum::<f64>() / total;
    (lo + offset).clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Rules,
    React,
}

impl FromStr for FusionMode {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rules" => Ok(FusionMode::Rules),
            "react" => Ok(FusionMode::React),
            other => Err(AgentError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Rules => "rules",
            FusionMode::React => "react",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub weights: FusionWeights,
    pub max_steps: u32,
    /// Retrieval depth for the fusion agent's `retrieve` tool.
    pub k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Rules,
            weights: FusionWeights::default(),
            max_steps: 4,
            k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub date: NaiveDate,
    pub final_value: f64,
    pub agent_predictions: Vec<Prediction>,
    pub trend: TrendInsight,
    /// The mode that produced `final_value` (react falls back to rules).
    pub mode: FusionMode,
    pub rationale: String,
}

/// One row of the per-day forecast run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastLogLine {
    pub date: NaiveDate,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub mode: FusionMode,
    pub daily: f64,
    pub weekday: f64,
    pub windowed: f64,
    pub trend_label: TrendLabel,
    pub rationale: String,
}

impl ForecastReport {
    pub fn value_of(&self, agent: AgentId) -> Option<f64> {
        self.agent_predictions.iter().find(|p| p.agent_id == agent).map(|p| p.value)
    }

    pub fn log_line(&self) -> ForecastLogLine {
        let v = |a| self.value_of(a).unwrap_or(f64::NAN);
        ForecastLogLine {
            date: self.date,
            final_value: self.final_value,
            mode: self.mode,
            daily: v(AgentId::Daily),
            weekday: v(AgentId::Weekday),
            windowed: v(AgentId::Windowed),
            trend_label: self.trend.label,
            rationale: self.rationale.clone(),
        }
    }
}

fn ordered_values(preds: &[Prediction]) -> Result<Vec<(AgentId, f64)>, AgentError> {
    let mut seen = [false; 3];
    for p in preds {
        if std::mem::replace(&mut seen[p.agent_id.slot()], true) {
            return Err(AgentError::DuplicatePrediction(p.agent_id));
        }
    }
    AgentId::ALL
        .iter()
        .map(|&a| {
            preds
                .iter()
                .find(|p| p.agent_id == a)
                .map(|p| (a, p.value))
                .ok_or(AgentError::MissingPrediction(a))
        })
        .collect()
}

fn rules_rationale(weights: [f64; 3], trend: &TrendInsight, final_value: f64) -> String {
    format!(
        "Trend {} ({}); weights daily={:.3}, weekday={:.3}, windowed={:.3}; final {}.",
        trend.label,
        trend.text,
        weights[0],
        weights[1],
        weights[2],
        format_number((final_value * 1e6).round() / 1e6)
    )
}

const FUSION_SYSTEM: &str = "You are the fusion agent of a WiP forecasting team. Three predictor agents \
(daily, weekday, windowed) have produced next-day forecasts. Available tools:\n\
- get_prediction(agent_id): forecast of one predictor (daily | weekday | windowed)\n\
- get_trend(): recent trend assessment from the trend analyst\n\
- retrieve(story_text): similar past daily stories with their outcomes\n\
Respond with exactly one of: a line 'ACTION: <tool>(<argument>)', or a final line 'PREDICTION: <number>'. \
Favor the windowed agent in stable periods and the daily agent during rapid shifts.";

fn action_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"ACTION:\s*([a-z_]+)\s*\((.*)\)").expect("action regex"))
}

struct ReactOutcome {
    value: Option<f64>,
    transcript: Vec<String>,
    note: String,
}

fn run_react(
    preds: &[Prediction],
    values: &[(AgentId, f64)],
    trend: &TrendInsight,
    memory: Option<&ProcessMemory>,
    backend: &dyn ChatBackend,
    cfg: &FusionConfig,
    date: NaiveDate,
) -> ReactOutcome {
    let header = format!(
        "Forecast date: {date}.\nPredictor outputs: {}.",
        values
            .iter()
            .map(|(a, v)| format!("{a}={}", format_number(*v)))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let mut transcript: Vec<String> = Vec::new();
    let mut known_trend = None;
    for step in 0..cfg.max_steps {
        let req = ChatRequest {
            system_text: FUSION_SYSTEM.to_string(),
            user_text: std::iter::once(header.clone())
                .chain(transcript.iter().cloned())
                .collect::<Vec<_>>()
                .join("\n"),
            structured_context: Some(StructuredContext::Fusion {
                predictions: values.iter().map(|&(agent, value)| AgentValue { agent, value }).collect(),
                trend: known_trend,
                weights: cfg.weights.clone(),
            }),
            decoding: Decoding {
                deterministic: true,
                max_steps: cfg.max_steps,
            },
        };
        let text = match backend.chat(&req) {
            Ok(r) => r.text,
            Err(e) => {
                return ReactOutcome {
                    value: None,
                    transcript,
                    note: format!("backend unavailable at step {} ({e})", step + 1),
                }
            }
        };
        if !text.contains(PREDICTION_MARKER) {
            if let Some(c) = action_regex().captures(&text) {
                let (tool, arg) = (c[1].to_string(), c[2].trim().to_string());
                let observation = match tool.as_str() {
                    "get_prediction" => match arg.parse::<AgentId>() {
                        Ok(a) => preds
                            .iter()
                            .find(|p| p.agent_id == a)
                            .map(|p| format!("{a} predicts {}", format_number(p.value)))
                            .unwrap_or_else(|| format!("no prediction from {a}")),
                        Err(e) => e.to_string(),
                    },
                    "get_trend" => {
                        known_trend = Some(trend.label);
                        format!("{} (label: {})", trend.text, trend.label)
                    }
                    "retrieve" => match memory {
                        Some(m) => match m.retrieve_text(arg.trim_matches('"'), date - Duration::days(1), cfg.k) {
                            Ok(hits) if hits.is_empty() => "no earlier stories".to_string(),
                            Ok(hits) => hits
                                .iter()
                                .map(|h| {
                                    format!(
                                        "{} -> next WiP {} (similarity {:.3})",
                                        h.document.story.date,
                                        format_number(h.document.story.target.unwrap_or_default()),
                                        h.similarity
                                    )
                                })
                                .collect::<Vec<_>>()
                                .join("; "),
                            Err(e) => format!("retrieval failed: {e}"),
                        },
                        None => "process memory unavailable".to_string(),
                    },
                    other => format!("unknown tool '{other}'"),
                };
                transcript.push(format!("ACTION: {tool}({arg})"));
                transcript.push(format!("OBSERVATION: {observation}"));
                continue;
            }
        }
        return match extract_prediction(&text) {
            Ok(v) => ReactOutcome {
                value: Some(v),
                transcript,
                note: format!("answered after {} step(s)", step + 1),
            },
            Err(_) => ReactOutcome {
                value: None,
                transcript,
                note: "final answer contained no number".into(),
            },
        };
    }
    ReactOutcome {
        value: None,
        transcript,
        note: format!("step budget of {} exhausted", cfg.max_steps),
    }
}

/// Combines the three predictions into the final forecast.
pub fn fuse(
    preds: &[Prediction],
    trend: &TrendInsight,
    memory: Option<&ProcessMemory>,
    backend: &dyn ChatBackend,
    cfg: &FusionConfig,
) -> Result<ForecastReport, AgentError> {
    let values = ordered_values(preds)?;
    let date = preds[0].date;
    let weights = cfg.weights.for_label(trend.label);
    let rules_value = combine(weights, &values);
    let report = |final_value, mode, rationale| ForecastReport {
        date,
        final_value,
        agent_predictions: preds.to_vec(),
        trend: trend.clone(),
        mode,
        rationale,
    };
    if cfg.mode == FusionMode::Rules {
        return Ok(report(rules_value, FusionMode::Rules, rules_rationale(weights, trend, rules_value)));
    }

    let outcome = run_react(preds, &values, trend, memory, backend, cfg, date);
    let lo = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let margin = (0.1 * (hi - lo)).max(1.0);
    let steps = if outcome.transcript.is_empty() {
        String::new()
    } else {
        format!(" Tool trace: {}", outcome.transcript.join(" | "))
    };
    match outcome.value {
        Some(v) if v >= lo - margin && v <= hi + margin => Ok(report(
            v,
            FusionMode::React,
            format!("ReAct fusion {}; trend {}.{steps}", outcome.note, trend.label),
        )),
        Some(v) => Ok(report(
            rules_value,
            FusionMode::Rules,
            format!(
                "ReAct answer {} outside [{}, {}]; overridden by rules. {}{steps}",
                format_number(v),
                format_number(lo - margin),
                format_number(hi + margin),
                rules_rationale(weights, trend, rules_value)
            ),
        )),
        None => Ok(report(
            rules_value,
            FusionMode::Rules,
            format!(
                "ReAct fallback: {}. {}{steps}",
                outcome.note,
                rules_rationale(weights, trend, rules_value)
            ),
        )),
    }
}
