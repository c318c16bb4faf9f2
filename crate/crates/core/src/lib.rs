//! Work-in-progress forecasting for business processes.
//!
//! The pipeline turns an event log into a daily WiP series, narrates each day
//! as text, indexes the narratives in per-granularity vector memories, and
//! forecasts the next day's WiP with three retrieval-backed predictor agents
//! whose outputs a fusion agent combines using a trend signal.

pub mod agents;
pub mod config;
pub mod eval;
pub mod eventlog;
pub mod llm;
pub mod memory;
pub mod narrative;
pub mod wipseries;

pub use agents::{
    combine, fuse, predict_all, predictor_predict, trend_analyze, AgentError, AgentId, ForecastReport, FusionConfig,
    FusionMode, FusionWeights, Prediction, PredictorConfig, TrendConfig, TrendInsight, TrendLabel,
};
pub use config::{ChatConfig, EmbeddingConfig, PipelineConfig};
pub use eval::{
    emit_report, forecast_next, forecast_with_memories, mae, mape, persistence_baseline, rolling_forecast, EvalRun, EvalSettings,
    MetricsSummary, PredictionTrace, ReportHeader, Source, TraceEntry,
};
pub use eventlog::{parse_csv, parse_xes, read_log_file, ColumnMapping, Event, EventLog, LogFormat};
pub use llm::{extract_prediction, ChatBackend, ChatRequest, ChatResponse, LoggingBackend, RemoteBackend, StubBackend};
pub use memory::{cosine, EmbeddingProvider, EmbeddingVector, FlatIndex, HashingEmbedder, ProcessMemory, Retention};
pub use narrative::{render_contextual_story, render_query_story, render_windowed_story, Granularity, Story, StoryKind};
pub use wipseries::{build_wip_series, fill_gaps, GapPolicy, LifecycleConfig, WipEvent, WipSeries};
