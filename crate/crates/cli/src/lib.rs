//! The `wipcast` command line: one subcommand per pipeline stage, each reading
//! and writing plain files under the output directory.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use wipcast_core::config::{ChatConfig, ConfigError, PipelineConfig};
use wipcast_core::eval::{self, EvalError, ReportHeader};
use wipcast_core::eventlog::{self, EventLogError, LogFormat};
use wipcast_core::llm::{ChatBackend, LoggingBackend, RemoteChatConfig};
use wipcast_core::memory::{FlatIndex, MemoryError, ProcessMemory};
use wipcast_core::narrative::{self, Granularity, NarrativeError, StoryKind};
use wipcast_core::wipseries::{build_wip_series, fill_gaps, WipError, WipSeries};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("the event log contains no usable events")]
    EmptyLog,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    EventLog(EventLogError),
    #[error(transparent)]
    Wip(WipError),
    #[error(transparent)]
    Narrative(#[from] NarrativeError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
}

impl From<EventLogError> for CliError {
    fn from(e: EventLogError) -> Self {
        match e {
            EventLogError::Empty { .. } => CliError::EmptyLog,
            other => CliError::EventLog(other),
        }
    }
}

impl From<WipError> for CliError {
    fn from(e: WipError) -> Self {
        match e {
            WipError::EmptyLog | WipError::NoCases => CliError::EmptyLog,
            other => CliError::Wip(other),
        }
    }
}

impl CliError {
    /// 2: unreadable or unwritable path; 3: empty log; 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 2,
            CliError::Config(ConfigError::Io { .. }) => 2,
            CliError::EventLog(EventLogError::Io(_)) => 2,
            CliError::Wip(WipError::Io(_)) => 2,
            CliError::EmptyLog => 3,
            _ => 1,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Stub,
    Remote,
}

#[derive(Debug, Parser)]
#[command(name = "wipcast", version, about = "Forecast daily work-in-progress from process event logs")]
pub struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Chat backend (overrides the configuration).
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Write fixed timestamps so repeated runs produce identical files.
    #[arg(long, global = true)]
    pub freeze_timestamps: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse an event log and write the daily WiP series (wip.csv).
    Ingest(IngestArgs),
    /// Render query and contextual stories (stories_<granularity>.jsonl).
    Stories(SeriesArgs),
    /// Embed contextual stories into per-granularity index snapshots.
    Index(IndexArgs),
    /// Forecast the day after one day of the series.
    Forecast(ForecastArgs),
    /// Walk-forward evaluation with ablations and the persistence baseline.
    Evaluate(EvaluateArgs),
    /// Redraw report.svg from predictions.csv.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Event log (.xes, .csv, optionally .gz); defaults to `input.path`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<LogFormat>,
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    /// WiP series CSV; defaults to <out>/wip.csv.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Directory holding stories_<granularity>.jsonl; defaults to <out>.
    #[arg(long)]
    pub stories_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Current day; the forecast is for the day after. Defaults to the last day.
    #[arg(long)]
    pub date: Option<NaiveDate>,
    /// Use index snapshots from this directory instead of rebuilding memory.
    #[arg(long)]
    pub index_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Last training day (overrides the configuration).
    #[arg(long)]
    pub split_date: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Defaults to <out>/predictions.csv.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

/// Resolved global state shared by the subcommands.
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self, CliError> {
        let mut config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        match cli.backend {
            Some(BackendChoice::Stub) => config.chat = ChatConfig::Stub,
            Some(BackendChoice::Remote) if config.chat == ChatConfig::Stub => {
                config.chat = ChatConfig::Remote(RemoteChatConfig::default())
            }
            _ => {}
        }
        if cli.freeze_timestamps {
            config.output.freeze_timestamps = true;
        }
        let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
        fs::create_dir_all(&out).map_err(io_at(&out))?;
        Ok(Context { config, out })
    }

    fn series_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("wip.csv"))
    }

    fn load_series(&self, given: &Option<PathBuf>) -> Result<WipSeries, CliError> {
        let path = self.series_path(given);
        let file = File::open(&path).map_err(io_at(&path))?;
        let mut series = WipSeries::read_csv(BufReader::new(file))?;
        series.timezone = self.config.series.timezone;
        series.lifecycle = self.config.series.lifecycle.clone();
        Ok(series)
    }

    /// Chat backend with every exchange appended to <out>/prompts.jsonl.
    fn backend(&self) -> Result<Box<dyn ChatBackend>, CliError> {
        let path = self.out.join("prompts.jsonl");
        let logged = LoggingBackend::new(self.config.chat.backend(), &path, self.config.output.freeze_timestamps)
            .map_err(io_at(&path))?;
        Ok(Box::new(logged))
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(io_at(&path))?;
        Ok((path, BufWriter::new(f)))
    }
}

fn stories_file(g: Granularity) -> String {
    format!("stories_{g}.jsonl")
}

fn index_file(g: Granularity) -> String {
    format!("index_{g}.jsonl")
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = Context::from_cli(cli)?;
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::Stories(a) => cmd_stories(&ctx, a),
        Command::Index(a) => cmd_index(&ctx, a),
        Command::Forecast(a) => cmd_forecast(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Plot(a) => cmd_plot(&ctx, a),
    }
}

pub fn cmd_ingest(ctx: &Context, args: &IngestArgs) -> Result<(), CliError> {
    let input = args
        .input
        .clone()
        .or_else(|| ctx.config.input.path.clone())
        .ok_or_else(|| CliError::Usage("no input log given (use --input or input.path)".into()))?;
    if !input.is_file() {
        return Err(CliError::Io {
            path: input,
            source: io::Error::new(io::ErrorKind::NotFound, "no such file"),
        });
    }
    let format = args.format.or(ctx.config.input.format);
    let log = eventlog::read_log_file(&input, format, &ctx.config.input.mapping)?;
    let report = eventlog::validate(&log);
    let s = &ctx.config.series;
    let series = fill_gaps(
        &build_wip_series(&log, &s.lifecycle, s.gap_policy, s.timezone)?,
        s.gap_policy,
    )?;
    let (path, mut w) = ctx.create("wip.csv")?;
    series.write_csv(&mut w)?;
    w.flush().map_err(io_at(&path))?;
    eprintln!(
        "ingested {} events from {} cases ({} diagnostics); wrote {} days to {}",
        report.event_count,
        report.case_count,
        log.diagnostics.len() + series.diagnostics.len(),
        series.len(),
        path.display()
    );
    Ok(())
}

pub fn cmd_stories(ctx: &Context, args: &SeriesArgs) -> Result<(), CliError> {
    let series = ctx.load_series(&args.series)?;
    for g in Granularity::ALL {
        let stories = narrative::render_series(&series, g, ctx.config.predictor.window);
        let (path, mut w) = ctx.create(&stories_file(g))?;
        narrative::write_jsonl(&stories, &mut w)?;
        w.flush().map_err(io_at(&path))?;
        let contextual = stories.iter().filter(|s| s.kind == StoryKind::Contextual).count();
        eprintln!("{g}: {} stories ({contextual} contextual) -> {}", stories.len(), path.display());
    }
    Ok(())
}

pub fn cmd_index(ctx: &Context, args: &IndexArgs) -> Result<(), CliError> {
    let dir = args.stories_dir.clone().unwrap_or_else(|| ctx.out.clone());
    let provider = ctx.config.embedding.provider();
    for g in Granularity::ALL {
        let path = dir.join(stories_file(g));
        let file = File::open(&path).map_err(io_at(&path))?;
        let contextual: Vec<_> = narrative::read_jsonl(BufReader::new(file))?
            .into_iter()
            .filter(|s| s.kind == StoryKind::Contextual)
            .collect();
        let mut memory = ProcessMemory::new(g, provider.clone(), ctx.config.retention.clone());
        memory.add_stories(contextual)?;
        let (out, mut w) = ctx.create(&index_file(g))?;
        memory.index.write_snapshot(&mut w)?;
        w.flush().map_err(io_at(&out))?;
        eprintln!("{g}: indexed {} stories -> {}", memory.len(), out.display());
    }
    Ok(())
}

pub fn cmd_forecast(ctx: &Context, args: &ForecastArgs) -> Result<(), CliError> {
    let series = ctx.load_series(&args.series)?;
    let current = args
        .date
        .or(series.last_date())
        .ok_or_else(|| CliError::Usage("the series is empty".into()))?;
    let settings = ctx.config.eval_settings();
    let backend = ctx.backend()?;
    let provider = ctx.config.embedding.provider();
    let report = match &args.index_dir {
        Some(dir) => {
            let mut memories = Vec::with_capacity(3);
            for g in Granularity::ALL {
                let path = dir.join(index_file(g));
                let file = File::open(&path).map_err(io_at(&path))?;
                let index = FlatIndex::read_snapshot(BufReader::new(file))?;
                memories.push(ProcessMemory::new(g, provider.clone(), settings.retention.clone()).with_index(index));
            }
            let memories: [ProcessMemory; 3] = memories.try_into().unwrap_or_else(|_| unreachable!());
            eval::forecast_with_memories(&series, current, &memories, &settings, &backend)?
        }
        None => eval::forecast_next(&series, current, &settings, provider, &backend)?,
    };
    let log_path = ctx.out.join("forecast_log.jsonl");
    append_jsonl(&log_path, &[report.log_line()])?;
    let summary = serde_json::json!({
        "date": report.date,
        "final": report.final_value,
        "mode": report.mode,
        "trend": report.trend,
        "rationale": report.rationale,
        "predictions": report.agent_predictions.iter().map(|p| serde_json::json!({
            "agent": p.agent_id,
            "value": p.value,
            "prompt_ref": p.prompt_ref,
            "retrieved": p.retrieved.iter().map(|r| serde_json::json!({
                "doc_id": r.document.doc_id,
                "similarity": r.similarity,
                "target": r.document.story.target,
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(io_at(Path::new("<stdout>"))(e)),
        _ => Ok(()),
    }
}

fn append_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("row serializes");
        w.write_all(b"\n").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

pub fn cmd_evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<(), CliError> {
    let series = ctx.load_series(&args.series)?;
    let split = args.split_date.or(ctx.config.eval.split_date);
    let backend = ctx.backend()?;
    let run = eval::rolling_forecast(
        &series,
        split,
        &ctx.config.eval_settings(),
        ctx.config.embedding.provider(),
        &backend,
    )?;
    let header = ReportHeader::new(Some(run.split_date), ctx.config.output.freeze_timestamps);
    let files = eval::emit_report(&run.trace, &ctx.out, &header)?;

    let (log_path, mut w) = ctx.create("run_log.jsonl")?;
    for r in &run.reports {
        serde_json::to_writer(&mut w, &r.log_line()).expect("row serializes");
        w.write_all(b"\n").map_err(io_at(&log_path))?;
    }
    w.flush().map_err(io_at(&log_path))?;

    for m in eval::summarize(&run.trace)? {
        eprintln!(
            "{:<14} MAPE {:>8.3}%  MAE {:>9.3}  n={} skipped={}",
            m.source.as_str(),
            m.mape,
            m.mae,
            m.n,
            m.skipped_zero_actuals
        );
    }
    if !run.skipped_days.is_empty() {
        eprintln!("{} test days skipped (missing history)", run.skipped_days.len());
    }
    for f in files.iter().chain([&log_path]) {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

pub fn cmd_plot(ctx: &Context, args: &PlotArgs) -> Result<(), CliError> {
    let path = args.predictions.clone().unwrap_or_else(|| ctx.out.join("predictions.csv"));
    let file = File::open(&path).map_err(io_at(&path))?;
    let trace = eval::PredictionTrace::read_csv(BufReader::new(file))?;
    let header = ReportHeader::new(ctx.config.eval.split_date, ctx.config.output.freeze_timestamps);
    let out = ctx.out.join("report.svg");
    fs::write(&out, eval::render_svg(&trace, &header)).map_err(io_at(&out))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
