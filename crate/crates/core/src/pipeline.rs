//! End-to-end commands: run, analyze, report and validate.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, SimulatedClock, WallClock};
use crate::config::{ConfigError, ExperimentConfig, ModelConfig, SandboxConfig};
use crate::corpus::{load_corpus, select_fewshot_exemplars, Corpus, CorpusError};
use crate::gateway::{
    ChatRequest, Endpoint, Gateway, GenerationConfig, HttpEndpoint, InteractionTrace, MockEndpoint, MockError,
    RequestKey, TokenStats, TraceError, WordPieceEstimate,
};
use crate::meter::{append_log, read_log, BatchLabel, BatchMeasurement, EnergyMeter, LogError, MeterError};
use crate::metrics::{score_rows, MetricRow};
use crate::report::{
    aggregate, consolidate, emit_plot_data, emit_summary, pair_stem, parse_summary_csv, write_coverage_records,
    CoverageRecord, Figure, ReportContext, ReportError, SqMode, SummaryFormat,
};
use crate::sandbox::{CoverageOutcome, MemoSandbox, RecordedSandbox, Sandbox, SandboxError, ShimSandbox};
use crate::strategy::{
    extract_test_script, render_plan, Message, Role, StrategyError, StrategyId, TemplateError, TemplateSet,
};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Meter(#[from] MeterError),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error("sandbox setup: {0}")]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already holds batch logs; pass --resume to continue that run")]
    ExistingOutput(PathBuf),
    #[error("{0}: no batch logs found")]
    NoLogs(PathBuf),
}

impl PipelineError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Corpus(_)
            | PipelineError::Template(_)
            | PipelineError::Mock(_)
            | PipelineError::ExistingOutput(_)
            | PipelineError::Meter(MeterError::Config(_)) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a run puts its artifacts.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn coverage(&self) -> PathBuf {
        self.root.join("coverage")
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }
    pub fn log_file(&self, model: &str, s: StrategyId) -> PathBuf {
        self.logs().join(format!("{}.csv", pair_stem(model, s)))
    }
    pub fn coverage_file(&self, model: &str, s: StrategyId) -> PathBuf {
        self.coverage().join(format!("{}.jsonl", pair_stem(model, s)))
    }
    pub fn trace_file(&self, model: &str, s: StrategyId) -> PathBuf {
        self.traces().join(format!("{}.jsonl", pair_stem(model, s)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus_tasks: usize,
    pub executions_per_pair: u64,
    pub corpus_wrapped: bool,
    pub templates: String,
    pub template_version: String,
    pub sandbox: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceLine {
    model: String,
    batch_id: u32,
    execution: u32,
    #[serde(flatten)]
    trace: InteractionTrace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairFailure {
    pub model: String,
    pub strategy: StrategyId,
    pub batch_id: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub run_id: String,
    pub batches_written: usize,
    pub batches_skipped: usize,
    pub records_written: usize,
    pub corpus_wrapped: bool,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Error)]
enum BatchError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sandbox: {0}")]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Meter(#[from] MeterError),
}

struct BatchOutput {
    measurement: BatchMeasurement,
    records: Vec<CoverageRecord>,
    traces: Vec<TraceLine>,
}

fn build_endpoint(
    m: &ModelConfig,
    cfg: &ExperimentConfig,
    clock: &SharedClock,
) -> Result<Box<dyn Endpoint>, PipelineError> {
    if let Some(table) = &m.mock_table {
        let mut ep = MockEndpoint::load(m.name.clone(), table, clock.clone())?;
        if let Some(tps) = m.tokens_per_second {
            ep = ep.with_speed(tps)?;
        }
        return Ok(Box::new(ep));
    }
    let url = m.url.clone().expect("validated: url or mock_table");
    let api_key = m.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
    Ok(Box::new(HttpEndpoint::new(
        m.name.clone(),
        url,
        m.served_model.clone().unwrap_or_else(|| m.name.clone()),
        api_key,
        Duration::from_secs_f64(cfg.request_timeout_s),
    )))
}

fn build_sandbox(cfg: &ExperimentConfig) -> Result<Box<dyn Sandbox>, PipelineError> {
    Ok(match &cfg.sandbox {
        SandboxConfig::Recorded { table } => Box::new(RecordedSandbox::load(table)?),
        SandboxConfig::Shim { command, timeout_s } => {
            let mut s = ShimSandbox::new(command.clone(), *timeout_s);
            s.run_challenge_tests = cfg.run_challenge_tests;
            Box::new(s)
        }
    })
}

fn load_templates(cfg: &ExperimentConfig) -> Result<TemplateSet, PipelineError> {
    let t = match &cfg.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    t.check()?;
    Ok(t)
}

fn template_source(t: &TemplateSet) -> String {
    t.source
        .as_ref()
        .map_or_else(|| "builtin".to_string(), |p| p.display().to_string())
}

fn make_clock(cfg: &ExperimentConfig) -> SharedClock {
    if cfg.meter.is_simulated() {
        Arc::new(SimulatedClock::new())
    } else {
        Arc::new(WallClock::new())
    }
}

fn make_gateway(cfg: &ExperimentConfig, clock: SharedClock) -> Gateway {
    let tokenizer: Option<Arc<dyn crate::gateway::Tokenizer>> = match cfg.tokenizer.as_str() {
        "none" => None,
        _ => Some(Arc::new(WordPieceEstimate)),
    };
    Gateway::new(clock)
        .with_tokenizer(tokenizer)
        .with_retry(cfg.retry.policy())
}

/// Keeps only JSONL lines whose `batch_id` is in `keep`; returns lines dropped.
fn retain_batches(path: &Path, keep: &BTreeSet<u32>) -> Result<usize, PipelineError> {
    if !path.exists() {
        return Ok(0);
    }
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = String::new();
    let mut dropped = 0;
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let batch = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("batch_id").and_then(|b| b.as_u64()));
        if batch.is_some_and(|b| keep.contains(&(b as u32))) {
            out.push_str(line);
            out.push('\n');
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        fs::write(path, out).map_err(io_err(path))?;
    }
    Ok(dropped)
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    use std::io::Write;
    let mut buf = String::new();
    for i in items {
        buf.push_str(&serde_json::to_string(i).expect("serializes"));
        buf.push('\n');
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(buf.as_bytes()).map_err(io_err(path))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    run_id: String,
    corpus: Corpus,
    templates: TemplateSet,
    meter: EnergyMeter,
    gateway: Gateway,
}

impl Runner<'_> {
    fn run_batch(
        &self,
        endpoint: &dyn Endpoint,
        strategy: StrategyId,
        batch_id: u32,
        sandbox: &dyn Sandbox,
    ) -> Result<BatchOutput, BatchError> {
        let cfg = self.cfg;
        let model = endpoint.id().to_string();
        let session = self.meter.open_session(BatchLabel {
            run_id: self.run_id.clone(),
            batch_id,
            model: model.clone(),
            strategy,
        })?;
        let mut tokens = TokenStats::default();
        let mut records = Vec::new();
        let mut traces = Vec::new();
        let work = (|| -> Result<(), BatchError> {
            for execution in 0..cfg.batch_size {
                let index = u64::from(batch_id) * u64::from(cfg.batch_size) + u64::from(execution);
                let task = self.corpus.task_for_execution(index);
                let exemplars = if strategy == StrategyId::Fewshot {
                    select_fewshot_exemplars(&self.corpus.tasks, cfg.strategy.fewshot_k, task.task_id, cfg.seed)?
                } else {
                    Vec::new()
                };
                let plan = render_plan(strategy, task, &exemplars, &cfg.strategy, &self.templates)?;
                let trace = self
                    .gateway
                    .run_trace(&plan, task, &cfg.generation, endpoint, sandbox)?;
                let outcome = match &trace.selected_script {
                    Some(script) => sandbox.execute(task, strategy, script)?,
                    None => CoverageOutcome::no_script(task.task_id),
                };
                tokens.merge(&trace.token_stats);
                records.push(CoverageRecord {
                    model: model.clone(),
                    strategy,
                    batch_id,
                    execution,
                    outcome,
                });
                traces.push(TraceLine {
                    model: model.clone(),
                    batch_id,
                    execution,
                    trace,
                });
            }
            Ok(())
        })();
        if let Err(e) = work {
            session.abort();
            return Err(e);
        }
        let measurement = session.close(tokens, cfg.batch_size)?;
        Ok(BatchOutput {
            measurement,
            records,
            traces,
        })
    }
}

/// Runs every (model, strategy) pair. A pair whose endpoint or sandbox fails
/// is abandoned after discarding the failing batch; other pairs continue.
pub fn run(cfg: &ExperimentConfig, resume: bool) -> Result<RunReport, PipelineError> {
    let layout = RunLayout {
        root: cfg.output_dir.clone(),
    };
    let clock = make_clock(cfg);
    let corpus = load_corpus(&cfg.corpus, None)?;
    if cfg.strategies.contains(&StrategyId::Fewshot) && cfg.strategy.fewshot_k >= corpus.len() {
        return Err(CorpusError::TooManyExemplars {
            k: cfg.strategy.fewshot_k,
            size: corpus.len(),
        }
        .into());
    }
    let templates = load_templates(cfg)?;
    let meter = EnergyMeter::new(cfg.meter.clone(), clock.clone())?;
    let endpoints = cfg
        .models
        .iter()
        .map(|m| build_endpoint(m, cfg, &clock))
        .collect::<Result<Vec<_>, _>>()?;
    let sandbox = build_sandbox(cfg)?;

    // Refuse to mix runs before touching anything.
    if !resume {
        for m in &cfg.models {
            for &s in &cfg.strategies {
                let p = layout.log_file(&m.name, s);
                if fs::metadata(&p).is_ok_and(|md| md.len() > 0) {
                    return Err(PipelineError::ExistingOutput(p));
                }
            }
        }
    }
    for d in [layout.logs(), layout.coverage(), layout.traces()] {
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }

    let run_id = cfg.run_id();
    let corpus_wrapped = cfg.executions_per_pair() > corpus.len() as u64;
    if corpus_wrapped {
        log::warn!(
            "{} executions per pair exceed the {} corpus tasks; tasks repeat",
            cfg.executions_per_pair(),
            corpus.len()
        );
    }
    let manifest = RunManifest {
        run_id: run_id.clone(),
        corpus_tasks: corpus.len(),
        executions_per_pair: cfg.executions_per_pair(),
        corpus_wrapped,
        templates: template_source(&templates),
        template_version: templates.version.clone(),
        sandbox: sandbox.describe(),
        config: cfg.clone(),
    };
    let manifest_path = layout.root.join(MANIFEST_FILE);
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .map_err(io_err(&manifest_path))?;

    let runner = Runner {
        cfg,
        run_id: run_id.clone(),
        corpus,
        templates,
        meter,
        gateway: make_gateway(cfg, clock),
    };
    let mut report = RunReport {
        run_id,
        corpus_wrapped,
        ..Default::default()
    };

    for endpoint in &endpoints {
        for &strategy in &cfg.strategies {
            let model = endpoint.id();
            let log_path = layout.log_file(model, strategy);
            let cov_path = layout.coverage_file(model, strategy);
            let trace_path = layout.trace_file(model, strategy);
            let done: BTreeSet<u32> = if log_path.exists() {
                read_log(&log_path)?.into_iter().map(|m| m.batch_id).collect()
            } else {
                BTreeSet::new()
            };
            // Records from a batch that never reached the log are stale.
            let stale = retain_batches(&cov_path, &done)? + retain_batches(&trace_path, &done)?;
            if stale > 0 {
                log::info!("{model}/{strategy}: dropped {stale} stale line(s) from an interrupted batch");
            }
            let memo = MemoSandbox::new(sandbox.as_ref());
            for batch_id in 0..cfg.n_batches {
                if done.contains(&batch_id) {
                    report.batches_skipped += 1;
                    continue;
                }
                match runner.run_batch(endpoint.as_ref(), strategy, batch_id, &memo) {
                    Ok(out) => {
                        write_coverage_records(&cov_path, &out.records)?;
                        append_lines(&trace_path, &out.traces)?;
                        let rows = append_log(&out.measurement, &log_path)?;
                        report.batches_written += 1;
                        report.records_written += out.records.len();
                        log::info!(
                            "{model}/{strategy}: batch {batch_id} done ({rows}/{} rows, {:.3} s)",
                            cfg.n_batches,
                            out.measurement.duration
                        );
                    }
                    Err(e) => {
                        log::error!("{model}/{strategy}: batch {batch_id} discarded, pair aborted: {e}");
                        report.failures.push(PairFailure {
                            model: model.to_string(),
                            strategy,
                            batch_id,
                            error: e.to_string(),
                        });
                        break;
                    }
                }
            }
        }
    }
    Ok(report)
}

fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|e| e == ext) && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub alphas: Vec<f64>,
    pub mode: SqMode,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub rows: Vec<MetricRow>,
    pub written: Vec<PathBuf>,
    pub table: String,
    pub dataset_digest: String,
}

fn write_plots(dir: &Path, rows: &[MetricRow], figure: Figure) -> Result<Vec<PathBuf>, PipelineError> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    let mut written = Vec::new();
    for f in emit_plot_data(rows, figure) {
        let p = plots.join(&f.name);
        fs::write(&p, f.content).map_err(io_err(&p))?;
        written.push(p);
    }
    Ok(written)
}

/// Consolidates logs and coverage, writes `summary.csv`, `summary.txt` and
/// every plot series.
pub fn analyze(logs_dir: &Path, coverage_dir: &Path, opts: &AnalyzeOptions) -> Result<AnalyzeReport, PipelineError> {
    let logs = list_files(logs_dir, "csv")?;
    if logs.is_empty() {
        return Err(PipelineError::NoLogs(logs_dir.to_path_buf()));
    }
    let coverage = if coverage_dir.is_dir() {
        list_files(coverage_dir, "jsonl")?
    } else {
        log::warn!("{}: no coverage directory; Q will be absent", coverage_dir.display());
        Vec::new()
    };
    let ds = consolidate(&logs, &coverage)?;
    let aggs = aggregate(&ds)?;
    let rows = score_rows(&aggs, &opts.alphas).map_err(ReportError::from)?;
    let mut ctx = ReportContext::from_dataset(&ds);
    let manifest = logs_dir.parent().map(|p| p.join(MANIFEST_FILE));
    if let Some(m) = manifest.filter(|m| m.is_file()) {
        if let Ok(man) = serde_json::from_str::<RunManifest>(&fs::read_to_string(&m).map_err(io_err(&m))?) {
            ctx.corpus_wrapped = Some(man.corpus_wrapped);
        }
    }
    let csv = emit_summary(&rows, SummaryFormat::Csv, opts.mode, &ctx)?;
    let table = emit_summary(&rows, SummaryFormat::Table, opts.mode, &ctx)?;
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let mut written = Vec::new();
    for (name, body) in [("summary.csv", &csv), ("summary.txt", &table)] {
        let p = opts.out_dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
        written.push(p);
    }
    for f in Figure::ALL {
        written.extend(write_plots(&opts.out_dir, &rows, f)?);
    }
    Ok(AnalyzeReport {
        rows,
        written,
        table,
        dataset_digest: ds.digest(),
    })
}

/// Rewrites one figure's series from a summary directory.
pub fn report_figure(in_dir: &Path, figure: Figure) -> Result<Vec<PathBuf>, PipelineError> {
    let p = in_dir.join("summary.csv");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let rows = parse_summary_csv(&text)?;
    write_plots(in_dir, &rows, figure)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub component: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Readiness {
    pub checks: Vec<Check>,
}

impl Readiness {
    fn push(&mut self, component: impl Into<String>, result: Result<String, String>) -> bool {
        let ok = result.is_ok();
        let detail = match result {
            Ok(d) | Err(d) => d,
        };
        self.checks.push(Check {
            component: component.into(),
            ok,
            detail,
        });
        ok
    }

    pub fn ready(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn render(&self) -> String {
        let w = self.checks.iter().map(|c| c.component.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<w$}  {}  {}\n",
                c.component,
                if c.ok { "ok  " } else { "FAIL" },
                c.detail
            ));
        }
        out
    }
}

/// Checks that a run could start, without writing anything.
pub fn validate(config_path: &Path) -> Readiness {
    let mut r = Readiness::default();
    let cfg = match ExperimentConfig::load(config_path) {
        Ok(c) => {
            r.push(
                "config",
                Ok(format!("{} (run id {})", config_path.display(), c.run_id())),
            );
            c
        }
        Err(e) => {
            r.push("config", Err(e.to_string()));
            return r;
        }
    };
    let clock = make_clock(&cfg);
    let corpus = match load_corpus(&cfg.corpus, None) {
        Ok(c) => {
            let wrap = if cfg.executions_per_pair() > c.len() as u64 {
                ", executions wrap around"
            } else {
                ""
            };
            r.push("corpus", Ok(format!("{} tasks{wrap}", c.len())));
            Some(c)
        }
        Err(e) => {
            r.push("corpus", Err(e.to_string()));
            None
        }
    };
    let templates = match load_templates(&cfg) {
        Ok(t) => Some(t),
        Err(e) => {
            r.push("templates", Err(e.to_string()));
            None
        }
    };
    if let (Some(corpus), Some(t)) = (&corpus, &templates) {
        let task = &corpus.tasks[0];
        let mut failures = Vec::new();
        for &s in &cfg.strategies {
            let ex = if s == StrategyId::Fewshot {
                match select_fewshot_exemplars(&corpus.tasks, cfg.strategy.fewshot_k, task.task_id, cfg.seed) {
                    Ok(ex) => ex,
                    Err(e) => {
                        failures.push(format!("{s}: {e}"));
                        continue;
                    }
                }
            } else {
                Vec::new()
            };
            if let Err(e) = render_plan(s, task, &ex, &cfg.strategy, t) {
                failures.push(format!("{s}: {e}"));
            }
        }
        let res = if failures.is_empty() {
            Ok(format!(
                "{} (version {}), {} strategies render",
                template_source(t),
                t.version,
                cfg.strategies.len()
            ))
        } else {
            Err(failures.join("; "))
        };
        r.push("templates", res);
    }
    for m in &cfg.models {
        let res = build_endpoint(m, &cfg, &clock)
            .map_err(|e| e.to_string())
            .and_then(|ep| {
                let probe_cfg = GenerationConfig {
                    max_new_tokens: 1,
                    ..cfg.generation.clone()
                };
                let msgs = [Message::new(Role::User, "ping")];
                let key = RequestKey {
                    task_id: corpus.as_ref().map_or(1, |c| c.tasks[0].task_id),
                    strategy: cfg.strategies[0],
                    turn: 0,
                    sample: 0,
                };
                ep.send(&ChatRequest {
                    messages: &msgs,
                    config: &probe_cfg,
                    seed: None,
                    key,
                })
                .map(|_| {
                    if m.is_mock() {
                        "mock table answers".to_string()
                    } else {
                        "endpoint answers".to_string()
                    }
                })
                .map_err(|e| e.to_string())
            });
        r.push(format!("endpoint {}", m.name), res);
    }
    let meter = EnergyMeter::new(cfg.meter.clone(), clock.clone()).and_then(|m| {
        m.probe()?;
        let (c, g) = m.backend_labels();
        Ok(format!("cpu={c} gpu={g}"))
    });
    r.push("meter", meter.map_err(|e| e.to_string()));
    let sandbox = build_sandbox(&cfg).map_err(|e| e.to_string()).and_then(|s| {
        if let SandboxConfig::Shim { command, timeout_s } = &cfg.sandbox {
            ShimSandbox::new(command.clone(), *timeout_s)
                .probe()
                .map_err(|e| e.to_string())?;
        }
        Ok(s.describe())
    });
    r.push("sandbox", sandbox);
    r
}

/// Extracts the script an execution would be scored on; exposed for tools
/// that re-score stored traces.
pub fn scored_script(trace: &InteractionTrace) -> Option<String> {
    trace
        .selected_completion
        .and_then(|i| trace.completions.get(i))
        .and_then(|c| extract_test_script(&c.result.text))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
    }

    fn config(out: &Path, mock: &Path, strategies: &str) -> ExperimentConfig {
        let raw = format!(
            r#"
corpus = {corpus:?}
output_dir = {out:?}
batch_size = 2
n_batches = 3
strategies = [{strategies}]
[strategy]
sc_samples = 3
[[models]]
name = "mock-coder"
mock_table = {mock:?}
tokens_per_second = 40.0
[meter.cpu]
kind = "simulated"
watts = 45.0
[meter.gpu]
kind = "simulated"
watts = 120.0
[sandbox]
kind = "recorded"
table = {cov:?}
"#,
            corpus = data("corpus.jsonl"),
            cov = data("recorded_coverage.jsonl"),
        );
        ExperimentConfig::parse(Path::new("t.toml"), &raw, Path::new("/"), |_| None).unwrap()
    }

    fn strip_timestamps(dir: &Path) -> String {
        let mut out = String::new();
        for sub in ["logs", "coverage", "traces"] {
            for f in list_files(&dir.join(sub), if sub == "logs" { "csv" } else { "jsonl" }).unwrap() {
                out.push_str(&f.file_name().unwrap().to_string_lossy());
                for line in fs::read_to_string(&f).unwrap().lines() {
                    let line = if sub == "logs" {
                        line.split_once(',').unwrap().1
                    } else {
                        line
                    };
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        out + &fs::read_to_string(dir.join(MANIFEST_FILE))
            .unwrap()
            .replace(&dir.display().to_string(), "")
    }

    #[test]
    fn reruns_are_identical_apart_from_timestamps() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let all = r#""ZEROSHOT","SC_COT","REACT""#;
        let cfg_a = config(a.path(), &data("mock_responses.jsonl"), all);
        let cfg_b = config(b.path(), &data("mock_responses.jsonl"), all);
        let ra = run(&cfg_a, false).unwrap();
        run(&cfg_b, false).unwrap();
        assert_eq!((ra.batches_written, ra.records_written), (9, 18));
        assert!(ra.failures.is_empty());
        assert_eq!(strip_timestamps(a.path()), strip_timestamps(b.path()));
    }

    #[test]
    fn existing_logs_need_resume_and_resume_drops_stale_lines() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), &data("mock_responses.jsonl"), r#""COT""#);
        run(&cfg, false).unwrap();
        let err = run(&cfg, false).unwrap_err();
        assert!(matches!(err, PipelineError::ExistingOutput(_)));
        assert_eq!(err.exit_code(), 1);

        // Simulate a crash inside batch 2 after its coverage lines landed.
        let layout = RunLayout {
            root: dir.path().into(),
        };
        let log = layout.log_file("mock-coder", StrategyId::Cot);
        let text = fs::read_to_string(&log).unwrap();
        let kept: Vec<&str> = text.lines().take(3).collect();
        fs::write(&log, kept.join("\n") + "\n").unwrap();
        let before = fs::read_to_string(layout.coverage_file("mock-coder", StrategyId::Cot)).unwrap();

        let r = run(&cfg, true).unwrap();
        assert_eq!((r.batches_skipped, r.batches_written), (2, 1));
        let after = fs::read_to_string(layout.coverage_file("mock-coder", StrategyId::Cot)).unwrap();
        assert_eq!(before.lines().count(), after.lines().count());
        assert_eq!(read_log(&log).unwrap().len(), 3);
    }

    #[test]
    fn failing_pair_is_abandoned_and_others_finish() {
        let dir = tempfile::tempdir().unwrap();
        let mock = dir.path().join("mock.jsonl");
        fs::write(
            &mock,
            "{\"strategy\":\"ZEROSHOT\",\"text\":\"```python\\nassert True\\n```\"}\n",
        )
        .unwrap();
        let cfg = config(&dir.path().join("out"), &mock, r#""COT","ZEROSHOT""#);
        let r = run(&cfg, false).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!((r.failures[0].strategy, r.failures[0].batch_id), (StrategyId::Cot, 0));
        let layout = RunLayout {
            root: dir.path().join("out"),
        };
        assert!(!layout.log_file("mock-coder", StrategyId::Cot).exists());
        assert_eq!(
            read_log(&layout.log_file("mock-coder", StrategyId::Zeroshot))
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn analyze_then_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), &data("mock_responses.jsonl"), r#""ZEROSHOT","FEWSHOT""#);
        run(&cfg, false).unwrap();
        let out = dir.path().join("analysis");
        let opts = AnalyzeOptions {
            alphas: vec![1.0, 2.0],
            mode: SqMode::Both,
            out_dir: out.clone(),
        };
        let rep = analyze(&dir.path().join("logs"), &dir.path().join("coverage"), &opts).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.table.contains("0.98"));
        fs::remove_dir_all(out.join("plots")).unwrap();
        let files = report_figure(&out, Figure::Per1k).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files.iter().all(|f| f.exists()));
    }

    #[test]
    fn validate_reports_each_component() {
        let dir = tempfile::tempdir().unwrap();
        let r = validate(&dir.path().join("missing.toml"));
        assert!(!r.ready());
        assert_eq!(r.checks.len(), 1);
        let r = validate(&data("desk.toml"));
        assert!(r.ready(), "{}", r.render());
        let names: Vec<_> = r.checks.iter().map(|c| c.component.as_str()).collect();
        assert_eq!(
            names,
            [
                "config",
                "corpus",
                "templates",
                "endpoint mock-coder",
                "meter",
                "sandbox"
            ]
        );
    }
}
