//! End-to-end tuning sessions and their JSON reports.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nelder_mead::NmConfig;
use crate::objective::{EvalCache, Evaluation, ScoreSource, Status};
use crate::runner::{CommandEcho, CommandSource, CommandTemplate};
use crate::space::{Point, SearchSpace};
use crate::strategies::{drive, StopReason, StrategyHandle, StrategyKind};
use crate::synthetic::{Preset, SyntheticModel, SyntheticSource};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no evaluation succeeded ({} distinct points tried)", .0.distinct_points_evaluated)]
    NoSuccessfulEvaluation(Box<SessionReport>),
    #[error("baseline point {point} failed with status {status}")]
    BaselineFailed { point: Point, status: Status },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed report {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("report {path} has schema version {found}, expected {expected}")]
    SchemaVersion { path: PathBuf, found: u64, expected: u32 },
}

impl SessionError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            SessionError::ConfigInvalid(_) => 2,
            SessionError::NoSuccessfulEvaluation(_) | SessionError::BaselineFailed { .. } => 3,
            SessionError::Io { .. } | SessionError::Schema { .. } | SessionError::SchemaVersion { .. } => 4,
        }
    }
}

/// Where scores come from.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    Command(CommandTemplate),
    Synthetic { preset: Preset, model: SyntheticModel },
}

impl SourceSpec {
    pub fn synthetic(preset: Preset) -> Self {
        SourceSpec::Synthetic {
            preset,
            model: SyntheticModel::default(),
        }
    }

    fn echo(&self) -> SourceEcho {
        match self {
            SourceSpec::Command(t) => SourceEcho::Command(t.into()),
            SourceSpec::Synthetic { preset, model } => SourceEcho::Synthetic {
                preset: *preset,
                model: model.clone(),
            },
        }
    }

    fn build(&self, space: &SearchSpace) -> Result<Box<dyn ScoreSource>, SessionError> {
        let invalid = |e: &dyn std::fmt::Display| SessionError::ConfigInvalid(e.to_string());
        Ok(match self {
            SourceSpec::Command(t) => Box::new(CommandSource::new(t.clone(), space).map_err(|e| invalid(&e))?),
            SourceSpec::Synthetic { preset, model } => Box::new(
                SyntheticSource::new(model.clone(), space)
                    .map_err(|e| invalid(&e))?
                    .with_label(format!("synthetic:{}", preset.name())),
            ),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub space: SearchSpace,
    pub strategy: StrategyHandle,
    pub source: SourceSpec,
    /// Cap on distinct evaluations; defaults to the space size.
    pub max_distinct_evals: Option<u64>,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Optional JSON-lines log appended after every evaluation.
    pub trace_log: Option<PathBuf>,
    pub baseline: Option<Point>,
}

impl SessionConfig {
    pub fn new(space: SearchSpace, strategy: StrategyKind, source: SourceSpec) -> Self {
        Self {
            space,
            strategy: StrategyHandle::new(strategy),
            source,
            max_distinct_evals: None,
            seed: 0,
            output: None,
            trace_log: None,
            baseline: None,
        }
    }

    /// Synthetic preset with its own space.
    pub fn synthetic(preset: Preset, strategy: StrategyKind) -> Self {
        Self::new(preset.space(), strategy, SourceSpec::synthetic(preset))
    }

    pub fn budget(&self) -> u64 {
        self.max_distinct_evals.unwrap_or_else(|| self.space.size())
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let invalid = |msg: String| Err(SessionError::ConfigInvalid(msg));
        self.space.validate().or_else(|e| invalid(e.to_string()))?;
        if self.budget() == 0 {
            return invalid("--max-evals must be at least 1".into());
        }
        if let Some(b) = &self.baseline {
            if !self.space.contains(b) {
                return invalid(format!("baseline {b} is not a grid point of the search space"));
            }
        }
        if self.strategy.kind == StrategyKind::Nm {
            let n = self.space.dims() as u64;
            let budget = self.budget();
            if self.space.size() > n && budget < n + 1 {
                return invalid(format!(
                    "nm needs at least {} evaluations for its initial simplex, budget is {budget}",
                    n + 1
                ));
            }
            if let Some(nm) = &self.strategy.nm {
                nm.validate(self.space.dims()).or_else(|e| invalid(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceEcho {
    Command(CommandEcho),
    Synthetic { preset: Preset, model: SyntheticModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub params: SearchSpace,
    pub strategy: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nm: Option<NmConfig>,
    pub source: SourceEcho,
    pub max_distinct_evals: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResult {
    pub point: Point,
    pub raw_score: f64,
    pub sequence_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub point: Point,
    pub raw_score: f64,
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ConfigEcho,
    pub evaluations: Vec<Evaluation>,
    pub best: Option<BestResult>,
    pub space_size: u64,
    pub distinct_points_evaluated: u64,
    pub efficiency_ratio: f64,
    pub convergence_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineComparison>,
    pub total_wall_time_ms: u64,
}

impl SessionReport {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.total_wall_time_ms = 0;
        r.evaluations.iter_mut().for_each(|e| e.duration_ms = 0);
        r
    }
}

/// `100 * (best - baseline) / baseline`.
pub fn improvement_pct(best: f64, baseline: f64) -> f64 {
    100.0 * (best - baseline) / baseline
}

/// Scores `baseline` (through the cache) and compares the report's best to it.
pub fn compare_to_baseline<S: ScoreSource + ?Sized>(
    report: &SessionReport,
    baseline: &Point,
    cache: &mut EvalCache,
    source: &mut S,
) -> Result<BaselineComparison, SessionError> {
    let eval = cache.evaluate(source, baseline);
    let base = match (eval.status, eval.raw_score) {
        (Status::Ok, Some(s)) => s,
        _ => {
            return Err(SessionError::BaselineFailed {
                point: baseline.clone(),
                status: eval.status,
            })
        }
    };
    let best = report.best.as_ref().map(|b| b.raw_score).ok_or_else(|| SessionError::BaselineFailed {
        point: baseline.clone(),
        status: Status::RunFailed,
    })?;
    Ok(BaselineComparison {
        point: baseline.clone(),
        raw_score: base,
        improvement_pct: improvement_pct(best, base),
    })
}

/// Appends one JSON object per line, flushed after every evaluation.
struct TraceLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceLog {
    fn create(path: &Path) -> Result<Self, SessionError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| SessionError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn append(&mut self, eval: &Evaluation) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, eval)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Runs the configured strategy to completion and assembles the report.
pub fn run_session(config: &SessionConfig) -> Result<SessionReport, SessionError> {
    config.validate()?;
    let started = Instant::now();
    let space = &config.space;
    let mut source = config.source.build(space)?;
    let budget = config.budget();
    let mut strategy = config.strategy.build(space, budget, config.seed);
    let mut trace_log = config.trace_log.as_deref().map(TraceLog::create).transpose()?;
    let mut log_error = None;

    let mut cache = EvalCache::new();
    let outcome = drive(strategy.as_mut(), space, &mut cache, source.as_mut(), |eval| {
        if let Some(log) = trace_log.as_mut() {
            if let Err(e) = log.append(eval) {
                log_error.get_or_insert((log.path.clone(), e));
            }
        }
    })
    .map_err(|e| SessionError::ConfigInvalid(e.to_string()))?;
    if let Some((path, source)) = log_error {
        return Err(SessionError::Io { path, source });
    }

    let size = space.size();
    let distinct = outcome.distinct as u64;
    let mut report = SessionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config: ConfigEcho {
            params: space.clone(),
            strategy: config.strategy.kind,
            nm: config.strategy.nm.clone(),
            source: config.source.echo(),
            max_distinct_evals: budget,
            seed: config.seed,
        },
        best: outcome.best.as_ref().map(|b| BestResult {
            point: b.point.clone(),
            raw_score: b.raw_score.expect("ok evaluations carry a score"),
            sequence_index: b.sequence_index,
        }),
        evaluations: outcome.trace,
        space_size: size,
        distinct_points_evaluated: distinct,
        efficiency_ratio: distinct as f64 / size as f64,
        convergence_reason: outcome.reason,
        baseline: None,
        total_wall_time_ms: 0,
    };
    if report.best.is_none() {
        report.total_wall_time_ms = started.elapsed().as_millis() as u64;
        return Err(SessionError::NoSuccessfulEvaluation(Box::new(report)));
    }
    if let Some(baseline) = &config.baseline {
        report.baseline = Some(compare_to_baseline(&report, baseline, &mut cache, source.as_mut())?);
    }
    report.total_wall_time_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

pub fn write_report(report: &SessionReport, path: &Path) -> Result<(), SessionError> {
    let io_err = |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = serde_json::to_string_pretty(report).map_err(|e| io_err(e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err)
}

pub fn read_report(path: &Path) -> Result<SessionReport, SessionError> {
    let text = std::fs::read_to_string(path).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_report(&text).map_err(|e| match e {
        ReportParseError::Malformed(message) => SessionError::Schema {
            path: path.to_path_buf(),
            message,
        },
        ReportParseError::Version(found) => SessionError::SchemaVersion {
            path: path.to_path_buf(),
            found,
            expected: REPORT_SCHEMA_VERSION,
        },
    })
}

enum ReportParseError {
    Malformed(String),
    Version(u64),
}

fn parse_report(text: &str) -> Result<SessionReport, ReportParseError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ReportParseError::Malformed(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ReportParseError::Malformed("missing schema_version".into()))?;
    if version != REPORT_SCHEMA_VERSION as u64 {
        return Err(ReportParseError::Version(version));
    }
    serde_json::from_value(value).map_err(|e| ReportParseError::Malformed(e.to_string()))
}
