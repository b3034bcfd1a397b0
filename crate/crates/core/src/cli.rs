//! Command-line front end for `tune`.

use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use thiserror::Error;

use crate::objective::Aggregation;
use crate::runner::{CommandTemplate, ScorePattern};
use crate::session::{SessionConfig, SourceSpec};
use crate::space::{ParamSpec, Point, SearchSpace};
use crate::strategies::{StrategyHandle, StrategyKind};
use crate::synthetic::{Preset, SyntheticModel};

#[derive(Debug, Parser)]
#[command(
    name = "tune",
    version,
    about = "Search integer threading parameters of a benchmark for maximum throughput",
    after_help = "Example:\n  tune --param inter_op=1:4:1 --param intra_op=14:56:7 --strategy nm \\\n       --score-regex 'total images/sec: ([0-9.]+)' -- python bench.py --inter {inter_op} --intra {intra_op}"
)]
struct Args {
    /// Tunable parameter as NAME=LO:HI:STEP (repeatable, order is significant).
    #[arg(long = "param", value_name = "NAME=LO:HI:STEP", value_parser = parse_param)]
    params: Vec<ParamSpec>,

    /// Search strategy: nm, exhaustive or random.
    #[arg(long, value_name = "NAME", value_parser = parse_strategy)]
    strategy: StrategyKind,

    /// Maximum number of distinct points to evaluate.
    #[arg(long = "max-evals", value_name = "N")]
    max_evals: Option<u64>,

    #[arg(long, value_name = "S", default_value_t = 0)]
    seed: u64,

    /// Benchmark runs per point.
    #[arg(long = "repeat", value_name = "R", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    repeat: u32,

    /// How repeats are combined.
    #[arg(long = "agg", value_name = "median|mean|max", default_value = "median", value_parser = parse_agg)]
    agg: Aggregation,

    /// Regex with one capture group locating the score in stdout; the last match wins.
    #[arg(long = "score-regex", value_name = "RE")]
    score_regex: Option<String>,

    /// Per-run timeout in seconds.
    #[arg(long, value_name = "SECS")]
    timeout: Option<f64>,

    /// Extra environment for the benchmark as KEY=VALUE (repeatable).
    #[arg(long = "env", value_name = "KEY=VALUE", value_parser = parse_env)]
    env: Vec<(String, String)>,

    /// Do not export parameters as environment variables.
    #[arg(long = "no-param-env")]
    no_param_env: bool,

    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Append every evaluation to this JSON-lines file as it happens.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,

    /// Built-in score source, e.g. synthetic:mkl3d or synthetic:eigen2d.
    #[arg(long, value_name = "synthetic:PRESET")]
    objective: Option<String>,

    /// Baseline point (comma-separated values) to report improvement against.
    #[arg(long, value_name = "V1,V2,...")]
    baseline: Option<String>,

    /// Benchmark command; `{name}` is replaced by the parameter's value.
    #[arg(last = true, value_name = "CMD")]
    command: Vec<String>,
}

fn parse_param(s: &str) -> Result<ParamSpec, String> {
    s.parse().map_err(|e: crate::space::SpaceError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse()
}

fn parse_agg(s: &str) -> Result<Aggregation, String> {
    s.parse()
}

fn parse_env(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Debug, Error)]
pub enum UsageError {
    #[error(transparent)]
    Clap(#[from] clap::Error),
    #[error("{0}")]
    Invalid(String),
}

impl UsageError {
    /// Help and version requests are not failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            UsageError::Clap(e) if !e.use_stderr() => 0,
            _ => 2,
        }
    }
}

/// Parses `argv` (including the program name) into a session configuration.
pub fn parse_cli<I, T>(argv: I) -> Result<SessionConfig, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv)?;
    let invalid = |msg: String| UsageError::Invalid(msg);

    let preset = args
        .objective
        .as_deref()
        .map(|obj| {
            let name = obj
                .strip_prefix("synthetic:")
                .ok_or_else(|| invalid(format!("--objective: expected synthetic:PRESET, got `{obj}`")))?;
            Preset::parse(name).map_err(|e| invalid(format!("--objective: {e}")))
        })
        .transpose()?;

    let (space, source) = match (preset, args.command.is_empty()) {
        (Some(_), false) => {
            return Err(invalid("give either --objective synthetic:PRESET or a command after --, not both".into()))
        }
        (None, true) => return Err(invalid("missing benchmark command (after --) or --objective synthetic:PRESET".into())),
        (Some(preset), true) => {
            let space = if args.params.is_empty() {
                preset.space()
            } else {
                SearchSpace::new(args.params).map_err(|e| invalid(format!("--param: {e}")))?
            };
            let source = SourceSpec::Synthetic {
                preset,
                model: SyntheticModel::default(),
            };
            (space, source)
        }
        (None, false) => {
            if args.params.is_empty() {
                return Err(invalid("at least one --param is required".into()));
            }
            let space = SearchSpace::new(args.params).map_err(|e| invalid(format!("--param: {e}")))?;
            let mut template = CommandTemplate::new(args.command);
            if let Some(re) = &args.score_regex {
                template.score_pattern = ScorePattern::new(re).map_err(|e| invalid(format!("--score-regex: {e}")))?;
            }
            if let Some(secs) = args.timeout {
                if !(secs > 0.0 && secs.is_finite()) {
                    return Err(invalid(format!("--timeout: expected a positive number of seconds, got {secs}")));
                }
                template.timeout = Some(Duration::from_secs_f64(secs));
            }
            template.repeats = args.repeat;
            template.aggregation = args.agg;
            template.base_env = args.env;
            template.export_params_as_env = !args.no_param_env;
            template.validate(&space).map_err(|e| invalid(e.to_string()))?;
            (space, SourceSpec::Command(template))
        }
    };

    let baseline = args
        .baseline
        .as_deref()
        .map(|b| {
            let p = Point::parse_key(b).ok_or_else(|| invalid(format!("--baseline: cannot parse `{b}`")))?;
            if !space.contains(&p) {
                return Err(invalid(format!("--baseline: {p} is not a grid point")));
            }
            Ok(p)
        })
        .transpose()?;

    if args.max_evals == Some(0) {
        return Err(invalid("--max-evals must be at least 1".into()));
    }

    Ok(SessionConfig {
        space,
        strategy: StrategyHandle::new(args.strategy),
        source,
        max_distinct_evals: args.max_evals,
        seed: args.seed,
        output: args.out,
        trace_log: args.trace,
        baseline,
    })
}
