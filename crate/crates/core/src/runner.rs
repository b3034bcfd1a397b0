//! Benchmark commands as score sources.
//!
//! A [`CommandTemplate`] is rendered for a point by substituting `{name}`
//! placeholders in argv and exporting every parameter as an environment
//! variable. The child runs in its own process group so a timeout can take
//! down whatever it spawned. The score is the last match of a user-supplied
//! regex in stdout.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{aggregate_repeats, Aggregation, Measurement, ScoreSource, Status};
use crate::space::{Point, SearchSpace};

/// Bytes of each output stream kept after the child exits.
pub const OUTPUT_TAIL_BYTES: usize = 64 * 1024;

const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("placeholder `{{{0}}}` does not name a parameter")]
    UnknownPlaceholder(String),
    #[error("score pattern must have exactly one capture group, found {0}")]
    CaptureGroups(usize),
    #[error("invalid score pattern: {0}")]
    BadPattern(#[from] regex::Error),
    #[error("empty command")]
    EmptyCommand,
    #[error("score pattern did not match the output")]
    NoMatch,
    #[error("captured text `{0}` is not a number")]
    UnparseableNumber(String),
    #[error("failed to spawn `{program}`: {source}")]
    SpawnFailure {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error while running benchmark: {0}")]
    Io(#[from] std::io::Error),
}

/// Compiled score regex with exactly one capture group.
#[derive(Debug, Clone)]
pub struct ScorePattern(Regex);

impl ScorePattern {
    pub fn new(pattern: &str) -> Result<Self, RunnerError> {
        let re = Regex::new(pattern)?;
        let groups = re.captures_len() - 1;
        if groups != 1 {
            return Err(RunnerError::CaptureGroups(groups));
        }
        Ok(Self(re))
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }
}

impl Default for ScorePattern {
    fn default() -> Self {
        Self::new(r"total images/sec:\s*([0-9]+(?:\.[0-9]+)?)").expect("valid default pattern")
    }
}

/// Extracts the score from the last match of `pattern`.
pub fn extract_score(output: &str, pattern: &ScorePattern) -> Result<f64, RunnerError> {
    let caps = pattern.0.captures_iter(output).last().ok_or(RunnerError::NoMatch)?;
    let text = caps.get(1).map_or("", |m| m.as_str());
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| RunnerError::UnparseableNumber(text.to_string()))
}

/// Fixed benchmark context into which points are substituted.
#[derive(Debug, Clone)]
pub struct CommandTemplate {
    pub argv: Vec<String>,
    pub base_env: Vec<(String, String)>,
    pub export_params_as_env: bool,
    pub score_pattern: ScorePattern,
    pub timeout: Option<Duration>,
    pub repeats: u32,
    pub aggregation: Aggregation,
}

impl CommandTemplate {
    pub fn new(argv: Vec<String>) -> Self {
        Self {
            argv,
            base_env: Vec::new(),
            export_params_as_env: true,
            score_pattern: ScorePattern::default(),
            timeout: None,
            repeats: 1,
            aggregation: Aggregation::Median,
        }
    }

    /// Checks that the command is nonempty and every placeholder names a
    /// parameter of `space`.
    pub fn validate(&self, space: &SearchSpace) -> Result<(), RunnerError> {
        if self.argv.is_empty() {
            return Err(RunnerError::EmptyCommand);
        }
        for arg in &self.argv {
            for name in placeholders(arg) {
                if space.index_of(name).is_none() {
                    return Err(RunnerError::UnknownPlaceholder(name.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// `{ident}` occurrences; braces around anything else are left alone.
fn placeholders(arg: &str) -> impl Iterator<Item = &str> {
    let mut rest = arg;
    std::iter::from_fn(move || loop {
        let open = rest.find('{')?;
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            rest = "";
            return None;
        };
        let name = &after[..close];
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            rest = &after[close + 1..];
            return Some(name);
        }
        rest = after;
    })
}

/// A command ready to spawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedCommand {
    pub argv: Vec<String>,
    pub env: Vec<(String, String)>,
}

pub fn render(template: &CommandTemplate, space: &SearchSpace, point: &Point) -> Result<RenderedCommand, RunnerError> {
    template.validate(space)?;
    let value_of = |name: &str| {
        space
            .index_of(name)
            .map(|i| point.values()[i].to_string())
            .ok_or_else(|| RunnerError::UnknownPlaceholder(name.to_string()))
    };
    let mut argv = Vec::with_capacity(template.argv.len());
    for arg in &template.argv {
        let mut out = String::with_capacity(arg.len());
        let mut rest = arg.as_str();
        for name in placeholders(arg) {
            let token = format!("{{{name}}}");
            let at = rest.find(&token).expect("placeholder located in remaining text");
            out.push_str(&rest[..at]);
            out.push_str(&value_of(name)?);
            rest = &rest[at + token.len()..];
        }
        out.push_str(rest);
        argv.push(out);
    }
    let mut env = template.base_env.clone();
    if template.export_params_as_env {
        for (spec, value) in space.params().iter().zip(point.values()) {
            env.retain(|(k, _)| k != &spec.name);
            env.push((spec.name.clone(), value.to_string()));
        }
    }
    Ok(RenderedCommand { argv, env })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub exit_code: Option<i32>,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub wall_time_ms: u64,
    pub timed_out: bool,
    pub score: Result<f64, String>,
}

impl RunResult {
    pub fn status(&self) -> Status {
        if self.timed_out {
            Status::Timeout
        } else if self.exit_code != Some(0) {
            Status::RunFailed
        } else {
            match self.score {
                Ok(s) if s > 0.0 => Status::Ok,
                Ok(_) => Status::NonpositiveScore,
                Err(_) => Status::ParseFailed,
            }
        }
    }

    pub fn raw_score(&self) -> Option<f64> {
        match self.status() {
            Status::Ok | Status::NonpositiveScore => self.score.as_ref().ok().copied(),
            _ => None,
        }
    }
}

/// Keeps the last `cap` bytes read from `reader`.
fn read_tail<R: Read>(mut reader: R, cap: usize) -> Vec<u8> {
    let mut tail = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                tail.extend_from_slice(&buf[..n]);
                if tail.len() > 2 * cap {
                    tail.drain(..tail.len() - cap);
                }
            }
        }
    }
    if tail.len() > cap {
        tail.drain(..tail.len() - cap);
    }
    tail
}

fn kill_group(child: &Child) {
    // the child leads its own process group
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
}

/// Spawns the rendered command once and waits for it, up to the timeout.
pub fn run_once(template: &CommandTemplate, space: &SearchSpace, point: &Point) -> Result<RunResult, RunnerError> {
    let rendered = render(template, space, point)?;
    let (program, args) = rendered.argv.split_first().ok_or(RunnerError::EmptyCommand)?;
    let started = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .envs(rendered.env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|source| RunnerError::SpawnFailure {
            program: program.clone(),
            source,
        })?;
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || read_tail(stdout, OUTPUT_TAIL_BYTES));
    let err_reader = thread::spawn(move || read_tail(stderr, OUTPUT_TAIL_BYTES));

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if template.timeout.is_some_and(|t| started.elapsed() >= t) {
            timed_out = true;
            kill_group(&child);
            break child.wait()?;
        }
        thread::sleep(POLL_INTERVAL);
    };
    // descendants may still hold the pipes open
    kill_group(&child);
    let stdout_tail = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let stderr_tail = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    let wall_time_ms = started.elapsed().as_millis() as u64;

    let exit_code = status.code().or_else(|| status.signal().map(|s| 128 + s));
    let score = extract_score(&stdout_tail, &template.score_pattern).map_err(|e| e.to_string());
    Ok(RunResult {
        exit_code,
        stdout_tail,
        stderr_tail,
        wall_time_ms,
        timed_out,
        score,
    })
}

/// Runs `repeats` times and aggregates the successful scores.
pub fn measure(template: &CommandTemplate, space: &SearchSpace, point: &Point) -> Result<Measurement, RunnerError> {
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    let mut total_ms = 0;
    for _ in 0..template.repeats.max(1) {
        let r = run_once(template, space, point)?;
        total_ms += r.wall_time_ms;
        match r.status() {
            Status::Ok => scores.push(r.score.expect("ok runs carry a score")),
            s => failures.push(s),
        }
    }
    Ok(match aggregate_repeats(&scores, template.aggregation) {
        Ok(score) => Measurement::score(score, total_ms),
        Err(_) => Measurement::failed(Status::worst_of(failures).unwrap_or(Status::RunFailed), total_ms),
    })
}

/// A command template bound to a space.
#[derive(Debug, Clone)]
pub struct CommandSource {
    template: CommandTemplate,
    space: SearchSpace,
    last_error: Option<String>,
}

impl CommandSource {
    pub fn new(template: CommandTemplate, space: &SearchSpace) -> Result<Self, RunnerError> {
        template.validate(space)?;
        Ok(Self {
            template,
            space: space.clone(),
            last_error: None,
        })
    }

    pub fn template(&self) -> &CommandTemplate {
        &self.template
    }

    /// Most recent spawn or i/o error, if any.
    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }
}

impl ScoreSource for CommandSource {
    fn measure(&mut self, point: &Point) -> Measurement {
        match measure(&self.template, &self.space, point) {
            Ok(m) => m,
            Err(e) => {
                self.last_error = Some(e.to_string());
                Measurement::failed(Status::RunFailed, 0)
            }
        }
    }

    fn describe(&self) -> String {
        self.template.argv.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEcho {
    pub argv: Vec<String>,
    pub score_regex: String,
    pub timeout_secs: Option<f64>,
    pub repeats: u32,
    pub aggregation: Aggregation,
}

impl From<&CommandTemplate> for CommandEcho {
    fn from(t: &CommandTemplate) -> Self {
        Self {
            argv: t.argv.clone(),
            score_regex: t.score_pattern.as_str().to_string(),
            timeout_secs: t.timeout.map(|d| d.as_secs_f64()),
            repeats: t.repeats,
            aggregation: t.aggregation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ParamSpec;

    fn two_params() -> SearchSpace {
        SearchSpace::new(vec![ParamSpec::new("inter_op", 1, 4, 1), ParamSpec::new("intra_op", 14, 56, 7)]).unwrap()
    }

    fn sh(script: &str) -> CommandTemplate {
        CommandTemplate::new(vec!["sh".into(), "-c".into(), script.into()])
    }

    #[test]
    fn render_substitutes_and_exports() {
        let space = two_params();
        let t = CommandTemplate::new(vec!["bench".into(), "--intra={intra_op}".into()]);
        let r = render(&t, &space, &Point::new(vec![2, 49])).unwrap();
        assert_eq!(r.argv, vec!["bench", "--intra=49"]);
        assert_eq!(
            r.env,
            vec![("inter_op".into(), "2".into()), ("intra_op".into(), "49".into())]
        );
    }

    #[test]
    fn render_unknown_placeholder() {
        let t = CommandTemplate::new(vec!["bench".into(), "--omp={omp}".into()]);
        match render(&t, &two_params(), &Point::new(vec![2, 49])) {
            Err(RunnerError::UnknownPlaceholder(name)) => assert_eq!(name, "omp"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn render_env_override_and_literal_braces() {
        let space = SearchSpace::new(vec![ParamSpec::new("OMP_NUM_THREADS", 14, 56, 7)]).unwrap();
        let mut t = CommandTemplate::new(vec!["x".into(), "{a b} {OMP_NUM_THREADS}{OMP_NUM_THREADS}".into()]);
        t.base_env = vec![("OMP_NUM_THREADS".into(), "1".into()), ("KMP_BLOCKTIME".into(), "1".into())];
        let r = render(&t, &space, &Point::new(vec![56])).unwrap();
        assert_eq!(r.argv[1], "{a b} 5656");
        assert_eq!(
            r.env,
            vec![("KMP_BLOCKTIME".into(), "1".into()), ("OMP_NUM_THREADS".into(), "56".into())]
        );
        t.export_params_as_env = false;
        let r = render(&t, &space, &Point::new(vec![56])).unwrap();
        assert_eq!(r.env, t.base_env);
    }

    #[test]
    fn extraction() {
        let pat = ScorePattern::new(r"total images/sec: ([0-9.]+)").unwrap();
        assert_eq!(extract_score("total images/sec: 123.45\n", &pat).unwrap(), 123.45);
        let pat = ScorePattern::new(r"images/sec: ([0-9.]+)").unwrap();
        assert_eq!(extract_score("images/sec: 10\nimages/sec: 20\n", &pat).unwrap(), 20.0);
        assert!(matches!(extract_score("no score here", &pat), Err(RunnerError::NoMatch)));
        assert!(matches!(
            extract_score("images/sec: 1.2.3", &pat),
            Err(RunnerError::UnparseableNumber(_))
        ));
        assert!(matches!(ScorePattern::new("(a)(b)"), Err(RunnerError::CaptureGroups(2))));
        assert!(matches!(ScorePattern::new("abc"), Err(RunnerError::CaptureGroups(0))));
    }

    #[test]
    fn run_once_statuses() {
        let space = two_params();
        let p = Point::new(vec![1, 14]);
        let ok = run_once(&sh("echo 'total images/sec: 50.0'"), &space, &p).unwrap();
        assert_eq!(ok.status(), Status::Ok);
        assert_eq!(ok.raw_score(), Some(50.0));

        let fail = run_once(&sh("echo 'total images/sec: 50.0'; exit 1"), &space, &p).unwrap();
        assert_eq!(fail.status(), Status::RunFailed);
        assert_eq!(fail.raw_score(), None);

        let garbled = run_once(&sh("echo nothing"), &space, &p).unwrap();
        assert_eq!(garbled.status(), Status::ParseFailed);
    }

    #[test]
    fn run_once_sees_env() {
        let space = two_params();
        let t = sh("echo \"total images/sec: $intra_op\"");
        let r = run_once(&t, &space, &Point::new(vec![1, 42])).unwrap();
        assert_eq!(r.raw_score(), Some(42.0));
    }

    #[test]
    fn spawn_failure() {
        let t = CommandTemplate::new(vec!["/nonexistent/benchmark-binary".into()]);
        assert!(matches!(
            run_once(&t, &two_params(), &Point::new(vec![1, 14])),
            Err(RunnerError::SpawnFailure { .. })
        ));
        let mut src = CommandSource::new(t, &two_params()).unwrap();
        assert_eq!(src.measure(&Point::new(vec![1, 14])).status, Status::RunFailed);
        assert!(src.last_error().is_some());
    }

    #[test]
    fn output_tail_is_bounded() {
        let t = sh("head -c 200000 /dev/zero | tr '\\0' x; echo; echo 'total images/sec: 7'");
        let r = run_once(&t, &two_params(), &Point::new(vec![1, 14])).unwrap();
        assert!(r.stdout_tail.len() <= OUTPUT_TAIL_BYTES);
        assert_eq!(r.raw_score(), Some(7.0));
    }

    #[test]
    fn measure_aggregates_over_successes() {
        let dir = tempfile::tempdir().unwrap();
        let counter = dir.path().join("n");
        let script = format!(
            "n=$(cat {c} 2>/dev/null || echo 0); n=$((n+1)); echo $n > {c}; \
             case $n in 1) echo 'total images/sec: 100';; 2) echo 'total images/sec: 110';; \
             3) echo 'total images/sec: 90';; *) exit 1;; esac",
            c = counter.display()
        );
        let mut t = sh(&script);
        t.repeats = 3;
        let m = measure(&t, &two_params(), &Point::new(vec![1, 14])).unwrap();
        assert_eq!(m.raw_score, Some(100.0));
        assert_eq!(m.status, Status::Ok);

        std::fs::write(&counter, "1").unwrap();
        // runs 2 (110) then 3 (90)
        t.repeats = 2;
        let m = measure(&t, &two_params(), &Point::new(vec![1, 14])).unwrap();
        assert_eq!(m.raw_score, Some(100.0));

        // one ok then one failure
        std::fs::write(&counter, "0").unwrap();
        let script = format!(
            "n=$(cat {c}); n=$((n+1)); echo $n > {c}; [ $n -eq 1 ] && echo 'total images/sec: 80' || exit 3",
            c = counter.display()
        );
        let mut t = sh(&script);
        t.repeats = 2;
        let m = measure(&t, &two_params(), &Point::new(vec![1, 14])).unwrap();
        assert_eq!(m.raw_score, Some(80.0));

        let mut t = sh("exit 2");
        t.repeats = 2;
        let m = measure(&t, &two_params(), &Point::new(vec![1, 14])).unwrap();
        assert_eq!(m.status, Status::RunFailed);
    }
}
