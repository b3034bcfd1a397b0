//! Minimization objective over a score source.
//!
//! Scores are throughputs (higher is better). The tuner minimizes their
//! reciprocal; anything that did not yield a positive score maps to
//! [`Objective::Worst`].

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::space::Point;

/// Value minimized by the search strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Value(f64),
    /// Greater than every finite objective.
    Worst,
}

impl Objective {
    pub fn value(self) -> Option<f64> {
        match self {
            Objective::Value(v) => Some(v),
            Objective::Worst => None,
        }
    }

    pub fn is_worst(self) -> bool {
        matches!(self, Objective::Worst)
    }
}

impl Eq for Objective {}

impl PartialOrd for Objective {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Objective {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Objective::Value(a), Objective::Value(b)) => a.total_cmp(b),
            (Objective::Value(_), Objective::Worst) => Ordering::Less,
            (Objective::Worst, Objective::Value(_)) => Ordering::Greater,
            (Objective::Worst, Objective::Worst) => Ordering::Equal,
        }
    }
}

// Worst is written as null; the evaluation's status says why.
impl Serialize for Objective {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Objective {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match Option::<f64>::deserialize(deserializer)? {
            Some(v) => Objective::Value(v),
            None => Objective::Worst,
        })
    }
}

/// Reciprocal transform: `1/score` for positive scores, `Worst` otherwise.
pub fn to_minimization(raw_score: Option<f64>) -> Objective {
    match raw_score {
        Some(s) if s > 0.0 && s.is_finite() => Objective::Value(1.0 / s),
        _ => Objective::Worst,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    RunFailed,
    ParseFailed,
    NonpositiveScore,
    Timeout,
}

impl Status {
    /// Ranking used to pick which failure survives when every repeat failed.
    fn severity(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::NonpositiveScore => 1,
            Status::ParseFailed => 2,
            Status::RunFailed => 3,
            Status::Timeout => 4,
        }
    }

    pub fn worst_of(statuses: impl IntoIterator<Item = Status>) -> Option<Status> {
        statuses.into_iter().max_by_key(|s| s.severity())
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Ok => "ok",
            Status::RunFailed => "run_failed",
            Status::ParseFailed => "parse_failed",
            Status::NonpositiveScore => "nonpositive_score",
            Status::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

/// What a score source reports for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub raw_score: Option<f64>,
    pub status: Status,
    pub duration_ms: u64,
}

impl Measurement {
    /// Successful measurement; non-positive scores are downgraded.
    pub fn score(raw: f64, duration_ms: u64) -> Self {
        let status = if raw > 0.0 && raw.is_finite() {
            Status::Ok
        } else {
            Status::NonpositiveScore
        };
        Self {
            raw_score: Some(raw),
            status,
            duration_ms,
        }
    }

    pub fn failed(status: Status, duration_ms: u64) -> Self {
        debug_assert_ne!(status, Status::Ok);
        Self {
            raw_score: None,
            status,
            duration_ms,
        }
    }
}

/// Anything that can score a point. Implementations are invoked strictly
/// one at a time.
pub trait ScoreSource {
    fn measure(&mut self, point: &Point) -> Measurement;

    /// Short human-readable description recorded in reports.
    fn describe(&self) -> String;
}

impl<S: ScoreSource + ?Sized> ScoreSource for &mut S {
    fn measure(&mut self, point: &Point) -> Measurement {
        (**self).measure(point)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Closure-backed source, mostly for tests and embedding.
pub struct FnSource<F> {
    f: F,
    label: String,
}

impl<F: FnMut(&Point) -> f64> FnSource<F> {
    pub fn new(label: impl Into<String>, f: F) -> Self {
        Self {
            f,
            label: label.into(),
        }
    }
}

impl<F: FnMut(&Point) -> f64> ScoreSource for FnSource<F> {
    fn measure(&mut self, point: &Point) -> Measurement {
        Measurement::score((self.f)(point), 0)
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}

/// One objective measurement as recorded in a session trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sequence_index: u64,
    pub point: Point,
    pub raw_score: Option<f64>,
    pub objective: Objective,
    pub status: Status,
    pub duration_ms: u64,
    pub from_cache: bool,
}

impl Evaluation {
    pub fn from_measurement(point: Point, m: Measurement, sequence_index: u64) -> Self {
        let (raw_score, status) = match m.status {
            Status::Ok => match m.raw_score {
                Some(s) if s > 0.0 && s.is_finite() => (Some(s), Status::Ok),
                other => (other, Status::NonpositiveScore),
            },
            failed => (None, failed),
        };
        // A non-positive score is kept for diagnostics but never drives the search.
        let raw_score = match status {
            Status::Ok | Status::NonpositiveScore => raw_score,
            _ => None,
        };
        let objective = if status == Status::Ok {
            to_minimization(raw_score)
        } else {
            Objective::Worst
        };
        Self {
            sequence_index,
            point,
            raw_score,
            objective,
            status,
            duration_ms: m.duration_ms,
            from_cache: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// Strict improvement: lower objective, then higher raw score on exact
    /// objective ties. Equal evaluations are not improvements, so the first
    /// one seen is kept.
    pub fn improves_on(&self, other: &Evaluation) -> bool {
        match self.objective.cmp(&other.objective) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => match (self.raw_score, other.raw_score) {
                (Some(a), Some(b)) if self.is_ok() && other.is_ok() => a > b,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Median,
    Mean,
    Max,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(Aggregation::Median),
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(format!("unknown aggregation `{other}` (median|mean|max)")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Median => "median",
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectiveError {
    #[error("all repeats failed")]
    AllRepeatsFailed,
}

/// Combines the scores of successful repeats.
pub fn aggregate_repeats(scores: &[f64], mode: Aggregation) -> Result<f64, ObjectiveError> {
    if scores.is_empty() {
        return Err(ObjectiveError::AllRepeatsFailed);
    }
    Ok(match mode {
        Aggregation::Median => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                (sorted[mid - 1] + sorted[mid]) / 2.0
            }
        }
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Memoizes evaluations by canonical point key.
#[derive(Debug, Default, Clone)]
pub struct EvalCache {
    entries: HashMap<String, Evaluation>,
    hits: u64,
    misses: u64,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the stored evaluation for `point`, invoking `source` only on a
    /// miss. Failures are cached like successes.
    pub fn evaluate<S: ScoreSource + ?Sized>(&mut self, source: &mut S, point: &Point) -> Evaluation {
        let seq = self.hits + self.misses + 1;
        let key = point.canonical_key();
        if let Some(stored) = self.entries.get(&key) {
            self.hits += 1;
            let mut eval = stored.clone();
            eval.sequence_index = seq;
            eval.from_cache = true;
            return eval;
        }
        self.misses += 1;
        let eval = Evaluation::from_measurement(point.clone(), source.measure(point), seq);
        self.entries.insert(key, eval.clone());
        eval
    }

    pub fn get(&self, point: &Point) -> Option<&Evaluation> {
        self.entries.get(&point.canonical_key())
    }

    pub fn contains(&self, point: &Point) -> bool {
        self.entries.contains_key(&point.canonical_key())
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Number of distinct points evaluated.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
