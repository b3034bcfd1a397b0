//! Analytic throughput models of a multi-threaded dataflow runtime.
//!
//! Points are read positionally: `(inter, intra)` or `(inter, intra, omp)`.
//! The score is
//!
//! ```text
//! W = intra                      (2 parameters)
//! W = max(intra, omp)            (3 parameters)
//! T = inter * W
//! E(w) = w / (1 + serial_fraction * (w - 1))
//! S(inter) = 1 + graph_parallel_gain * (min(inter, cap) - 1)
//! P(T) = 1                  if T <= cores
//!        (cores / T)^delta  otherwise
//! score = peak * S(inter) * E(min(W, cores)) * P(T)
//! ```
//!
//! giving near-linear scaling up to the core count and a cliff once the total
//! thread count oversubscribes the machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{Measurement, ScoreSource};
use crate::space::{Point, SearchSpace};

/// Enumeration guard for [`oracle_optimum`].
pub const ORACLE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyntheticError {
    #[error("search space has {0} points, more than the oracle limit of {ORACLE_LIMIT}")]
    SpaceTooLarge(u64),
    #[error("synthetic model needs 2 or 3 parameters, space has {0}")]
    Arity(usize),
    #[error("synthetic model needs every parameter to be at least 1")]
    NonPositiveDomain,
    #[error("unknown synthetic preset `{0}` (expected mkl3d or eigen2d)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub cores: u32,
    pub peak: f64,
    pub serial_fraction: f64,
    pub graph_parallel_gain: f64,
    pub graph_parallel_cap: u32,
    pub oversub_exponent: f64,
}

impl Default for SyntheticModel {
    fn default() -> Self {
        Self {
            cores: 56,
            peak: 100.0,
            serial_fraction: 0.02,
            graph_parallel_gain: 0.15,
            graph_parallel_cap: 2,
            oversub_exponent: 1.5,
        }
    }
}

impl SyntheticModel {
    /// Amdahl-style speedup of a single op on `w` threads.
    pub fn op_scaling(&self, w: f64) -> f64 {
        w / (1.0 + self.serial_fraction * (w - 1.0))
    }

    pub fn graph_gain(&self, inter: i64) -> f64 {
        let used = inter.min(self.graph_parallel_cap as i64) as f64;
        1.0 + self.graph_parallel_gain * (used - 1.0)
    }

    pub fn oversubscription_penalty(&self, total_threads: i64) -> f64 {
        let cores = self.cores as i64;
        if total_threads <= cores {
            1.0
        } else {
            (cores as f64 / total_threads as f64).powf(self.oversub_exponent)
        }
    }

    /// Panics if `values` has fewer than two entries; sources validate arity up front.
    pub fn throughput(&self, values: &[i64]) -> f64 {
        let inter = values[0];
        let workers = match values.get(2) {
            Some(&omp) => values[1].max(omp),
            None => values[1],
        };
        let total = inter * workers;
        let effective = workers.min(self.cores as i64) as f64;
        self.peak
            * self.graph_gain(inter)
            * self.op_scaling(effective)
            * self.oversubscription_penalty(total)
    }
}

/// Exact argmax of the model over `space`; ties go to the first point in
/// enumeration order.
pub fn oracle_optimum(model: &SyntheticModel, space: &SearchSpace) -> Result<(Point, f64), SyntheticError> {
    let size = space.size();
    if size > ORACLE_LIMIT {
        return Err(SyntheticError::SpaceTooLarge(size));
    }
    let mut best: Option<(Point, f64)> = None;
    for p in space.enumerate() {
        let s = model.throughput(p.values());
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((p, s));
        }
    }
    Ok(best.expect("validated spaces are nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mkl3d,
    Eigen2d,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self, SyntheticError> {
        match name {
            "mkl3d" => Ok(Preset::Mkl3d),
            "eigen2d" => Ok(Preset::Eigen2d),
            other => Err(SyntheticError::UnknownPreset(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mkl3d => "mkl3d",
            Preset::Eigen2d => "eigen2d",
        }
    }

    pub fn space(self) -> SearchSpace {
        match self {
            Preset::Mkl3d => SearchSpace::mkl_preset(),
            Preset::Eigen2d => SearchSpace::eigen_preset(),
        }
    }
}

/// A synthetic model bound to a space as a score source.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    model: SyntheticModel,
    label: String,
    calls: u64,
}

impl SyntheticSource {
    pub fn new(model: SyntheticModel, space: &SearchSpace) -> Result<Self, SyntheticError> {
        let n = space.dims();
        if !(2..=3).contains(&n) {
            return Err(SyntheticError::Arity(n));
        }
        if space.params().iter().any(|p| p.lower < 1) {
            return Err(SyntheticError::NonPositiveDomain);
        }
        Ok(Self {
            model,
            label: "synthetic".to_string(),
            calls: 0,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl ScoreSource for SyntheticSource {
    fn measure(&mut self, point: &Point) -> Measurement {
        self.calls += 1;
        Measurement::score(self.model.throughput(point.values()), 0)
    }

    fn describe(&self) -> String {
        self.label.clone()
    }
}
