//! Black-box auto-tuning of integer threading parameters.
//!
//! A [`SearchSpace`] of stepped integer parameters is explored by a search
//! [`Strategy`] (grid-constrained Nelder-Mead, exhaustive scan, or random
//! sampling). Points are scored by a [`ScoreSource`]: a benchmark command
//! whose throughput is parsed from its output, or a synthetic model of a
//! threaded runtime. Throughput is maximized by minimizing its reciprocal.

pub mod cli;
pub mod nelder_mead;
pub mod objective;
pub mod runner;
pub mod session;
pub mod space;
pub mod strategies;
pub mod synthetic;

pub use nelder_mead::{NelderMead, NmConfig};
pub use objective::{EvalCache, Evaluation, Objective, ScoreSource, Status};
pub use session::{run_session, SessionConfig, SessionReport};
pub use space::{ParamSpec, Point, SearchSpace};
pub use strategies::{Strategy, StrategyKind};
