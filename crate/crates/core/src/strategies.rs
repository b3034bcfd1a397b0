//! Pluggable search strategies.
//!
//! Every strategy speaks the same propose/observe protocol: the driver asks for
//! the next point, evaluates it through the [`EvalCache`], and hands the
//! evaluation back. Strategies never touch the score source themselves, which
//! keeps measurements strictly sequential.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nelder_mead::{NelderMeadStrategy, NmConfig};
use crate::objective::{EvalCache, Evaluation, ScoreSource};
use crate::space::{Point, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SimplexCollapsed,
    Stalled,
    BudgetExhausted,
    /// Every point of the space was proposed.
    SpaceExhausted,
    /// Nelder-Mead could not build a simplex and scanned the space instead.
    SimplexFallback,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::SimplexCollapsed => "simplex_collapsed",
            StopReason::Stalled => "stalled",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::SpaceExhausted => "space_exhausted",
            StopReason::SimplexFallback => "simplex_fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Evaluate(Point),
    Done(StopReason),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("strategy proposed point {0} outside the search space")]
    IllegalPoint(Point),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("no evaluation succeeded ({evaluated} distinct points tried)")]
    NoSuccessfulEvaluation { evaluated: usize, outcome: Box<SearchOutcome> },
}

pub trait Strategy {
    fn name(&self) -> &'static str;

    /// Next point to evaluate, or `Done` once the strategy has finished.
    /// Calling this again before `observe` is a protocol violation.
    fn propose_next(&mut self) -> Result<Proposal, StrategyError>;

    /// Feeds back the evaluation of the pending proposal.
    fn observe(&mut self, eval: &Evaluation) -> Result<(), StrategyError>;
}

/// Result of driving a strategy to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Best successful evaluation over the whole trace; first seen wins ties.
    pub best: Option<Evaluation>,
    pub trace: Vec<Evaluation>,
    pub reason: StopReason,
    pub distinct: usize,
}

impl SearchOutcome {
    pub fn into_result(self) -> Result<Self, SearchError> {
        if self.best.is_some() {
            Ok(self)
        } else {
            Err(SearchError::NoSuccessfulEvaluation {
                evaluated: self.distinct,
                outcome: Box::new(self),
            })
        }
    }

    pub fn best_eval(&self) -> &Evaluation {
        self.best.as_ref().expect("outcome has a successful evaluation")
    }
}

/// Runs the propose/evaluate/observe loop until the strategy is done.
pub fn drive<St, Src>(
    strategy: &mut St,
    space: &SearchSpace,
    cache: &mut EvalCache,
    source: &mut Src,
    mut on_eval: impl FnMut(&Evaluation),
) -> Result<SearchOutcome, StrategyError>
where
    St: Strategy + ?Sized,
    Src: ScoreSource + ?Sized,
{
    let mut trace = Vec::new();
    let mut best: Option<Evaluation> = None;
    let before = cache.len();
    let reason = loop {
        match strategy.propose_next()? {
            Proposal::Done(reason) => break reason,
            Proposal::Evaluate(point) => {
                if !space.contains(&point) {
                    return Err(StrategyError::IllegalPoint(point));
                }
                let eval = cache.evaluate(source, &point);
                on_eval(&eval);
                if eval.is_ok() && best.as_ref().is_none_or(|b| eval.improves_on(b)) {
                    best = Some(eval.clone());
                }
                strategy.observe(&eval)?;
                trace.push(eval);
            }
        }
    };
    Ok(SearchOutcome {
        best,
        trace,
        reason,
        distinct: cache.len() - before,
    })
}

/// Bookkeeping shared by the list-driven strategies.
#[derive(Debug, Clone, Default)]
struct Pending(Option<Point>);

impl Pending {
    fn set(&mut self, p: &Point) -> Result<(), StrategyError> {
        if self.0.is_some() {
            return Err(StrategyError::ProtocolViolation(
                "propose_next called while a proposal is pending".into(),
            ));
        }
        self.0 = Some(p.clone());
        Ok(())
    }

    fn take(&mut self, eval: &Evaluation) -> Result<Point, StrategyError> {
        let p = self.0.take().ok_or_else(|| {
            StrategyError::ProtocolViolation("observe called without a pending proposal".into())
        })?;
        if p != eval.point {
            return Err(StrategyError::ProtocolViolation(format!(
                "observed {} but {} was proposed",
                eval.point, p
            )));
        }
        Ok(p)
    }
}

/// Scans the whole grid in enumeration order.
#[derive(Debug, Clone)]
pub struct Exhaustive {
    space: SearchSpace,
    next: u64,
    budget: u64,
    pending: Pending,
}

impl Exhaustive {
    pub fn new(space: &SearchSpace) -> Self {
        Self::with_budget(space, u64::MAX)
    }

    pub fn with_budget(space: &SearchSpace, budget: u64) -> Self {
        Self {
            space: space.clone(),
            next: 0,
            budget,
            pending: Pending::default(),
        }
    }
}

impl Strategy for Exhaustive {
    fn name(&self) -> &'static str {
        "exhaustive"
    }

    fn propose_next(&mut self) -> Result<Proposal, StrategyError> {
        if self.next >= self.space.size() {
            return Ok(Proposal::Done(StopReason::SpaceExhausted));
        }
        if self.next >= self.budget {
            return Ok(Proposal::Done(StopReason::BudgetExhausted));
        }
        let p = self.space.point_at(self.next);
        self.pending.set(&p)?;
        Ok(Proposal::Evaluate(p))
    }

    fn observe(&mut self, eval: &Evaluation) -> Result<(), StrategyError> {
        self.pending.take(eval)?;
        self.next += 1;
        Ok(())
    }
}

/// Uniform sampling without replacement from a seeded generator.
#[derive(Debug, Clone)]
pub struct RandomSearch {
    space: SearchSpace,
    order: Vec<u64>,
    next: usize,
    pending: Pending,
}

impl RandomSearch {
    pub fn new(space: &SearchSpace, budget: u64, seed: u64) -> Self {
        let size = space.size();
        let amount = budget.min(size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = rand::seq::index::sample(&mut rng, size as usize, amount as usize)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        Self {
            space: space.clone(),
            order,
            next: 0,
            pending: Pending::default(),
        }
    }
}

impl Strategy for RandomSearch {
    fn name(&self) -> &'static str {
        "random"
    }

    fn propose_next(&mut self) -> Result<Proposal, StrategyError> {
        let Some(&index) = self.order.get(self.next) else {
            let reason = if self.order.len() as u64 >= self.space.size() {
                StopReason::SpaceExhausted
            } else {
                StopReason::BudgetExhausted
            };
            return Ok(Proposal::Done(reason));
        };
        let p = self.space.point_at(index);
        self.pending.set(&p)?;
        Ok(Proposal::Evaluate(p))
    }

    fn observe(&mut self, eval: &Evaluation) -> Result<(), StrategyError> {
        self.pending.take(eval)?;
        self.next += 1;
        Ok(())
    }
}

/// Strategy registry key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Nm,
    Exhaustive,
    Random,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Nm, StrategyKind::Exhaustive, StrategyKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Nm => "nm",
            StrategyKind::Exhaustive => "exhaustive",
            StrategyKind::Random => "random",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (nm|exhaustive|random)"))
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A named strategy plus its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyHandle {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nm: Option<NmConfig>,
}

impl StrategyHandle {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, nm: None }
    }

    /// Instantiates the strategy for `space`. `budget` caps distinct
    /// evaluations; `seed` only matters for random search.
    pub fn build(&self, space: &SearchSpace, budget: u64, seed: u64) -> Box<dyn Strategy> {
        match self.kind {
            StrategyKind::Nm => {
                let mut config = self.nm.clone().unwrap_or_else(|| NmConfig::for_space(space));
                config.max_distinct_evals = config.max_distinct_evals.min(budget);
                Box::new(NelderMeadStrategy::new(space, config))
            }
            StrategyKind::Exhaustive => Box::new(Exhaustive::with_budget(space, budget)),
            StrategyKind::Random => Box::new(RandomSearch::new(space, budget, seed)),
        }
    }
}

/// Evaluates every point once; the result is the true optimum of the space.
pub fn exhaustive_search<S: ScoreSource + ?Sized>(
    space: &SearchSpace,
    source: &mut S,
) -> Result<SearchOutcome, SearchError> {
    let mut cache = EvalCache::new();
    drive(&mut Exhaustive::new(space), space, &mut cache, source, |_| {})?.into_result()
}

pub fn random_search<S: ScoreSource + ?Sized>(
    space: &SearchSpace,
    source: &mut S,
    budget: u64,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    let mut cache = EvalCache::new();
    drive(&mut RandomSearch::new(space, budget.max(1), seed), space, &mut cache, source, |_| {})?
        .into_result()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnSource;
    use crate::space::ParamSpec;
    use crate::synthetic::{oracle_optimum, SyntheticModel, SyntheticSource};
    use std::collections::HashSet;

    fn line(lo: i64, hi: i64) -> SearchSpace {
        SearchSpace::new(vec![ParamSpec::new("x", lo, hi, 1)]).unwrap()
    }

    fn dummy_eval(p: &Point) -> Evaluation {
        let mut src = FnSource::new("one", |_: &Point| 1.0);
        EvalCache::new().evaluate(&mut src, p)
    }

    #[test]
    fn exhaustive_protocol() {
        let space = line(1, 2);
        let mut s = Exhaustive::new(&space);
        let p1 = Point::new(vec![1]);
        assert_eq!(s.propose_next(), Ok(Proposal::Evaluate(p1.clone())));
        assert!(matches!(s.propose_next(), Err(StrategyError::ProtocolViolation(_))));
        s.observe(&dummy_eval(&p1)).unwrap();
        let p2 = Point::new(vec![2]);
        assert_eq!(s.propose_next(), Ok(Proposal::Evaluate(p2.clone())));
        s.observe(&dummy_eval(&p2)).unwrap();
        assert_eq!(s.propose_next(), Ok(Proposal::Done(StopReason::SpaceExhausted)));
    }

    #[test]
    fn observe_without_proposal_is_violation() {
        let space = line(1, 2);
        let p = Point::new(vec![1]);
        let mut e = Exhaustive::new(&space);
        assert!(matches!(e.observe(&dummy_eval(&p)), Err(StrategyError::ProtocolViolation(_))));
        let mut r = RandomSearch::new(&space, 2, 0);
        assert!(matches!(r.observe(&dummy_eval(&p)), Err(StrategyError::ProtocolViolation(_))));
    }

    #[test]
    fn random_without_replacement_exhausts() {
        let space = line(1, 4);
        let mut s = RandomSearch::new(&space, 5, 42);
        let mut seen = HashSet::new();
        loop {
            match s.propose_next().unwrap() {
                Proposal::Evaluate(p) => {
                    assert!(seen.insert(p.clone()));
                    s.observe(&dummy_eval(&p)).unwrap();
                }
                Proposal::Done(reason) => {
                    assert_eq!(reason, StopReason::SpaceExhausted);
                    break;
                }
            }
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn exhaustive_matches_oracle() {
        let space = SearchSpace::mkl_preset();
        let model = SyntheticModel::default();
        let mut src = SyntheticSource::new(model.clone(), &space).unwrap();
        let out = exhaustive_search(&space, &mut src).unwrap();
        assert_eq!(out.trace.len(), 196);
        assert_eq!(src.calls(), 196);
        let (p, s) = oracle_optimum(&model, &space).unwrap();
        assert_eq!(out.best_eval().point, p);
        assert_eq!(out.best_eval().raw_score, Some(s));
    }

    #[test]
    fn exhaustive_singleton() {
        let space = line(3, 3);
        let mut src = FnSource::new("c", |_: &Point| 2.0);
        let out = exhaustive_search(&space, &mut src).unwrap();
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn exhaustive_ties_first_wins() {
        let space = line(1, 5);
        let mut src = FnSource::new("flat", |_: &Point| 7.0);
        let out = exhaustive_search(&space, &mut src).unwrap();
        assert_eq!(out.best_eval().point, Point::new(vec![1]));
    }

    #[test]
    fn all_failures_reported() {
        let space = line(1, 3);
        let mut src = FnSource::new("zero", |_: &Point| 0.0);
        let err = exhaustive_search(&space, &mut src).unwrap_err();
        assert!(matches!(err, SearchError::NoSuccessfulEvaluation { evaluated: 3, .. }));
    }

    #[test]
    fn random_search_properties() {
        let space = SearchSpace::eigen_preset();
        let model = SyntheticModel::default();
        let run = |budget, seed| {
            let mut src = SyntheticSource::new(model.clone(), &space).unwrap();
            random_search(&space, &mut src, budget, seed).unwrap()
        };
        assert_eq!(run(10, 3), run(10, 3));
        assert_eq!(run(1, 3).trace.len(), 1);

        let full = run(1000, 9);
        let mut src = SyntheticSource::new(model.clone(), &space).unwrap();
        let ex = exhaustive_search(&space, &mut src).unwrap();
        let a: HashSet<_> = full.trace.iter().map(|e| e.point.clone()).collect();
        let b: HashSet<_> = ex.trace.iter().map(|e| e.point.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(full.best_eval().raw_score, ex.best_eval().raw_score);
    }

    #[test]
    fn registry_names() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>(), Ok(k));
        }
        assert!("annealing".parse::<StrategyKind>().is_err());
    }
}
