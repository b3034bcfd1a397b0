//! Nelder-Mead simplex search constrained to an integer grid.
//!
//! The simplex lives in continuous coordinates. Every candidate vertex is
//! snapped onto the grid before it is evaluated, so the cache sees only legal
//! points and revisiting a grid cell costs nothing. The implementation is a
//! propose/observe state machine so the session can drive it like any other
//! [`Strategy`]; [`iterate`] and [`run`] wrap it for direct use.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{EvalCache, Evaluation, ScoreSource};
use crate::space::{Point, SearchSpace};
use crate::strategies::{
    drive, Exhaustive, Proposal, SearchError, SearchOutcome, StopReason, Strategy, StrategyError,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NmError {
    #[error("search space has {size} grid points, fewer than the {needed} simplex vertices")]
    DegenerateSpace { size: u64, needed: usize },
    #[error("invalid Nelder-Mead configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub sigma: f64,
    /// Initial displacement along each axis, as a fraction of that parameter's range.
    pub initial_radius_fraction: f64,
    pub max_distinct_evals: u64,
    /// Consecutive iterations without a new grid point before stopping.
    pub stall_limit: u32,
}

impl NmConfig {
    /// Standard coefficients with a budget equal to the space size.
    pub fn for_space(space: &SearchSpace) -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            rho: 0.5,
            sigma: 0.5,
            initial_radius_fraction: 0.25,
            max_distinct_evals: space.size().max(space.dims() as u64 + 1),
            stall_limit: 8,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negations also reject NaN
    pub fn validate(&self, dims: usize) -> Result<(), NmError> {
        let bad = |msg: &str| Err(NmError::InvalidConfig(msg.to_string()));
        if !(self.alpha > 0.0) {
            return bad("reflection coefficient must be > 0");
        }
        if !(self.gamma > 1.0) {
            return bad("expansion coefficient must be > 1");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("contraction coefficient must be in (0, 1)");
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return bad("shrink coefficient must be in (0, 1)");
        }
        if !(self.initial_radius_fraction > 0.0 && self.initial_radius_fraction <= 1.0) {
            return bad("initial radius fraction must be in (0, 1]");
        }
        if self.max_distinct_evals < dims as u64 + 1 {
            return Err(NmError::InvalidConfig(format!(
                "budget of {} distinct evaluations cannot seed a {}-vertex simplex",
                self.max_distinct_evals,
                dims + 1
            )));
        }
        if self.stall_limit == 0 {
            return bad("stall limit must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub coords: Vec<f64>,
    pub point: Point,
    pub eval: Option<Evaluation>,
}

impl Vertex {
    fn new(space: &SearchSpace, coords: Vec<f64>) -> Self {
        let point = space.snap(&coords);
        Self {
            coords,
            point,
            eval: None,
        }
    }

    fn eval(&self) -> &Evaluation {
        self.eval.as_ref().expect("vertex evaluated")
    }
}

/// `n + 1` vertices, best first once evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    pub vertices: Vec<Vertex>,
}

impl Simplex {
    pub fn best(&self) -> &Vertex {
        &self.vertices[0]
    }

    pub fn is_evaluated(&self) -> bool {
        self.vertices.iter().all(|v| v.eval.is_some())
    }

    pub fn is_collapsed(&self) -> bool {
        self.vertices.windows(2).all(|w| w[0].point == w[1].point)
    }

    /// Stable sort by objective; a newcomer placed last stays behind equal vertices.
    fn sort(&mut self) {
        self.vertices.sort_by(|a, b| {
            let (ea, eb) = (a.eval(), b.eval());
            if ea.improves_on(eb) {
                std::cmp::Ordering::Less
            } else if eb.improves_on(ea) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
    }

    fn centroid_without_worst(&self) -> Vec<f64> {
        let n = self.vertices.len() - 1;
        let mut c = vec![0.0; self.vertices[0].coords.len()];
        for v in &self.vertices[..n] {
            for (ci, xi) in c.iter_mut().zip(&v.coords) {
                *ci += xi;
            }
        }
        c.iter_mut().for_each(|ci| *ci /= n as f64);
        c
    }
}

/// Builds the starting simplex: the grid point nearest the middle of every
/// range, plus one vertex offset along each axis.
pub fn initial_simplex(space: &SearchSpace, config: &NmConfig) -> Result<Simplex, NmError> {
    let n = space.dims();
    let size = space.size();
    if size < n as u64 + 1 {
        return Err(NmError::DegenerateSpace { size, needed: n + 1 });
    }
    let params = space.params();
    let mid: Vec<f64> = params
        .iter()
        .map(|p| (p.lower as f64 + p.upper as f64) / 2.0)
        .collect();
    // Anchor on the grid point the midpoint snaps to. An off-grid anchor with a
    // sub-step radius leaves reflections stuck in the anchor's cell.
    let mid: Vec<f64> = space.snap(&mid).values().iter().map(|&v| v as f64).collect();
    let mut vertices = vec![Vertex::new(space, mid.clone())];
    for (axis, p) in params.iter().enumerate() {
        let mut coords = mid.clone();
        let range = (p.upper - p.lower) as f64;
        coords[axis] = (mid[axis] + config.initial_radius_fraction * range).clamp(p.lower as f64, p.upper as f64);
        let taken = |pt: &Point, vs: &[Vertex]| vs.iter().any(|v| &v.point == pt);
        let mut vertex = Vertex::new(space, coords.clone());
        if taken(&vertex.point, &vertices) {
            vertex = displace(space, &coords, axis, &vertices)
                .or_else(|| {
                    (0..n)
                        .filter(|&a| a != axis)
                        .find_map(|a| displace(space, &coords, a, &vertices))
                })
                .or_else(|| {
                    space
                        .enumerate()
                        .find(|pt| !taken(pt, &vertices))
                        .map(|pt| Vertex::new(space, pt.values().iter().map(|&v| v as f64).collect()))
                })
                .ok_or(NmError::DegenerateSpace { size, needed: n + 1 })?;
        }
        vertices.push(vertex);
    }
    Ok(Simplex { vertices })
}

/// Steps `coords` along `axis` one grid step at a time, upward first and then
/// downward from the start, until the snapped point is new.
fn displace(space: &SearchSpace, coords: &[f64], axis: usize, taken: &[Vertex]) -> Option<Vertex> {
    let p = &space.params()[axis];
    let step = p.step as f64;
    let start = coords[axis];
    let upward = (1..).map(move |k| start + k as f64 * step).take_while(|&x| x <= p.upper as f64);
    let downward = (1..).map(move |k| start - k as f64 * step).take_while(|&x| x >= p.lower as f64);
    upward.chain(downward).find_map(|x| {
        let mut c = coords.to_vec();
        c[axis] = x;
        let v = Vertex::new(space, c);
        (!taken.iter().any(|t| t.point == v.point)).then_some(v)
    })
}

/// Per-run counters consulted by [`has_converged`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct History {
    pub iterations: u64,
    /// Consecutive completed iterations that evaluated no new grid point.
    pub stalled_iterations: u32,
    pub distinct_evals: u64,
}

pub fn has_converged(simplex: &Simplex, history: &History, config: &NmConfig) -> Option<StopReason> {
    if simplex.is_collapsed() {
        Some(StopReason::SimplexCollapsed)
    } else if history.stalled_iterations >= config.stall_limit {
        Some(StopReason::Stalled)
    } else if history.distinct_evals >= config.max_distinct_evals {
        Some(StopReason::BudgetExhausted)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
enum Phase {
    /// Evaluating initial vertex `next`.
    Init { next: usize },
    /// Between iterations.
    StepBoundary,
    Reflect { cand: Vertex },
    Expand { reflected: Vertex, cand: Vertex },
    Contract { reflected: Vertex, cand: Vertex, inside: bool },
    /// Evaluating shrunk vertex `next` (1..=n).
    Shrink { next: usize },
    Done(StopReason),
}

/// Nelder-Mead as a propose/observe state machine.
#[derive(Debug, Clone)]
pub struct NelderMead {
    space: SearchSpace,
    config: NmConfig,
    simplex: Simplex,
    phase: Phase,
    history: History,
    seen: HashSet<Point>,
    new_this_iteration: u32,
    pending: Option<Point>,
    check_convergence: bool,
}

impl NelderMead {
    pub fn new(space: &SearchSpace, config: NmConfig) -> Result<Self, NmError> {
        let simplex = initial_simplex(space, &config)?;
        config.validate(space.dims())?;
        Ok(Self {
            space: space.clone(),
            config,
            simplex,
            phase: Phase::Init { next: 0 },
            history: History::default(),
            seen: HashSet::new(),
            new_this_iteration: 0,
            pending: None,
            check_convergence: true,
        })
    }

    /// Resumes from an already evaluated simplex (sorted on entry).
    fn resume(space: &SearchSpace, config: NmConfig, mut simplex: Simplex) -> Self {
        simplex.sort();
        let seen = simplex.vertices.iter().map(|v| v.point.clone()).collect();
        Self {
            space: space.clone(),
            config,
            simplex,
            phase: Phase::StepBoundary,
            history: History::default(),
            seen,
            new_this_iteration: 0,
            pending: None,
            check_convergence: false,
        }
    }

    pub fn simplex(&self) -> &Simplex {
        &self.simplex
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    fn candidate(&self, coords: Vec<f64>) -> Vertex {
        // project onto the box so vertices cannot drift arbitrarily far out
        let coords = coords
            .into_iter()
            .zip(self.space.params())
            .map(|(x, p)| x.clamp(p.lower as f64, p.upper as f64))
            .collect();
        Vertex::new(&self.space, coords)
    }

    /// `from + t * (to - from)` per coordinate.
    fn along(from: &[f64], to: &[f64], t: f64) -> Vec<f64> {
        from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect()
    }

    fn begin_iteration(&mut self) -> Phase {
        let c = self.simplex.centroid_without_worst();
        let worst = &self.simplex.vertices.last().expect("nonempty simplex").coords;
        let cand = self.candidate(Self::along(&c, worst, -self.config.alpha));
        Phase::Reflect { cand }
    }

    fn replace_worst(&mut self, v: Vertex) {
        *self.simplex.vertices.last_mut().expect("nonempty simplex") = v;
        self.end_iteration();
    }

    fn end_iteration(&mut self) {
        self.simplex.sort();
        self.history.iterations += 1;
        if self.new_this_iteration == 0 {
            self.history.stalled_iterations += 1;
        } else {
            self.history.stalled_iterations = 0;
        }
        self.new_this_iteration = 0;
        self.phase = Phase::StepBoundary;
    }

    fn start_shrink(&mut self) {
        let best = self.simplex.vertices[0].coords.clone();
        for i in 1..self.simplex.vertices.len() {
            let coords = Self::along(&best, &self.simplex.vertices[i].coords, self.config.sigma);
            self.simplex.vertices[i] = self.candidate(coords);
        }
        self.phase = Phase::Shrink { next: 1 };
    }

    fn point_to_propose(&self) -> Option<&Point> {
        match &self.phase {
            Phase::Init { next } => Some(&self.simplex.vertices[*next].point),
            Phase::Reflect { cand } | Phase::Expand { cand, .. } | Phase::Contract { cand, .. } => Some(&cand.point),
            Phase::Shrink { next } => Some(&self.simplex.vertices[*next].point),
            Phase::StepBoundary | Phase::Done(_) => None,
        }
    }

    fn is_at_boundary(&self) -> bool {
        matches!(self.phase, Phase::StepBoundary)
    }
}

impl Strategy for NelderMead {
    fn name(&self) -> &'static str {
        "nm"
    }

    fn propose_next(&mut self) -> Result<Proposal, StrategyError> {
        if self.pending.is_some() {
            return Err(StrategyError::ProtocolViolation(
                "propose_next called while a proposal is pending".into(),
            ));
        }
        if let Phase::Done(reason) = self.phase {
            return Ok(Proposal::Done(reason));
        }
        if self.is_at_boundary() {
            if self.check_convergence {
                if let Some(reason) = has_converged(&self.simplex, &self.history, &self.config) {
                    self.phase = Phase::Done(reason);
                    return Ok(Proposal::Done(reason));
                }
            }
            self.phase = self.begin_iteration();
        }
        let point = self.point_to_propose().expect("phase has a candidate").clone();
        if !self.seen.contains(&point) && self.seen.len() as u64 >= self.config.max_distinct_evals {
            self.phase = Phase::Done(StopReason::BudgetExhausted);
            return Ok(Proposal::Done(StopReason::BudgetExhausted));
        }
        self.pending = Some(point.clone());
        Ok(Proposal::Evaluate(point))
    }

    fn observe(&mut self, eval: &Evaluation) -> Result<(), StrategyError> {
        let pending = self.pending.take().ok_or_else(|| {
            StrategyError::ProtocolViolation("observe called without a pending proposal".into())
        })?;
        if pending != eval.point {
            return Err(StrategyError::ProtocolViolation(format!(
                "observed {} but {} was proposed",
                eval.point, pending
            )));
        }
        if self.seen.insert(pending) {
            self.new_this_iteration += 1;
            self.history.distinct_evals += 1;
        }
        let n = self.simplex.vertices.len() - 1;
        match std::mem::replace(&mut self.phase, Phase::StepBoundary) {
            Phase::Init { next } => {
                self.simplex.vertices[next].eval = Some(eval.clone());
                if next == n {
                    self.simplex.sort();
                    self.new_this_iteration = 0;
                } else {
                    self.phase = Phase::Init { next: next + 1 };
                }
            }
            Phase::Reflect { mut cand } => {
                cand.eval = Some(eval.clone());
                let vs = &self.simplex.vertices;
                let beats_best = eval.improves_on(vs[0].eval());
                let beats_second_worst = eval.improves_on(vs[n - 1].eval());
                let beats_worst = eval.improves_on(vs[n].eval());
                if beats_best {
                    let c = self.simplex.centroid_without_worst();
                    let expanded = self.candidate(Self::along(&c, &cand.coords, self.config.gamma));
                    self.phase = Phase::Expand {
                        reflected: cand,
                        cand: expanded,
                    };
                } else if beats_second_worst {
                    self.replace_worst(cand);
                } else {
                    let c = self.simplex.centroid_without_worst();
                    let inside = !beats_worst;
                    let toward = if inside { &self.simplex.vertices[n].coords } else { &cand.coords };
                    let contracted = self.candidate(Self::along(&c, toward, self.config.rho));
                    self.phase = Phase::Contract {
                        reflected: cand,
                        cand: contracted,
                        inside,
                    };
                }
            }
            Phase::Expand { reflected, mut cand } => {
                cand.eval = Some(eval.clone());
                if eval.improves_on(reflected.eval()) {
                    self.replace_worst(cand);
                } else {
                    self.replace_worst(reflected);
                }
            }
            Phase::Contract {
                reflected,
                mut cand,
                inside,
            } => {
                cand.eval = Some(eval.clone());
                let accept = if inside {
                    eval.improves_on(self.simplex.vertices[n].eval())
                } else {
                    !reflected.eval().improves_on(eval)
                };
                if accept {
                    self.replace_worst(cand);
                } else {
                    self.start_shrink();
                }
            }
            Phase::Shrink { next } => {
                self.simplex.vertices[next].eval = Some(eval.clone());
                if next == n {
                    self.end_iteration();
                } else {
                    self.phase = Phase::Shrink { next: next + 1 };
                }
            }
            Phase::StepBoundary | Phase::Done(_) => unreachable!("pending proposal implies an active phase"),
        }
        Ok(())
    }
}

/// The `nm` registry entry: Nelder-Mead, or a full scan when the space is too
/// small to hold a simplex.
#[derive(Debug, Clone)]
pub enum NelderMeadStrategy {
    Simplex(Box<NelderMead>),
    Fallback(Exhaustive),
    Invalid(NmError),
}

impl NelderMeadStrategy {
    pub fn new(space: &SearchSpace, config: NmConfig) -> Self {
        match NelderMead::new(space, config.clone()) {
            Ok(nm) => NelderMeadStrategy::Simplex(Box::new(nm)),
            Err(NmError::DegenerateSpace { .. }) => {
                NelderMeadStrategy::Fallback(Exhaustive::with_budget(space, config.max_distinct_evals.max(1)))
            }
            Err(e) => NelderMeadStrategy::Invalid(e),
        }
    }
}

impl Strategy for NelderMeadStrategy {
    fn name(&self) -> &'static str {
        "nm"
    }

    fn propose_next(&mut self) -> Result<Proposal, StrategyError> {
        match self {
            NelderMeadStrategy::Simplex(nm) => nm.propose_next(),
            NelderMeadStrategy::Fallback(ex) => Ok(match ex.propose_next()? {
                Proposal::Done(StopReason::SpaceExhausted) => Proposal::Done(StopReason::SimplexFallback),
                other => other,
            }),
            NelderMeadStrategy::Invalid(e) => Err(StrategyError::ProtocolViolation(e.to_string())),
        }
    }

    fn observe(&mut self, eval: &Evaluation) -> Result<(), StrategyError> {
        match self {
            NelderMeadStrategy::Simplex(nm) => nm.observe(eval),
            NelderMeadStrategy::Fallback(ex) => ex.observe(eval),
            NelderMeadStrategy::Invalid(e) => Err(StrategyError::ProtocolViolation(e.to_string())),
        }
    }
}

/// Evaluates the vertices of an unevaluated simplex in order.
pub fn evaluate_simplex<S: ScoreSource + ?Sized>(simplex: &mut Simplex, cache: &mut EvalCache, source: &mut S) {
    for v in &mut simplex.vertices {
        v.eval = Some(cache.evaluate(source, &v.point));
    }
    simplex.sort();
}

/// Performs exactly one Nelder-Mead step from an evaluated simplex. Budget
/// and convergence are not checked here; see [`run`].
pub fn iterate<S: ScoreSource + ?Sized>(
    simplex: Simplex,
    space: &SearchSpace,
    cache: &mut EvalCache,
    source: &mut S,
    config: &NmConfig,
) -> Simplex {
    assert!(simplex.is_evaluated(), "iterate needs an evaluated simplex");
    let mut config = config.clone();
    config.max_distinct_evals = u64::MAX;
    let mut nm = NelderMead::resume(space, config, simplex);
    loop {
        match nm.propose_next().expect("well-formed protocol") {
            Proposal::Evaluate(p) => {
                let eval = cache.evaluate(source, &p);
                nm.observe(&eval).expect("well-formed protocol");
                if nm.is_at_boundary() {
                    return nm.simplex;
                }
            }
            Proposal::Done(_) => unreachable!("convergence checks are disabled"),
        }
    }
}

/// Minimizes over `space` until convergence. Falls back to exhaustive search
/// when the space cannot hold a simplex.
pub fn run<S: ScoreSource + ?Sized>(
    space: &SearchSpace,
    source: &mut S,
    config: &NmConfig,
) -> Result<SearchOutcome, SearchError> {
    config
        .validate(space.dims())
        .or_else(|e| match e {
            // budget checks are irrelevant when the fallback scan takes over
            NmError::InvalidConfig(_) if space.size() < space.dims() as u64 + 1 => Ok(()),
            e => Err(e),
        })
        .map_err(|e| StrategyError::ProtocolViolation(e.to_string()))?;
    let mut strategy = NelderMeadStrategy::new(space, config.clone());
    let mut cache = EvalCache::new();
    drive(&mut strategy, space, &mut cache, source, |_| {})?.into_result()
}
