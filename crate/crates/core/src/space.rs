//! Bounded, stepped integer search spaces.
//!
//! A [`SearchSpace`] is an ordered list of [`ParamSpec`]s. Each spec induces an
//! arithmetic progression of legal values starting at `lower` with stride
//! `step` and ending at the largest value not exceeding `upper`. The product of
//! those progressions is the grid of legal [`Point`]s.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("search space has no parameters")]
    EmptySpace,
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter `{name}` has lower bound {lower} above upper bound {upper}")]
    BadBounds { name: String, lower: i64, upper: i64 },
    #[error("parameter `{name}` has non-positive step {step}")]
    BadStep { name: String, step: i64 },
    #[error("parameter name is empty")]
    EmptyName,
    #[error("cannot parse parameter spec `{0}`, expected NAME=LO:HI:STEP")]
    Syntax(String),
}

/// One tunable integer parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lower: i64,
    pub upper: i64,
    pub step: i64,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, lower: i64, upper: i64, step: i64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            step,
        }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.name.is_empty() {
            return Err(SpaceError::EmptyName);
        }
        if self.lower > self.upper {
            return Err(SpaceError::BadBounds {
                name: self.name.clone(),
                lower: self.lower,
                upper: self.upper,
            });
        }
        if self.step <= 0 {
            return Err(SpaceError::BadStep {
                name: self.name.clone(),
                step: self.step,
            });
        }
        Ok(())
    }

    /// Largest grid index, `floor((upper - lower) / step)`.
    pub fn max_index(&self) -> i64 {
        (self.upper - self.lower) / self.step
    }

    /// Number of grid values.
    pub fn count(&self) -> u64 {
        self.max_index() as u64 + 1
    }

    /// Largest grid value; equals `upper` only when the range is step-aligned.
    pub fn grid_max(&self) -> i64 {
        self.value_at(self.max_index())
    }

    pub fn value_at(&self, index: i64) -> i64 {
        self.lower + index * self.step
    }

    pub fn grid_values(&self) -> Vec<i64> {
        (0..=self.max_index()).map(|k| self.value_at(k)).collect()
    }

    pub fn is_grid_value(&self, value: i64) -> bool {
        value >= self.lower && value <= self.upper && (value - self.lower) % self.step == 0
    }

    /// Nearest grid value to `raw`, ties toward the lower value, clamped to the grid.
    pub fn snap(&self, raw: f64) -> i64 {
        let t = (raw - self.lower as f64) / self.step as f64;
        let k = if t.is_nan() {
            0.0
        } else {
            // round half down: ceil(t - 0.5)
            (t - 0.5).ceil()
        };
        let k = k.clamp(0.0, self.max_index() as f64) as i64;
        self.value_at(k)
    }
}

impl fmt::Display for ParamSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}:{}:{}", self.name, self.lower, self.upper, self.step)
    }
}

impl FromStr for ParamSpec {
    type Err = SpaceError;

    /// Parses `name=lower:upper:step`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let syntax = || SpaceError::Syntax(s.to_string());
        let (name, range) = s.split_once('=').ok_or_else(syntax)?;
        let name = name.trim();
        let parts: Vec<&str> = range.split(':').collect();
        if parts.len() != 3 {
            return Err(syntax());
        }
        let mut nums = [0i64; 3];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            *slot = part.trim().parse().map_err(|_| syntax())?;
        }
        let spec = ParamSpec::new(name, nums[0], nums[1], nums[2]);
        spec.validate()?;
        Ok(spec)
    }
}

/// Ordered set of parameters defining the grid of legal points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParamSpec>", into = "Vec<ParamSpec>")]
pub struct SearchSpace {
    params: Vec<ParamSpec>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self, SpaceError> {
        let space = Self { params };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.params.is_empty() {
            return Err(SpaceError::EmptySpace);
        }
        for (i, p) in self.params.iter().enumerate() {
            p.validate()?;
            if self.params[..i].iter().any(|q| q.name == p.name) {
                return Err(SpaceError::DuplicateName(p.name.clone()));
            }
        }
        Ok(())
    }

    /// Three-parameter MKL backend space: inter-op, intra-op, OpenMP threads.
    pub fn mkl_preset() -> Self {
        Self {
            params: vec![
                ParamSpec::new("inter_op", 1, 4, 1),
                ParamSpec::new("intra_op", 14, 56, 7),
                ParamSpec::new("OMP_NUM_THREADS", 14, 56, 7),
            ],
        }
    }

    /// Two-parameter Eigen backend space: inter-op and intra-op threads.
    pub fn eigen_preset() -> Self {
        Self {
            params: vec![
                ParamSpec::new("inter_op", 1, 4, 1),
                ParamSpec::new("intra_op", 14, 56, 7),
            ],
        }
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn dims(&self) -> usize {
        self.params.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of grid points.
    pub fn size(&self) -> u64 {
        self.params
            .iter()
            .map(ParamSpec::count)
            .fold(1u64, |acc, c| acc.saturating_mul(c))
    }

    pub fn snap(&self, raw: &[f64]) -> Point {
        assert_eq!(raw.len(), self.dims(), "coordinate count mismatch");
        Point::new(self.params.iter().zip(raw).map(|(p, &x)| p.snap(x)).collect())
    }

    pub fn contains(&self, point: &Point) -> bool {
        point.len() == self.dims()
            && self
                .params
                .iter()
                .zip(point.values())
                .all(|(p, &v)| p.is_grid_value(v))
    }

    /// Point with the given lexicographic rank (`0 <= index < size()`).
    pub fn point_at(&self, mut index: u64) -> Point {
        let mut values = vec![0; self.dims()];
        for (slot, p) in values.iter_mut().zip(&self.params).rev() {
            let count = p.count();
            *slot = p.value_at((index % count) as i64);
            index /= count;
        }
        Point::new(values)
    }

    /// All legal points, lexicographic in declared parameter order.
    pub fn enumerate(&self) -> GridIter<'_> {
        GridIter {
            space: self,
            next: Some(self.params.iter().map(|_| 0).collect()),
        }
    }

    /// Uniform draw over the grid.
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let size = self.size();
        self.point_at(rng.gen_range(0..size))
    }

    pub fn param_specs_display(&self) -> Vec<String> {
        self.params.iter().map(ToString::to_string).collect()
    }
}

impl TryFrom<Vec<ParamSpec>> for SearchSpace {
    type Error = SpaceError;

    fn try_from(params: Vec<ParamSpec>) -> Result<Self, Self::Error> {
        Self::new(params)
    }
}

impl From<SearchSpace> for Vec<ParamSpec> {
    fn from(space: SearchSpace) -> Self {
        space.params
    }
}

/// Odometer over grid indices.
pub struct GridIter<'a> {
    space: &'a SearchSpace,
    next: Option<Vec<i64>>,
}

impl Iterator for GridIter<'_> {
    type Item = Point;

    fn next(&mut self) -> Option<Point> {
        let idx = self.next.as_mut()?;
        let params = &self.space.params;
        let point = Point::new(
            params
                .iter()
                .zip(idx.iter())
                .map(|(p, &k)| p.value_at(k))
                .collect(),
        );
        let mut axis = params.len();
        loop {
            if axis == 0 {
                self.next = None;
                break;
            }
            axis -= 1;
            if idx[axis] < params[axis].max_index() {
                idx[axis] += 1;
                break;
            }
            idx[axis] = 0;
        }
        Some(point)
    }
}

/// One assignment of values, in the owning space's parameter order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<i64>);

impl Point {
    pub fn new(values: Vec<i64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Comma-joined values; injective because values are integers.
    pub fn canonical_key(&self) -> String {
        self.0
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_key(key: &str) -> Option<Self> {
        key.split(',')
            .map(|s| s.trim().parse().ok())
            .collect::<Option<Vec<i64>>>()
            .map(Self)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.canonical_key())
    }
}

impl From<Vec<i64>> for Point {
    fn from(values: Vec<i64>) -> Self {
        Self(values)
    }
}
