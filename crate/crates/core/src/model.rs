//! Model specification: state labels, velocities and the generator schedule.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::DenseMatrix;

/// Row sums up to this (relative) amount above zero are treated as roundoff.
const ROW_SUM_SLACK: f64 = 1e-12;

/// Which side of the velocity partition a state or operator belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Plus => Side::Minus,
            Side::Minus => Side::Plus,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Plus => "plus",
            Side::Minus => "minus",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state '{0}' has zero velocity")]
    ZeroVelocity(String),
    #[error("no state with {0} velocity")]
    EmptySidePartition(Side),
    #[error("negative off-diagonal generator entry ({i}, {j}) in segment {segment}")]
    NegativeOffDiagonal {
        i: String,
        j: String,
        segment: usize,
    },
    #[error("row '{i}' of segment {segment} sums to a positive number")]
    PositiveRowSum { i: String, segment: usize },
    #[error("bad breakpoints: {0}")]
    BadBreakpoints(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least two states, got {0}")]
    TooFewStates(usize),
    #[error("duplicate state label '{0}'")]
    DuplicateLabel(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("unknown state '{0}'")]
    UnknownState(String),
    #[error("could not parse model: {0}")]
    Parse(String),
}

/// Generator schedule as written in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorSpec {
    Constant {
        matrix: Vec<Vec<f64>>,
    },
    Piecewise {
        breakpoints: Vec<f64>,
        matrices: Vec<Vec<Vec<f64>>>,
    },
}

/// Raw, unvalidated model description (the JSON model file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub states: Vec<String>,
    pub velocities: Vec<f64>,
    pub generator: GeneratorSpec,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    /// Convenience constructor for a time-homogeneous model.
    pub fn constant<S: Into<String>, R: AsRef<[f64]>>(
        states: impl IntoIterator<Item = S>,
        velocities: &[f64],
        matrix: &[R],
    ) -> Self {
        ModelSpec {
            states: states.into_iter().map(Into::into).collect(),
            velocities: velocities.to_vec(),
            generator: GeneratorSpec::Constant {
                matrix: matrix.iter().map(|r| r.as_ref().to_vec()).collect(),
            },
        }
    }
}

/// A model whose invariants have been checked.
///
/// Internally the plus states are listed before the minus states (the block
/// ordering used by the factorization); every state index exposed by this type
/// refers to the original position in the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedModel {
    labels: Vec<String>,
    velocities: Vec<f64>,
    breakpoints: Vec<f64>,
    segments: Vec<DenseMatrix>,
    plus_states: Vec<usize>,
    minus_states: Vec<usize>,
    uniform_bound: f64,
    killing_floor: f64,
}

/// Checks a raw spec and computes the velocity partition, the uniform bound
/// `K` and the killing floor.
pub fn validate_model(spec: &ModelSpec) -> Result<ValidatedModel, ModelError> {
    let m = spec.states.len();
    if m < 2 {
        return Err(ModelError::TooFewStates(m));
    }
    for (i, a) in spec.states.iter().enumerate() {
        if spec.states[..i].contains(a) {
            return Err(ModelError::DuplicateLabel(a.clone()));
        }
    }
    if spec.velocities.len() != m {
        return Err(ModelError::DimensionMismatch(format!(
            "{} velocities for {m} states",
            spec.velocities.len()
        )));
    }
    if spec.velocities.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("velocities"));
    }
    if let Some(i) = spec.velocities.iter().position(|&v| v == 0.0) {
        return Err(ModelError::ZeroVelocity(spec.states[i].clone()));
    }
    let plus_states: Vec<usize> = (0..m).filter(|&i| spec.velocities[i] > 0.0).collect();
    let minus_states: Vec<usize> = (0..m).filter(|&i| spec.velocities[i] < 0.0).collect();
    if plus_states.is_empty() {
        return Err(ModelError::EmptySidePartition(Side::Plus));
    }
    if minus_states.is_empty() {
        return Err(ModelError::EmptySidePartition(Side::Minus));
    }

    let (breakpoints, raw) = match &spec.generator {
        GeneratorSpec::Constant { matrix } => (Vec::new(), vec![matrix]),
        GeneratorSpec::Piecewise {
            breakpoints,
            matrices,
        } => {
            if matrices.len() != breakpoints.len() + 1 {
                return Err(ModelError::BadBreakpoints(format!(
                    "{} matrices for {} breakpoints",
                    matrices.len(),
                    breakpoints.len()
                )));
            }
            if breakpoints.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return Err(ModelError::BadBreakpoints(
                    "breakpoints must be finite and nonnegative".into(),
                ));
            }
            if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ModelError::BadBreakpoints(
                    "breakpoints must be strictly increasing".into(),
                ));
            }
            (breakpoints.clone(), matrices.iter().collect())
        }
    };

    let mut segments = Vec::with_capacity(raw.len());
    let mut uniform_bound: f64 = 0.0;
    let mut killing_floor = f64::INFINITY;
    for (seg, rows) in raw.into_iter().enumerate() {
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(ModelError::DimensionMismatch(format!(
                "generator segment {seg} is not {m}x{m}"
            )));
        }
        let g = DenseMatrix::from_rows(rows)
            .map_err(|e| ModelError::DimensionMismatch(e.to_string()))?;
        if !g.is_finite() {
            return Err(ModelError::NonFinite("generator"));
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && g[(i, j)] < 0.0 {
                    return Err(ModelError::NegativeOffDiagonal {
                        i: spec.states[i].clone(),
                        j: spec.states[j].clone(),
                        segment: seg,
                    });
                }
            }
            let row = g.row(i);
            let sum: f64 = row.iter().sum();
            let scale = row.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
            if sum > ROW_SUM_SLACK * scale {
                return Err(ModelError::PositiveRowSum {
                    i: spec.states[i].clone(),
                    segment: seg,
                });
            }
            killing_floor = killing_floor.min((-sum).max(0.0));
        }
        uniform_bound = uniform_bound.max(g.max_abs());
        segments.push(g);
    }

    Ok(ValidatedModel {
        labels: spec.states.clone(),
        velocities: spec.velocities.clone(),
        breakpoints,
        segments,
        plus_states,
        minus_states,
        uniform_bound,
        killing_floor,
    })
}

/// Reads and validates a JSON model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ValidatedModel, LoadError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let spec = ModelSpec::from_json(&text)?;
    Ok(validate_model(&spec)?)
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

impl ValidatedModel {
    /// Number of states `m`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    pub fn velocity(&self, state: usize) -> f64 {
        self.velocities[state]
    }

    /// Indices (original order) of states with positive velocity.
    pub fn plus_states(&self) -> &[usize] {
        &self.plus_states
    }

    /// Indices (original order) of states with negative velocity.
    pub fn minus_states(&self) -> &[usize] {
        &self.minus_states
    }

    pub fn side_states(&self, side: Side) -> &[usize] {
        match side {
            Side::Plus => &self.plus_states,
            Side::Minus => &self.minus_states,
        }
    }

    pub fn side_of(&self, state: usize) -> Side {
        if self.velocities[state] > 0.0 {
            Side::Plus
        } else {
            Side::Minus
        }
    }

    /// Internal block order: plus states first, then minus states.
    pub fn permutation(&self) -> Vec<usize> {
        self.plus_states
            .iter()
            .chain(&self.minus_states)
            .copied()
            .collect()
    }

    /// The uniform bound `K` on the absolute generator entries.
    pub fn uniform_bound(&self) -> f64 {
        self.uniform_bound
    }

    /// Smallest killing rate (negated row sum) over all rows and segments.
    pub fn killing_floor(&self) -> f64 {
        self.killing_floor
    }

    /// `max |v(i)|`.
    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn state_index(&self, label: &str) -> Result<usize, ModelError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ModelError::UnknownState(label.to_string()))
    }

    pub fn is_homogeneous(&self) -> bool {
        self.segments.len() == 1
    }

    /// The generator of a time-homogeneous model.
    pub fn constant_generator(&self) -> Option<&DenseMatrix> {
        self.is_homogeneous().then(|| &self.segments[0])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segments(&self) -> &[DenseMatrix] {
        &self.segments
    }

    /// Index of the segment active at time `s` (right-continuous).
    pub fn segment_index(&self, s: f64) -> usize {
        self.breakpoints.partition_point(|&t| t <= s)
    }

    /// First breakpoint strictly after `s`, if any.
    pub fn next_breakpoint(&self, s: f64) -> Option<f64> {
        self.breakpoints.get(self.segment_index(s)).copied()
    }

    /// The generator active at time `s`. The schedule is right-continuous: at a
    /// breakpoint the new segment's matrix is returned.
    pub fn generator_at(&self, s: f64) -> Result<&DenseMatrix, ModelError> {
        if s.is_nan() || s < 0.0 {
            return Err(ModelError::NegativeTime(s));
        }
        Ok(&self.segments[self.segment_index(s)])
    }

    /// Reconstructs a spec equivalent to the validated model.
    pub fn to_spec(&self) -> ModelSpec {
        let generator = if self.is_homogeneous() {
            GeneratorSpec::Constant {
                matrix: self.segments[0].to_rows(),
            }
        } else {
            GeneratorSpec::Piecewise {
                breakpoints: self.breakpoints.clone(),
                matrices: self.segments.iter().map(DenseMatrix::to_rows).collect(),
            }
        };
        ModelSpec {
            states: self.labels.clone(),
            velocities: self.velocities.clone(),
            generator,
        }
    }
}
