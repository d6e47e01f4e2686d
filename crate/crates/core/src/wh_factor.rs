//! Wiener–Hopf factors of a time-homogeneous fluid model.
//!
//! For a generator `Λ` and velocities `v` the factors are
//!
//! * `J⁺` (m₋×m₊): probability of the first upward passage of level 0 from a
//!   minus state, by landing state;
//! * `Q⁺` (m₊×m₊): sub-generator in the level variable, so that
//!   `P(τ⁺_ℓ < ζ, X = k | X₀ = i) = [exp(ℓ Q⁺)]_{ik}` for plus states;
//! * `J⁻`, `Q⁻`: the mirror images for downward passage.
//!
//! With `V₊ = diag(v|E₊)` and `|V₋| = diag(|v||E₋)` they solve
//!
//! ```text
//! Q⁺ = V₊⁻¹ (Λ₊₊ + Λ₊₋ J⁺)
//! J⁺ Q⁺ + |V₋|⁻¹ Λ₋₋ J⁺ + |V₋|⁻¹ Λ₋₊ = 0
//! ```
//!
//! and symmetrically for the minus side. Eliminating `Q⁺` leaves a
//! nonsymmetric algebraic Riccati equation in `J⁺`, which is solved here by
//! iterating from `J⁺ = 0`. Both solvers produce a monotone sequence that
//! increases towards the minimal nonnegative solution, which is the
//! probabilistic one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Side, ValidatedModel};
use crate::numerics::{solve_sylvester, DenseMatrix, NumericsError};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("no convergence after {max_iter} iterations (last residual {last_residual:.3e})")]
    NoConvergence { max_iter: usize, last_residual: f64 },
    #[error("sylvester step failed: {0}")]
    SylvesterSingular(NumericsError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("analytic path requires constant schedule")]
    NotHomogeneous,
}

/// How each iteration updates `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorMethod {
    /// Freeze `Q` at the current iterate and solve the linear Sylvester
    /// equation for the next `J`. Linear convergence, sublinear when the
    /// model has zero drift and no killing.
    FixedPoint,
    /// Newton's method on the Riccati equation; each step is one Sylvester
    /// solve. Quadratic convergence, linear (rate 1/2) for zero drift.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub method: FactorMethod,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            method: FactorMethod::Newton,
        }
    }
}

/// The quadruple `(Q⁺, Q⁻, J⁺, J⁻)` for the generator `Λ − tilt·I`.
///
/// Rows and columns follow the original order of the plus (resp. minus)
/// states in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WienerHopfFactors {
    pub q_plus: DenseMatrix,
    pub q_minus: DenseMatrix,
    pub j_plus: DenseMatrix,
    pub j_minus: DenseMatrix,
    pub tilt: f64,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl WienerHopfFactors {
    pub fn q(&self, side: Side) -> &DenseMatrix {
        match side {
            Side::Plus => &self.q_plus,
            Side::Minus => &self.q_minus,
        }
    }

    pub fn j(&self, side: Side) -> &DenseMatrix {
        match side {
            Side::Plus => &self.j_plus,
            Side::Minus => &self.j_minus,
        }
    }
}

/// Blocks of `|V|⁻¹ Λ` oriented so that `up` is the side whose passage is
/// being computed.
struct Blocks {
    uu: DenseMatrix,
    ud: DenseMatrix,
    du: DenseMatrix,
    dd: DenseMatrix,
}

impl Blocks {
    fn new(generator: &DenseMatrix, velocities: &[f64], up: &[usize], down: &[usize]) -> Self {
        let inv = |idx: &[usize]| {
            idx.iter()
                .map(|&i| 1.0 / velocities[i].abs())
                .collect::<Vec<_>>()
        };
        let (iu, id) = (inv(up), inv(down));
        Blocks {
            uu: generator.select(up, up).scale_rows(&iu),
            ud: generator.select(up, down).scale_rows(&iu),
            du: generator.select(down, up).scale_rows(&id),
            dd: generator.select(down, down).scale_rows(&id),
        }
    }

    fn q_of(&self, j: &DenseMatrix) -> DenseMatrix {
        self.uu.add(&self.ud.matmul(j).unwrap()).unwrap()
    }

    /// Max-norm residuals of the `Q` equation and of the `J` equation.
    fn residuals(&self, q: &DenseMatrix, j: &DenseMatrix) -> (f64, f64) {
        let rq = q.sub(&self.q_of(j)).unwrap().max_abs();
        let rj = j
            .matmul(q)
            .unwrap()
            .add(&self.dd.matmul(j).unwrap())
            .unwrap()
            .add(&self.du)
            .unwrap()
            .max_abs();
        (rq, rj)
    }

    fn riccati(&self, j: &DenseMatrix) -> DenseMatrix {
        let q = self.q_of(j);
        j.matmul(&q)
            .unwrap()
            .add(&self.dd.matmul(j).unwrap())
            .unwrap()
            .add(&self.du)
            .unwrap()
    }
}

struct SideFactors {
    q: DenseMatrix,
    j: DenseMatrix,
    iterations: usize,
}

fn solve_side(blocks: &Blocks, cfg: &FactorConfig) -> Result<SideFactors, FactorError> {
    let mut j = DenseMatrix::zeros(blocks.dd.rows(), blocks.uu.rows());
    let mut last_change = f64::INFINITY;
    for iter in 1..=cfg.max_iter {
        let next = match cfg.method {
            FactorMethod::FixedPoint => {
                let q = blocks.q_of(&j);
                solve_sylvester(&blocks.dd, &q, &blocks.du.scale(-1.0))
                    .map_err(FactorError::SylvesterSingular)?
            }
            FactorMethod::Newton => {
                let r = blocks.riccati(&j);
                if r.max_abs() == 0.0 {
                    j.clone()
                } else {
                    let right = blocks.q_of(&j);
                    let left = blocks.dd.add(&j.matmul(&blocks.ud).unwrap()).unwrap();
                    match solve_sylvester(&left, &right, &r.scale(-1.0)) {
                        Ok(h) => j.add(&h).unwrap(),
                        // The Newton operator degenerates at the solution of a
                        // zero-drift model; accept the iterate if it already
                        // satisfies the equation.
                        Err(NumericsError::SingularMatrix { .. }) if r.max_abs() <= cfg.tol => {
                            return Ok(finish_side(blocks, j, iter));
                        }
                        Err(e) => return Err(FactorError::SylvesterSingular(e)),
                    }
                }
            }
        };
        if !next.is_finite() {
            return Err(FactorError::NoConvergence {
                max_iter: iter,
                last_residual: f64::INFINITY,
            });
        }
        last_change = next.sub(&j).unwrap().max_abs();
        j = next;
        if last_change <= cfg.tol {
            let (rq, rj) = blocks.residuals(&blocks.q_of(&j), &j);
            if rq.max(rj) <= cfg.tol {
                return Ok(finish_side(blocks, j, iter));
            }
        }
    }
    let (rq, rj) = blocks.residuals(&blocks.q_of(&j), &j);
    Err(FactorError::NoConvergence {
        max_iter: cfg.max_iter,
        last_residual: rq.max(rj).max(last_change),
    })
}

fn finish_side(blocks: &Blocks, mut j: DenseMatrix, iterations: usize) -> SideFactors {
    // flush roundoff-level negatives; J is a matrix of probabilities
    for r in 0..j.rows() {
        for c in 0..j.cols() {
            if j[(r, c)] < 0.0 && j[(r, c)] > -1e-12 {
                j[(r, c)] = 0.0;
            }
        }
    }
    SideFactors {
        q: blocks.q_of(&j),
        j,
        iterations,
    }
}

fn check_inputs(
    generator: &DenseMatrix,
    velocities: &[f64],
    cfg: &FactorConfig,
) -> Result<(), FactorError> {
    if !generator.is_square() || generator.rows() != velocities.len() {
        return Err(FactorError::ShapeMismatch(format!(
            "{}x{} generator with {} velocities",
            generator.rows(),
            generator.cols(),
            velocities.len()
        )));
    }
    if !(cfg.tol > 0.0 && cfg.tol <= 1e-6) {
        return Err(FactorError::InvalidInput(format!(
            "tol {} outside (0, 1e-6]",
            cfg.tol
        )));
    }
    if cfg.max_iter == 0 {
        return Err(FactorError::InvalidInput(
            "maxIter must be at least 1".into(),
        ));
    }
    if velocities.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(FactorError::InvalidInput(
            "velocities must be finite and nonzero".into(),
        ));
    }
    if !velocities.iter().any(|v| *v > 0.0) || !velocities.iter().any(|v| *v < 0.0) {
        return Err(FactorError::InvalidInput(
            "velocities must take both signs".into(),
        ));
    }
    Ok(())
}

fn partition(velocities: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let plus = (0..velocities.len())
        .filter(|&i| velocities[i] > 0.0)
        .collect();
    let minus = (0..velocities.len())
        .filter(|&i| velocities[i] < 0.0)
        .collect();
    (plus, minus)
}

/// Factorizes a time-homogeneous sub-Markovian generator.
pub fn factorize(
    generator: &DenseMatrix,
    velocities: &[f64],
    cfg: &FactorConfig,
) -> Result<WienerHopfFactors, FactorError> {
    factorize_tilted(generator, velocities, 0.0, cfg)
}

/// Factorizes `Λ − c·I`: the passage quantities of the original model
/// discounted at rate `c` in time.
pub fn tilt_factorize(
    generator: &DenseMatrix,
    velocities: &[f64],
    c: f64,
    cfg: &FactorConfig,
) -> Result<WienerHopfFactors, FactorError> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(FactorError::InvalidInput(format!(
            "tilt {c} must be finite and nonnegative"
        )));
    }
    factorize_tilted(generator, velocities, c, cfg)
}

fn factorize_tilted(
    generator: &DenseMatrix,
    velocities: &[f64],
    c: f64,
    cfg: &FactorConfig,
) -> Result<WienerHopfFactors, FactorError> {
    check_inputs(generator, velocities, cfg)?;
    let tilted = generator.shift_diag(-c);
    let (plus, minus) = partition(velocities);
    let up = solve_side(&Blocks::new(&tilted, velocities, &plus, &minus), cfg)?;
    let down = solve_side(&Blocks::new(&tilted, velocities, &minus, &plus), cfg)?;
    let mut factors = WienerHopfFactors {
        q_plus: up.q,
        q_minus: down.q,
        j_plus: up.j,
        j_minus: down.j,
        tilt: c,
        residual_norm: 0.0,
        iterations: up.iterations.max(down.iterations),
    };
    factors.residual_norm = residual(&factors, generator, velocities)?;
    if factors.residual_norm > cfg.tol {
        return Err(FactorError::NoConvergence {
            max_iter: factors.iterations,
            last_residual: factors.residual_norm,
        });
    }
    Ok(factors)
}

/// Max-norm of the four block-equation residuals, evaluated on
/// `Λ − tilt·I`.
pub fn residual(
    factors: &WienerHopfFactors,
    generator: &DenseMatrix,
    velocities: &[f64],
) -> Result<f64, FactorError> {
    if !generator.is_square() || generator.rows() != velocities.len() {
        return Err(FactorError::ShapeMismatch(format!(
            "{}x{} generator with {} velocities",
            generator.rows(),
            generator.cols(),
            velocities.len()
        )));
    }
    let (plus, minus) = partition(velocities);
    let (mp, mm) = (plus.len(), minus.len());
    let shape = |m: &DenseMatrix, r: usize, c: usize| m.rows() == r && m.cols() == c;
    if !(shape(&factors.q_plus, mp, mp)
        && shape(&factors.q_minus, mm, mm)
        && shape(&factors.j_plus, mm, mp)
        && shape(&factors.j_minus, mp, mm))
    {
        return Err(FactorError::ShapeMismatch(format!(
            "factors do not match a model with {mp} plus and {mm} minus states"
        )));
    }
    let tilted = generator.shift_diag(-factors.tilt);
    let up = Blocks::new(&tilted, velocities, &plus, &minus);
    let down = Blocks::new(&tilted, velocities, &minus, &plus);
    let (a, b) = up.residuals(&factors.q_plus, &factors.j_plus);
    let (c, d) = down.residuals(&factors.q_minus, &factors.j_minus);
    Ok(a.max(b).max(c).max(d))
}

/// Factors of a validated model; fails for time-inhomogeneous schedules.
pub fn factorize_model(
    model: &ValidatedModel,
    tilt: f64,
    cfg: &FactorConfig,
) -> Result<WienerHopfFactors, FactorError> {
    let generator = model
        .constant_generator()
        .ok_or(FactorError::NotHomogeneous)?;
    tilt_factorize(generator, model.velocities(), tilt, cfg)
}
