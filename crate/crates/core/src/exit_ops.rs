//! Exit operators over the class `g(t, j) = exp(-c t) f(j)`.
//!
//! Tilting the generator by `c` keeps this class closed under every passage
//! operator, so one-sided passages, the two-sided exit operators `Ξ±` and
//! their Neumann series all reduce to small dense matrix algebra on the
//! tilted Wiener–Hopf factors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mc_engine::path::{first_exit, segment_rates, CrossingKind, PathWalker};
use crate::mc_engine::stats::{map_paths, EstimateWithCI};
use crate::mc_engine::stream::{path_rng, StreamTag};
use crate::mc_engine::{McConfig, McError};
use crate::model::{Side, ValidatedModel};
use crate::numerics::{matrix_exp, solve_linear, DenseMatrix, NumericsError, EXPM_REL_TOL};
use crate::wh_factor::{factorize_model, FactorConfig, FactorError, WienerHopfFactors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExitError {
    #[error("factorization failed: {0}")]
    FactorizationFailed(#[from] FactorError),
    #[error("function lives on {found:?} states but the operator needs {expected:?}")]
    SideMismatch { expected: Side, found: Side },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("series diverges: {0}")]
    DivergenceDetected(String),
    #[error("bad time order: s = {s}, t = {t}")]
    BadTimeOrder { s: f64, t: f64 },
    #[error("non-positive argument: {0}")]
    NonPositiveArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    MonteCarlo(#[from] McError),
}

/// `g(t, j) = exp(-c t) f(j)` with `f` indexed by the states of `side`, in
/// their original order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpDecayFunction {
    pub c: f64,
    pub side: Side,
    pub f: Vec<f64>,
}

impl ExpDecayFunction {
    pub fn new(c: f64, side: Side, f: Vec<f64>) -> Self {
        ExpDecayFunction { c, side, f }
    }

    /// Restricts a function given on all of `E` to the states of `side`.
    pub fn restrict(model: &ValidatedModel, c: f64, side: Side, full: &[f64]) -> Self {
        let f = model.side_states(side).iter().map(|&j| full[j]).collect();
        ExpDecayFunction { c, side, f }
    }

    pub fn sup_norm(&self) -> f64 {
        self.f.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
    }
}

/// How the Neumann series `Σ Mⁿ` is summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    rename_all = "lowercase",
    rename_all_fields = "camelCase"
)]
pub enum SeriesMethod {
    /// Truncated series; `terms` is the number of powers summed.
    Neumann { terms: usize, tail_bound: f64 },
    /// Exact `(I - M)⁻¹` by LU.
    Resolvent,
}

/// How many terms [`neumann_apply`] sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Powers `0..=n`.
    Terms(usize),
    /// Fewest terms whose certified tail is at most the given tolerance.
    Tolerance(f64),
}

/// Which summation [`two_sided`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Neumann,
    #[default]
    Resolvent,
}

/// Default tolerance for tolerance-driven truncation.
pub const NEUMANN_TOL: f64 = 1e-12;

/// Values of `Ξ⁺g⁺`, `Ξ⁻g⁻` and their sum at time `s`, indexed by all of `E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TwoSidedResult {
    pub xi_plus: Vec<f64>,
    pub xi_minus: Vec<f64>,
    pub joint: Vec<f64>,
    pub method: SeriesMethod,
    /// Bound on the sup-norm error of each vector caused by truncation.
    pub truncation_bound: f64,
}

/// `∫₀¹ (1 - (1 - x)^a)² dx = 1 - 2/(a+1) + 1/(2a+1)` with `a = K/c`.
pub fn contraction_constant(k: f64, c: f64) -> Result<f64, ExitError> {
    if !(k > 0.0 && k.is_finite()) || !(c > 0.0 && c.is_finite()) {
        return Err(ExitError::NonPositiveArgument(format!("K = {k}, c = {c}")));
    }
    let a = k / c;
    // same value, without the cancellation at small a
    Ok(2.0 * a * a / ((a + 1.0) * (2.0 * a + 1.0)))
}

/// Decay rate of passage functionals: the payoff decay plus the killing floor.
fn effective_decay(model: &ValidatedModel, c: f64) -> f64 {
    c + model.killing_floor()
}

fn check_decay(model: &ValidatedModel, c: f64) -> Result<(), ExitError> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(ExitError::PreconditionViolated(format!(
            "decay rate {c} must be finite and nonnegative"
        )));
    }
    if c == 0.0 && model.killing_floor() <= 0.0 {
        return Err(ExitError::PreconditionViolated(
            "c = 0 needs a positive killing floor".into(),
        ));
    }
    Ok(())
}

/// Contraction constant for a model and decay rate; killing counts as decay.
pub fn model_contraction(model: &ValidatedModel, c: f64) -> Result<f64, ExitError> {
    check_decay(model, c)?;
    let k = model.uniform_bound();
    if k == 0.0 {
        return Ok(0.0);
    }
    contraction_constant(k, effective_decay(model, c))
}

/// Sure bound `‖exp(ℓ Q±)‖∞ <= exp(-c_min ℓ / ‖v‖∞)`: reaching level `ℓ`
/// takes at least `ℓ / ‖v‖∞` time units.
pub fn passage_norm_bound(model: &ValidatedModel, level: f64) -> f64 {
    (-model.killing_floor() * level / model.max_speed()).exp()
}

fn expm(a: &DenseMatrix, t: f64) -> Result<DenseMatrix, ExitError> {
    if t == 0.0 {
        return Ok(DenseMatrix::identity(a.rows()));
    }
    Ok(matrix_exp(&a.scale(t), EXPM_REL_TOL)?)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
}

/// Sums `Σ_{n=0}^{N} Mⁿ f` and reports `C^{N+1} / (1 - C) ‖f‖∞`.
///
/// `contraction` is the per-power bound `C` (see [`contraction_constant`]).
pub fn neumann_apply(
    m: &DenseMatrix,
    f: &[f64],
    truncation: Truncation,
    contraction: f64,
) -> Result<(Vec<f64>, usize, f64), ExitError> {
    if !(0.0..1.0).contains(&contraction) {
        return Err(ExitError::DivergenceDetected(format!(
            "contraction constant {contraction} is not below 1"
        )));
    }
    let norm = sup(f);
    let tail = |n: usize| contraction.powi(n as i32 + 1) / (1.0 - contraction) * norm;
    let last = match truncation {
        Truncation::Terms(n) => n,
        Truncation::Tolerance(tol) => {
            if tol.is_nan() || tol <= 0.0 {
                return Err(ExitError::PreconditionViolated(format!("tolerance {tol}")));
            }
            let mut n = 0;
            while tail(n) > tol {
                n += 1;
            }
            n
        }
    };
    let mut sum = f.to_vec();
    let mut term = f.to_vec();
    for n in 1..=last {
        term = m.matvec(&term)?;
        let size = sup(&term);
        if !size.is_finite() || size > norm * (1.0 + 1e-9) {
            return Err(ExitError::DivergenceDetected(format!(
                "term {n} has sup-norm {size:.3e} against {norm:.3e} for the function"
            )));
        }
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += t;
        }
    }
    Ok((sum, last, tail(last)))
}

/// `(I - M)⁻¹ f`.
pub fn resolvent_apply(m: &DenseMatrix, f: &[f64]) -> Result<Vec<f64>, ExitError> {
    let n = m.rows();
    let a = DenseMatrix::identity(n).sub(m)?;
    solve_linear(&a, f)
        .map_err(|e| ExitError::DivergenceDetected(format!("I - M is singular: {e}")))
}

/// Tilted factors with the plus/minus index maps of the model.
pub struct ExitAlgebra<'a> {
    model: &'a ValidatedModel,
    factors: WienerHopfFactors,
    c: f64,
}

impl<'a> ExitAlgebra<'a> {
    /// Factorizes `Λ - c I`; `c = 0` needs a positive killing floor.
    pub fn new(model: &'a ValidatedModel, c: f64, cfg: &FactorConfig) -> Result<Self, ExitError> {
        check_decay(model, c)?;
        let factors = factorize_model(model, c, cfg)?;
        Ok(ExitAlgebra { model, factors, c })
    }

    /// Uses given factors as they are; for negative controls and round trips.
    pub fn with_factors(
        model: &'a ValidatedModel,
        factors: WienerHopfFactors,
    ) -> Result<Self, ExitError> {
        let c = factors.tilt;
        check_decay(model, c)?;
        Ok(ExitAlgebra { model, factors, c })
    }

    pub fn factors(&self) -> &WienerHopfFactors {
        &self.factors
    }

    pub fn decay(&self) -> f64 {
        self.c
    }

    /// `exp(ℓ Q±)`.
    pub fn passage(&self, side: Side, level: f64) -> Result<DenseMatrix, ExitError> {
        expm(self.factors.q(side), level)
    }

    /// `(I; J±) A` laid out over all of `E`: rows of `side` states take `A`,
    /// rows of the other side take `J± A`.
    pub fn stack(&self, side: Side, a: &DenseMatrix) -> Result<DenseMatrix, ExitError> {
        let jb = self.factors.j(side).matmul(a)?;
        let mut out = DenseMatrix::zeros(self.model.len(), a.cols());
        let mut put = |rows: &[usize], src: &DenseMatrix| {
            for (r, &i) in rows.iter().enumerate() {
                for k in 0..a.cols() {
                    out[(i, k)] = src[(r, k)];
                }
            }
        };
        put(self.model.side_states(side), a);
        put(self.model.side_states(side.opposite()), &jb);
        Ok(out)
    }

    /// Matrix of `g ↦ (I; J±) P±_ℓ g` at time 0, an `m × |E±|` matrix.
    pub fn one_sided_matrix(&self, side: Side, level: f64) -> Result<DenseMatrix, ExitError> {
        self.stack(side, &self.passage(side, level)?)
    }

    /// `M± = J∓ exp(L Q∓) J± exp(L Q±)` on the functions of `side`.
    pub fn composite(&self, side: Side, total: f64) -> Result<DenseMatrix, ExitError> {
        let other = side.opposite();
        let right = self.factors.j(side).matmul(&self.passage(side, total)?)?;
        let left = self.factors.j(other).matmul(&self.passage(other, total)?)?;
        Ok(left.matmul(&right)?)
    }

    /// `(I; J±) exp(ℓ± Q±) - (J∓; I) exp(ℓ∓ Q∓) J± exp(L Q±)`, the factor
    /// that `Ξ±` applies after the Neumann series.
    pub fn exit_prefactor(
        &self,
        side: Side,
        lminus: f64,
        lplus: f64,
    ) -> Result<DenseMatrix, ExitError> {
        let (near, far) = match side {
            Side::Plus => (lplus, lminus),
            Side::Minus => (lminus, lplus),
        };
        let total = lminus + lplus;
        let other = side.opposite();
        let direct = self.stack(side, &self.passage(side, near)?)?;
        let back = self
            .passage(other, far)?
            .matmul(self.factors.j(side))?
            .matmul(&self.passage(side, total)?)?;
        let overshoot = self.stack(other, &back)?;
        Ok(direct.sub(&overshoot)?)
    }

    /// Matrix of `Ξ±` at time 0 using the exact resolvent.
    pub fn xi_matrix(&self, side: Side, lminus: f64, lplus: f64) -> Result<DenseMatrix, ExitError> {
        let pre = self.exit_prefactor(side, lminus, lplus)?;
        let m = self.composite(side, lminus + lplus)?;
        let n = m.rows();
        let series = crate::numerics::solve_linear_matrix(
            &DenseMatrix::identity(n).sub(&m)?,
            &DenseMatrix::identity(n),
        )
        .map_err(|e| ExitError::DivergenceDetected(format!("I - M is singular: {e}")))?;
        Ok(pre.matmul(&series)?)
    }

    /// `Σ Mⁿ f` for `M = M±` and the reported tail bound.
    fn series(
        &self,
        side: Side,
        total: f64,
        f: &[f64],
        method: Method,
    ) -> Result<(Vec<f64>, SeriesMethod, f64), ExitError> {
        let m = self.composite(side, total)?;
        match method {
            Method::Resolvent => Ok((resolvent_apply(&m, f)?, SeriesMethod::Resolvent, 0.0)),
            Method::Neumann => {
                let contraction = model_contraction(self.model, self.c)?;
                let (y, terms, tail_bound) =
                    neumann_apply(&m, f, Truncation::Tolerance(NEUMANN_TOL), contraction)?;
                Ok((y, SeriesMethod::Neumann { terms, tail_bound }, tail_bound))
            }
        }
    }

    /// `Ξ± g±` at time `s` over all of `E`, with a bound on the error from
    /// truncating the series.
    pub fn xi_apply(
        &self,
        g: &ExpDecayFunction,
        lminus: f64,
        lplus: f64,
        s: f64,
        method: Method,
    ) -> Result<(Vec<f64>, SeriesMethod, f64), ExitError> {
        self.check_function(g, g.side)?;
        let side = g.side;
        let (y, used, tail) = self.series(side, lminus + lplus, &g.f, method)?;
        let pre = self.exit_prefactor(side, lminus, lplus)?;
        let scale = (-self.c * s).exp();
        let mut out: Vec<f64> = pre.matvec(&y)?.into_iter().map(|x| x * scale).collect();
        let near = match side {
            Side::Plus => lplus,
            Side::Minus => lminus,
        };
        if near == 0.0 {
            // immediate exit from the states of this side
            for (r, &i) in self.model.side_states(side).iter().enumerate() {
                out[i] = scale * g.f[r];
            }
        }
        Ok((out, used, scale * pre.norm_inf() * tail))
    }

    fn check_function(&self, g: &ExpDecayFunction, side: Side) -> Result<(), ExitError> {
        if g.side != side {
            return Err(ExitError::SideMismatch {
                expected: side,
                found: g.side,
            });
        }
        if g.f.len() != self.model.side_states(side).len() {
            return Err(ExitError::PreconditionViolated(format!(
                "function has {} values for {} {side} states",
                g.f.len(),
                self.model.side_states(side).len()
            )));
        }
        if g.c != self.c {
            return Err(ExitError::PreconditionViolated(format!(
                "function decays at {} but the factors are tilted by {}",
                g.c, self.c
            )));
        }
        Ok(())
    }
}

/// `E_{s,i}[g(τ±_ℓ, X_{τ±_ℓ})]` for every `i` in `E`.
pub fn one_sided(
    model: &ValidatedModel,
    g: &ExpDecayFunction,
    side: Side,
    level: f64,
    s: f64,
    cfg: &FactorConfig,
) -> Result<Vec<f64>, ExitError> {
    if level.is_nan() || level < 0.0 {
        return Err(ExitError::PreconditionViolated(format!(
            "level {level} must be nonnegative"
        )));
    }
    let alg = ExitAlgebra::new(model, g.c, cfg)?;
    alg.check_function(g, side)?;
    let scale = (-g.c * s).exp();
    let mut out: Vec<f64> = alg
        .one_sided_matrix(side, level)?
        .matvec(&g.f)?
        .into_iter()
        .map(|x| x * scale)
        .collect();
    if level == 0.0 {
        for (r, &i) in model.side_states(side).iter().enumerate() {
            out[i] = scale * g.f[r];
        }
    }
    Ok(out)
}

/// `Ξ⁺g⁺`, `Ξ⁻g⁻` and their sum at time `s`.
///
/// When the two decay rates differ the smaller one is used for both, with
/// the faster-decaying function rescaled accordingly; that rescaling is
/// exact only at `s` and is rejected here, so callers pass a common `c`.
#[allow(clippy::too_many_arguments)]
pub fn two_sided(
    model: &ValidatedModel,
    gplus: &ExpDecayFunction,
    gminus: &ExpDecayFunction,
    lminus: f64,
    lplus: f64,
    s: f64,
    method: Method,
    cfg: &FactorConfig,
) -> Result<TwoSidedResult, ExitError> {
    if gplus.c != gminus.c {
        return Err(ExitError::PreconditionViolated(format!(
            "decay rates differ: {} on E+, {} on E-",
            gplus.c, gminus.c
        )));
    }
    let alg = ExitAlgebra::new(model, gplus.c, cfg)?;
    two_sided_with(&alg, gplus, gminus, lminus, lplus, s, method)
}

/// [`two_sided`] on precomputed factors.
pub fn two_sided_with(
    alg: &ExitAlgebra<'_>,
    gplus: &ExpDecayFunction,
    gminus: &ExpDecayFunction,
    lminus: f64,
    lplus: f64,
    s: f64,
    method: Method,
) -> Result<TwoSidedResult, ExitError> {
    if !(lminus >= 0.0 && lplus >= 0.0) {
        return Err(ExitError::PreconditionViolated(format!(
            "levels {lminus}, {lplus} must be nonnegative"
        )));
    }
    alg.check_function(gplus, Side::Plus)?;
    alg.check_function(gminus, Side::Minus)?;
    let (xi_plus, used, tail_p) = alg.xi_apply(gplus, lminus, lplus, s, method)?;
    let (mut xi_minus, _, tail_m) = alg.xi_apply(gminus, lminus, lplus, s, method)?;
    // on an immediate exit the other operator sees ξ = ∞
    if lplus == 0.0 {
        for &i in alg.model.plus_states() {
            xi_minus[i] = 0.0;
        }
    }
    let mut xi_plus = xi_plus;
    if lminus == 0.0 {
        for &i in alg.model.minus_states() {
            xi_plus[i] = 0.0;
        }
    }
    let joint = xi_plus.iter().zip(&xi_minus).map(|(a, b)| a + b).collect();
    Ok(TwoSidedResult {
        xi_plus,
        xi_minus,
        joint,
        method: used,
        truncation_bound: tail_p + tail_m,
    })
}

/// `U_{s,t}`, the matrix of `f ↦ E_{·}[f(X_t)] ` started at time `s`; for a
/// piecewise schedule, the time-ordered product of segment exponentials.
pub fn evolution_operator(
    model: &ValidatedModel,
    s: f64,
    t: f64,
) -> Result<DenseMatrix, ExitError> {
    if !(s >= 0.0 && s <= t && t.is_finite()) {
        return Err(ExitError::BadTimeOrder { s, t });
    }
    let mut u = DenseMatrix::identity(model.len());
    let mut a = s;
    while a < t {
        let b = model.next_breakpoint(a).unwrap_or(f64::INFINITY).min(t);
        let step = expm(&model.segments()[model.segment_index(a)], b - a)?;
        u = u.matmul(&step)?;
        a = b;
    }
    Ok(u)
}

/// Result of the pre-exit law computation at one start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PreExitResult {
    /// `E_{s,i}[h(X_T) 1{exit <= T}]`.
    pub estimate: EstimateWithCI,
    /// `(U_{s,T} h)(i)`.
    pub evolution: f64,
    /// `E_{s,i}[h(X_T) 1{exit > T}] = (U_{s,T} h)(i) - estimate`.
    pub complement: f64,
}

/// Hybrid estimate of `E_{s,i}[h(X_T) 1{τ⁻ ∧ τ⁺ <= T}]`: each path runs to
/// its two-sided exit and, if that comes by `T` at `(τ, j)`, contributes
/// `(U_{τ,T} h)(j)` computed exactly.
#[allow(clippy::too_many_arguments)]
pub fn pre_exit_law(
    model: &ValidatedModel,
    h: &[f64],
    until: f64,
    lminus: f64,
    lplus: f64,
    s: f64,
    i: usize,
    n: u64,
    seed: u64,
    cfg: &McConfig,
) -> Result<PreExitResult, ExitError> {
    if !(s >= 0.0 && s <= until && until.is_finite()) {
        return Err(ExitError::BadTimeOrder { s, t: until });
    }
    if h.len() != model.len() || i >= model.len() {
        return Err(McError::BadQuery(format!(
            "h has {} values for {} states",
            h.len(),
            model.len()
        ))
        .into());
    }
    if n < 2 {
        return Err(McError::TooFewPaths(n).into());
    }
    if !(lminus >= 0.0 && lplus >= 0.0) {
        return Err(
            McError::BadQuery(format!("levels {lminus}, {lplus} must be nonnegative")).into(),
        );
    }
    let rates = segment_rates(model);
    let velocities = model.velocities();
    let samples: Vec<Result<f64, ExitError>> = map_paths(n, cfg.exec, |k| {
        let mut w = PathWalker::new(
            model,
            &rates,
            s,
            i,
            until,
            path_rng(seed, StreamTag::Primary, k),
        );
        let r = first_exit(&mut w, velocities, lminus, lplus);
        match (r.kind, r.time, r.state) {
            (CrossingKind::UpExit | CrossingKind::DownExit, Some(t), Some(j)) if t <= until => {
                let u = evolution_operator(model, t, until)?;
                Ok(u.row(j).iter().zip(h).map(|(a, b)| a * b).sum())
            }
            _ => Ok(0.0),
        }
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_, _>>()?;
    let estimate = EstimateWithCI::from_samples(&samples, seed, until, 0.0);
    let evolution: f64 = evolution_operator(model, s, until)?
        .row(i)
        .iter()
        .zip(h)
        .map(|(a, b)| a * b)
        .sum();
    Ok(PreExitResult {
        complement: evolution - estimate.mean,
        evolution,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ModelSpec};

    fn model(g: [[f64; 2]; 2]) -> ValidatedModel {
        validate_model(&ModelSpec::constant(["u", "d"], &[1.0, -1.0], &g)).unwrap()
    }

    fn killed() -> ValidatedModel {
        model([[-2.0, 1.0], [1.0, -2.0]])
    }

    fn three_state() -> ValidatedModel {
        validate_model(&ModelSpec::constant(
            ["a", "b", "c"],
            &[1.5, -0.5, 2.0],
            &[[-3.0, 1.0, 1.5], [0.5, -2.0, 1.0], [1.0, 1.0, -2.5]],
        ))
        .unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn contraction_constant_values() {
        assert_eq!(contraction_constant(1.0, 1.0).unwrap(), 1.0 / 3.0);
        assert!(close(
            contraction_constant(2.0, 1.0).unwrap(),
            8.0 / 15.0,
            1e-15
        ));
        assert!(contraction_constant(1e-9, 1.0).unwrap() < 1e-17);
        assert!(contraction_constant(0.0, 1.0).is_err());
        assert!(contraction_constant(1.0, -1.0).is_err());
    }

    #[test]
    fn one_sided_killed_model() {
        let m = killed();
        let g = ExpDecayFunction::new(0.0, Side::Plus, vec![1.0]);
        let v = one_sided(&m, &g, Side::Plus, 1.0, 0.0, &FactorConfig::default()).unwrap();
        let s3 = 3f64.sqrt();
        assert!(close(v[0], (-s3).exp(), 1e-10));
        assert!(close(v[1], (2.0 - s3) * (-s3).exp(), 1e-10));
        let v0 = one_sided(&m, &g, Side::Plus, 0.0, 3.0, &FactorConfig::default()).unwrap();
        assert_eq!(v0[0], 1.0);
    }

    #[test]
    fn one_sided_rejects_bad_inputs() {
        let m = model([[-1.0, 1.0], [1.0, -1.0]]);
        let g = ExpDecayFunction::new(0.0, Side::Plus, vec![1.0]);
        let e = one_sided(&m, &g, Side::Plus, 1.0, 0.0, &FactorConfig::default());
        assert!(matches!(e, Err(ExitError::PreconditionViolated(_))));
        let e = one_sided(
            &killed(),
            &g,
            Side::Minus,
            1.0,
            0.0,
            &FactorConfig::default(),
        );
        assert!(matches!(e, Err(ExitError::SideMismatch { .. })));
    }

    #[test]
    fn composite_of_killed_model() {
        let m = killed();
        let alg = ExitAlgebra::new(&m, 0.0, &FactorConfig::default()).unwrap();
        let comp = alg.composite(Side::Plus, 1.0).unwrap();
        let s3 = 3f64.sqrt();
        let expected = (2.0 - s3).powi(2) * (-2.0 * s3).exp();
        assert!(close(comp[(0, 0)], expected, 1e-12));
        assert!(close(comp[(0, 0)], 0.002247, 5e-7));
        let (sum, _, _) =
            neumann_apply(&comp, &[1.0], Truncation::Tolerance(1e-14), 8.0 / 15.0).unwrap();
        assert!(close(sum[0], 1.0 / (1.0 - expected), 1e-14));
        assert!(close(sum[0], 1.002252, 5e-7));
    }

    #[test]
    fn neumann_geometric_series() {
        let m = DenseMatrix::from_rows(&[[0.25]]).unwrap();
        let r = resolvent_apply(&m, &[1.0]).unwrap();
        assert!(close(r[0], 4.0 / 3.0, 1e-15));
        let (s, n, tail) =
            neumann_apply(&m, &[1.0], Truncation::Tolerance(1e-12), 1.0 / 3.0).unwrap();
        assert!(close(s[0], 4.0 / 3.0, tail));
        assert!(tail <= 1e-12);
        assert!(n > 0);
        let zero = DenseMatrix::zeros(1, 1);
        let (s, _, tail) = neumann_apply(&zero, &[2.0], Truncation::Terms(0), 0.5).unwrap();
        assert_eq!(s, vec![2.0]);
        assert_eq!(tail, 2.0);
    }

    #[test]
    fn neumann_detects_divergence() {
        let m = DenseMatrix::from_rows(&[[1.5]]).unwrap();
        let e = neumann_apply(&m, &[1.0], Truncation::Terms(5), 0.5);
        assert!(matches!(e, Err(ExitError::DivergenceDetected(_))));
        let e = neumann_apply(&m, &[1.0], Truncation::Terms(5), 1.0);
        assert!(matches!(e, Err(ExitError::DivergenceDetected(_))));
    }

    #[test]
    fn telescoping_identity() {
        let m = DenseMatrix::from_rows(&[[0.2, 0.1], [0.05, 0.3]]).unwrap();
        let f = [1.0, -0.5];
        for n in 0..6 {
            let (s, _, _) = neumann_apply(&m, &f, Truncation::Terms(n), 0.5).unwrap();
            let lhs: Vec<f64> = s
                .iter()
                .zip(m.matvec(&s).unwrap())
                .map(|(a, b)| a - b)
                .collect();
            let mut p = f.to_vec();
            for _ in 0..=n {
                p = m.matvec(&p).unwrap();
            }
            for k in 0..2 {
                assert!(close(lhs[k], f[k] - p[k], 1e-15));
            }
        }
    }

    fn decomposition_gap(m: &ValidatedModel, c: f64, lminus: f64, lplus: f64) -> f64 {
        let alg = ExitAlgebra::new(m, c, &FactorConfig::default()).unwrap();
        let total = lminus + lplus;
        let mut worst: f64 = 0.0;
        for side in [Side::Plus, Side::Minus] {
            let other = side.opposite();
            let lhs = alg
                .one_sided_matrix(side, if side == Side::Plus { lplus } else { lminus })
                .unwrap();
            let xi = alg.xi_matrix(side, lminus, lplus).unwrap();
            let xi_other = alg.xi_matrix(other, lminus, lplus).unwrap();
            let carry = alg
                .factors()
                .j(side)
                .matmul(&alg.passage(side, total).unwrap())
                .unwrap();
            let rhs = xi.add(&xi_other.matmul(&carry).unwrap()).unwrap();
            worst = worst.max(lhs.sub(&rhs).unwrap().max_abs());
        }
        worst
    }

    #[test]
    fn decomposition_identity_holds() {
        assert!(decomposition_gap(&killed(), 0.0, 0.5, 0.5) < 1e-12);
        assert!(decomposition_gap(&three_state(), 0.3, 0.2, 0.7) < 1e-10);
        assert!(decomposition_gap(&model([[-1.0, 1.0], [1.0, -1.0]]), 0.5, 0.4, 0.4) < 1e-10);
    }

    #[test]
    fn immediate_exit_cases_are_exact() {
        let m = three_state();
        let alg = ExitAlgebra::new(&m, 0.5, &FactorConfig::default()).unwrap();
        let gp = ExpDecayFunction::new(0.5, Side::Plus, vec![0.7, 0.3]);
        let gm = ExpDecayFunction::new(0.5, Side::Minus, vec![0.9]);
        let r = two_sided_with(&alg, &gp, &gm, 0.6, 0.0, 2.0, Method::Resolvent).unwrap();
        let e = (-1.0f64).exp();
        assert_eq!(r.xi_plus[0], e * 0.7);
        assert_eq!(r.xi_plus[2], e * 0.3);
        assert_eq!(r.xi_minus[0], 0.0);
        assert_eq!(r.xi_minus[2], 0.0);
        let r = two_sided_with(&alg, &gp, &gm, 0.0, 0.6, 2.0, Method::Neumann).unwrap();
        assert_eq!(r.xi_minus[1], e * 0.9);
        assert_eq!(r.xi_plus[1], 0.0);
    }

    #[test]
    fn methods_agree_within_tail_bound() {
        let m = three_state();
        let gp = ExpDecayFunction::new(0.2, Side::Plus, vec![1.0, 0.5]);
        let gm = ExpDecayFunction::new(0.2, Side::Minus, vec![0.25]);
        let cfg = FactorConfig::default();
        let a = two_sided(&m, &gp, &gm, 0.3, 0.4, 1.0, Method::Resolvent, &cfg).unwrap();
        let b = two_sided(&m, &gp, &gm, 0.3, 0.4, 1.0, Method::Neumann, &cfg).unwrap();
        assert!(matches!(b.method, SeriesMethod::Neumann { .. }));
        for k in 0..3 {
            assert!((a.joint[k] - b.joint[k]).abs() <= b.truncation_bound + 1e-15);
            assert_eq!(a.joint[k], a.xi_plus[k] + a.xi_minus[k]);
            assert!(a.xi_plus[k] >= 0.0 && a.xi_plus[k] <= 1.0);
            assert!(a.xi_minus[k] >= 0.0 && a.xi_minus[k] <= 1.0);
        }
    }

    #[test]
    fn two_sided_preconditions() {
        let m = model([[-1.0, 1.0], [1.0, -1.0]]);
        let gp = ExpDecayFunction::new(0.0, Side::Plus, vec![1.0]);
        let gm = ExpDecayFunction::new(0.0, Side::Minus, vec![0.0]);
        let e = two_sided(
            &m,
            &gp,
            &gm,
            0.5,
            0.5,
            0.0,
            Method::Resolvent,
            &FactorConfig::default(),
        );
        assert!(matches!(e, Err(ExitError::PreconditionViolated(_))));
    }

    #[test]
    fn evolution_operator_cases() {
        let m = killed();
        assert_eq!(
            evolution_operator(&m, 1.0, 1.0).unwrap(),
            DenseMatrix::identity(2)
        );
        let u = evolution_operator(&m, 0.0, 1.0).unwrap();
        // eigenvalues -1 and -3
        let (a, b) = ((-1.0f64).exp(), (-3.0f64).exp());
        assert!(close(u[(0, 0)], (a + b) / 2.0, 1e-13));
        assert!(close(u[(0, 1)], (a - b) / 2.0, 1e-13));
        assert!(u.row_sums().iter().all(|&r| r <= 1.0));
        assert!(matches!(
            evolution_operator(&m, 2.0, 1.0),
            Err(ExitError::BadTimeOrder { .. })
        ));
    }

    #[test]
    fn pre_exit_degenerate_cases() {
        let m = killed();
        let cfg = McConfig::default();
        let h = [0.3, 0.8];
        let r = pre_exit_law(&m, &h, 1.0, 0.5, 0.0, 1.0, 0, 10, 1, &cfg).unwrap();
        assert_eq!(r.estimate.mean, 0.3);
        let r = pre_exit_law(&m, &h, 1.0, 0.5, 0.5, 1.0, 0, 10, 1, &cfg).unwrap();
        assert_eq!(r.estimate.mean, 0.0);
        // exit needs more than (T - s) * max|v| of travel
        let r = pre_exit_law(&m, &h, 1.5, 2.0, 2.0, 0.0, 1, 500, 1, &cfg).unwrap();
        assert_eq!(r.estimate.mean, 0.0);
        assert!(close(r.complement, r.evolution, 0.0));
    }
}
