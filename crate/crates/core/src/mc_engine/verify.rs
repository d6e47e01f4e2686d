//! Statistical checks of the exit-operator identities that need no analytic
//! factors, so they also run on time-inhomogeneous schedules.

use serde::{Deserialize, Serialize};

use super::estimate::{decay_horizon, estimate_tagged, evaluate, McConfig, McError, Payoff, Query};
use super::path::{chained_passages, first_exit, segment_rates, CrossingKind, PathWalker};
use super::stats::{map_paths, mean_stderr, pooled_stderr, z_score, EstimateWithCI};
use super::stream::{path_rng, StreamTag};
use crate::model::{Side, ValidatedModel};

/// Both sides of
/// `(I⁺; J⁺) P⁺_{ℓ⁺} g⁺ = Ξ⁺ g⁺ + Ξ⁻ (J⁺ P⁺_{ℓ⁻+ℓ⁺} g⁺)` at one start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecompositionReport {
    /// Direct first-passage estimate of the left-hand side.
    pub lhs: EstimateWithCI,
    /// Two-sided exit with a nested inner estimate after down-exits.
    pub rhs: EstimateWithCI,
    pub pooled_stderr: f64,
    pub z: f64,
    pub n_inner: u64,
    pub note: String,
}

/// Checks the first-passage decomposition for `g⁺(t, j) = exp(-c t)` by
/// simulation.
///
/// The left side is a plain first-passage estimate over `n_outer` paths. On
/// the right, each of `n_outer` independent paths is run to its two-sided
/// exit; an up-exit contributes `g⁺` directly and a down-exit at `(t, j)`
/// contributes the mean of `n_inner` fresh paths from `(t, j)` to the
/// passage above `ℓ⁻ + ℓ⁺`.
#[allow(clippy::too_many_arguments)]
pub fn verify_decomposition(
    model: &ValidatedModel,
    c: f64,
    lminus: f64,
    lplus: f64,
    s: f64,
    i: usize,
    n_outer: u64,
    n_inner: u64,
    seed: u64,
    cfg: &McConfig,
) -> Result<DecompositionReport, McError> {
    if n_inner < 1 {
        return Err(McError::TooFewPaths(n_inner));
    }
    if !(c > 0.0 || model.killing_floor() > 0.0) {
        return Err(McError::BadQuery(
            "decomposition check needs c > 0 or a positive killing floor".into(),
        ));
    }
    let m = model.len();
    let gplus = Payoff::ExpDecay {
        c,
        values: vec![1.0; m],
    };
    let lhs_query = Query::OneSided {
        side: Side::Plus,
        level: lplus,
        payoff: gplus.clone(),
    };
    let (lhs, _) = estimate_tagged(
        model,
        &lhs_query,
        s,
        i,
        n_outer,
        seed,
        StreamTag::Primary,
        cfg,
    )?;

    let (horizon, censored) = decay_horizon(model, c, 1.0, s, cfg)?;
    let rates = segment_rates(model);
    let level = lminus + lplus;
    let velocities = model.velocities();
    let samples = map_paths(n_outer, cfg.exec, |k| {
        let mut w = PathWalker::new(
            model,
            &rates,
            s,
            i,
            horizon,
            path_rng(seed, StreamTag::Reference, k),
        );
        let exit = first_exit(&mut w, velocities, lminus, lplus);
        match (exit.kind, exit.time, exit.state) {
            (CrossingKind::UpExit, Some(t), Some(j)) => gplus.eval(t, j),
            (CrossingKind::DownExit, Some(t), Some(j)) => {
                // strong Markov: J⁺P⁺_L g⁺ at (t, j) is the passage above L from there
                let mut rng = path_rng(seed, StreamTag::Inner, k);
                let inner: Vec<f64> = (0..n_inner)
                    .map(|_| {
                        let mut w = PathWalker::new(model, &rates, t, j, horizon, &mut rng);
                        let r = first_exit(&mut w, velocities, f64::INFINITY, level);
                        match (r.time, r.state) {
                            (Some(tt), Some(jj)) => gplus.eval(tt, jj),
                            _ => 0.0,
                        }
                    })
                    .collect();
                mean_stderr(&inner).0
            }
            _ => 0.0,
        }
    });
    let rhs = EstimateWithCI::from_samples(&samples, seed, horizon, censored);
    let se = pooled_stderr(lhs.stderr, rhs.stderr);
    Ok(DecompositionReport {
        z: z_score(lhs.mean - rhs.mean, se),
        pooled_stderr: se,
        lhs,
        rhs,
        n_inner,
        note: "inner means are unbiased and enter linearly, so nesting adds variance but no bias; \
               the outer sample variance already includes the inner noise"
            .into(),
    })
}

/// Nested estimate of a chain of passages: each of `n_outer` paths runs
/// through `outer` stages, then `n_inner` continuation paths from the
/// reached point run through `inner` stages and are scored with `payoff`.
#[allow(clippy::too_many_arguments)]
pub fn nested_chain(
    model: &ValidatedModel,
    outer: &[(Side, f64)],
    inner: &[(Side, f64)],
    payoff: &Payoff,
    s: f64,
    i: usize,
    n_outer: u64,
    n_inner: u64,
    seed: u64,
    cfg: &McConfig,
) -> Result<EstimateWithCI, McError> {
    if n_outer < 2 {
        return Err(McError::TooFewPaths(n_outer));
    }
    if n_inner < 1 {
        return Err(McError::TooFewPaths(n_inner));
    }
    // horizon from the full chain
    let whole = Query::Chain {
        stages: outer.iter().chain(inner).copied().collect(),
        payoff: payoff.clone(),
    };
    let (horizon, censored) = super::estimate::query_horizon(model, &whole, s, cfg)?;
    let rates = segment_rates(model);
    let velocities = model.velocities();
    let inner_query = Query::Chain {
        stages: inner.to_vec(),
        payoff: payoff.clone(),
    };
    let samples = map_paths(n_outer, cfg.exec, |k| {
        let mut w = PathWalker::new(
            model,
            &rates,
            s,
            i,
            horizon,
            path_rng(seed, StreamTag::Primary, k),
        );
        let Some((t, j)) = chained_passages(&mut w, velocities, outer) else {
            return 0.0;
        };
        if inner.is_empty() {
            return payoff.eval(t, j);
        }
        let mut rng = path_rng(seed, StreamTag::Inner, k);
        let vals: Vec<f64> = (0..n_inner)
            .map(|_| {
                let mut w = PathWalker::new(model, &rates, t, j, horizon, &mut rng);
                evaluate(&mut w, model, &inner_query).1
            })
            .collect();
        mean_stderr(&vals).0
    });
    Ok(EstimateWithCI::from_samples(
        &samples, seed, horizon, censored,
    ))
}

/// Outcome of the passage-composite bound check for `g⁺ = 1_{[0,T]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompositeBoundReport {
    pub estimate: EstimateWithCI,
    /// `1_{[0,T]}(s) (1 - exp(-K (T - s)))²`.
    pub bound: f64,
    pub passed: bool,
}

/// Estimates `(J⁻ P⁻_L J⁺ P⁺_L g⁺)(s, i)` for `g⁺ = 1_{[0,T]}`, `L = ℓ⁻ + ℓ⁺`,
/// and compares it with `(1 - exp(-K (T - s)))²` plus three standard errors.
/// The first passage below 0 is the outer stage; the remaining three
/// passages are the nested inner estimate.
#[allow(clippy::too_many_arguments)]
pub fn composite_bound_check(
    model: &ValidatedModel,
    until: f64,
    lminus: f64,
    lplus: f64,
    s: f64,
    i: usize,
    n_outer: u64,
    n_inner: u64,
    seed: u64,
    cfg: &McConfig,
) -> Result<CompositeBoundReport, McError> {
    let level = lminus + lplus;
    let payoff = Payoff::window_ones(until, model.len());
    let estimate = nested_chain(
        model,
        &[(Side::Minus, 0.0)],
        &[(Side::Minus, level), (Side::Plus, 0.0), (Side::Plus, level)],
        &payoff,
        s,
        i,
        n_outer,
        n_inner,
        seed,
        cfg,
    )?;
    let bound = if s <= until {
        (1.0 - (-model.uniform_bound() * (until - s)).exp()).powi(2)
    } else {
        0.0
    };
    let passed = estimate.mean <= bound + 3.0 * estimate.stderr;
    Ok(CompositeBoundReport {
        estimate,
        bound,
        passed,
    })
}

/// Counts of two-sided exit outcomes and of exits landing on the wrong side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExitCensus {
    pub up: u64,
    pub down: u64,
    pub neither: u64,
    /// Up-exits in a minus state.
    pub up_violations: u64,
    /// Down-exits in a plus state.
    pub down_violations: u64,
}

impl ExitCensus {
    pub fn total(&self) -> u64 {
        self.up + self.down + self.neither
    }
}

/// Simulates `n` two-sided exits from `(s, i)` and tallies the outcomes.
#[allow(clippy::too_many_arguments)]
pub fn exit_census(
    model: &ValidatedModel,
    s: f64,
    i: usize,
    lminus: f64,
    lplus: f64,
    horizon: f64,
    n: u64,
    seed: u64,
    cfg: &McConfig,
) -> ExitCensus {
    let rates = segment_rates(model);
    let outcomes = map_paths(n, cfg.exec, |k| {
        let mut w = PathWalker::new(
            model,
            &rates,
            s,
            i,
            horizon,
            path_rng(seed, StreamTag::Census, k),
        );
        first_exit(&mut w, model.velocities(), lminus, lplus)
    });
    let mut c = ExitCensus::default();
    for r in outcomes {
        match (r.kind, r.state) {
            (CrossingKind::UpExit, Some(j)) => {
                c.up += 1;
                if model.side_of(j) != Side::Plus {
                    c.up_violations += 1;
                }
            }
            (CrossingKind::DownExit, Some(j)) => {
                c.down += 1;
                if model.side_of(j) != Side::Minus {
                    c.down_violations += 1;
                }
            }
            _ => c.neither += 1,
        }
    }
    c
}

/// `P_{s,i}(γ(s) <= T) = 1 - exp(∫_s^T Λ_u(i, i) du)` for the piecewise
/// schedule, `γ(s)` being the first jump (or kill) after `s`.
pub fn first_jump_probability(model: &ValidatedModel, s: f64, i: usize, until: f64) -> f64 {
    if until <= s {
        return 0.0;
    }
    let mut integral = 0.0;
    let mut t = s;
    while t < until {
        let seg = model.segment_index(t);
        let end = model.next_breakpoint(t).unwrap_or(f64::INFINITY).min(until);
        integral += model.segments()[seg][(i, i)] * (end - t);
        t = end;
    }
    1.0 - integral.exp()
}
