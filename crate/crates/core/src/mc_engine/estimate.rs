//! Monte Carlo estimators for passage and exit functionals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::path::{
    chained_passages, first_exit, segment_rates, CrossingKind, CrossingResult, PathWalker,
    SojournSource,
};
use super::stats::{map_paths, EstimateWithCI, ExecMode};
use super::stream::{path_rng, StreamTag};
use crate::model::{ModelError, Side, ValidatedModel};

/// Default relative bound on the payoff mass censored by the horizon.
pub const DEFAULT_CENSOR_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("need at least 2 paths, got {0}")]
    TooFewPaths(u64),
    #[error("no finite default horizon: payoff does not decay and the model has no killing; pass a horizon")]
    HorizonRequired,
    #[error("bad query: {0}")]
    BadQuery(String),
    #[error("bad time: {0}")]
    BadTime(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A time-dependent payoff `g(t, j)`, with values listed for every state in
/// model order. Entries for states a functional cannot land in are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Payoff {
    /// `g(t, j) = exp(-c t) f(j)`.
    ExpDecay { c: f64, values: Vec<f64> },
    /// `g(t, j) = 1{t <= until} f(j)`.
    Window { until: f64, values: Vec<f64> },
}

impl Payoff {
    pub fn eval(&self, t: f64, state: usize) -> f64 {
        match self {
            Payoff::ExpDecay { c, values } => {
                if *c == 0.0 {
                    values[state]
                } else {
                    (-c * t).exp() * values[state]
                }
            }
            Payoff::Window { until, values } => {
                if t <= *until {
                    values[state]
                } else {
                    0.0
                }
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Payoff::ExpDecay { values, .. } | Payoff::Window { values, .. } => values,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values().iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    /// Indicator payoff `1{t <= until}` on every state.
    pub fn window_ones(until: f64, m: usize) -> Self {
        Payoff::Window {
            until,
            values: vec![1.0; m],
        }
    }
}

/// A functional of one path started at `(s, i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "kebab-case")]
pub enum Query {
    /// `g(τ^±_ℓ, X_{τ^±_ℓ})`.
    OneSided {
        side: Side,
        level: f64,
        payoff: Payoff,
    },
    /// `g(ξ^±, X_{ξ^±})`: payoff only when the exit happens on `side`.
    TwoSidedXi {
        side: Side,
        lminus: f64,
        lplus: f64,
        payoff: Payoff,
    },
    /// `g(τ⁻ ∧ τ⁺, X)`: payoff at whichever barrier is hit first.
    JointExit {
        lminus: f64,
        lplus: f64,
        payoff: Payoff,
    },
    /// `h(X_T) 1{τ⁻ ∧ τ⁺ <= T}` (or `> T` when `exited` is false).
    PreExitLaw {
        lminus: f64,
        lplus: f64,
        h: Vec<f64>,
        until: f64,
        exited: bool,
    },
    /// `g` at the end of a chain of one-sided passages along the same path.
    Chain {
        stages: Vec<(Side, f64)>,
        payoff: Payoff,
    },
    /// `1{γ(s) <= until}` where `γ(s)` is the first jump or kill after `s`.
    FirstJump { until: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Explicit simulation cutoff (absolute time).
    pub horizon: Option<f64>,
    pub censor_tol: f64,
    pub exec: ExecMode,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            horizon: None,
            censor_tol: DEFAULT_CENSOR_TOL,
            exec: ExecMode::Parallel,
        }
    }
}

/// Per-path record, also the row format of the CSV export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PathOutcome {
    pub path_index: u64,
    pub outcome: CrossingResult,
    pub payoff: f64,
}

/// Horizon and censoring bound for a decaying payoff started at `s`.
pub(crate) fn decay_horizon(
    model: &ValidatedModel,
    c: f64,
    norm: f64,
    s: f64,
    cfg: &McConfig,
) -> Result<(f64, f64), McError> {
    let rate = c + model.killing_floor();
    let horizon = match cfg.horizon {
        Some(h) => h,
        None if rate > 0.0 => s + (1.0 / cfg.censor_tol).ln() / rate,
        None => return Err(McError::HorizonRequired),
    };
    let bound = if horizon.is_finite() {
        norm * (-c * horizon).exp() * (-model.killing_floor() * (horizon - s)).exp()
    } else {
        0.0
    };
    Ok((horizon, bound))
}

fn check_payoff(model: &ValidatedModel, p: &Payoff) -> Result<(), McError> {
    if p.values().len() != model.len() {
        return Err(McError::BadQuery(format!(
            "payoff has {} values for {} states",
            p.values().len(),
            model.len()
        )));
    }
    if let Payoff::ExpDecay { c, .. } = p {
        if !(*c >= 0.0 && c.is_finite()) {
            return Err(McError::BadQuery(format!(
                "decay rate {c} must be nonnegative"
            )));
        }
    }
    Ok(())
}

fn check_level(l: f64) -> Result<(), McError> {
    if l >= 0.0 && !l.is_nan() {
        Ok(())
    } else {
        Err(McError::BadQuery(format!("level {l} must be nonnegative")))
    }
}

/// Resolves the horizon for a query; returns `(horizon, censored_bound)`.
pub(crate) fn query_horizon(
    model: &ValidatedModel,
    q: &Query,
    s: f64,
    cfg: &McConfig,
) -> Result<(f64, f64), McError> {
    let from_payoff = |p: &Payoff| -> Result<(f64, f64), McError> {
        check_payoff(model, p)?;
        match p {
            Payoff::ExpDecay { c, .. } => decay_horizon(model, *c, p.sup_norm(), s, cfg),
            Payoff::Window { until, .. } => Ok((cfg.horizon.unwrap_or(*until).max(s), 0.0)),
        }
    };
    match q {
        Query::OneSided { level, payoff, .. } => {
            check_level(*level)?;
            from_payoff(payoff)
        }
        Query::TwoSidedXi {
            lminus,
            lplus,
            payoff,
            ..
        }
        | Query::JointExit {
            lminus,
            lplus,
            payoff,
            ..
        } => {
            check_level(*lminus)?;
            check_level(*lplus)?;
            from_payoff(payoff)
        }
        Query::Chain { stages, payoff } => {
            if stages.is_empty() {
                return Err(McError::BadQuery("empty passage chain".into()));
            }
            for (_, l) in stages {
                check_level(*l)?;
            }
            from_payoff(payoff)
        }
        Query::PreExitLaw {
            lminus,
            lplus,
            h,
            until,
            ..
        } => {
            check_level(*lminus)?;
            check_level(*lplus)?;
            if h.len() != model.len() {
                return Err(McError::BadQuery(format!(
                    "h has {} values for {} states",
                    h.len(),
                    model.len()
                )));
            }
            if *until < s {
                return Err(McError::BadTime(format!(
                    "horizon T = {until} precedes start time {s}"
                )));
            }
            Ok((*until, 0.0))
        }
        Query::FirstJump { until } => {
            if *until < s {
                return Err(McError::BadTime(format!(
                    "T = {until} precedes start time {s}"
                )));
            }
            Ok((*until, 0.0))
        }
    }
}

/// Evaluates the query on one path drawn from `walker`.
pub(crate) fn evaluate<S: SojournSource>(
    walker: &mut S,
    model: &ValidatedModel,
    q: &Query,
) -> (CrossingResult, f64) {
    let v = model.velocities();
    match q {
        Query::OneSided {
            side,
            level,
            payoff,
        } => {
            let r = match side {
                Side::Plus => first_exit(walker, v, f64::INFINITY, *level),
                Side::Minus => first_exit(walker, v, *level, f64::INFINITY),
            };
            let value = match (r.time, r.state) {
                (Some(t), Some(j)) => payoff.eval(t, j),
                _ => 0.0,
            };
            (r, value)
        }
        Query::TwoSidedXi {
            side,
            lminus,
            lplus,
            payoff,
        } => {
            let r = first_exit(walker, v, *lminus, *lplus);
            let value = match (r.side(), r.time, r.state) {
                (Some(hit), Some(t), Some(j)) if hit == *side => payoff.eval(t, j),
                _ => 0.0,
            };
            (r, value)
        }
        Query::JointExit {
            lminus,
            lplus,
            payoff,
        } => {
            let r = first_exit(walker, v, *lminus, *lplus);
            let value = match (r.time, r.state) {
                (Some(t), Some(j)) => payoff.eval(t, j),
                _ => 0.0,
            };
            (r, value)
        }
        Query::PreExitLaw {
            lminus,
            lplus,
            h,
            until,
            exited,
        } => {
            let r = first_exit(walker, v, *lminus, *lplus);
            let exited_by_t = r.time.is_some_and(|t| t <= *until);
            if exited_by_t != *exited {
                return (r, 0.0);
            }
            // run on to T and read the state there
            let mut state_at_t = None;
            while let Some(soj) = walker.current() {
                if soj.end > *until
                    || (soj.end == *until && matches!(soj.exit, super::path::SojournEnd::Horizon))
                {
                    state_at_t = Some(soj.state);
                    break;
                }
                walker.advance();
            }
            (r, state_at_t.map_or(0.0, |j| h[j]))
        }
        Query::Chain { stages, payoff } => match chained_passages(walker, v, stages) {
            Some((t, j)) => {
                let kind = match stages.last().map(|s| s.0) {
                    Some(Side::Minus) => CrossingKind::DownExit,
                    _ => CrossingKind::UpExit,
                };
                (
                    CrossingResult {
                        kind,
                        time: Some(t),
                        state: Some(j),
                    },
                    payoff.eval(t, j),
                )
            }
            None => (CrossingResult::NEITHER, 0.0),
        },
        Query::FirstJump { until } => {
            let first = walker.current().expect("walker starts with a sojourn");
            let jumped =
                first.end <= *until && !matches!(first.exit, super::path::SojournEnd::Horizon);
            let outcome = CrossingResult {
                kind: CrossingKind::Neither,
                time: jumped.then_some(first.end),
                state: None,
            };
            (outcome, if jumped { 1.0 } else { 0.0 })
        }
    }
}

fn check_start(model: &ValidatedModel, s: f64, i: usize, n: u64) -> Result<(), McError> {
    if n < 2 {
        return Err(McError::TooFewPaths(n));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(McError::BadTime(format!("start time {s}")));
    }
    if i >= model.len() {
        return Err(McError::BadQuery(format!("state index {i} out of range")));
    }
    Ok(())
}

/// Estimates `E_{s,i}[functional]` from `n` independent paths.
pub fn estimate(
    model: &ValidatedModel,
    query: &Query,
    s: f64,
    i: usize,
    n: u64,
    seed: u64,
    cfg: &McConfig,
) -> Result<EstimateWithCI, McError> {
    estimate_tagged(model, query, s, i, n, seed, StreamTag::Primary, cfg).map(|(e, _)| e)
}

/// Like [`estimate`], also returning the per-path outcomes.
pub fn estimate_with_paths(
    model: &ValidatedModel,
    query: &Query,
    s: f64,
    i: usize,
    n: u64,
    seed: u64,
    cfg: &McConfig,
) -> Result<(EstimateWithCI, Vec<PathOutcome>), McError> {
    estimate_tagged(model, query, s, i, n, seed, StreamTag::Primary, cfg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn estimate_tagged(
    model: &ValidatedModel,
    query: &Query,
    s: f64,
    i: usize,
    n: u64,
    seed: u64,
    tag: StreamTag,
    cfg: &McConfig,
) -> Result<(EstimateWithCI, Vec<PathOutcome>), McError> {
    check_start(model, s, i, n)?;
    let (horizon, censored) = query_horizon(model, query, s, cfg)?;
    let rates = segment_rates(model);
    let outcomes = map_paths(n, cfg.exec, |k| {
        let mut w = PathWalker::new(model, &rates, s, i, horizon, path_rng(seed, tag, k));
        let (outcome, payoff) = evaluate(&mut w, model, query);
        PathOutcome {
            path_index: k,
            outcome,
            payoff,
        }
    });
    let values: Vec<f64> = outcomes.iter().map(|o| o.payoff).collect();
    let mut est = EstimateWithCI::from_samples(&values, seed, horizon, censored);
    let norm = match query {
        Query::OneSided { payoff, .. }
        | Query::TwoSidedXi { payoff, .. }
        | Query::JointExit { payoff, .. }
        | Query::Chain { payoff, .. } => payoff.sup_norm(),
        _ => 1.0,
    };
    if censored > cfg.censor_tol * norm.max(f64::MIN_POSITIVE) {
        est.warnings.push(format!(
            "HorizonTooSmall: censored mass bound {censored:.3e} exceeds tolerance {:.1e}",
            cfg.censor_tol * norm
        ));
    }
    Ok((est, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_model, ModelSpec};

    fn model(g: [[f64; 2]; 2]) -> ValidatedModel {
        validate_model(&ModelSpec::constant(["u", "d"], &[1.0, -1.0], &g)).unwrap()
    }

    #[test]
    fn immediate_passage_has_zero_variance() {
        let m = model([[-2.0, 1.0], [1.0, -2.0]]);
        let q = Query::OneSided {
            side: Side::Plus,
            level: 0.0,
            payoff: Payoff::ExpDecay {
                c: 0.5,
                values: vec![3.0, 7.0],
            },
        };
        let e = estimate(&m, &q, 2.0, 0, 100, 1, &McConfig::default()).unwrap();
        assert_eq!(e.mean, 3.0 * (-1.0f64).exp());
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn default_horizon_needs_decay_or_killing() {
        let m = model([[-1.0, 1.0], [1.0, -1.0]]);
        let q = Query::OneSided {
            side: Side::Plus,
            level: 1.0,
            payoff: Payoff::ExpDecay {
                c: 0.0,
                values: vec![1.0, 1.0],
            },
        };
        assert_eq!(
            estimate(&m, &q, 0.0, 1, 10, 1, &McConfig::default()),
            Err(McError::HorizonRequired)
        );
        let cfg = McConfig {
            horizon: Some(5.0),
            ..Default::default()
        };
        let e = estimate(&m, &q, 0.0, 1, 10, 1, &cfg).unwrap();
        assert!(e.warnings.iter().any(|w| w.starts_with("HorizonTooSmall")));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model([[-2.0, 1.0], [1.0, -2.0]]);
        let q = Query::FirstJump { until: 1.0 };
        assert_eq!(
            estimate(&m, &q, 0.0, 0, 1, 1, &McConfig::default()),
            Err(McError::TooFewPaths(1))
        );
        assert!(matches!(
            estimate(&m, &q, 2.0, 0, 10, 1, &McConfig::default()),
            Err(McError::BadTime(_))
        ));
        let q = Query::JointExit {
            lminus: -1.0,
            lplus: 1.0,
            payoff: Payoff::window_ones(1.0, 2),
        };
        assert!(matches!(
            estimate(&m, &q, 0.0, 0, 10, 1, &McConfig::default()),
            Err(McError::BadQuery(_))
        ));
    }

    #[test]
    fn same_seed_same_mean_across_exec_modes() {
        let m = model([[-2.0, 1.0], [1.0, -2.0]]);
        let q = Query::JointExit {
            lminus: 0.4,
            lplus: 0.3,
            payoff: Payoff::ExpDecay {
                c: 0.0,
                values: vec![1.0, 1.0],
            },
        };
        let seq = McConfig {
            exec: ExecMode::Sequential,
            ..Default::default()
        };
        let a = estimate(&m, &q, 0.0, 0, 5000, 42, &seq).unwrap();
        let b = estimate(&m, &q, 0.0, 0, 5000, 42, &McConfig::default()).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn pre_exit_law_horizon_reads_state_at_t() {
        // no killing, T before any exit is possible: complement = h(X_T)
        let m = model([[-1.0, 1.0], [1.0, -1.0]]);
        let q = Query::PreExitLaw {
            lminus: 5.0,
            lplus: 5.0,
            h: vec![1.0, 1.0],
            until: 1.0,
            exited: false,
        };
        let e = estimate(&m, &q, 0.0, 0, 200, 9, &McConfig::default()).unwrap();
        assert_eq!(e.mean, 1.0);
    }
}
