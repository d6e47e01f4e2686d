//! The `verify` battery.

use std::fmt;

use fluid_exit::exit_ops::{two_sided_with, ExitAlgebra, ExpDecayFunction, Method};
use fluid_exit::mc_engine::{
    composite_bound_check, estimate, verify_decomposition, McConfig, Payoff, Query,
};
use fluid_exit::wh_factor::{factorize_model, residual, FactorConfig, WienerHopfFactors};
use fluid_exit::{Side, ValidatedModel};
use serde::Serialize;

use crate::{Failure, Suite};

pub struct Plan {
    pub suite: Suite,
    pub c: f64,
    pub lminus: f64,
    pub lplus: f64,
    pub s: f64,
    pub i: usize,
    pub n: u64,
    pub n_inner: u64,
    pub seed: u64,
    pub tol: f64,
    pub corrupt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skipped => "skipped",
        })
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    /// Residual, gap or z-score, depending on the check.
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

impl Check {
    fn bounded(name: &'static str, value: f64, threshold: f64, detail: String) -> Self {
        let status = if value.abs() <= threshold {
            Status::Pass
        } else {
            Status::Fail
        };
        Check {
            name,
            status,
            value: Some(value),
            threshold: Some(threshold),
            detail,
        }
    }

    fn skipped(name: &'static str, why: &str) -> Self {
        Check {
            name,
            status: Status::Skipped,
            value: None,
            threshold: None,
            detail: why.to_string(),
        }
    }

    fn failed(name: &'static str, why: String) -> Self {
        Check {
            name,
            status: Status::Fail,
            value: None,
            threshold: None,
            detail: why,
        }
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Report {
    pub decay: f64,
    pub lminus: f64,
    pub lplus: f64,
    pub time: f64,
    pub state: String,
    pub checks: Vec<Check>,
    pub passed: bool,
}

const Z_MAX: f64 = 3.0;
const IDENTITY_TOL: f64 = 1e-8;

/// Shifts every entry of `J⁺` so the Riccati equations no longer hold.
fn corrupt(f: &mut WienerHopfFactors) {
    let (r, c) = (f.j_plus.rows(), f.j_plus.cols());
    for a in 0..r {
        for b in 0..c {
            f.j_plus[(a, b)] = 0.9 * f.j_plus[(a, b)] + 0.05;
        }
    }
}

fn identity_gap(alg: &ExitAlgebra<'_>, lminus: f64, lplus: f64) -> Result<f64, Failure> {
    let total = lminus + lplus;
    let mut worst: f64 = 0.0;
    for side in [Side::Plus, Side::Minus] {
        let near = if side == Side::Plus { lplus } else { lminus };
        let lhs = alg.one_sided_matrix(side, near)?;
        let xi = alg.xi_matrix(side, lminus, lplus)?;
        let xi_other = alg.xi_matrix(side.opposite(), lminus, lplus)?;
        let carry = alg
            .factors()
            .j(side)
            .matmul(&alg.passage(side, total)?)
            .map_err(|e| Failure::Param(e.to_string()))?;
        let rhs = xi
            .add(
                &xi_other
                    .matmul(&carry)
                    .map_err(|e| Failure::Param(e.to_string()))?,
            )
            .map_err(|e| Failure::Param(e.to_string()))?;
        worst = worst.max(
            lhs.sub(&rhs)
                .map_err(|e| Failure::Param(e.to_string()))?
                .max_abs(),
        );
    }
    Ok(worst)
}

pub fn run(model: &ValidatedModel, plan: &Plan) -> Result<Report, Failure> {
    let analytic = matches!(plan.suite, Suite::Full | Suite::Analytic);
    let simulated = matches!(plan.suite, Suite::Full | Suite::Mc);
    let cfg = McConfig::default();
    let ones = vec![1.0; model.len()];
    let outer = (plan.n / 10).max(2);
    let mut checks = Vec::new();

    let factors = if model.is_homogeneous() {
        let factor_cfg = FactorConfig {
            tol: plan.tol,
            ..FactorConfig::default()
        };
        match factorize_model(model, plan.c, &factor_cfg) {
            Ok(mut f) => {
                if plan.corrupt {
                    corrupt(&mut f);
                }
                Some(f)
            }
            Err(e) => {
                checks.push(Check::failed("factor-residual", e.to_string()));
                None
            }
        }
    } else {
        None
    };
    let why_skipped = if model.is_homogeneous() {
        "factorization failed"
    } else {
        "no analytic factors for a piecewise schedule"
    };

    if analytic {
        match &factors {
            Some(f) => {
                let gen = model.constant_generator().expect("homogeneous");
                let r = residual(f, gen, model.velocities())?;
                checks.push(Check::bounded(
                    "factor-residual",
                    r,
                    plan.tol,
                    format!("{} iterations", f.iterations),
                ));
                let alg = ExitAlgebra::with_factors(model, f.clone())?;
                let gap = identity_gap(&alg, plan.lminus, plan.lplus)?;
                checks.push(Check::bounded(
                    "decomposition-identity",
                    gap,
                    IDENTITY_TOL,
                    "max entry gap of both matrix identities".into(),
                ));
            }
            None if !model.is_homogeneous() => {
                checks.push(Check::skipped("factor-residual", why_skipped));
                checks.push(Check::skipped("decomposition-identity", why_skipped));
            }
            None => checks.push(Check::skipped("decomposition-identity", why_skipped)),
        }
    }

    if simulated {
        match &factors {
            Some(f) => {
                let alg = ExitAlgebra::with_factors(model, f.clone())?;
                let payoff = Payoff::ExpDecay {
                    c: plan.c,
                    values: ones.clone(),
                };

                let p = alg.one_sided_matrix(Side::Plus, plan.lplus)?;
                let exact = p.row(plan.i).iter().sum::<f64>() * (-plan.c * plan.s).exp();
                let q = Query::OneSided {
                    side: Side::Plus,
                    level: plan.lplus,
                    payoff: payoff.clone(),
                };
                let est = estimate(model, &q, plan.s, plan.i, plan.n, plan.seed, &cfg)?;
                checks.push(Check::bounded(
                    "one-sided-mc",
                    est.z_score(exact),
                    Z_MAX,
                    format!(
                        "analytic {exact:.6}, MC {:.6} ± {:.6}",
                        est.mean, est.stderr
                    ),
                ));

                let gp = ExpDecayFunction::restrict(model, plan.c, Side::Plus, &ones);
                let gm = ExpDecayFunction::restrict(model, plan.c, Side::Minus, &ones);
                let r = two_sided_with(
                    &alg,
                    &gp,
                    &gm,
                    plan.lminus,
                    plan.lplus,
                    plan.s,
                    Method::Resolvent,
                )?;
                let exact = r.joint[plan.i];
                let q = Query::JointExit {
                    lminus: plan.lminus,
                    lplus: plan.lplus,
                    payoff,
                };
                let est = estimate(
                    model,
                    &q,
                    plan.s,
                    plan.i,
                    plan.n,
                    plan.seed.wrapping_add(1),
                    &cfg,
                )?;
                checks.push(Check::bounded(
                    "two-sided-mc",
                    est.z_score(exact),
                    Z_MAX,
                    format!(
                        "analytic {exact:.6}, MC {:.6} ± {:.6}",
                        est.mean, est.stderr
                    ),
                ));
            }
            None => {
                checks.push(Check::skipped("one-sided-mc", why_skipped));
                checks.push(Check::skipped("two-sided-mc", why_skipped));
            }
        }

        // long enough for all four passages of the composite to fit
        let until = plan.s + 2.0 * (plan.lminus + plan.lplus) + 1.0;
        let r = composite_bound_check(
            model,
            until,
            plan.lminus,
            plan.lplus,
            plan.s,
            plan.i,
            outer,
            plan.n_inner,
            plan.seed.wrapping_add(2),
            &cfg,
        )?;
        checks.push(Check {
            name: "composite-bound",
            status: if r.passed { Status::Pass } else { Status::Fail },
            value: Some(r.estimate.mean),
            threshold: Some(r.bound + 3.0 * r.estimate.stderr),
            detail: format!(
                "nested estimate ± {:.2e} against (1 - exp(-K (T - s)))², T = {until}",
                r.estimate.stderr
            ),
        });

        let d = verify_decomposition(
            model,
            plan.c,
            plan.lminus,
            plan.lplus,
            plan.s,
            plan.i,
            outer,
            plan.n_inner,
            plan.seed.wrapping_add(3),
            &cfg,
        )?;
        checks.push(Check::bounded(
            "mc-decomposition",
            d.z,
            Z_MAX,
            format!(
                "first passage {:.6} ± {:.6}, two-sided split {:.6} ± {:.6}",
                d.lhs.mean, d.lhs.stderr, d.rhs.mean, d.rhs.stderr
            ),
        ));
    }

    let passed = checks.iter().all(|c| c.status != Status::Fail);
    Ok(Report {
        decay: plan.c,
        lminus: plan.lminus,
        lplus: plan.lplus,
        time: plan.s,
        state: model.labels()[plan.i].clone(),
        checks,
        passed,
    })
}
