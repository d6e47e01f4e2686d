//! Acceptance battery: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines reach the terminal under
//! `cargo test`.

mod common;

use std::time::{Duration, Instant};

use fluid_exit::exit_ops::{
    contraction_constant, evolution_operator, model_contraction, neumann_apply, passage_norm_bound,
    pre_exit_law, resolvent_apply, two_sided, two_sided_with, ExitAlgebra, ExpDecayFunction,
    Method, Truncation,
};
use fluid_exit::mc_engine::stats::pooled_stderr;
use fluid_exit::mc_engine::{
    composite_bound_check, estimate, exit_census, verify_decomposition, McConfig, Payoff, Query,
};
use fluid_exit::wh_factor::{factorize, FactorConfig};
use fluid_exit::{DenseMatrix, Side, ValidatedModel};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn run(id: u32, title: &str, budget: Duration, check: fn() -> Outcome) -> bool {
    let start = Instant::now();
    let out = check();
    let took = start.elapsed();
    let in_time = took <= budget;
    let passed = out.passed && in_time;
    let timing = if in_time {
        format!("{:.2}s", took.as_secs_f64())
    } else {
        format!(
            "{:.2}s, over the {}s budget",
            took.as_secs_f64(),
            budget.as_secs()
        )
    };
    println!(
        "criterion {id:>2} {} {title}: {} ({timing})",
        if passed { "PASS" } else { "FAIL" },
        out.detail
    );
    passed
}

fn gen2(rows: [[f64; 2]; 2]) -> DenseMatrix {
    DenseMatrix::from_rows(&rows).unwrap()
}

fn closed_form_factors() -> Outcome {
    let s3 = 3f64.sqrt();
    let f = factorize(
        &gen2([[-2.0, 1.0], [1.0, -2.0]]),
        &[1.0, -1.0],
        &FactorConfig::default(),
    )
    .unwrap();
    let dj = (f.j_plus[(0, 0)] - (2.0 - s3)).abs();
    let dq = (f.q_plus[(0, 0)] + s3).abs();
    outcome(
        dj <= 1e-9 && dq <= 1e-9 && f.residual_norm <= 1e-10,
        format!(
            "|J+ - (2-√3)| = {dj:.1e}, |Q+ + √3| = {dq:.1e}, residual {:.1e}",
            f.residual_norm
        ),
    )
}

fn zero_drift() -> Outcome {
    let cfg = FactorConfig {
        max_iter: 100_000,
        ..Default::default()
    };
    let f = factorize(&gen2([[-1.0, 1.0], [1.0, -1.0]]), &[1.0, -1.0], &cfg).unwrap();
    let err = [
        (f.j_plus[(0, 0)] - 1.0).abs(),
        (f.j_minus[(0, 0)] - 1.0).abs(),
        f.q_plus[(0, 0)].abs(),
        f.q_minus[(0, 0)].abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    outcome(
        err <= 1e-6,
        format!("max deviation {err:.1e} after {} iterations", f.iterations),
    )
}

fn one_sided_mc() -> Outcome {
    let m = common::killed();
    let q = Query::OneSided {
        side: Side::Plus,
        level: 1.0,
        payoff: Payoff::ExpDecay {
            c: 0.0,
            values: vec![1.0, 1.0],
        },
    };
    let est = estimate(&m, &q, 0.0, 0, 100_000, 20_240_301, &McConfig::default()).unwrap();
    let target = (-3f64.sqrt()).exp();
    let z = est.z_score(target);
    outcome(
        z.abs() <= 3.0,
        format!(
            "MC {:.5} ± {:.5} vs e^-√3 = {target:.6}, z = {z:.2}",
            est.mean, est.stderr
        ),
    )
}

/// Max gap in the decomposition identity and its mirror, at time 0.
fn decomposition_gap(alg: &ExitAlgebra<'_>, lminus: f64, lplus: f64) -> f64 {
    let total = lminus + lplus;
    let mut worst: f64 = 0.0;
    for side in [Side::Plus, Side::Minus] {
        let near = if side == Side::Plus { lplus } else { lminus };
        let lhs = alg.one_sided_matrix(side, near).unwrap();
        let xi = alg.xi_matrix(side, lminus, lplus).unwrap();
        let xi_other = alg.xi_matrix(side.opposite(), lminus, lplus).unwrap();
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

fn matrix_identity() -> Outcome {
    let mut rng = common::rng(4);
    let mut worst_gap: f64 = 0.0;
    let mut method_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..10 {
        let m = common::random_model(&mut rng, 5, 0.1);
        let c = if k % 2 == 0 {
            0.0
        } else {
            rng.random_range(0.05..1.0)
        };
        let lminus = 1.0 - rng.random::<f64>();
        let lplus = 1.0 - rng.random::<f64>();
        let alg = ExitAlgebra::new(&m, c, &FactorConfig::default()).unwrap();
        worst_gap = worst_gap.max(decomposition_gap(&alg, lminus, lplus));

        let fp: Vec<f64> = m
            .plus_states()
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let fm: Vec<f64> = m
            .minus_states()
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let gp = ExpDecayFunction::new(c, Side::Plus, fp);
        let gm = ExpDecayFunction::new(c, Side::Minus, fm);
        let a = two_sided_with(&alg, &gp, &gm, lminus, lplus, 0.0, Method::Resolvent).unwrap();
        let b = two_sided_with(&alg, &gp, &gm, lminus, lplus, 0.0, Method::Neumann).unwrap();
        for i in 0..m.len() {
            let d = (a.joint[i] - b.joint[i]).abs();
            method_ok &= d <= b.truncation_bound + 1e-14;
            if b.truncation_bound > 0.0 {
                worst_ratio = worst_ratio.max(d / b.truncation_bound);
            }
        }
    }
    outcome(
        worst_gap <= 1e-8 && method_ok,
        format!("identity gap {worst_gap:.1e}; neumann vs resolvent at most {worst_ratio:.1e} of the tail bound"),
    )
}

fn two_sided_mc() -> Outcome {
    let m = common::killed();
    let gp = ExpDecayFunction::new(0.0, Side::Plus, vec![1.0]);
    let gm = ExpDecayFunction::new(0.0, Side::Minus, vec![1.0]);
    let exact = two_sided(
        &m,
        &gp,
        &gm,
        0.5,
        0.5,
        0.0,
        Method::Resolvent,
        &FactorConfig::default(),
    )
    .unwrap();
    let q = Query::JointExit {
        lminus: 0.5,
        lplus: 0.5,
        payoff: Payoff::ExpDecay {
            c: 0.0,
            values: vec![1.0, 1.0],
        },
    };
    let est = estimate(&m, &q, 0.0, 0, 100_000, 77, &McConfig::default()).unwrap();
    let z = est.z_score(exact.joint[0]);
    outcome(
        z.abs() <= 3.0,
        format!(
            "analytic {:.6} vs MC {:.5} ± {:.5}, z = {z:.2}",
            exact.joint[0], est.mean, est.stderr
        ),
    )
}

/// Tanh-sinh quadrature on `[0, 1]`; `f` receives `(x, 1 - x)`.
fn tanh_sinh(f: impl Fn(f64, f64) -> f64) -> f64 {
    let h = 1.0 / 64.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut sum = 0.0;
    for k in -400i32..=400 {
        let t = k as f64 * h;
        let u = half_pi * t.sinh();
        let x = 1.0 / (1.0 + (-2.0 * u).exp());
        let y = 1.0 / (1.0 + (2.0 * u).exp());
        let w = half_pi * t.cosh() / (2.0 * u.cosh().powi(2));
        if w.is_finite() && w > 0.0 {
            sum += w * f(x, y);
        }
    }
    sum * h
}

fn contraction() -> Outcome {
    let third = contraction_constant(1.0, 1.0).unwrap();
    let mut rng = common::rng(6);
    let mut worst_quad: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(0.1..10.0);
        let c = rng.random_range(0.1..10.0);
        let a = k / c;
        let quad = tanh_sinh(|_, y| (1.0 - y.powf(a)).powi(2));
        worst_quad = worst_quad.max((quad - contraction_constant(k, c).unwrap()).abs());
    }

    let m = common::killed();
    let alg = ExitAlgebra::new(&m, 0.0, &FactorConfig::default()).unwrap();
    let comp = alg.composite(Side::Plus, 1.0).unwrap();
    let cst = model_contraction(&m, 0.0).unwrap();
    let exact = resolvent_apply(&comp, &[1.0]).unwrap()[0];
    let mut tails_ok = true;
    for n in 0..=30 {
        let (partial, _, bound) = neumann_apply(&comp, &[1.0], Truncation::Terms(n), cst).unwrap();
        tails_ok &= (exact - partial[0]).abs() <= bound;
    }
    outcome(
        third == 1.0 / 3.0 && worst_quad <= 1e-10 && tails_ok,
        format!("C(K=c) = {third}, quadrature gap {worst_quad:.1e}, tails within C^(N+1)/(1-C) for N <= 30 with C = {cst:.4}"),
    )
}

fn composite_bound() -> Outcome {
    let cfg = McConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    // with L = 1 the four passages need two time units and the value is 0;
    // L = 0.2 leaves room for them inside [0, T]
    for level in [0.2, 1.0] {
        for (name, m) in [
            ("killed", common::killed()),
            ("conservative", common::conservative()),
        ] {
            for i in 0..2 {
                let seed = 42 + i as u64 + (level * 10.0) as u64;
                let r = composite_bound_check(
                    &m,
                    1.0,
                    level / 2.0,
                    level / 2.0,
                    0.0,
                    i,
                    10_000,
                    100,
                    seed,
                    &cfg,
                )
                .unwrap();
                ok &= r.passed;
                parts.push(format!(
                    "L={level} {name}/{}: {:.4} ± {:.4} <= {:.4}",
                    m.labels()[i],
                    r.estimate.mean,
                    r.estimate.stderr,
                    r.bound
                ));
            }
        }
    }
    outcome(ok, parts.join("; "))
}

fn inhomogeneous_decomposition() -> Outcome {
    let m = common::switching();
    let r = verify_decomposition(
        &m,
        0.5,
        0.4,
        0.4,
        0.0,
        0,
        100_000,
        1_000,
        8,
        &McConfig::default(),
    )
    .unwrap();
    outcome(
        r.z.abs() <= 3.0,
        format!(
            "lhs {:.5} ± {:.5}, rhs {:.5} ± {:.5}, z = {:.2}",
            r.lhs.mean, r.lhs.stderr, r.rhs.mean, r.rhs.stderr, r.z
        ),
    )
}

fn pre_exit() -> Outcome {
    let m = common::killed();
    let cfg = McConfig::default();
    let h = vec![1.0, 0.0];
    let hybrid = pre_exit_law(&m, &h, 2.0, 0.5, 0.5, 0.0, 0, 100_000, 9, &cfg).unwrap();
    let direct = |exited: bool, seed: u64| {
        let q = Query::PreExitLaw {
            lminus: 0.5,
            lplus: 0.5,
            h: h.clone(),
            until: 2.0,
            exited,
        };
        estimate(&m, &q, 0.0, 0, 100_000, seed, &cfg).unwrap()
    };
    let inside = direct(true, 10);
    let outside = direct(false, 11);
    let z1 =
        (hybrid.estimate.mean - inside.mean) / pooled_stderr(hybrid.estimate.stderr, inside.stderr);
    let z2 = (hybrid.estimate.mean + outside.mean - hybrid.evolution)
        / pooled_stderr(hybrid.estimate.stderr, outside.stderr);
    outcome(
        z1.abs() <= 3.0 && z2.abs() <= 3.0,
        format!(
            "hybrid {:.5} vs direct {:.5}, z = {z1:.2}; hybrid + MC complement vs U h = {:.5}, z = {z2:.2}",
            hybrid.estimate.mean, inside.mean, hybrid.evolution
        ),
    )
}

fn submarkov_violation(a: &DenseMatrix) -> f64 {
    let neg = a.as_slice().iter().fold(0.0, |w: f64, &x| w.max(-x));
    let over = a
        .row_sums()
        .into_iter()
        .fold(0.0, |w: f64, r| w.max(r - 1.0));
    neg.max(over)
}

fn invariants() -> Outcome {
    let cfg = McConfig::default();
    let models: Vec<(ValidatedModel, f64)> = vec![
        (common::killed(), 30.0),
        (common::conservative(), 30.0),
        (common::switching(), 30.0),
        (common::random_model(&mut common::rng(10), 5, 0.1), 30.0),
    ];
    let mut violations = 0;
    let mut partition_ok = true;
    let mut exits = 0;
    for (k, (m, horizon)) in models.iter().enumerate() {
        for i in 0..m.len().min(2) {
            let n = 125_000;
            let c = exit_census(m, 0.0, i, 0.4, 0.6, *horizon, n, 100 + k as u64, &cfg);
            violations += c.up_violations + c.down_violations;
            partition_ok &= c.total() == n;
            exits += c.up + c.down;
        }
    }

    let mut rng = common::rng(12);
    let mut worst_sub: f64 = 0.0;
    let mut sharp_ok = true;
    let (mut stated_checked, mut stated_ok, mut stated_small) = (0, true, 0);
    for _ in 0..20 {
        let m = common::random_model(&mut rng, 5, 0.1);
        let alg = ExitAlgebra::new(&m, 0.0, &FactorConfig::default()).unwrap();
        let f = alg.factors();
        worst_sub = worst_sub
            .max(submarkov_violation(&f.j_plus))
            .max(submarkov_violation(&f.j_minus));
        let ell = rng.random_range(0.0..3.0);
        // a second level far enough out for the stated form to apply
        let far = rng.random_range(std::f64::consts::LN_2..3.0) * m.max_speed() / m.killing_floor();
        for (side, level) in [
            (Side::Plus, ell),
            (Side::Minus, ell),
            (Side::Plus, far),
            (Side::Minus, far),
        ] {
            let p = alg.passage(side, level).unwrap();
            worst_sub = worst_sub.max(submarkov_violation(&p));
            let norm = p.norm_inf();
            sharp_ok &= norm <= passage_norm_bound(&m, level) + 1e-12;
            // 1 - exp(-x) follows from exp(-x) once x >= ln 2
            let x = m.killing_floor() * level / m.max_speed();
            if x >= std::f64::consts::LN_2 {
                stated_checked += 1;
                stated_ok &= norm <= 1.0 - (-x).exp() + 1e-12;
            } else if norm > 1.0 - (-x).exp() {
                stated_small += 1;
            }
        }
        let u = evolution_operator(&m, 0.0, ell).unwrap();
        worst_sub = worst_sub.max(submarkov_violation(&u));
        let xi = alg
            .xi_matrix(Side::Plus, 0.5, 0.5)
            .unwrap()
            .row_sums()
            .into_iter()
            .zip(alg.xi_matrix(Side::Minus, 0.5, 0.5).unwrap().row_sums())
            .fold(0.0, |w: f64, (a, b)| w.max(a + b - 1.0));
        worst_sub = worst_sub.max(xi);
        worst_sub = worst_sub.max(submarkov_violation(
            &alg.composite(Side::Plus, 1.0).unwrap(),
        ));
    }
    let total = violations == 0 && partition_ok && worst_sub <= 1e-12 && sharp_ok && stated_ok;
    outcome(
        total,
        format!(
            "{exits} exits with {violations} wrong-side states, partitions exact: {partition_ok}, \
             sub-Markov excess {worst_sub:.1e}, exp(-c_min ℓ/‖v‖) bound held: {sharp_ok}, \
             1 - exp(-c_min ℓ/‖v‖) held on {stated_checked} cases past ln 2: {stated_ok} \
             (exceeded on {stated_small} shorter levels, where it does not hold)"
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        run(1, "Wiener-Hopf closed form", secs(1), closed_form_factors),
        run(2, "zero-drift factors", secs(5), zero_drift),
        run(3, "one-sided analytic vs MC", secs(30), one_sided_mc),
        run(4, "decomposition identity", secs(10), matrix_identity),
        run(5, "two-sided analytic vs MC", secs(60), two_sided_mc),
        run(6, "contraction constant", secs(5), contraction),
        run(7, "passage composite bound", secs(120), composite_bound),
        run(
            8,
            "inhomogeneous decomposition",
            secs(600),
            inhomogeneous_decomposition,
        ),
        run(9, "pre-exit law", secs(60), pre_exit),
        run(10, "structural invariants", secs(300), invariants),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
