//! Estimates with standard errors, deterministic reductions and the
//! parallel/sequential path map.

use serde::{Deserialize, Serialize};

/// How per-path work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// runs sequentially.
    #[default]
    Parallel,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EstimateWithCI {
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
    pub seed: u64,
    /// Simulation cutoff (absolute time) used for the paths.
    pub horizon: f64,
    /// Upper bound on the payoff mass lost by stopping paths at the horizon.
    pub censored_bound: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EstimateWithCI {
    pub fn from_samples(samples: &[f64], seed: u64, horizon: f64, censored_bound: f64) -> Self {
        let (mean, stderr) = mean_stderr(samples);
        EstimateWithCI {
            mean,
            stderr,
            n: samples.len() as u64,
            seed,
            horizon,
            censored_bound,
            warnings: Vec::new(),
        }
    }

    /// `(mean - target) / stderr`; zero when both the gap and the error vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        z_score(self.mean - target, self.stderr)
    }

    /// Half-width of the normal 95% interval.
    pub fn ci95(&self) -> (f64, f64) {
        (
            self.mean - 1.96 * self.stderr,
            self.mean + 1.96 * self.stderr,
        )
    }
}

/// `diff / se`, with `0/0 = 0` and `x/0 = ±inf`.
pub fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Pooled standard error of a difference of independent estimates.
pub fn pooled_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation in a fixed order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // shifting by the first sample keeps constant samples exact
    let x0 = xs[0];
    let shifted: Vec<f64> = xs.iter().map(|x| x - x0).collect();
    let mean = x0 + pairwise_sum(&shifted) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Evaluates `f(k)` for `k in 0..n`, keeping the results in index order.
pub fn map_paths<T, F>(n: u64, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}
