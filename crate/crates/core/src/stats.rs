//! Statistics used by the conformity checks and reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Rejection threshold at the requested significance level.
    pub critical: f64,
    pub passed: bool,
}

/// Pearson goodness-of-fit test of observed `counts` against `probs`.
///
/// `design_factor` divides the counts first. Streams in which every
/// independent draw is delivered exactly `u` times have all counts inflated by
/// `u`, so dividing by `u` recovers the counts of the underlying draws.
/// Bins with zero probability are left out; an observation in such a bin
/// fails the test outright.
pub fn chi_square_gof(counts: &[u64], probs: &[f64], design_factor: f64, alpha: f64) -> ChiSquareOutcome {
    assert_eq!(counts.len(), probs.len());
    let n: f64 = counts.iter().map(|&c| c as f64).sum::<f64>() / design_factor;
    let mut statistic = 0.0;
    let mut bins = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        let observed = c as f64 / design_factor;
        if p <= 0.0 {
            if c > 0 {
                statistic = f64::INFINITY;
            }
            continue;
        }
        let expected = n * p;
        statistic += (observed - expected).powi(2) / expected;
        bins += 1;
    }
    let dof = bins.saturating_sub(1).max(1);
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    let p_value = if statistic.is_finite() { 1.0 - dist.cdf(statistic) } else { 0.0 };
    let critical = dist.inverse_cdf(1.0 - alpha);
    ChiSquareOutcome {
        statistic,
        dof,
        p_value,
        critical,
        passed: statistic <= critical,
    }
}

/// Sample autocorrelation of `xs` at `lag`.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    if lag >= n {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = xs[..n - lag]
        .iter()
        .zip(&xs[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum();
    cov / var
}

/// Least-squares slope of `ln y` against `ln x` over the points with
/// positive coordinates.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
