//! Interval estimates, rank statistics and the small distribution reports used
//! in evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::core::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Wilson,
    Bootstrap,
}

impl IntervalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            IntervalMethod::Wilson => "wilson",
            IntervalMethod::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub method: IntervalMethod,
    pub n: usize,
    pub level: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Two-sided standard-normal critical value for a central `level` interval.
pub fn normal_quantile(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

pub fn wilson_ci(successes: usize, n: usize, level: f64) -> Result<Interval> {
    if n == 0 {
        return Err(Error::invalid("Wilson interval needs n >= 1"));
    }
    if successes > n {
        return Err(Error::invalid(format!("{successes} successes out of {n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level}")));
    }
    let z = normal_quantile(level);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Ok(Interval {
        estimate: p,
        lo: if successes == 0 { 0.0 } else { (centre - half).max(0.0) },
        hi: if successes == n { 1.0 } else { (centre + half).min(1.0) },
        method: IntervalMethod::Wilson,
        n,
        level,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap interval of the mean. Resample `i` draws from `rng.fork(i)`.
pub fn bootstrap_ci(samples: &[f64], resamples: usize, level: f64, rng: &RngStream) -> Result<Interval> {
    if samples.is_empty() {
        return Err(Error::Empty("bootstrap samples"));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|i| {
            let mut r = rng.fork(i as u64).rng();
            (0..n).map(|_| samples[r.gen_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let mut lo = quantile_sorted(&means, alpha / 2.0);
    let mut hi = quantile_sorted(&means, 1.0 - alpha / 2.0);
    // A constant sample must give a degenerate interval exactly at the constant.
    if samples.iter().all(|&s| s == samples[0]) {
        lo = samples[0];
        hi = samples[0];
    }
    Ok(Interval {
        estimate: mean,
        lo,
        hi,
        method: IntervalMethod::Bootstrap,
        n,
        level,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney form of the ROC area: P(score+ > score-) + 0.5 P(tie).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(labels.first().copied().unwrap_or(0)));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
}

/// Rank correlation with a two-sided t-approximation p-value. `None` when
/// either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<Spearman>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::invalid("spearman needs at least 3 points"));
    }
    let rho = match pearson(&average_ranks(x), &average_ranks(y)) {
        Some(r) => r.clamp(-1.0, 1.0),
        None => return Ok(None),
    };
    let df = (x.len() - 2) as f64;
    let p_value = if (1.0 - rho.abs()) < 1e-15 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Some(Spearman { rho, p_value }))
}

/// Sample Pearson correlation; `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean outcome in each perf-ratio tercile (sorted ascending, remainders go to
/// the lower terciles).
pub fn tercile_report(perf_ratios: &[f64], outcomes: &[u8]) -> Result<[f64; 3]> {
    if perf_ratios.len() != outcomes.len() {
        return Err(Error::DimensionMismatch {
            expected: perf_ratios.len(),
            got: outcomes.len(),
        });
    }
    let n = perf_ratios.len();
    if n < 3 {
        return Err(Error::invalid("tercile report needs at least 3 items"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| perf_ratios[a].total_cmp(&perf_ratios[b]));
    let sizes = tercile_sizes(n);
    let mut out = [0.0; 3];
    let mut start = 0;
    for (g, &size) in sizes.iter().enumerate() {
        let group = &idx[start..start + size];
        out[g] = group.iter().map(|&i| outcomes[i] as f64).sum::<f64>() / size as f64;
        start += size;
    }
    Ok(out)
}

pub fn tercile_sizes(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + (rem > 0) as usize, base + (rem > 1) as usize, base]
}

/// Counts in `[0,.1), [.1,.2), ..., [.9,1.0]`.
pub fn decile_histogram(perf_ratios: &[f64]) -> Result<[usize; 10]> {
    let mut bins = [0usize; 10];
    for &r in perf_ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("ratio {r} outside [0, 1]")));
        }
        let bin = (1..10).take_while(|&k| r >= k as f64 / 10.0).count();
        bins[bin] += 1;
    }
    Ok(bins)
}
