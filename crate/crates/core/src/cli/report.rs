//! Metric tables computed from rollout caches.

use std::fmt::Write as _;
use std::path::Path;

use crate::core::RngStream;
use crate::error::{Error, Result};
use crate::labeling::{
    has_marker, probe_perf_ratio, single_block_resolutions, FAITHFUL_RATIO, HIGH_THEATER_RATIO,
};
use crate::stats::{bootstrap_ci, decile_histogram, spearman, tercile_report, wilson_ci, Interval};

use super::records::{atomic_write, RolloutRecord};

pub const CI_LEVEL: f64 = 0.95;
pub const REPORT_HEADER: &str = "condition,metric,value,ci_lo,ci_hi,method,n";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub condition: String,
    pub metric: String,
    pub interval: Interval,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn get(&self, condition: &str, metric: &str) -> Option<&Interval> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.metric == metric)
            .map(|r| &r.interval)
    }
}

pub fn format_report(report: &MetricsReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        let i = &r.interval;
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{},{}",
            r.condition,
            r.metric,
            i.estimate,
            i.lo,
            i.hi,
            i.method.as_str(),
            i.n
        );
    }
    s
}

pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    atomic_write(path, format_report(report).as_bytes())
}

fn rate(condition: &str, metric: &str, hits: usize, n: usize) -> Result<MetricRow> {
    Ok(MetricRow {
        condition: condition.to_string(),
        metric: metric.to_string(),
        interval: wilson_ci(hits, n, CI_LEVEL)?,
    })
}

fn mean(condition: &str, metric: &str, xs: &[f64], resamples: usize, rng: &RngStream) -> Result<MetricRow> {
    Ok(MetricRow {
        condition: condition.to_string(),
        metric: metric.to_string(),
        interval: bootstrap_ci(xs, resamples, CI_LEVEL, &rng.child(metric))?,
    })
}

/// Per-rollout probe perf ratios at `theta`, over chains with at least one
/// step and stored probe scores.
pub fn probe_ratios(records: &[RolloutRecord], theta: f64) -> Result<Vec<f64>> {
    records
        .iter()
        .filter_map(|r| r.probe_scores.as_deref().filter(|s| !s.is_empty()))
        .map(|s| probe_perf_ratio(s, theta))
        .collect()
}

pub struct MetricSettings {
    pub delta_faithful: f64,
    pub theta_probe: f64,
    pub resamples: usize,
}

/// Headline rows for one condition's evaluation cache.
pub fn condition_metrics(
    condition: &str,
    records: &[RolloutRecord],
    settings: &MetricSettings,
    rng: &RngStream,
) -> Result<Vec<MetricRow>> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation rollouts"));
    }
    let n = records.len();
    let perf: Vec<f64> = records.iter().map(|r| r.perf_ratio_oracle).collect();
    let lengths: Vec<f64> = records.iter().map(|r| r.steps() as f64).collect();
    let correct = records.iter().filter(|r| r.correct).count();
    let faithful = perf.iter().filter(|&&p| p <= settings.delta_faithful).count();
    let rollouts: Vec<_> = records.iter().map(|r| r.rollout()).collect();

    let mut rows = vec![
        rate(condition, "accuracy", correct, n)?,
        mean(condition, "perf_ratio", &perf, settings.resamples, rng)?,
        rate(condition, "faithful_fraction", faithful, n)?,
        mean(condition, "chain_length", &lengths, settings.resamples, rng)?,
        rate(condition, "single_block", single_block_resolutions(&rollouts), n)?,
    ];
    let pr = probe_ratios(records, settings.theta_probe)?;
    if !pr.is_empty() {
        rows.push(mean(condition, "probe_perf_ratio", &pr, settings.resamples, rng)?);
    }
    for (metric, pick) in [
        ("marker_high_theater", &(|p: f64| p > HIGH_THEATER_RATIO) as &dyn Fn(f64) -> bool),
        ("marker_faithful", &|p: f64| p < FAITHFUL_RATIO),
    ] {
        let mut class = 0;
        let mut with = 0;
        for (rec, r) in records.iter().zip(&rollouts) {
            if pick(rec.perf_ratio_oracle) {
                class += 1;
                with += has_marker(r, &rec.label()?) as usize;
            }
        }
        if class > 0 {
            rows.push(rate(condition, metric, with, class)?);
        }
    }
    Ok(rows)
}

fn fmt_theta(t: f64) -> String {
    format!("theta_{t}")
}

/// One row per condition: mean probe perf ratio at each threshold, `NA` when
/// no rollout in the set has a reasoning step.
pub fn format_threshold_sweep(thetas: &[f64], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let mut s = String::from("condition");
    for &t in thetas {
        let _ = write!(s, ",{}", fmt_theta(t));
    }
    s.push('\n');
    for (cond, vals) in rows {
        s.push_str(cond);
        for v in vals {
            match v {
                Some(v) => {
                    let _ = write!(s, ",{v:.3}");
                }
                None => s.push_str(",NA"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn threshold_sweep(records: &[RolloutRecord], thetas: &[f64]) -> Result<Vec<Option<f64>>> {
    thetas
        .iter()
        .map(|&t| {
            let r = probe_ratios(records, t)?;
            Ok((!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64))
        })
        .collect()
}

pub fn deciles(records: &[RolloutRecord]) -> Result<[usize; 10]> {
    decile_histogram(&records.iter().map(|r| r.perf_ratio_oracle).collect::<Vec<_>>())
}

pub fn format_deciles(rows: &[(String, [usize; 10])]) -> String {
    let mut s = String::from("condition");
    for k in 0..10 {
        let _ = write!(s, ",d{}", k + 1);
    }
    s.push('\n');
    for (cond, bins) in rows {
        s.push_str(cond);
        for b in bins {
            let _ = write!(s, ",{b}");
        }
        s.push('\n');
    }
    s
}

/// Accuracy in the low, middle and high perf-ratio terciles.
pub fn terciles(records: &[RolloutRecord]) -> Result<[f64; 3]> {
    let perf: Vec<f64> = records.iter().map(|r| r.perf_ratio_oracle).collect();
    let correct: Vec<u8> = records.iter().map(|r| r.correct as u8).collect();
    tercile_report(&perf, &correct)
}

pub fn format_terciles(rows: &[(String, [f64; 3])]) -> String {
    let mut s = String::from("condition,low,mid,high\n");
    for (cond, t) in rows {
        let _ = writeln!(s, "{cond},{:.3},{:.3},{:.3}", t[0], t[1], t[2]);
    }
    s
}

/// Rank correlation between per-rollout mean probe score and oracle perf ratio.
pub fn probe_oracle_spearman(records: &[RolloutRecord]) -> Result<Option<(f64, f64, usize)>> {
    let (mut means, mut perf) = (Vec::new(), Vec::new());
    for r in records {
        if let Some(s) = r.probe_scores.as_deref().filter(|s| !s.is_empty()) {
            means.push(s.iter().sum::<f64>() / s.len() as f64);
            perf.push(r.perf_ratio_oracle);
        }
    }
    if means.len() < 3 {
        return Ok(None);
    }
    Ok(spearman(&means, &perf)?.map(|s| (s.rho, s.p_value, means.len())))
}

pub fn format_spearman(rows: &[(String, Option<(f64, f64, usize)>)]) -> String {
    let mut s = String::from("condition,rho,p_value,n\n");
    for (cond, v) in rows {
        match v {
            Some((rho, p, n)) => {
                let _ = writeln!(s, "{cond},{rho:.3},{p:.3e},{n}");
            }
            None => {
                let _ = writeln!(s, "{cond},NA,NA,0");
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::IntervalMethod;

    fn row(est: f64, lo: f64, hi: f64) -> MetricRow {
        MetricRow {
            condition: "baseline".into(),
            metric: "accuracy".into(),
            interval: Interval {
                estimate: est,
                lo,
                hi,
                method: IntervalMethod::Wilson,
                n: 500,
                level: CI_LEVEL,
            },
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(format_report(&MetricsReport::default()), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn one_row_gives_two_lines() {
        let ci = wilson_ci(389, 500, CI_LEVEL).unwrap();
        let mut r = row(0.0, 0.0, 0.0);
        r.interval = ci;
        let text = format_report(&MetricsReport { rows: vec![r] });
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "baseline,accuracy,0.778,0.740,0.812,wilson,500");
    }

    #[test]
    fn emit_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rep = MetricsReport {
            rows: vec![row(0.5, 0.25, 0.75)],
        };
        emit_report(&rep, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format_report(&rep));
        assert!(rep.get("baseline", "accuracy").is_some());
        assert!(rep.get("profil", "accuracy").is_none());
    }

    #[test]
    fn sweep_header_has_one_column_per_theta() {
        let text = format_threshold_sweep(&[0.05, 0.1, 0.2, 0.5], &[("profil".into(), vec![Some(0.1), Some(0.05), Some(0.0), None])]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "condition,theta_0.05,theta_0.1,theta_0.2,theta_0.5");
        assert_eq!(lines.next().unwrap(), "profil,0.100,0.050,0.000,NA");
    }
}
