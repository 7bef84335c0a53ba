//! Summaries and shape checks on training-dynamics traces.

use lco_core::convexity::BOUND_SLACK;
use lco_core::trainer::DynamicsRecord;
use lco_core::ObjectiveKind;

use crate::tables::fmt_float;

pub const DEFAULT_SMOOTHING_WINDOW: usize = 50;

/// Trailing moving average; the first `window − 1` entries average what is available.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Steps whose gradient norm exceeds the recorded envelope.
pub fn envelope_violations(records: &[DynamicsRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.bound.is_some_and(|b| r.grad_norm_param > b + BOUND_SLACK))
        .count()
}

pub fn grad_norms(records: &[DynamicsRecord]) -> Vec<f64> {
    records.iter().map(|r| r.grad_norm_param).collect()
}

/// Smoothed values never increase over the last `fraction` of the run
/// (relative slack 1e-12 for rounding).
pub fn smoothed_tail_non_increasing(values: &[f64], window: usize, fraction: f64) -> bool {
    let s = smooth(values, window);
    let start = ((1.0 - fraction) * s.len() as f64).floor() as usize;
    s[start.min(s.len())..]
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-12))
}

/// The first step whose gradient norm exceeds `factor` times the smoothed
/// initial value (the mean of the first window) and is later followed by an
/// exactly-zero gradient. Returns `(rise_step, zero_step)`, 1-based.
pub fn rise_then_zero(values: &[f64], window: usize, factor: f64) -> Option<(usize, usize)> {
    let n = values.len().min(window.max(1));
    if n == 0 {
        return None;
    }
    let initial = values[..n].iter().sum::<f64>() / n as f64;
    let rise = values.iter().position(|&g| g > factor * initial)?;
    let zero = values[rise + 1..].iter().position(|&g| g == 0.0)? + rise + 1;
    Some((rise + 1, zero + 1))
}

/// Largest smoothed value over the last `fraction` of the run divided by the
/// smoothed peak.
pub fn tail_to_peak(values: &[f64], window: usize, fraction: f64) -> f64 {
    let s = smooth(values, window);
    let peak = s.iter().cloned().fold(0.0, f64::max);
    let start = ((1.0 - fraction) * s.len() as f64).floor() as usize;
    let tail = s[start.min(s.len())..].iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        tail / peak
    } else {
        0.0
    }
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "objective",
    "steps",
    "max_grad_norm",
    "final_entropy",
    "final_sampled_prob",
    "envelope_violations",
    "zero_grad_steps",
    "tail_to_peak",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSummary {
    pub objective: ObjectiveKind,
    pub steps: usize,
    pub max_grad_norm: f64,
    pub final_entropy: f64,
    pub final_sampled_prob: f64,
    pub envelope_violations: usize,
    pub zero_grad_steps: usize,
    /// Smoothed gradient norm over the last 10% relative to its smoothed peak.
    pub tail_to_peak: f64,
}

impl DynamicsSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.objective.name(),
            self.steps,
            fmt_float(self.max_grad_norm),
            fmt_float(self.final_entropy),
            fmt_float(self.final_sampled_prob),
            self.envelope_violations,
            self.zero_grad_steps,
            fmt_float(self.tail_to_peak)
        )
    }
}

pub fn summarize(
    objective: ObjectiveKind,
    records: &[DynamicsRecord],
    window: usize,
) -> DynamicsSummary {
    let g = grad_norms(records);
    let last = records.last();
    DynamicsSummary {
        objective,
        steps: records.len(),
        max_grad_norm: g.iter().cloned().fold(0.0, f64::max),
        final_entropy: last.map_or(f64::NAN, |r| r.entropy),
        final_sampled_prob: last.map_or(f64::NAN, |r| r.sampled_prob),
        envelope_violations: envelope_violations(records),
        zero_grad_steps: g.iter().filter(|&&x| x == 0.0).count(),
        tail_to_peak: tail_to_peak(&g, window, 0.1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&[2.0, 4.0], 50), vec![2.0, 3.0]);
        assert!(smooth(&[], 5).is_empty());
    }

    #[test]
    fn shapes() {
        let decreasing: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(smoothed_tail_non_increasing(&decreasing, 10, 0.8));
        let mut bump = decreasing.clone();
        bump[90] = 5.0;
        assert!(!smoothed_tail_non_increasing(&bump, 10, 0.8));

        let trace = [1.0, 1.0, 1.5, 2.5, 3.0, 0.0, 0.0];
        assert_eq!(rise_then_zero(&trace, 2, 2.0), Some((4, 6)));
        assert_eq!(rise_then_zero(&[1.0, 3.0, 2.0], 1, 2.0), None);

        assert!((tail_to_peak(&[0.0, 4.0, 1.0, 1.0], 1, 0.5) - 0.25).abs() < 1e-15);
    }
}
