//! Batch statistics derived from stored corrections.

use eld_core::geometry::Point2;
use serde::{Deserialize, Serialize};

/// Per-landmark "was moved" flags. Any coordinate difference counts; an
/// empty prefill counts every landmark as placed by hand.
pub fn shifted_flags(prefill: &[Point2], corrected: &[Point2]) -> Vec<bool> {
    if prefill.is_empty() {
        return vec![true; corrected.len()];
    }
    prefill
        .iter()
        .zip(corrected)
        .map(|(p, c)| p.x != c.x || p.y != c.y)
        .collect()
}

/// Quantile with linear interpolation between closest ranks; `sorted` must
/// be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl TimeSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            median: quantile(&s, 0.5),
            q1: quantile(&s, 0.25),
            q3: quantile(&s, 0.75),
            min: s[0],
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch_id: i64,
    pub n_tasks: usize,
    pub n_done: usize,
    /// Set when no task of the batch is done yet.
    pub empty: bool,
    /// Annotation time per done image, in task order.
    pub seconds: Vec<f64>,
    pub time: Option<TimeSummary>,
    /// Share of done images in which each landmark was left where the
    /// prefill put it.
    pub unshifted_percent: Vec<f64>,
}

/// One done task: annotation seconds and its shifted flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DoneRecord {
    pub seconds: f64,
    pub shifted: Vec<bool>,
}

pub fn batch_metrics(batch_id: i64, n_tasks: usize, k: usize, done: &[DoneRecord]) -> BatchMetrics {
    let seconds: Vec<f64> = done.iter().map(|d| d.seconds).collect();
    let unshifted_percent = if done.is_empty() {
        Vec::new()
    } else {
        (0..k)
            .map(|j| {
                let kept = done.iter().filter(|d| !d.shifted.get(j).copied().unwrap_or(true)).count();
                100.0 * kept as f64 / done.len() as f64
            })
            .collect()
    };
    BatchMetrics {
        batch_id,
        n_tasks,
        n_done: done.len(),
        empty: done.is_empty(),
        time: TimeSummary::of(&seconds),
        seconds,
        unshifted_percent,
    }
}

/// Percent reduction of the median annotation time from `before` to `after`.
pub fn median_time_reduction(before: &BatchMetrics, after: &BatchMetrics) -> Option<f64> {
    let (a, b) = (before.time.as_ref()?.median, after.time.as_ref()?.median);
    (a > 0.0).then(|| 100.0 * (1.0 - b / a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn flags() {
        let p = pts(&[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)]);
        assert_eq!(shifted_flags(&p, &p), vec![false; 3]);
        let mut c = p.clone();
        c[1].x += 3.0;
        assert_eq!(shifted_flags(&p, &c), vec![false, true, false]);
        c[2].y += 1e-12;
        assert_eq!(shifted_flags(&p, &c), vec![false, true, true]);
        assert_eq!(shifted_flags(&[], &p), vec![true; 3]);
    }

    #[test]
    fn median_of_three() {
        let done: Vec<DoneRecord> = [10.0, 30.0, 20.0]
            .iter()
            .map(|&s| DoneRecord {
                seconds: s,
                shifted: vec![false; 2],
            })
            .collect();
        let m = batch_metrics(1, 3, 2, &done);
        let t = m.time.unwrap();
        assert_eq!(t.median, 20.0);
        assert_eq!(t.q1, 15.0);
        assert_eq!(t.q3, 25.0);
        assert_eq!(m.unshifted_percent, vec![100.0, 100.0]);
    }

    #[test]
    fn reduction_of_35_percent() {
        let mk = |secs: &[f64]| {
            let done: Vec<DoneRecord> = secs
                .iter()
                .map(|&s| DoneRecord {
                    seconds: s,
                    shifted: vec![],
                })
                .collect();
            batch_metrics(0, secs.len(), 0, &done)
        };
        let a = mk(&[100.0, 200.0, 300.0]);
        let b = mk(&[65.0, 130.0, 195.0]);
        assert!((median_time_reduction(&a, &b).unwrap() - 35.0).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_is_marked() {
        let m = batch_metrics(4, 10, 48, &[]);
        assert!(m.empty);
        assert!(m.time.is_none());
        assert!(m.unshifted_percent.is_empty());
    }
}
