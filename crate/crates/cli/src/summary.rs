//! Plot-ready summaries: median and interquartile range of metrics, and box
//! plot statistics of estimated effects.

use serde::Serialize;

/// Type-7 quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_unstable_by(f64::total_cmp);
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub count: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

pub fn spread(values: &[f64]) -> Spread {
    let v = sorted(values);
    Spread { count: v.len(), q25: quantile(&v, 0.25), median: quantile(&v, 0.5), q75: quantile(&v, 0.75) }
}

/// Quartiles with Tukey whiskers (most extreme data within 1.5 IQR).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoxStats {
    pub count: usize,
    pub whisker_low: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub whisker_high: f64,
    pub min: f64,
    pub max: f64,
}

pub fn box_stats(values: &[f64]) -> BoxStats {
    let v = sorted(values);
    let (q25, median, q75) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let fence = 1.5 * (q75 - q25);
    let whisker_low = v.iter().copied().find(|&x| x >= q25 - fence).unwrap_or(f64::NAN);
    let whisker_high = v.iter().rev().copied().find(|&x| x <= q75 + fence).unwrap_or(f64::NAN);
    BoxStats {
        count: v.len(),
        whisker_low,
        q25,
        median,
        q75,
        whisker_high,
        min: v.first().copied().unwrap_or(f64::NAN),
        max: v.last().copied().unwrap_or(f64::NAN),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_small_samples() {
        let s = spread(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.q25, s.median, s.q75), (1.75, 2.5, 3.25));
        assert_eq!(spread(&[7.0]).median, 7.0);
        assert!(spread(&[]).median.is_nan());
    }

    #[test]
    fn whiskers_exclude_outliers() {
        let mut v: Vec<f64> = (1..=9).map(f64::from).collect();
        v.push(100.0);
        let b = box_stats(&v);
        assert_eq!(b.whisker_high, 9.0);
        assert_eq!(b.whisker_low, 1.0);
        assert_eq!(b.max, 100.0);
    }
}
