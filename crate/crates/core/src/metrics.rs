//! Accuracy and decision metrics for estimated effects, and shape-constraint
//! diagnostics across estimands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{EstimandSpec, Family};

/// Metrics of one estimate vector against the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pehe: f64,
    pub pehe_h: f64,
    pub eps_ate: f64,
    pub eps_ate_h: f64,
    pub gain: f64,
    pub gain_h: f64,
    pub regret: f64,
    pub regret_h: f64,
    pub grd: f64,
    pub grd_h: f64,
    /// `gain / regret`; `+∞` when regret is zero (see `grr_unbounded`).
    pub grr: f64,
    pub grr_h: f64,
    pub grr_unbounded: bool,
    pub grr_h_unbounded: bool,
    pub accuracy: f64,
    pub prevalence: f64,
    /// Gain and regret of the constant rule `ψ̂ ≡ P_n ψ₀`.
    pub baseline_gain: f64,
    pub baseline_regret: f64,
    /// Same for `ψ̂ ≡ P_n(h ψ₀) / P_n h`.
    pub baseline_gain_h: f64,
    pub baseline_regret_h: f64,
}

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order, for long-format tables.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("pehe", self.pehe),
            ("pehe_h", self.pehe_h),
            ("eps_ate", self.eps_ate),
            ("eps_ate_h", self.eps_ate_h),
            ("gain", self.gain),
            ("gain_h", self.gain_h),
            ("regret", self.regret),
            ("regret_h", self.regret_h),
            ("grd", self.grd),
            ("grd_h", self.grd_h),
            ("grr", self.grr),
            ("grr_h", self.grr_h),
            ("accuracy", self.accuracy),
            ("prevalence", self.prevalence),
            ("baseline_gain", self.baseline_gain),
            ("baseline_regret", self.baseline_regret),
            ("baseline_gain_h", self.baseline_gain_h),
            ("baseline_regret_h", self.baseline_regret_h),
        ]
    }
}

/// Default overlap weight `π(1|X) π(0|X)`.
pub fn overlap_weights(propensity: &[f64]) -> Vec<f64> {
    propensity.iter().map(|p| p * (1.0 - p)).collect()
}

fn wmean(v: impl Iterator<Item = f64>, h: &[f64], total: f64) -> f64 {
    v.zip(h).map(|(a, w)| a * w).sum::<f64>() / total
}

fn check_weights(h: &[f64], n: usize, what: &str) -> Result<f64> {
    if h.len() != n {
        return Err(Error::InvalidArgument(format!("{what} has length {}, expected {n}", h.len())));
    }
    if h.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} must be finite and nonnegative")));
    }
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(format!("{what} sums to zero")));
    }
    Ok(total)
}

/// Gain and regret of `est` with weights `h` summing to `total`.
fn gain_regret(est: impl Fn(usize) -> f64, truth: &[f64], h: &[f64], total: f64) -> (f64, f64) {
    let (mut g, mut r) = (0.0, 0.0);
    for (i, &t) in truth.iter().enumerate() {
        let prod = t * est(i);
        if prod > 0.0 {
            g += h[i] * t.abs();
        } else if prod < 0.0 {
            r += h[i] * t.abs();
        }
    }
    (g / total, r / total)
}

fn ratio(gain: f64, regret: f64) -> (f64, bool) {
    if regret > 0.0 {
        (gain / regret, false)
    } else {
        (f64::INFINITY, true)
    }
}

/// Metrics with overlap weights `h` used for both the truth and the
/// estimate; `None` means `h ≡ 1`.
pub fn evaluate(psi_hat: &[f64], psi0: &[f64], h: Option<&[f64]>) -> Result<MetricsReport> {
    evaluate_with(psi_hat, psi0, h, h)
}

/// As [`evaluate`], with separate true weights `h0` and estimated weights
/// `h_hat` (the latter enter only `ε_ATE^h`).
pub fn evaluate_with(psi_hat: &[f64], psi0: &[f64], h0: Option<&[f64]>, h_hat: Option<&[f64]>) -> Result<MetricsReport> {
    let n = psi0.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no subjects to evaluate".into()));
    }
    if psi_hat.len() != n {
        return Err(Error::InvalidArgument(format!("{} estimates for {n} true effects", psi_hat.len())));
    }
    if psi_hat.iter().chain(psi0).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("effects must be finite".into()));
    }
    let ones = vec![1.0; n];
    let h = h0.unwrap_or(&ones);
    let hh = h_hat.unwrap_or(h);
    let th = check_weights(h, n, "overlap weight")?;
    let thh = check_weights(hh, n, "estimated overlap weight")?;
    let nf = n as f64;
    let sq = || psi0.iter().zip(psi_hat).map(|(a, b)| (a - b).powi(2));
    let pehe = sq().sum::<f64>() / nf;
    let pehe_h = wmean(sq(), h, th);
    let mean0 = psi0.iter().sum::<f64>() / nf;
    let eps_ate = mean0 - psi_hat.iter().sum::<f64>() / nf;
    let mean0_h = wmean(psi0.iter().copied(), h, th);
    let eps_ate_h = mean0_h - wmean(psi_hat.iter().copied(), hh, thh);
    let (gain, regret) = gain_regret(|i| psi_hat[i], psi0, &ones, nf);
    let (gain_h, regret_h) = gain_regret(|i| psi_hat[i], psi0, h, th);
    let (baseline_gain, baseline_regret) = gain_regret(|_| mean0, psi0, &ones, nf);
    let (baseline_gain_h, baseline_regret_h) = gain_regret(|_| mean0_h, psi0, h, th);
    let (grr, grr_unbounded) = ratio(gain, regret);
    let (grr_h, grr_h_unbounded) = ratio(gain_h, regret_h);
    let accuracy = psi0.iter().zip(psi_hat).filter(|(a, b)| *a * *b > 0.0).count() as f64 / nf;
    let prevalence = psi0.iter().filter(|&&v| v > 0.0).count() as f64 / nf;
    Ok(MetricsReport {
        pehe,
        pehe_h,
        eps_ate,
        eps_ate_h,
        gain,
        gain_h,
        regret,
        regret_h,
        grd: gain - regret,
        grd_h: gain_h - regret_h,
        grr,
        grr_h,
        grr_unbounded,
        grr_h_unbounded,
        accuracy,
        prevalence,
        baseline_gain,
        baseline_regret,
        baseline_gain_h,
        baseline_regret_h,
    })
}

/// Whether the values are treatment contrasts (constraints sum to zero) or
/// arm-level functionals (constraints sum to one or `τ`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Contrast,
    Arm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCheck {
    pub name: String,
    pub residuals: Vec<f64>,
    /// Min, lower quartile, median, upper quartile and max of `|residual|`.
    pub quantiles: [f64; 5],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub checks: Vec<ShapeCheck>,
    /// Constraints that could not be checked, with the missing estimand.
    pub missing: Vec<String>,
}

impl ShapeReport {
    pub fn max_abs(&self) -> f64 {
        self.checks.iter().map(|c| c.quantiles[4]).fold(0.0, f64::max)
    }
}

/// Quantiles (type 7) of `|v|`.
pub fn abs_quantiles(v: &[f64]) -> [f64; 5] {
    let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    a.sort_unstable_by(f64::total_cmp);
    let q = |p: f64| {
        if a.is_empty() {
            return f64::NAN;
        }
        let pos = p * (a.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        a[lo] + (a[hi] - a[lo]) * (pos - lo as f64)
    };
    [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]
}

/// Residuals of the adding-up and separable-decomposition constraints for
/// per-subject values of several estimands. Constraints whose ingredients
/// are missing are listed in [`ShapeReport::missing`]; the decomposition is
/// checked for contrasts only.
pub fn shape_diagnostics(estimates: &[(EstimandSpec, &[f64])], n_causes: usize, level: Level) -> Result<ShapeReport> {
    let n = estimates.first().map_or(0, |e| e.1.len());
    if estimates.iter().any(|e| e.1.len() != n) {
        return Err(Error::InvalidArgument("estimate vectors differ in length".into()));
    }
    let find = |family: Family, h: f64| estimates.iter().find(|(s, _)| s.family == family && s.horizon == h).map(|e| e.1);
    let mut report = ShapeReport::default();
    let mut horizons: Vec<(bool, f64)> = Vec::new();
    for (s, _) in estimates {
        let key = match s.family {
            Family::Survival | Family::Cif { .. } => Some((false, s.horizon)),
            Family::Rmst | Family::Rmtl { .. } => Some((true, s.horizon)),
            _ => None,
        };
        if let Some(k) = key {
            if !horizons.contains(&k) {
                horizons.push(k);
            }
        }
    }
    for (restricted, h) in horizons {
        let (head, total, name) = if restricted {
            (Family::Rmst, if level == Level::Arm { h } else { 0.0 }, format!("rmst_adding_up@{h}"))
        } else {
            (Family::Survival, if level == Level::Arm { 1.0 } else { 0.0 }, format!("survival_adding_up@{h}"))
        };
        let mut parts = vec![(EstimandSpec { family: head, horizon: h }, find(head, h))];
        for j in 1..=n_causes as u8 {
            let f = if restricted { Family::Rmtl { cause: j } } else { Family::Cif { cause: j } };
            parts.push((EstimandSpec { family: f, horizon: h }, find(f, h)));
        }
        if let Some((s, _)) = parts.iter().find(|p| p.1.is_none()) {
            report.missing.push(format!("{name}: {}", s.label()));
            continue;
        }
        let residuals: Vec<f64> =
            (0..n).map(|i| parts.iter().map(|p| p.1.expect("present")[i]).sum::<f64>() - total).collect();
        report.checks.push(ShapeCheck { name, quantiles: abs_quantiles(&residuals), residuals });
    }
    if level == Level::Contrast {
        for (s, direct) in estimates {
            let (cause, a_star, rmtl) = match s.family {
                Family::SeparableDirectCif { cause, competing_arm } => (cause, competing_arm, false),
                Family::SeparableDirectRmtl { cause, competing_arm } => (cause, competing_arm, true),
                _ => continue,
            };
            let h = s.horizon;
            let (ind, tot) = if rmtl {
                (Family::SeparableIndirectRmtl { cause, cause_arm: 1 - a_star }, Family::Rmtl { cause })
            } else {
                (Family::SeparableIndirectCif { cause, cause_arm: 1 - a_star }, Family::Cif { cause })
            };
            let name = format!("separable_decomposition_{}", s.label());
            match (find(ind, h), find(tot, h)) {
                (Some(i), Some(t)) => {
                    let residuals: Vec<f64> = (0..n).map(|k| direct[k] + i[k] - t[k]).collect();
                    report.checks.push(ShapeCheck { name, quantiles: abs_quantiles(&residuals), residuals });
                }
                (None, _) => report.missing.push(format!("{name}: {}", EstimandSpec { family: ind, horizon: h }.label())),
                (_, None) => report.missing.push(format!("{name}: {}", EstimandSpec { family: tot, horizon: h }.label())),
            }
        }
    }
    Ok(report)
}
