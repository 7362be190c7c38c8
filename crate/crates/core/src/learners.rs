//! Heterogeneous-effect learners: conditional-mean differences (S, T), the
//! X-learner, and weighted regressions of transformed outcomes.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::{EnsembleConfig, FittedEnsemble, Matrix, Predictor, PropensityModel};
use crate::transforms::{EstimandSpec, TransformedSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    S,
    T,
    X,
    If,
    Iptw,
    Ra,
    Aiptw,
    Mc,
    Mcea,
    R,
    U,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 11] = [
        LearnerKind::S,
        LearnerKind::T,
        LearnerKind::X,
        LearnerKind::If,
        LearnerKind::Iptw,
        LearnerKind::Ra,
        LearnerKind::Aiptw,
        LearnerKind::Mc,
        LearnerKind::Mcea,
        LearnerKind::R,
        LearnerKind::U,
    ];

    /// Learners fitted by weighted regression of a pseudo-outcome on `X`.
    pub fn is_transformed(self) -> bool {
        !matches!(self, LearnerKind::S | LearnerKind::T | LearnerKind::X)
    }

    /// Learners whose pseudo-outcome divides by the propensity.
    pub fn uses_propensity(self) -> bool {
        matches!(
            self,
            LearnerKind::X
                | LearnerKind::If
                | LearnerKind::Iptw
                | LearnerKind::Aiptw
                | LearnerKind::Mc
                | LearnerKind::Mcea
                | LearnerKind::R
                | LearnerKind::U
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::S => "s",
            LearnerKind::T => "t",
            LearnerKind::X => "x",
            LearnerKind::If => "if",
            LearnerKind::Iptw => "iptw",
            LearnerKind::Ra => "ra",
            LearnerKind::Aiptw => "aiptw",
            LearnerKind::Mc => "mc",
            LearnerKind::Mcea => "mcea",
            LearnerKind::R => "r",
            LearnerKind::U => "u",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown learner `{s}`")))
    }
}

/// Weight `w(X)` in `ψ = w ψ(0, X) + (1 − w) ψ(1, X)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XWeight {
    /// `w = π(1 | X)`.
    #[default]
    Propensity,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub ensemble: EnsembleConfig,
    /// Minimum number of subjects per arm for per-arm regressions.
    pub min_arm_size: usize,
    pub x_weight: XWeight,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self { ensemble: EnsembleConfig::default(), min_arm_size: 10, x_weight: XWeight::Propensity }
    }
}

/// Fitted effect surface.
#[derive(Clone, Debug)]
pub enum HteModel {
    /// `μ(1, X) − μ(0, X)` from one regression on `(A, X, A·X)`.
    Single(Arc<FittedEnsemble>),
    /// `μ_1(X) − μ_0(X)` from per-arm regressions.
    PerArm([Arc<FittedEnsemble>; 2]),
    /// `w(X) ψ_0(X) + {1 − w(X)} ψ_1(X)`.
    X { arms: [Arc<FittedEnsemble>; 2], weight: XWeight, propensity: Option<PropensityModel> },
    /// Direct regression of a pseudo-outcome on `X`.
    Direct(Arc<FittedEnsemble>),
    /// Known effect function, used for oracle baselines.
    Fixed(Arc<dyn Predictor>),
    /// Mean of several fold-specific models.
    Average(Vec<HteModel>),
}

impl HteModel {
    fn raw(&self, x: &[f64], buf: &mut Vec<f64>) -> f64 {
        match self {
            HteModel::Single(m) => {
                s_features(1, x, buf);
                let m1 = m.predict_row(buf);
                s_features(0, x, buf);
                m1 - m.predict_row(buf)
            }
            HteModel::PerArm([m0, m1]) => m1.predict_row(x) - m0.predict_row(x),
            HteModel::X { arms: [p0, p1], weight, propensity } => {
                let w = match (weight, propensity) {
                    (XWeight::Constant(c), _) => *c,
                    (XWeight::Propensity, Some(p)) => p.p1(x),
                    (XWeight::Propensity, None) => 0.5,
                };
                w * p0.predict_row(x) + (1.0 - w) * p1.predict_row(x)
            }
            HteModel::Direct(m) => m.predict_row(x),
            HteModel::Fixed(f) => f.predict_row(x),
            HteModel::Average(ms) => ms.iter().map(|m| m.raw(x, buf)).sum::<f64>() / ms.len() as f64,
        }
    }

    fn ensembles(&self) -> Vec<&FittedEnsemble> {
        match self {
            HteModel::Single(m) | HteModel::Direct(m) => vec![m],
            HteModel::PerArm(ms) | HteModel::X { arms: ms, .. } => ms.iter().map(|m| m.as_ref()).collect(),
            HteModel::Fixed(_) => vec![],
            HteModel::Average(ms) => ms.iter().flat_map(|m| m.ensembles()).collect(),
        }
    }
}

/// Per-fit diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Training rows entering the final regression (after dropping zero
    /// weights).
    pub n_train: usize,
    /// Observations whose pseudo-outcome needed at least one floored
    /// denominator.
    pub floored_observations: usize,
    pub fold_sizes: Vec<usize>,
}

impl Diagnostics {
    pub fn floored_fraction(&self) -> f64 {
        if self.n_train == 0 {
            0.0
        } else {
            self.floored_observations as f64 / self.n_train as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct HteEstimate {
    pub spec: EstimandSpec,
    pub learner: LearnerKind,
    pub model: HteModel,
    pub dim: usize,
    pub diagnostics: Diagnostics,
}

/// Serializable description of a fitted learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HteSummary {
    pub estimand: String,
    pub learner: LearnerKind,
    pub covariates: usize,
    /// One entry per ensemble in the model: candidate names with weights.
    pub ensembles: Vec<Vec<(String, f64)>>,
    pub ensemble_cv_loss: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl HteEstimate {
    /// Clipped prediction `ψ̂(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} covariates, got {}",
                self.dim,
                x.len()
            )));
        }
        let (lo, hi) = self.spec.clip_range();
        let mut buf = Vec::with_capacity(2 * x.len() + 1);
        let v = self.model.raw(x, &mut buf);
        Ok(if v.is_nan() { 0.0 } else { v.clamp(lo, hi) })
    }

    pub fn summary(&self) -> HteSummary {
        let ens = self.model.ensembles();
        HteSummary {
            estimand: self.spec.label(),
            learner: self.learner,
            covariates: self.dim,
            ensembles: ens
                .iter()
                .map(|e| e.names.iter().cloned().zip(e.weights.weights.iter().copied()).collect())
                .collect(),
            ensemble_cv_loss: ens.iter().map(|e| e.ensemble_cv_loss).collect(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// `ψ̂(x)`; see [`HteEstimate::predict`].
pub fn predict_hte(model: &HteEstimate, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Features `(A, X, A·X)` for the single-regression learner.
fn s_features(a: u8, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let a = f64::from(a);
    out.push(a);
    out.extend_from_slice(x);
    out.extend(x.iter().map(|v| a * v));
}

/// Covariates, arm and CUT value for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct CutSample<'a> {
    pub x: &'a [f64],
    pub arm: u8,
    pub y: f64,
}

fn dim_of<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<usize> {
    let mut it = rows.into_iter();
    let d = it.next().ok_or_else(|| Error::InvalidArgument("no training samples".into()))?.len();
    if it.any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("covariate vectors differ in length".into()));
    }
    Ok(d)
}

fn arm_fit(samples: &[CutSample], arm: u8, config: &LearnerConfig, what: &str) -> Result<Arc<FittedEnsemble>> {
    let rows: Vec<&[f64]> = samples.iter().filter(|s| s.arm == arm).map(|s| s.x).collect();
    if rows.len() < config.min_arm_size.max(1) {
        return Err(Error::Split(format!(
            "{what}: arm {arm} has {} subject(s), fewer than the minimum {}",
            rows.len(),
            config.min_arm_size
        )));
    }
    let y: Vec<f64> = samples.iter().filter(|s| s.arm == arm).map(|s| s.y).collect();
    let x = Matrix::from_rows(&rows)?;
    let mut ens = config.ensemble.clone();
    ens.seed = ens.seed.wrapping_add(u64::from(arm) + 1);
    Ok(Arc::new(FittedEnsemble::fit(&x, &y, &vec![1.0; y.len()], &ens)?))
}

/// S- or T-learner on CUT values.
pub fn fit_mean_difference(
    kind: LearnerKind,
    samples: &[CutSample],
    spec: &EstimandSpec,
    config: &LearnerConfig,
) -> Result<HteEstimate> {
    let dim = dim_of(samples.iter().map(|s| s.x))?;
    if samples.iter().any(|s| !s.y.is_finite()) {
        return Err(Error::Numerical("non-finite CUT value".into()));
    }
    let model = match kind {
        LearnerKind::S => {
            let mut rows = Vec::with_capacity(samples.len());
            for s in samples {
                let mut r = Vec::with_capacity(2 * dim + 1);
                s_features(s.arm, s.x, &mut r);
                rows.push(r);
            }
            let x = Matrix::from_rows(&rows)?;
            let y: Vec<f64> = samples.iter().map(|s| s.y).collect();
            HteModel::Single(Arc::new(FittedEnsemble::fit(&x, &y, &vec![1.0; y.len()], &config.ensemble)?))
        }
        LearnerKind::T => {
            HteModel::PerArm([arm_fit(samples, 0, config, "T-learner")?, arm_fit(samples, 1, config, "T-learner")?])
        }
        other => return Err(Error::Incompatible(format!("{other} is not a mean-difference learner"))),
    };
    Ok(HteEstimate {
        spec: *spec,
        learner: kind,
        model,
        dim,
        diagnostics: Diagnostics { n_train: samples.len(), ..Default::default() },
    })
}

/// Weighted least-squares ensemble regression of `Y*` on `X` with weights `w*`.
pub fn fit_transformed(
    kind: LearnerKind,
    x: &[&[f64]],
    samples: &[TransformedSample],
    spec: &EstimandSpec,
    config: &LearnerConfig,
) -> Result<HteEstimate> {
    if !kind.is_transformed() {
        return Err(Error::Incompatible(format!("{kind} is not a transformed-minimization learner")));
    }
    if x.len() != samples.len() {
        return Err(Error::InvalidArgument("covariates and samples differ in length".into()));
    }
    let dim = dim_of(x.iter().copied())?;
    if samples.iter().any(|s| !(s.weight >= 0.0 && s.weight.is_finite()) || !s.outcome.is_finite()) {
        return Err(Error::Numerical("transformed samples need finite outcomes and nonnegative weights".into()));
    }
    let keep: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].weight > 0.0).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate("all transformed weights are zero".into()));
    }
    let rows: Vec<&[f64]> = keep.iter().map(|&i| x[i]).collect();
    let y: Vec<f64> = keep.iter().map(|&i| samples[i].outcome).collect();
    let w: Vec<f64> = keep.iter().map(|&i| samples[i].weight).collect();
    let fit = FittedEnsemble::fit(&Matrix::from_rows(&rows)?, &y, &w, &config.ensemble)?;
    Ok(HteEstimate {
        spec: *spec,
        learner: kind,
        model: HteModel::Direct(Arc::new(fit)),
        dim,
        diagnostics: Diagnostics {
            n_train: keep.len(),
            floored_observations: keep.iter().filter(|&&i| samples[i].floored > 0).count(),
            fold_sizes: vec![],
        },
    })
}

/// X-learner: per-arm regressions of imputed effects, combined with weight
/// `w(X)` (default `π̂(1|X)`).
pub fn fit_x_learner(
    samples: &[CutSample],
    propensity: Option<PropensityModel>,
    spec: &EstimandSpec,
    config: &LearnerConfig,
) -> Result<HteEstimate> {
    let dim = dim_of(samples.iter().map(|s| s.x))?;
    if config.x_weight == XWeight::Propensity && propensity.is_none() {
        return Err(Error::InvalidArgument("propensity weighting needs a propensity model".into()));
    }
    let arms = [arm_fit(samples, 0, config, "X-learner")?, arm_fit(samples, 1, config, "X-learner")?];
    Ok(HteEstimate {
        spec: *spec,
        learner: LearnerKind::X,
        model: HteModel::X { arms, weight: config.x_weight, propensity },
        dim,
        diagnostics: Diagnostics { n_train: samples.len(), ..Default::default() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::BaseLearner;
    use crate::transforms::EstimandSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, seed: u64, f: impl Fn(u8, &[f64]) -> f64) -> (Vec<Vec<f64>>, Vec<u8>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut arms = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = u8::from(rng.random_bool(0.5));
            ys.push(f(a, &x));
            xs.push(x);
            arms.push(a);
        }
        (xs, arms, ys)
    }

    fn samples<'a>(xs: &'a [Vec<f64>], arms: &[u8], ys: &[f64]) -> Vec<CutSample<'a>> {
        xs.iter().zip(arms).zip(ys).map(|((x, &arm), &y)| CutSample { x, arm, y }).collect()
    }

    fn linear_config() -> LearnerConfig {
        LearnerConfig {
            ensemble: EnsembleConfig {
                learners: vec![BaseLearner::Constant, BaseLearner::Ridge { lambda: 1e-3 }, BaseLearner::Knn { k: None }],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn constant_outcome_gives_zero_effect() {
        let (xs, arms, ys) = data(300, 1, |_, _| 0.3);
        let spec = EstimandSpec::rmst(2.0);
        for kind in [LearnerKind::S, LearnerKind::T] {
            let m = fit_mean_difference(kind, &samples(&xs, &arms, &ys), &spec, &LearnerConfig::default()).unwrap();
            assert!(m.predict(&[0.1, -0.4]).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn arm_indicator_outcome_gives_unit_effect() {
        let (xs, arms, ys) = data(2000, 2, |a, _| f64::from(a));
        let spec = EstimandSpec::rmst(2.0);
        for kind in [LearnerKind::S, LearnerKind::T] {
            let m = fit_mean_difference(kind, &samples(&xs, &arms, &ys), &spec, &LearnerConfig::default()).unwrap();
            for x in &xs[..50] {
                assert!((m.predict(x).unwrap() - 1.0).abs() < 0.05);
            }
            let swapped: Vec<u8> = arms.iter().map(|a| 1 - a).collect();
            let m = fit_mean_difference(kind, &samples(&xs, &swapped, &ys), &spec, &LearnerConfig::default()).unwrap();
            assert!((m.predict(&xs[0]).unwrap() + 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn small_arm_is_an_error() {
        let (xs, mut arms, ys) = data(50, 3, |_, _| 0.0);
        arms.iter_mut().skip(3).for_each(|a| *a = 0);
        arms[0] = 1;
        let err = fit_mean_difference(LearnerKind::T, &samples(&xs, &arms, &ys), &EstimandSpec::rmst(1.0), &LearnerConfig::default());
        assert!(matches!(err, Err(Error::Split(_))));
    }

    fn transformed(ws: &[f64], ys: &[f64]) -> Vec<TransformedSample> {
        ws.iter()
            .zip(ys)
            .enumerate()
            .map(|(i, (&weight, &outcome))| TransformedSample {
                id: i as u64,
                fold: None,
                learner: LearnerKind::R,
                weight,
                outcome,
                floored: 0,
            })
            .collect()
    }

    #[test]
    fn constant_pseudo_outcome() {
        let (xs, _, _) = data(200, 4, |_, _| 0.0);
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let s = transformed(&vec![1.0; 200], &vec![0.25; 200]);
        let m = fit_transformed(LearnerKind::Aiptw, &rows, &s, &EstimandSpec::survival(1.0), &LearnerConfig::default()).unwrap();
        assert!((m.predict(&[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_duplicates_change_nothing() {
        let (xs, _, ys) = data(300, 5, |_, x| x[0] + 0.1 * x[1]);
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ws: Vec<f64> = (0..300).map(|_| rng.random_range(0.1..2.0)).collect();
        let spec = EstimandSpec::rmst(3.0);
        let base = fit_transformed(LearnerKind::R, &rows, &transformed(&ws, &ys), &spec, &LearnerConfig::default()).unwrap();
        let mut rows2 = rows.clone();
        rows2.extend_from_slice(&rows[..40]);
        let mut ws2 = ws.clone();
        ws2.extend(std::iter::repeat_n(0.0, 40));
        let mut ys2 = ys.clone();
        ys2.extend(ys[..40].iter().map(|y| y + 5.0));
        let dup = fit_transformed(LearnerKind::R, &rows2, &transformed(&ws2, &ys2), &spec, &LearnerConfig::default()).unwrap();
        for x in &xs[..30] {
            assert_eq!(base.predict(x).unwrap().to_bits(), dup.predict(x).unwrap().to_bits());
        }
    }

    #[test]
    fn r_learner_recovers_linear_effect() {
        // Y = m(X) + (A − π) ψ(X) + ε with ψ(X) = X₁ and exact nuisances.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5000;
        let pi = 0.4;
        let mut xs = Vec::new();
        let mut samples = Vec::new();
        for i in 0..n {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = f64::from(u8::from(rng.random_bool(pi)));
            let mu = 0.3 * x[1];
            let y = mu + (a - pi) * x[0] + 0.3 * rng.random_range(-1.0..1.0);
            let resid = a - pi;
            samples.push(TransformedSample {
                id: i,
                fold: None,
                learner: LearnerKind::R,
                weight: resid * resid,
                outcome: (y - mu) / resid,
                floored: 0,
            });
            xs.push(x);
        }
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let m = fit_transformed(LearnerKind::R, &rows, &samples, &EstimandSpec::rmst(5.0), &linear_config()).unwrap();
        let slope = (m.predict(&[0.5, 0.0]).unwrap() - m.predict(&[-0.5, 0.0]).unwrap()) / 1.0;
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn x_learner_combination() {
        let (xs, arms, _) = data(400, 8, |_, _| 0.0);
        let ys: Vec<f64> = arms.iter().map(|&a| if a == 0 { 2.0 } else { 4.0 }).collect();
        let spec = EstimandSpec::rmst(10.0);
        let s = samples(&xs, &arms, &ys);
        let p = PropensityModel::constant(0.5, (0.01, 0.99));
        let m = fit_x_learner(&s, Some(p), &spec, &LearnerConfig::default()).unwrap();
        assert!((m.predict(&[0.0, 0.0]).unwrap() - 3.0).abs() < 1e-9);
        let cfg = LearnerConfig { x_weight: XWeight::Constant(0.0), ..Default::default() };
        let m = fit_x_learner(&s, None, &spec, &cfg).unwrap();
        assert!((m.predict(&[0.0, 0.0]).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn predictions_are_clipped_and_checked() {
        let (xs, _, _) = data(100, 9, |_, _| 0.0);
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let s = transformed(&vec![1.0; 100], &vec![1.7; 100]);
        let m = fit_transformed(LearnerKind::If, &rows, &s, &EstimandSpec::survival(1.0), &LearnerConfig::default()).unwrap();
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), m.predict(&[0.0, 0.0]).unwrap());
        assert!(m.predict(&[0.0]).is_err());
        assert!(fit_transformed(LearnerKind::If, &rows, &transformed(&vec![0.0; 100], &vec![1.0; 100]), &EstimandSpec::survival(1.0), &LearnerConfig::default()).is_err());
    }

    #[test]
    fn learner_names_round_trip() {
        for k in LearnerKind::ALL {
            assert_eq!(k.name().parse::<LearnerKind>().unwrap(), k);
        }
        assert!("nope".parse::<LearnerKind>().is_err());
    }
}
