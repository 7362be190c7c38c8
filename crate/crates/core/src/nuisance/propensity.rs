use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::ensemble::{EnsembleConfig, FittedEnsemble};
use crate::nuisance::regress::{Glm, GlmPenalty, Link, Matrix, Predictor};
use crate::survival::Observation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityLearner {
    /// Penalized logistic regression on `X`.
    Logistic,
    /// Convex ensemble of the base-learner library regressing `A` on `X`.
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub learner: PropensityLearner,
    pub clip: (f64, f64),
    pub ridge: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { learner: PropensityLearner::Logistic, clip: (0.01, 0.99), ridge: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct PropensityModel {
    predictor: Arc<dyn Predictor>,
    /// Logistic fits receive a leading intercept column.
    intercept: bool,
    pub clip: (f64, f64),
}

impl PropensityModel {
    /// Model returning a fixed probability regardless of covariates.
    pub fn constant(p1: f64, clip: (f64, f64)) -> Self {
        Self {
            predictor: Arc::new(crate::nuisance::regress::ConstantMean { value: p1 }),
            intercept: false,
            clip,
        }
    }

    /// `π(1 | x)`, clipped.
    pub fn p1(&self, x: &[f64]) -> f64 {
        let raw = if self.intercept {
            let mut row = Vec::with_capacity(x.len() + 1);
            row.push(1.0);
            row.extend_from_slice(x);
            self.predictor.predict_row(&row)
        } else {
            self.predictor.predict_row(x)
        };
        raw.clamp(self.clip.0, self.clip.1)
    }

    /// `π(a | x)`; `π(0|x) = 1 − π(1|x)`.
    pub fn p(&self, arm: u8, x: &[f64]) -> f64 {
        let p1 = self.p1(x);
        if arm == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

pub fn fit_propensity(
    data: &[Observation],
    config: &PropensityConfig,
    ensemble: &EnsembleConfig,
) -> Result<PropensityModel> {
    let (lo, hi) = config.clip;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!("propensity clip bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
    }
    let treated = data.iter().filter(|o| o.arm == 1).count();
    if treated == 0 || treated == data.len() {
        return Err(Error::Degenerate("propensity model needs both arms".into()));
    }
    let y: Vec<f64> = data.iter().map(|o| o.arm as f64).collect();
    let w = vec![1.0; data.len()];
    match config.learner {
        PropensityLearner::Logistic => {
            let rows: Vec<Vec<f64>> = data
                .iter()
                .map(|o| std::iter::once(1.0).chain(o.covariates.iter().copied()).collect())
                .collect();
            let x = Matrix::from_rows(&rows)?;
            let p = x.cols();
            let n = data.len() as f64;
            let strength = (0..p).map(|j| if j == 0 { 0.0 } else { config.ridge * n }).collect();
            let fit = Glm::fit(Link::Logit, &x, &y, &w, &GlmPenalty { strength, center: vec![0.0; p] })?;
            Ok(PropensityModel { predictor: Arc::new(fit), intercept: true, clip: config.clip })
        }
        PropensityLearner::Ensemble => {
            let rows: Vec<&[f64]> = data.iter().map(|o| o.covariates.as_slice()).collect();
            let x = Matrix::from_rows(&rows)?;
            let fit = FittedEnsemble::fit(&x, &y, &w, ensemble)?;
            Ok(PropensityModel { predictor: Arc::new(fit), intercept: false, clip: config.clip })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::regress::expit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, seed: u64, law: impl Fn(&[f64]) -> f64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = u8::from(rng.random::<f64>() < law(&x));
                Observation::new(i as u64, x, a, 1.0, 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn balanced_assignment_is_flat() {
        let data = sample(2000, 1, |_| 0.5);
        let m = fit_propensity(&data, &PropensityConfig::default(), &EnsembleConfig::default()).unwrap();
        for o in data.iter().take(200) {
            assert!((m.p1(&o.covariates) - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn first_setting_intercept() {
        let lin = |x: &[f64]| 0.3 + 0.2 * x[0] + 0.3 * x[1] + 0.3 * x[2] - 0.2 * x[3] - 0.3 * x[4] - 0.2 * x[5];
        let data = sample(10_000, 2, |x| expit(-lin(x)));
        let m = fit_propensity(&data, &PropensityConfig::default(), &EnsembleConfig::default()).unwrap();
        assert!((m.p1(&[0.0; 6]) - expit(-0.3)).abs() < 0.05);
    }

    #[test]
    fn single_arm_rejected() {
        let data: Vec<Observation> = (0..10).map(|i| Observation::new(i, vec![0.0], 1, 1.0, 1).unwrap()).collect();
        assert!(fit_propensity(&data, &PropensityConfig::default(), &EnsembleConfig::default()).is_err());
    }

    #[test]
    fn complement_is_exact() {
        let m = PropensityModel::constant(0.0, (0.01, 0.99));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = rng.random_range(0.01..0.99);
            let m = PropensityModel { clip: (0.01, 0.99), ..PropensityModel::constant(p, m.clip) };
            assert_eq!(m.p(0, &[]) + m.p(1, &[]), 1.0);
        }
    }
}
