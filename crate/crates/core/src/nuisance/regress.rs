//! Regression abstraction shared by propensity, hazard and final-stage fits.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::tree::{BoostedTrees, BoostingParams};

/// Dense row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidArgument("ragged feature rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { data, rows: rows.len(), cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { data, rows: idx.len(), cols: self.cols }
    }
}

pub trait Predictor: Send + Sync + fmt::Debug {
    fn predict_row(&self, row: &[f64]) -> f64;

    fn predict(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

pub trait Regressor: Send + Sync {
    fn fit(&self, x: &Matrix, y: &[f64], w: &[f64]) -> Result<Arc<dyn Predictor>>;
    fn name(&self) -> String;
}

/// Base-learner library entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseLearner {
    Constant,
    /// Penalty `lambda · Σw` on standardized slopes; intercept unpenalized.
    Ridge {
        #[serde(default = "default_ridge_lambda")]
        lambda: f64,
    },
    /// `k = ⌈√n⌉` when unset.
    Knn {
        #[serde(default)]
        k: Option<usize>,
    },
    Boosting(#[serde(default)] BoostingParams),
}

fn default_ridge_lambda() -> f64 {
    1e-3
}

impl BaseLearner {
    pub fn default_library() -> Vec<BaseLearner> {
        vec![
            BaseLearner::Constant,
            BaseLearner::Ridge { lambda: default_ridge_lambda() },
            BaseLearner::Knn { k: None },
            BaseLearner::Boosting(BoostingParams::default()),
        ]
    }
}

impl Regressor for BaseLearner {
    fn fit(&self, x: &Matrix, y: &[f64], w: &[f64]) -> Result<Arc<dyn Predictor>> {
        let (x, y, w) = positive_rows(x, y, w)?;
        Ok(match self {
            BaseLearner::Constant => Arc::new(ConstantMean::fit(&y, &w)),
            BaseLearner::Ridge { lambda } => Arc::new(Ridge::fit(&x, &y, &w, *lambda)?),
            BaseLearner::Knn { k } => Arc::new(Knn::fit(&x, &y, &w, *k)),
            BaseLearner::Boosting(p) => Arc::new(BoostedTrees::fit(&x, &y, &w, p)?),
        })
    }

    fn name(&self) -> String {
        match self {
            BaseLearner::Constant => "constant".into(),
            BaseLearner::Ridge { .. } => "ridge".into(),
            BaseLearner::Knn { .. } => "knn".into(),
            BaseLearner::Boosting(_) => "boosting".into(),
        }
    }
}

/// Drop rows with zero weight and validate inputs. Zero-weight rows must not
/// influence any fit, including fold assignment and neighborhood sizes.
pub fn positive_rows(x: &Matrix, y: &[f64], w: &[f64]) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if x.rows() != y.len() || y.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "regression inputs disagree in length: {} rows, {} targets, {} weights",
            x.rows(),
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("targets must be finite".into()));
    }
    let keep: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate("all regression weights are zero".into()));
    }
    if keep.len() == w.len() {
        return Ok((x.clone(), y.to_vec(), w.to_vec()));
    }
    Ok((
        x.select_rows(&keep),
        keep.iter().map(|&i| y[i]).collect(),
        keep.iter().map(|&i| w[i]).collect(),
    ))
}

pub fn weighted_mean(y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
}

#[derive(Clone, Debug)]
pub struct ConstantMean {
    pub value: f64,
}

impl ConstantMean {
    pub fn fit(y: &[f64], w: &[f64]) -> Self {
        Self { value: weighted_mean(y, w) }
    }
}

impl Predictor for ConstantMean {
    fn predict_row(&self, _row: &[f64]) -> f64 {
        self.value
    }
}

/// Column centering and scaling; zero-variance columns map to 0.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix, w: &[f64]) -> Self {
        let sw: f64 = w.iter().sum();
        let p = x.cols();
        let mut mean = vec![0.0; p];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += w[i] * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= sw);
        let mut var = vec![0.0; p];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += w[i] * (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / sw).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (row[j] - self.mean[j]) * self.scale[j];
        }
    }
}

/// Weighted ridge regression on standardized features.
#[derive(Clone, Debug)]
pub struct Ridge {
    standardizer: Standardizer,
    intercept: f64,
    coef: Vec<f64>,
}

impl Ridge {
    pub fn fit(x: &Matrix, y: &[f64], w: &[f64], lambda: f64) -> Result<Self> {
        let p = x.cols();
        let standardizer = Standardizer::fit(x, w);
        let sw: f64 = w.iter().sum();
        let ybar = weighted_mean(y, w);
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut z = vec![0.0; p];
        for i in 0..x.rows() {
            standardizer.apply(x.row(i), &mut z);
            let r = y[i] - ybar;
            for a in 0..p {
                let wa = w[i] * z[a];
                xty[a] += wa * r;
                for b in a..p {
                    xtx[(a, b)] += wa * z[b];
                }
            }
        }
        let pen = lambda * sw;
        for a in 0..p {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
            xtx[(a, a)] += pen.max(1e-12 * sw);
        }
        let coef = xtx
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?
            .solve(&xty);
        Ok(Self { standardizer, intercept: ybar, coef: coef.iter().copied().collect() })
    }
}

impl Predictor for Ridge {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut z = vec![0.0; row.len()];
        self.standardizer.apply(row, &mut z);
        self.intercept + z.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Weighted k-nearest-neighbor mean on standardized features.
#[derive(Clone, Debug)]
pub struct Knn {
    standardizer: Standardizer,
    points: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    cols: usize,
    k: usize,
}

impl Knn {
    pub fn fit(x: &Matrix, y: &[f64], w: &[f64], k: Option<usize>) -> Self {
        let n = x.rows();
        let k = k.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).clamp(1, n);
        let ones = vec![1.0; n];
        let standardizer = Standardizer::fit(x, &ones);
        let cols = x.cols();
        let mut points = vec![0.0; n * cols];
        for i in 0..n {
            standardizer.apply(x.row(i), &mut points[i * cols..(i + 1) * cols]);
        }
        Self { standardizer, points, y: y.to_vec(), w: w.to_vec(), cols, k }
    }
}

impl Predictor for Knn {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut q = vec![0.0; self.cols];
        self.standardizer.apply(row, &mut q);
        let mut dist: Vec<(f64, usize)> = self
            .points
            .chunks_exact(self.cols.max(1))
            .take(self.y.len())
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        if self.cols == 0 {
            dist = (0..self.y.len()).map(|i| (0.0, i)).collect();
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, cmp);
            dist.truncate(self.k);
        }
        dist.sort_unstable_by(cmp);
        let (mut num, mut den) = (0.0, 0.0);
        for &(_, i) in &dist {
            num += self.w[i] * self.y[i];
            den += self.w[i];
        }
        num / den
    }
}

/// Generalized linear model fitted by penalized IRLS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    /// Bernoulli likelihood, targets in [0, 1].
    Logit,
    /// Poisson likelihood for rates: targets are rates and weights exposures.
    Log,
}

#[derive(Clone, Debug)]
pub struct Glm {
    pub link: Link,
    pub coef: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GlmPenalty {
    /// Per-coefficient ridge strength.
    pub strength: Vec<f64>,
    /// Per-coefficient shrinkage target; also the starting value.
    pub center: Vec<f64>,
}

impl Glm {
    pub fn fit(link: Link, x: &Matrix, y: &[f64], w: &[f64], penalty: &GlmPenalty) -> Result<Self> {
        let p = x.cols();
        if penalty.strength.len() != p || penalty.center.len() != p {
            return Err(Error::InvalidArgument("penalty length must match feature count".into()));
        }
        let mut beta = penalty.center.clone();
        let objective = |beta: &[f64]| -> f64 {
            let mut ll = 0.0;
            for i in 0..x.rows() {
                let eta = clamp_eta(dot(x.row(i), beta));
                ll += w[i]
                    * match link {
                        Link::Logit => y[i] * eta - softplus(eta),
                        Link::Log => y[i] * eta - eta.exp(),
                    };
            }
            let pen: f64 = (0..p).map(|j| 0.5 * penalty.strength[j] * (beta[j] - penalty.center[j]).powi(2)).sum();
            -ll + pen
        };
        let mut current = objective(&beta);
        for _ in 0..100 {
            let mut hess = DMatrix::<f64>::zeros(p, p);
            let mut grad = DVector::<f64>::zeros(p);
            for i in 0..x.rows() {
                let row = x.row(i);
                let eta = clamp_eta(dot(row, &beta));
                let (mu, v) = match link {
                    Link::Logit => {
                        let m = expit(eta);
                        (m, m * (1.0 - m))
                    }
                    Link::Log => {
                        let m = eta.exp();
                        (m, m)
                    }
                };
                let g = w[i] * (y[i] - mu);
                let h = w[i] * v.max(1e-12);
                for a in 0..p {
                    grad[a] += g * row[a];
                    let ha = h * row[a];
                    if ha != 0.0 {
                        for b in a..p {
                            hess[(a, b)] += ha * row[b];
                        }
                    }
                }
            }
            for a in 0..p {
                grad[a] -= penalty.strength[a] * (beta[a] - penalty.center[a]);
                hess[(a, a)] += penalty.strength[a] + 1e-10;
                for b in 0..a {
                    hess[(a, b)] = hess[(b, a)];
                }
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Numerical("GLM Hessian is not positive definite".into()))?
                .solve(&grad);
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
                let value = objective(&trial);
                if value <= current + 1e-12 * current.abs().max(1.0) {
                    let change = (current - value).abs();
                    beta = trial;
                    current = value;
                    accepted = true;
                    if change < 1e-10 * current.abs().max(1.0) {
                        return Ok(Self { link, coef: beta });
                    }
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self { link, coef: beta })
    }

    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        clamp_eta(dot(row, &self.coef))
    }
}

impl Predictor for Glm {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let eta = self.linear_predictor(row);
        match self.link {
            Link::Logit => expit(eta),
            Link::Log => eta.exp(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-40.0, 40.0)
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_data(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let y = rows.iter().map(|r| 1.0 + 2.0 * r[0] - r[1]).collect();
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn constant_targets_give_constant_predictions() {
        let (x, _) = linear_data(200, 1);
        let y = vec![3.5; 200];
        let w = vec![1.0; 200];
        for learner in BaseLearner::default_library() {
            let fit = learner.fit(&x, &y, &w).unwrap();
            for p in fit.predict(&x) {
                assert!((p - 3.5).abs() < 1e-9, "{} predicted {p}", learner.name());
            }
        }
    }

    #[test]
    fn ridge_recovers_linear_signal() {
        let (x, y) = linear_data(500, 2);
        let fit = Ridge::fit(&x, &y, &vec![1.0; 500], 1e-6).unwrap();
        assert!((fit.predict_row(&[0.5, 0.5]) - 1.5).abs() < 1e-3);
    }

    #[test]
    fn zero_weight_rows_have_no_influence() {
        let (x, y) = linear_data(100, 3);
        let w = vec![1.0; 100];
        let mut rows: Vec<Vec<f64>> = (0..100).map(|i| x.row(i).to_vec()).collect();
        rows.insert(40, vec![0.9, -0.9]);
        let mut y2 = y.clone();
        y2.insert(40, 1e6);
        let mut w2 = w.clone();
        w2.insert(40, 0.0);
        let x2 = Matrix::from_rows(&rows).unwrap();
        for learner in BaseLearner::default_library() {
            let a = learner.fit(&x, &y, &w).unwrap().predict(&x);
            let b = learner.fit(&x2, &y2, &w2).unwrap().predict(&x);
            assert_eq!(a, b, "{}", learner.name());
        }
    }

    #[test]
    fn logistic_matches_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| if rng.random::<f64>() < expit(-0.5 + r[1]) { 1.0 } else { 0.0 })
            .collect();
        let pen = GlmPenalty { strength: vec![0.0, 1e-6], center: vec![0.0, 0.0] };
        let fit = Glm::fit(Link::Logit, &Matrix::from_rows(&rows).unwrap(), &y, &vec![1.0; n], &pen).unwrap();
        assert!((fit.coef[0] + 0.5).abs() < 0.15 && (fit.coef[1] - 1.0).abs() < 0.2, "{:?}", fit.coef);
    }

    #[test]
    fn poisson_intercept_is_occurrence_over_exposure() {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let exposure = [2.0, 3.0, 5.0];
        let events = [1.0, 0.0, 2.0];
        let rate: Vec<f64> = events.iter().zip(&exposure).map(|(d, e)| d / e).collect();
        let pen = GlmPenalty { strength: vec![0.0], center: vec![0.0] };
        let fit = Glm::fit(Link::Log, &x, &rate, &exposure, &pen).unwrap();
        assert!((fit.predict_row(&[1.0]) - 0.3).abs() < 1e-8);
    }

    #[test]
    fn knn_averages_neighbors() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]).unwrap();
        let fit = Knn::fit(&x, &[1.0, 3.0, 100.0, 200.0], &[1.0, 1.0, 1.0, 3.0], Some(2));
        assert!((fit.predict_row(&[0.4]) - 2.0).abs() < 1e-12);
        assert!((fit.predict_row(&[10.6]) - 175.0).abs() < 1e-12);
    }
}
