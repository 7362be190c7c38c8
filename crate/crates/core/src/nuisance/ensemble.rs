//! Cross-validated convex combination of base learners.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::regress::{positive_rows, BaseLearner, Matrix, Predictor, Regressor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub weights: Vec<f64>,
}

/// Weighted squared loss `Σ w (y − ŷ)² / Σ w`.
pub fn weighted_loss(pred: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    pred.iter().zip(y).zip(w).map(|((p, t), v)| v * (t - p) * (t - p)).sum::<f64>() / sw
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumulative += ui;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Simplex-constrained weighted least squares over candidate predictions.
///
/// `cv_predictions` is `n × v*`: column `v` holds candidate `v`'s
/// out-of-fold predictions.
pub fn ensemble_select(cv_predictions: &Matrix, targets: &[f64], weights: &[f64]) -> Result<EnsembleWeights> {
    let n = cv_predictions.rows();
    let v = cv_predictions.cols();
    if v == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one candidate".into()));
    }
    if targets.len() != n || weights.len() != n {
        return Err(Error::InvalidArgument("ensemble inputs disagree in length".into()));
    }
    let sw: f64 = weights.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::Degenerate("ensemble weights are all zero".into()));
    }
    if v == 1 {
        return Ok(EnsembleWeights { weights: vec![1.0] });
    }
    // Quadratic form: loss(ρ) = ρᵀQρ − 2bᵀρ + c, all scaled by 1/Σw.
    let mut q = vec![0.0; v * v];
    let mut b = vec![0.0; v];
    for i in 0..n {
        let row = cv_predictions.row(i);
        let wi = weights[i] / sw;
        for a in 0..v {
            b[a] += wi * row[a] * targets[i];
            for c in a..v {
                q[a * v + c] += wi * row[a] * row[c];
            }
        }
    }
    for a in 0..v {
        for c in 0..a {
            q[a * v + c] = q[c * v + a];
        }
    }
    let loss = |rho: &[f64]| -> f64 {
        let mut s = 0.0;
        for a in 0..v {
            let qa: f64 = (0..v).map(|c| q[a * v + c] * rho[c]).sum();
            s += rho[a] * qa - 2.0 * b[a] * rho[a];
        }
        s
    };
    // Step 1/L with L bounded by the trace of 2Q.
    let lipschitz = 2.0 * (0..v).map(|a| q[a * v + a]).sum::<f64>();
    let mut rho = vec![1.0 / v as f64; v];
    let mut current = loss(&rho);
    if lipschitz > 0.0 {
        let step = 1.0 / lipschitz;
        for _ in 0..10_000 {
            let grad: Vec<f64> = (0..v)
                .map(|a| 2.0 * ((0..v).map(|c| q[a * v + c] * rho[c]).sum::<f64>() - b[a]))
                .collect();
            let next = project_simplex(&rho.iter().zip(&grad).map(|(r, g)| r - step * g).collect::<Vec<_>>());
            let value = loss(&next);
            let change = (current - value).abs();
            let moved = rho.iter().zip(&next).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            rho = next;
            current = value;
            if change < 1e-12 && moved < 1e-12 {
                break;
            }
        }
    }
    // Projected gradient is slow along nearly collinear candidates; polish by
    // solving the equality-constrained problem on every support set.
    if v <= 12 {
        for support in 1..(1usize << v) {
            if let Some(candidate) = solve_on_support(&q, &b, v, support) {
                let value = loss(&candidate);
                if value < current {
                    current = value;
                    rho = candidate;
                }
            }
        }
    }
    let total: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|r| *r /= total);
    Ok(EnsembleWeights { weights: rho })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub learners: Vec<BaseLearner>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { learners: BaseLearner::default_library(), folds: 5, seed: 0 }
    }
}

/// Fitted convex combination `Σ ρ_v f_v`.
#[derive(Clone, Debug)]
pub struct FittedEnsemble {
    pub names: Vec<String>,
    pub weights: EnsembleWeights,
    pub members: Vec<Option<Arc<dyn Predictor>>>,
    pub candidate_cv_loss: Vec<f64>,
    pub ensemble_cv_loss: f64,
}

impl Predictor for FittedEnsemble {
    fn predict_row(&self, row: &[f64]) -> f64 {
        self.members
            .iter()
            .zip(&self.weights.weights)
            .filter_map(|(m, &r)| m.as_ref().map(|m| r * m.predict_row(row)))
            .sum()
    }
}

impl FittedEnsemble {
    pub fn fit(x: &Matrix, y: &[f64], w: &[f64], config: &EnsembleConfig) -> Result<Self> {
        if config.learners.is_empty() {
            return Err(Error::InvalidArgument("ensemble learner library is empty".into()));
        }
        let (x, y, w) = positive_rows(x, y, w)?;
        let names: Vec<String> = config.learners.iter().map(|l| l.name()).collect();
        let n = x.rows();
        let v = config.learners.len();
        let folds = config.folds.clamp(2, n.max(2));
        let (weights, candidate_cv_loss, ensemble_cv_loss) = if v == 1 || n < 2 * folds {
            (EnsembleWeights { weights: uniform_or_single(v) }, vec![f64::NAN; v], f64::NAN)
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
            let mut fold_of = vec![0usize; n];
            for (pos, &i) in order.iter().enumerate() {
                fold_of[i] = pos % folds;
            }
            let mut cv = vec![0.0; n * v];
            for k in 0..folds {
                let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
                let xt = x.select_rows(&train);
                let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let wt: Vec<f64> = train.iter().map(|&i| w[i]).collect();
                for (c, learner) in config.learners.iter().enumerate() {
                    let model = learner.fit(&xt, &yt, &wt)?;
                    for &i in &test {
                        cv[i * v + c] = model.predict_row(x.row(i));
                    }
                }
            }
            let cvm = Matrix::new(n, v, cv)?;
            let weights = ensemble_select(&cvm, &y, &w)?;
            let losses: Vec<f64> = (0..v)
                .map(|c| weighted_loss(&(0..n).map(|i| cvm.row(i)[c]).collect::<Vec<_>>(), &y, &w))
                .collect();
            let combined: Vec<f64> =
                (0..n).map(|i| cvm.row(i).iter().zip(&weights.weights).map(|(a, b)| a * b).sum()).collect();
            let ens = weighted_loss(&combined, &y, &w);
            (weights, losses, ens)
        };
        let members = config
            .learners
            .iter()
            .zip(&weights.weights)
            .map(|(l, &r)| if r > 0.0 { l.fit(&x, &y, &w).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { names, weights, members, candidate_cv_loss, ensemble_cv_loss })
    }
}

/// Minimizer of `ρᵀQρ − 2bᵀρ` subject to `Σρ = 1` with support restricted to
/// the bits of `support`; `None` when singular or infeasible.
fn solve_on_support(q: &[f64], b: &[f64], v: usize, support: usize) -> Option<Vec<f64>> {
    let idx: Vec<usize> = (0..v).filter(|&a| support & (1 << a) != 0).collect();
    let m = idx.len();
    let mut kkt = nalgebra::DMatrix::<f64>::zeros(m + 1, m + 1);
    let mut rhs = nalgebra::DVector::<f64>::zeros(m + 1);
    for (r, &a) in idx.iter().enumerate() {
        for (c, &bb) in idx.iter().enumerate() {
            kkt[(r, c)] = 2.0 * q[a * v + bb];
        }
        kkt[(r, m)] = 1.0;
        kkt[(m, r)] = 1.0;
        rhs[r] = 2.0 * b[a];
    }
    rhs[m] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|x| !x.is_finite()) || (0..m).any(|r| sol[r] < -1e-12) {
        return None;
    }
    let mut rho = vec![0.0; v];
    for (r, &a) in idx.iter().enumerate() {
        rho[a] = sol[r].max(0.0);
    }
    Some(rho)
}

fn uniform_or_single(v: usize) -> Vec<f64> {
    vec![1.0 / v as f64; v]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_candidate() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(ensemble_select(&m, &[1.0, 2.0], &[1.0, 1.0]).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn exact_candidate_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let rows: Vec<Vec<f64>> = y.iter().map(|&t| vec![t, rng.random::<f64>() * 3.0]).collect();
        let rho = ensemble_select(&Matrix::from_rows(&rows).unwrap(), &y, &vec![1.0; 200]).unwrap();
        assert!((rho.weights[0] - 1.0).abs() < 1e-6 && rho.weights[1].abs() < 1e-6);
    }

    #[test]
    fn symmetric_candidates_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let rows: Vec<Vec<f64>> = y
            .iter()
            .map(|&t| {
                let e = rng.random_range(-1.0..1.0);
                vec![t + e, t - e]
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let w = vec![1.0; 300];
        let rho = ensemble_select(&m, &y, &w).unwrap();
        // Brute-force grid over the simplex at 1e-4 resolution.
        let best = (0..=10_000)
            .map(|k| {
                let a = k as f64 / 1e4;
                let pred: Vec<f64> = rows.iter().map(|r| a * r[0] + (1.0 - a) * r[1]).collect();
                (weighted_loss(&pred, &y, &w), a)
            })
            .min_by(|p, q| p.0.total_cmp(&q.0))
            .unwrap()
            .1;
        assert!((best - 0.5).abs() <= 1e-4);
        assert!((rho.weights[0] - 0.5).abs() < 1e-6, "{:?}", rho.weights);
    }

    #[test]
    fn zero_weights_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(ensemble_select(&m, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn projection_lands_on_simplex() {
        for v in [vec![0.3, 0.9, -2.0], vec![5.0, 5.0], vec![0.1, 0.2, 0.3, 0.4]] {
            let p = project_simplex(&v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|&x| x >= 0.0));
        }
    }
}
