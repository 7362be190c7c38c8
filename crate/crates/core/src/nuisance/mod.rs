//! Nuisance models: propensity, censoring and cause-specific hazards, the
//! regression abstraction behind them, and the convex ensemble selector.

pub mod ensemble;
pub mod hazard;
pub mod propensity;
pub mod regress;
pub mod tree;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::{CifCurve, CumulativeHazard, Observation, Point, StepFunction, SurvivalCurve};

pub use ensemble::{ensemble_select, EnsembleConfig, EnsembleWeights, FittedEnsemble};
pub use hazard::{fit_hazard, ArmHandling, HazardConfig, HazardLearner, HazardModel, HazardTarget};
pub use propensity::{fit_propensity, PropensityConfig, PropensityLearner, PropensityModel};
pub use regress::{BaseLearner, Matrix, Predictor, Regressor};

/// Shared evaluation grid.
pub type Grid = Arc<[f64]>;

/// Curves for one arm on a grid: hazard increments plus the derived
/// survival, censoring survival, cumulative incidences and their restricted
/// integrals at each knot.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmCurves {
    grid: Grid,
    d_cause: Vec<Vec<f64>>,
    d_all: Vec<f64>,
    d_cens: Vec<f64>,
    surv: Vec<f64>,
    cens: Vec<f64>,
    cif: Vec<Vec<f64>>,
    rmst: Vec<f64>,
    rmtl: Vec<Vec<f64>>,
}

impl ArmCurves {
    /// Build from cause-specific and censoring increments. The all-cause
    /// increment is the sum over causes.
    pub fn new(grid: Grid, d_cause: Vec<Vec<f64>>, d_cens: Vec<f64>) -> Result<Self> {
        let k = grid.len();
        if d_cause.is_empty() {
            return Err(Error::InvalidArgument("at least one cause is required".into()));
        }
        if d_cens.len() != k || d_cause.iter().any(|d| d.len() != k) {
            return Err(Error::GridMismatch("hazard increments do not match the grid".into()));
        }
        let mut d_all = vec![0.0; k];
        for d in &d_cause {
            for (i, &v) in d.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidHazard { time: grid[i], increment: v });
                }
                d_all[i] += v;
            }
        }
        for (i, v) in d_all.iter_mut().enumerate() {
            if *v > 1.0 + 1e-12 {
                return Err(Error::InvalidHazard { time: grid[i], increment: *v });
            }
            *v = v.min(1.0);
        }
        for (i, &v) in d_cens.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidHazard { time: grid[i], increment: v });
            }
        }
        let mut surv = Vec::with_capacity(k);
        let mut cens = Vec::with_capacity(k);
        let mut rmst = Vec::with_capacity(k);
        let (mut s, mut g, mut r, mut prev_t) = (1.0, 1.0, 0.0, 0.0);
        for i in 0..k {
            r += s * (grid[i] - prev_t);
            s *= 1.0 - d_all[i];
            g *= 1.0 - d_cens[i];
            surv.push(s);
            cens.push(g);
            rmst.push(r);
            prev_t = grid[i];
        }
        let mut cif = Vec::with_capacity(d_cause.len());
        let mut rmtl = Vec::with_capacity(d_cause.len());
        for d in &d_cause {
            let mut fc = Vec::with_capacity(k);
            let mut lc = Vec::with_capacity(k);
            let (mut f, mut l, mut prev_t, mut s_before) = (0.0, 0.0, 0.0, 1.0);
            for i in 0..k {
                l += f * (grid[i] - prev_t);
                f += s_before * d[i];
                fc.push(f);
                lc.push(l);
                s_before = surv[i];
                prev_t = grid[i];
            }
            cif.push(fc);
            rmtl.push(lc);
        }
        Ok(Self { grid, d_cause, d_all, d_cens, surv, cens, cif, rmst, rmtl })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_causes(&self) -> usize {
        self.d_cause.len()
    }

    pub fn d_all(&self) -> &[f64] {
        &self.d_all
    }

    /// Increments of cause `j` (1-based).
    pub fn d_cause(&self, j: u8) -> &[f64] {
        &self.d_cause[j as usize - 1]
    }

    pub fn d_cens(&self) -> &[f64] {
        &self.d_cens
    }

    /// Number of knots `≤ t`.
    fn rank(&self, t: f64) -> usize {
        self.grid.partition_point(|&u| u <= t)
    }

    fn at(values: &[f64], rank: usize, initial: f64) -> f64 {
        if rank == 0 {
            initial
        } else {
            values[rank - 1]
        }
    }

    pub fn s_at(&self, t: f64) -> f64 {
        Self::at(&self.surv, self.rank(t), 1.0)
    }

    pub fn g_at(&self, t: f64) -> f64 {
        Self::at(&self.cens, self.rank(t), 1.0)
    }

    pub fn g_left_at(&self, t: f64) -> f64 {
        Self::at(&self.cens, self.grid.partition_point(|&u| u < t), 1.0)
    }

    pub fn f_at(&self, j: u8, t: f64) -> f64 {
        Self::at(&self.cif[j as usize - 1], self.rank(t), 0.0)
    }

    /// `∫_0^t S(u) du`.
    pub fn rmst_at(&self, t: f64) -> f64 {
        match self.rank(t) {
            0 => t,
            k => self.rmst[k - 1] + self.surv[k - 1] * (t - self.grid[k - 1]),
        }
    }

    /// `∫_0^t F_j(u) du`.
    pub fn rmtl_at(&self, j: u8, t: f64) -> f64 {
        let c = j as usize - 1;
        match self.rank(t) {
            0 => 0.0,
            k => self.rmtl[c][k - 1] + self.cif[c][k - 1] * (t - self.grid[k - 1]),
        }
    }

    pub fn time(&self, p: Point) -> f64 {
        match p {
            Point::Grid(k) => self.grid[k],
            Point::Off(t) => t,
        }
    }

    pub fn s(&self, p: Point) -> f64 {
        match p {
            Point::Grid(k) => self.surv[k],
            Point::Off(t) => self.s_at(t),
        }
    }

    pub fn g(&self, p: Point) -> f64 {
        match p {
            Point::Grid(k) => self.cens[k],
            Point::Off(t) => self.g_at(t),
        }
    }

    pub fn g_left(&self, p: Point) -> f64 {
        match p {
            Point::Grid(0) => 1.0,
            Point::Grid(k) => self.cens[k - 1],
            Point::Off(t) => self.g_left_at(t),
        }
    }

    pub fn f(&self, j: u8, p: Point) -> f64 {
        match p {
            Point::Grid(k) => self.cif[j as usize - 1][k],
            Point::Off(t) => self.f_at(j, t),
        }
    }

    pub fn rmtl(&self, j: u8, p: Point) -> f64 {
        match p {
            Point::Grid(k) => self.rmtl[j as usize - 1][k],
            Point::Off(t) => self.rmtl_at(j, t),
        }
    }

    pub fn rmst(&self, p: Point) -> f64 {
        match p {
            Point::Grid(k) => self.rmst[k],
            Point::Off(t) => self.rmst_at(t),
        }
    }

    pub fn all_cause_hazard(&self) -> Result<CumulativeHazard> {
        CumulativeHazard::from_increments(self.grid.to_vec(), self.d_all.clone())
    }

    pub fn cause_hazard(&self, j: u8) -> Result<CumulativeHazard> {
        CumulativeHazard::from_increments(self.grid.to_vec(), self.d_cause(j).to_vec())
    }

    pub fn censoring_hazard(&self) -> Result<CumulativeHazard> {
        CumulativeHazard::from_increments(self.grid.to_vec(), self.d_cens.clone())
    }

    pub fn survival_curve(&self) -> Result<SurvivalCurve> {
        Ok(SurvivalCurve { base: StepFunction::new(1.0, self.grid.to_vec(), self.surv.clone())? })
    }

    pub fn censoring_curve(&self) -> Result<SurvivalCurve> {
        Ok(SurvivalCurve { base: StepFunction::new(1.0, self.grid.to_vec(), self.cens.clone())? })
    }

    pub fn cif_curve(&self, j: u8) -> Result<CifCurve> {
        Ok(CifCurve { base: StepFunction::new(0.0, self.grid.to_vec(), self.cif[j as usize - 1].clone())? })
    }
}

/// Per-subject nuisance bundle for both arms on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceSet {
    pub id: u64,
    /// Stage-1 fold whose training complement produced the models.
    pub fold: Option<usize>,
    pub arms: [ArmCurves; 2],
    /// `π(1 | X)`, already clipped.
    pub pi1: f64,
}

impl NuisanceSet {
    pub fn new(id: u64, fold: Option<usize>, arm0: ArmCurves, arm1: ArmCurves, pi1: f64) -> Result<Self> {
        if !Arc::ptr_eq(arm0.grid(), arm1.grid()) && arm0.grid() != arm1.grid() {
            return Err(Error::GridMismatch("arms must share a grid".into()));
        }
        if arm0.n_causes() != arm1.n_causes() {
            return Err(Error::InvalidArgument("arms must have the same causes".into()));
        }
        if !(pi1 > 0.0 && pi1 < 1.0) {
            return Err(Error::InvalidArgument(format!("propensity {pi1} outside (0, 1)")));
        }
        Ok(Self { id, fold, arms: [arm0, arm1], pi1 })
    }

    pub fn arm(&self, a: u8) -> &ArmCurves {
        &self.arms[a as usize]
    }

    pub fn pi(&self, a: u8) -> f64 {
        if a == 1 {
            self.pi1
        } else {
            1.0 - self.pi1
        }
    }

    pub fn n_causes(&self) -> usize {
        self.arms[0].n_causes()
    }
}

/// Union of `times` and `horizons`, sorted and deduplicated. When more than
/// `cap` distinct times remain they are thinned to quantile-spaced knots; the
/// horizons are always kept.
pub fn evaluation_grid(times: impl IntoIterator<Item = f64>, horizons: &[f64], cap: usize) -> Result<Grid> {
    let mut t: Vec<f64> = times.into_iter().filter(|v| *v > 0.0 && v.is_finite()).collect();
    t.sort_unstable_by(f64::total_cmp);
    t.dedup();
    if cap > 0 && t.len() > cap {
        let keep = cap.saturating_sub(horizons.len()).max(1);
        let n = t.len();
        t = (0..keep).map(|i| t[((i + 1) * n / keep).min(n) - 1]).collect();
        t.dedup();
    }
    t.extend(horizons.iter().copied().filter(|h| *h > 0.0));
    t.sort_unstable_by(f64::total_cmp);
    t.dedup();
    if t.is_empty() {
        return Err(Error::InvalidArgument("evaluation grid is empty".into()));
    }
    Ok(t.into())
}

/// Anything that can produce a subject's nuisance set on a grid: fitted
/// models or a known data-generating law.
pub trait NuisanceProvider: Send + Sync {
    fn nuisance_set(&self, subject: &Observation, grid: &Grid) -> Result<NuisanceSet>;

    /// A provider-specific grid replaces the data-driven one when present.
    fn grid(&self) -> Option<Grid> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub propensity: PropensityConfig,
    pub hazard: HazardConfig,
    /// Censoring model; defaults to the event-hazard settings.
    pub censoring: Option<HazardConfig>,
    pub ensemble: EnsembleConfig,
    pub grid_cap: usize,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            propensity: PropensityConfig::default(),
            hazard: HazardConfig::default(),
            censoring: None,
            ensemble: EnsembleConfig::default(),
            grid_cap: 512,
        }
    }
}

/// Models fitted on one training fold.
#[derive(Clone, Debug)]
pub struct NuisanceModels {
    pub propensity: PropensityModel,
    pub causes: Vec<HazardModel>,
    pub censoring: HazardModel,
    /// Sorted ids of the training subjects.
    pub training_ids: Arc<[u64]>,
    pub fold: Option<usize>,
    pub warnings: Vec<String>,
}

impl NuisanceModels {
    pub fn was_trained_on(&self, id: u64) -> bool {
        self.training_ids.binary_search(&id).is_ok()
    }
}

pub fn fit_nuisances(
    train: &[Observation],
    n_causes: usize,
    config: &NuisanceConfig,
    fold: Option<usize>,
) -> Result<NuisanceModels> {
    if n_causes == 0 {
        return Err(Error::InvalidArgument("at least one cause is required".into()));
    }
    let propensity = fit_propensity(train, &config.propensity, &config.ensemble)?;
    let mut warnings = Vec::new();
    let mut causes = Vec::with_capacity(n_causes);
    for j in 1..=n_causes as u8 {
        let m = fit_hazard(train, HazardTarget::Cause(j), &config.hazard)?;
        if m.degenerate {
            warnings.push(format!("no events of cause {j} in a training arm; hazard set to zero there"));
        }
        causes.push(m);
    }
    let censoring = fit_hazard(train, HazardTarget::Censoring, config.censoring.as_ref().unwrap_or(&config.hazard))?;
    if censoring.degenerate {
        warnings.push("no censoring in a training arm; censoring survival set to one there".into());
    }
    let mut ids: Vec<u64> = train.iter().map(|o| o.id).collect();
    ids.sort_unstable();
    Ok(NuisanceModels { propensity, causes, censoring, training_ids: ids.into(), fold, warnings })
}

fn increments(h: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    h.iter()
        .map(|&v| {
            let d = (v - prev).max(0.0);
            prev = prev.max(v);
            d
        })
        .collect()
}

pub fn predict_nuisances(models: &NuisanceModels, subject: &Observation, grid: &Grid) -> Result<NuisanceSet> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("evaluation grid is empty".into()));
    }
    let x = &subject.covariates;
    let arm = |a: u8| -> Result<ArmCurves> {
        let dh: Vec<Vec<f64>> = models.causes.iter().map(|m| increments(&m.cumulative(a, x, grid))).collect();
        let k = grid.len();
        let mut d_cause = vec![vec![0.0; k]; dh.len()];
        for i in 0..k {
            let total: f64 = dh.iter().map(|d| d[i]).sum();
            if total > 0.0 {
                let d_all = -(-total).exp_m1();
                for (c, d) in dh.iter().enumerate() {
                    d_cause[c][i] = d_all * d[i] / total;
                }
            }
        }
        let d_cens = increments(&models.censoring.cumulative(a, x, grid)).iter().map(|&d| -(-d).exp_m1()).collect();
        ArmCurves::new(grid.clone(), d_cause, d_cens)
    };
    NuisanceSet::new(subject.id, models.fold, arm(0)?, arm(1)?, models.propensity.p1(x))
}

impl NuisanceProvider for NuisanceModels {
    fn nuisance_set(&self, subject: &Observation, grid: &Grid) -> Result<NuisanceSet> {
        predict_nuisances(self, subject, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::{cif_from_hazards, product_limit, restricted_integral};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_curves(rng: &mut ChaCha8Rng, k: usize, causes: usize) -> ArmCurves {
        let mut t = 0.0;
        let grid: Grid = (0..k)
            .map(|_| {
                t += rng.random_range(0.05..0.5);
                t
            })
            .collect::<Vec<_>>()
            .into();
        let d_cause = (0..causes).map(|_| (0..k).map(|_| rng.random_range(0.0..0.3 / causes as f64)).collect()).collect();
        let d_cens = (0..k).map(|_| rng.random_range(0.0..0.2)).collect();
        ArmCurves::new(grid, d_cause, d_cens).unwrap()
    }

    #[test]
    fn arm_curves_agree_with_survival_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = random_curves(&mut rng, 40, 2);
            let all = c.all_cause_hazard().unwrap();
            let s = product_limit(&all).unwrap();
            let g = product_limit(&c.censoring_hazard().unwrap()).unwrap();
            let f1 = cif_from_hazards(&c.cause_hazard(1).unwrap(), &all).unwrap();
            let f2 = cif_from_hazards(&c.cause_hazard(2).unwrap(), &all).unwrap();
            for &t in [0.01, 0.7, 3.3, 8.0, 50.0].iter().chain(c.grid().iter()) {
                assert!((c.s_at(t) - s.base.eval(t)).abs() < 1e-14);
                assert!((c.g_at(t) - g.base.eval(t)).abs() < 1e-14);
                assert!((c.g_left_at(t) - g.base.left_limit(t)).abs() < 1e-14);
                assert!((c.f_at(1, t) - f1.base.eval(t)).abs() < 1e-14);
                assert!((c.rmst_at(t) - restricted_integral(&s.base, t)).abs() < 1e-12);
                assert!((c.rmtl_at(2, t) - restricted_integral(&f2.base, t)).abs() < 1e-12);
                assert!((c.s_at(t) + c.f_at(1, t) + c.f_at(2, t) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_cap_keeps_horizons() {
        let g = evaluation_grid((1..=2000).map(|i| i as f64 / 100.0), &[3.333], 512).unwrap();
        assert!(g.len() <= 513 && g.contains(&3.333) && g.windows(2).all(|w| w[1] > w[0]));
        assert!(evaluation_grid(Vec::<f64>::new(), &[], 10).is_err());
    }

    fn toy_data(n: usize, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = vec![rng.random_range(-1.0..1.0)];
                let a = u8::from(rng.random::<bool>());
                let t1 = -rng.random::<f64>().ln() / 0.12;
                let t2 = -rng.random::<f64>().ln() / 0.10;
                let c = -rng.random::<f64>().ln() / 0.05;
                let (time, cause) = if t1.min(t2) > c { (c, 0) } else if t1 < t2 { (t1, 1) } else { (t2, 2) };
                Observation::new(i as u64, x, a, time, cause).unwrap()
            })
            .collect()
    }

    #[test]
    fn competing_constant_hazards() {
        let data = toy_data(5000, 12);
        let models = fit_nuisances(&data, 2, &NuisanceConfig::default(), Some(0)).unwrap();
        let grid = evaluation_grid([1.0, 2.0, 4.0, 8.0], &[], 512).unwrap();
        let set = predict_nuisances(&models, &data[0], &grid).unwrap();
        for a in 0..2u8 {
            let c = set.arm(a);
            for &t in grid.iter() {
                let ratio = c.f_at(1, t) / c.f_at(2, t);
                assert!((ratio / 1.2 - 1.0).abs() < 0.15, "ratio {ratio} at {t}");
                assert!((c.s_at(t) + c.f_at(1, t) + c.f_at(2, t) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_hazards_and_symmetric_arms() {
        let grid: Grid = vec![1.0, 2.0].into();
        let zero = ArmCurves::new(grid.clone(), vec![vec![0.0; 2]], vec![0.0; 2]).unwrap();
        let set = NuisanceSet::new(0, None, zero.clone(), zero, 0.5).unwrap();
        assert_eq!(set.arm(0).s_at(5.0), 1.0);
        assert_eq!(set.arm(1).g_at(5.0), 1.0);
        assert_eq!(set.arm(1).f_at(1, 5.0), 0.0);
        assert_eq!(set.arms[0], set.arms[1]);
        assert!(predict_nuisances(
            &fit_nuisances(&toy_data(200, 1), 2, &NuisanceConfig::default(), None).unwrap(),
            &toy_data(1, 2)[0],
            &Vec::new().into()
        )
        .is_err());
    }
}
