//! Discrete-time hazard models.
//!
//! The default model expands each subject into person-period rows over
//! quantile-spaced time bins and regresses the bin-specific event rate
//! (events over exposure, weighted by exposure). With a log link this is the
//! piecewise-exponential likelihood, so the fitted intensity is constant
//! within a bin and the cumulative hazard is piecewise linear. Increments on
//! an evaluation grid are `1 − exp(−ΔH)`, which always lie in `[0, 1)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::regress::{BaseLearner, Glm, GlmPenalty, Link, Matrix, Predictor, Regressor};
use crate::survival::{EventFilter, Observation};

/// Which counting process a hazard model targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HazardTarget {
    AllCause,
    Cause(u8),
    Censoring,
}

impl HazardTarget {
    fn filter(self) -> EventFilter {
        match self {
            HazardTarget::AllCause => EventFilter::AllCause,
            HazardTarget::Cause(j) => EventFilter::Cause(j),
            HazardTarget::Censoring => EventFilter::Censoring,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmHandling {
    /// One model with features `(A, X, A·X)`.
    SingleModel,
    /// Separate models per arm with features `X`.
    PerArm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HazardLearner {
    /// Log-link rate regression with bin-specific baselines.
    PiecewiseExponential {
        #[serde(default = "default_hazard_ridge")]
        ridge: f64,
    },
    /// Any base learner regressing rates on `(bin midpoint, covariates)`.
    Regression { learner: BaseLearner },
    /// Covariate-free Nelson–Aalen per arm (deliberately misspecified when
    /// hazards depend on covariates).
    NelsonAalen,
}

fn default_hazard_ridge() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HazardConfig {
    pub learner: HazardLearner,
    pub bins: usize,
    pub arm_handling: ArmHandling,
}

impl Default for HazardConfig {
    fn default() -> Self {
        Self {
            learner: HazardLearner::PiecewiseExponential { ridge: default_hazard_ridge() },
            bins: 16,
            arm_handling: ArmHandling::SingleModel,
        }
    }
}

#[derive(Clone, Debug)]
enum RateModel {
    /// Hazard identically zero.
    Zero,
    /// Constant intensity per bin: `rate(b, a, x)`.
    Binned { model: Arc<dyn Predictor>, log_link: bool },
    /// Step cumulative hazard per arm.
    Step { times: Vec<f64>, cumulative: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct HazardModel {
    pub target: HazardTarget,
    pub arm_handling: ArmHandling,
    /// Upper bin edges; the last bin is open-ended.
    edges: Vec<f64>,
    /// Index 0/1 for per-arm models; a single entry otherwise.
    rates: Vec<RateModel>,
    /// Bin indicators (log-link model) versus bin midpoint as a feature.
    one_hot_bins: bool,
    /// Set when the target had no events (overall or in some arm).
    pub degenerate: bool,
}

fn quantile_edges(times: &mut [f64], bins: usize) -> Vec<f64> {
    times.sort_unstable_by(f64::total_cmp);
    let n = times.len();
    let mut edges: Vec<f64> = (1..bins).map(|b| times[(b * n / bins).min(n - 1)]).collect();
    edges.dedup();
    edges.retain(|&e| e > 0.0);
    edges
}

impl HazardModel {
    fn lower(&self, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            self.edges[b - 1]
        }
    }

    fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Cumulative hazard `H(t | a, x)` at each of `times` (ascending).
    pub fn cumulative(&self, arm: u8, x: &[f64], times: &[f64]) -> Vec<f64> {
        let slot = match self.arm_handling {
            ArmHandling::PerArm => arm as usize,
            ArmHandling::SingleModel => 0,
        };
        match &self.rates[slot.min(self.rates.len() - 1)] {
            RateModel::Zero => vec![0.0; times.len()],
            RateModel::Step { times: jumps, cumulative } => times
                .iter()
                .map(|&t| match jumps.partition_point(|&u| u <= t) {
                    0 => 0.0,
                    k => cumulative[k - 1],
                })
                .collect(),
            RateModel::Binned { model, log_link } => {
                let nb = self.n_bins();
                let mut row = Vec::new();
                let rate: Vec<f64> = (0..nb)
                    .map(|b| {
                        self.features(b, arm, x, &mut row);
                        let r = model.predict_row(&row);
                        if *log_link {
                            r
                        } else {
                            r.max(0.0)
                        }
                    })
                    .collect();
                let mut at_edge = vec![0.0; nb];
                for b in 1..nb {
                    at_edge[b] = at_edge[b - 1] + rate[b - 1] * (self.edges[b - 1] - self.lower(b - 1));
                }
                times
                    .iter()
                    .map(|&t| {
                        let b = self.edges.partition_point(|&e| e < t);
                        at_edge[b] + rate[b] * (t - self.lower(b)).max(0.0)
                    })
                    .collect()
            }
        }
    }

    fn features(&self, bin: usize, arm: u8, x: &[f64], row: &mut Vec<f64>) {
        row.clear();
        if self.one_hot_bins {
            let nb = self.n_bins();
            row.extend((0..nb).map(|b| if b == bin { 1.0 } else { 0.0 }));
        } else {
            let hi = if bin + 1 < self.n_bins() { self.edges[bin] } else { self.lower(bin) * 1.5 + 1.0 };
            row.push(0.5 * (self.lower(bin) + hi));
        }
        if self.arm_handling == ArmHandling::SingleModel {
            let a = arm as f64;
            row.push(a);
            row.extend_from_slice(x);
            row.extend(x.iter().map(|v| a * v));
        } else {
            row.extend_from_slice(x);
        }
    }
}

/// Fit a hazard model for `target` on `data`.
pub fn fit_hazard(data: &[Observation], target: HazardTarget, config: &HazardConfig) -> Result<HazardModel> {
    if data.is_empty() {
        return Err(Error::Degenerate("hazard model needs data".into()));
    }
    if config.bins == 0 {
        return Err(Error::InvalidArgument("hazard bins must be positive".into()));
    }
    let filter = target.filter();
    let mut times: Vec<f64> = data.iter().map(|o| o.time).collect();
    let edges = quantile_edges(&mut times, config.bins);
    let mut model = HazardModel {
        target,
        arm_handling: config.arm_handling,
        edges,
        rates: Vec::new(),
        one_hot_bins: matches!(config.learner, HazardLearner::PiecewiseExponential { .. }),
        degenerate: false,
    };
    let groups: Vec<Vec<&Observation>> = match config.arm_handling {
        ArmHandling::SingleModel => vec![data.iter().collect()],
        ArmHandling::PerArm => (0..2u8).map(|a| data.iter().filter(|o| o.arm == a).collect()).collect(),
    };
    if matches!(config.learner, HazardLearner::NelsonAalen) {
        // Nelson–Aalen is covariate-free and always stratified by arm.
        model.arm_handling = ArmHandling::PerArm;
        for a in 0..2u8 {
            let arm: Vec<&Observation> = data.iter().filter(|o| o.arm == a).collect();
            let fitted = nelson_aalen(&arm, filter);
            model.degenerate |= matches!(fitted, RateModel::Zero);
            model.rates.push(fitted);
        }
        return Ok(model);
    }
    for group in groups {
        let events = group.iter().filter(|o| filter.counts(o.cause)).count();
        if events == 0 {
            model.degenerate = true;
            model.rates.push(RateModel::Zero);
            continue;
        }
        let fitted = fit_binned(&model, &group, filter, events, &config.learner)?;
        model.rates.push(fitted);
    }
    Ok(model)
}

fn fit_binned(
    shape: &HazardModel,
    group: &[&Observation],
    filter: EventFilter,
    events: usize,
    learner: &HazardLearner,
) -> Result<RateModel> {
    let nb = shape.n_bins();
    let log_link = matches!(learner, HazardLearner::PiecewiseExponential { .. });
    let mut rows = Vec::new();
    let mut rate = Vec::new();
    let mut exposure = Vec::new();
    let mut buf = Vec::new();
    for obs in group {
        for b in 0..nb {
            let lo = shape.lower(b);
            if obs.time <= lo {
                break;
            }
            let hi = if b + 1 < nb { shape.edges[b] } else { f64::INFINITY };
            let e = obs.time.min(hi) - lo;
            if e <= 0.0 {
                continue;
            }
            let d = if obs.time <= hi && filter.counts(obs.cause) { 1.0 } else { 0.0 };
            shape.features(b, obs.arm, &obs.covariates, &mut buf);
            rows.push(buf.clone());
            rate.push(d / e);
            exposure.push(e);
        }
    }
    let x = Matrix::from_rows(&rows)?;
    let model: Arc<dyn Predictor> = match learner {
        HazardLearner::PiecewiseExponential { ridge } => {
            let total_exposure: f64 = exposure.iter().sum();
            let pooled = (events as f64 / total_exposure).ln();
            let p = x.cols();
            let strength: Vec<f64> =
                (0..p).map(|j| if j < nb { 1e-6 * events as f64 } else { ridge * events as f64 }).collect();
            let center: Vec<f64> = (0..p).map(|j| if j < nb { pooled } else { 0.0 }).collect();
            Arc::new(Glm::fit(Link::Log, &x, &rate, &exposure, &GlmPenalty { strength, center })?)
        }
        HazardLearner::Regression { learner } => learner.fit(&x, &rate, &exposure)?,
        HazardLearner::NelsonAalen => unreachable!("handled by the caller"),
    };
    Ok(RateModel::Binned { model, log_link })
}

/// Covariate-free Nelson–Aalen. For censoring, failures at the same time are
/// removed from the at-risk set first.
fn nelson_aalen(group: &[&Observation], filter: EventFilter) -> RateModel {
    let mut sorted: Vec<(f64, u8)> = group.iter().map(|o| (o.time, o.cause)).collect();
    sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut times = Vec::new();
    let mut cumulative = Vec::new();
    let mut at_risk = sorted.len() as f64;
    let mut h = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut j = i;
        let (mut hits, mut failures) = (0.0, 0.0);
        while j < sorted.len() && sorted[j].0 == t {
            if filter.counts(sorted[j].1) {
                hits += 1.0;
            }
            if sorted[j].1 >= 1 {
                failures += 1.0;
            }
            j += 1;
        }
        let risk = if filter == EventFilter::Censoring { at_risk - failures } else { at_risk };
        if hits > 0.0 && risk > 0.0 {
            h += hits / risk;
            times.push(t);
            cumulative.push(h);
        }
        at_risk -= (j - i) as f64;
        i = j;
    }
    if times.is_empty() {
        RateModel::Zero
    } else {
        RateModel::Step { times, cumulative }
    }
}
