#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survcut::nuisance::{ArmCurves, Grid, NuisanceProvider, NuisanceSet};
use survcut::simgen::{lattice, observe, Law, TrueNuisance};
use survcut::transforms::{cut_value, CutKind, EstimandSpec};
use survcut::survival::Observation;

/// Lattice step used by the conditional Monte Carlo checks.
pub const DELTA: f64 = 0.02;

/// Fixed covariate points spread over the support.
pub const X_POINTS: [[f64; 6]; 5] = [
    [0.0; 6],
    [0.5, -0.5, 0.25, 0.0, 0.75, -1.0],
    [-0.8, 0.3, -0.6, 0.9, -0.2, 0.4],
    [0.9, 0.9, 0.9, -0.9, -0.9, -0.9],
    [-0.3, -0.7, 0.6, 0.1, 0.2, 0.8],
];

/// `n` observations drawn conditionally on `X = x` and `A = arm`, with
/// times rounded up to the lattice.
pub fn conditional_sample(law: &Law, x: &[f64], arm: u8, n: usize, seed: u64, delta: f64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|id| {
            let cf = law.draw(x, &mut rng);
            let (t, c) = observe(&cf, arm, Some(delta));
            Observation::new(id, x.to_vec(), arm, t, c).unwrap()
        })
        .collect()
}

/// True nuisances of `law` at `x`, exact at the knots of `grid`.
pub fn true_eta(law: &Law, x: &[f64], grid: &Grid) -> NuisanceSet {
    let probe = Observation::new(0, x.to_vec(), 0, 1.0, 0).unwrap();
    TrueNuisance::new(*law).nuisance_set(&probe, grid).unwrap()
}

/// Arm curves taking the event increments from `events` and the censoring
/// increments from `censoring`.
pub fn splice(events: &ArmCurves, censoring: &ArmCurves) -> ArmCurves {
    let causes = (1..=events.n_causes() as u8).map(|j| events.d_cause(j).to_vec()).collect();
    ArmCurves::new(events.grid().clone(), causes, censoring.d_cens().to_vec()).unwrap()
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct Mc {
    pub mean: f64,
    pub se: f64,
}

impl Mc {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, se: (var / n).sqrt() }
    }

    /// Difference of two independent means.
    pub fn minus(self, other: Mc) -> Self {
        Self { mean: self.mean - other.mean, se: self.se.hypot(other.se) }
    }

    /// Standardized distance to `target`; zero when both error and spread
    /// vanish.
    pub fn z(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d <= 1e-12 {
            0.0
        } else {
            d / self.se
        }
    }
}

/// Random hazards on a random grid that contains `horizon`.
pub fn random_eta<R: Rng>(rng: &mut R, causes: usize, horizon: f64, censor: bool) -> NuisanceSet {
    let k = rng.random_range(3..25);
    let mut grid: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..2.0 * horizon)).collect();
    grid.push(horizon);
    grid.sort_unstable_by(f64::total_cmp);
    grid.dedup();
    let grid: Grid = Arc::from(grid);
    let arm = |rng: &mut R| {
        let n = grid.len();
        let d_cause = (0..causes).map(|_| (0..n).map(|_| rng.random_range(0.0..0.12 / causes as f64)).collect()).collect();
        let d_cens = (0..n).map(|_| if censor { rng.random_range(0.0..0.1) } else { 0.0 }).collect();
        ArmCurves::new(grid.clone(), d_cause, d_cens).unwrap()
    };
    let a0 = arm(rng);
    let a1 = arm(rng);
    NuisanceSet::new(0, None, a0, a1, rng.random_range(0.2..0.8)).unwrap()
}

/// An observation at a grid knot or an off-grid time; `uncensored` forces an
/// event.
pub fn random_obs<R: Rng>(rng: &mut R, eta: &NuisanceSet, causes: u8, uncensored: bool) -> Observation {
    let grid = eta.arm(0).grid();
    let time = if rng.random_bool(0.7) {
        grid[rng.random_range(0..grid.len())]
    } else {
        rng.random_range(0.01..grid[grid.len() - 1] * 1.2)
    };
    let cause = rng.random_range(u8::from(uncensored)..=causes);
    let arm = u8::from(rng.random_bool(0.5));
    Observation::new(0, vec![0.0], arm, time, cause).unwrap()
}

/// CUT values for every observation, adding the floored ones to `floored`.
pub fn cut_values(data: &[Observation], eta: &NuisanceSet, spec: &EstimandSpec, kind: CutKind, floored: &mut u64) -> Vec<f64> {
    data.iter()
        .map(|o| {
            let c = cut_value(o, eta, spec, kind, o.arm).unwrap();
            *floored += u64::from(c.floored);
            c.value
        })
        .collect()
}

/// Lattice reaching the largest observed event time (and at least
/// `horizon`), so that censoring weights at event times beyond the horizon
/// are exact. Censored times past the horizon never enter a weight.
pub fn covering_grid(horizon: f64, samples: &[&[Observation]]) -> Grid {
    let top = samples.iter().flat_map(|d| d.iter()).filter(|o| o.cause > 0).map(|o| o.time).fold(horizon, f64::max);
    lattice(DELTA, top).unwrap()
}
