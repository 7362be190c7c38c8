//! Step functions, product-limit conversion, restricted integrals and
//! per-observation martingale integrals.
//!
//! Hazards follow the discrete convention: a cumulative hazard is a
//! collection of increments `dΛ(u) ∈ [0, 1]` on a grid and survival is the
//! product `S(t) = Π_{u ≤ t} (1 − dΛ(u))`. With this convention the
//! adding-up identity `S + Σ_j F_j = 1` holds exactly on the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's observed tuple `(X, A, T̃, J̃)`. `cause == 0` means censored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    pub covariates: Vec<f64>,
    pub arm: u8,
    pub time: f64,
    pub cause: u8,
}

impl Observation {
    pub fn new(id: u64, covariates: Vec<f64>, arm: u8, time: f64, cause: u8) -> Result<Self> {
        let obs = Self { id, covariates, arm, time, cause };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time > 0.0) || !self.time.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "observation {}: time must be positive and finite, got {}",
                self.id, self.time
            )));
        }
        if self.arm > 1 {
            return Err(Error::InvalidArgument(format!(
                "observation {}: arm must be 0 or 1, got {}",
                self.id, self.arm
            )));
        }
        if self.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "observation {}: non-finite covariate",
                self.id
            )));
        }
        Ok(())
    }

    pub fn is_event(&self) -> bool {
        self.cause > 0
    }
}

/// Right-continuous piecewise-constant function with left limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    jump_times: Vec<f64>,
    jump_values: Vec<f64>,
    initial_value: f64,
}

impl StepFunction {
    pub fn new(initial_value: f64, jump_times: Vec<f64>, jump_values: Vec<f64>) -> Result<Self> {
        if jump_times.len() != jump_values.len() {
            return Err(Error::InvalidArgument(format!(
                "step function has {} times but {} values",
                jump_times.len(),
                jump_values.len()
            )));
        }
        if let Some(&t) = jump_times.first() {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("jump time {t} is not positive")));
            }
        }
        if jump_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("jump times must be strictly increasing".into()));
        }
        if jump_times.iter().chain(&jump_values).any(|v| !v.is_finite()) || !initial_value.is_finite() {
            return Err(Error::InvalidArgument("step function contains non-finite values".into()));
        }
        Ok(Self { jump_times, jump_values, initial_value })
    }

    pub fn constant(value: f64) -> Self {
        Self { jump_times: Vec::new(), jump_values: Vec::new(), initial_value: value }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn jump_values(&self) -> &[f64] {
        &self.jump_values
    }

    pub fn initial_value(&self) -> f64 {
        self.initial_value
    }

    /// Number of jump times `≤ t`.
    fn rank(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&u| u <= t)
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.rank(t) {
            0 => self.initial_value,
            k => self.jump_values[k - 1],
        }
    }

    pub fn left_limit(&self, t: f64) -> f64 {
        match self.jump_times.partition_point(|&u| u < t) {
            0 => self.initial_value,
            k => self.jump_values[k - 1],
        }
    }
}

pub fn step_eval(f: &StepFunction, t: f64) -> f64 {
    f.eval(t)
}

pub fn step_left_limit(f: &StepFunction, t: f64) -> f64 {
    f.left_limit(t)
}

/// Discrete cumulative hazard: increments on a strictly increasing grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeHazard {
    grid: Vec<f64>,
    increments: Vec<f64>,
    base: StepFunction,
}

impl CumulativeHazard {
    pub fn from_increments(grid: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if grid.len() != increments.len() {
            return Err(Error::GridMismatch(format!(
                "{} grid points but {} increments",
                grid.len(),
                increments.len()
            )));
        }
        for (&t, &d) in grid.iter().zip(&increments) {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidHazard { time: t, increment: d });
            }
        }
        let mut acc = 0.0;
        let cumulative = increments
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        let base = StepFunction::new(0.0, grid.clone(), cumulative)?;
        Ok(Self { grid, increments, base })
    }

    pub fn zero(grid: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        Self::from_increments(grid, vec![0.0; n])
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn base(&self) -> &StepFunction {
        &self.base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub base: StepFunction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CifCurve {
    pub base: StepFunction,
}

/// `S(t) = Π_{u ≤ t} (1 − dΛ(u))`.
pub fn product_limit(hazard: &CumulativeHazard) -> Result<SurvivalCurve> {
    let mut s = 1.0;
    let mut values = Vec::with_capacity(hazard.grid.len());
    for (&t, &d) in hazard.grid.iter().zip(&hazard.increments) {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::InvalidHazard { time: t, increment: d });
        }
        s *= 1.0 - d;
        values.push(s);
    }
    Ok(SurvivalCurve { base: StepFunction::new(1.0, hazard.grid.clone(), values)? })
}

/// `F_j(t) = Σ_{u ≤ t} S_all(u−) dΛ_j(u)`.
pub fn cif_from_hazards(cause: &CumulativeHazard, all: &CumulativeHazard) -> Result<CifCurve> {
    if cause.grid != all.grid {
        return Err(Error::GridMismatch("cause-specific and all-cause hazards differ in grid".into()));
    }
    let mut s_prev = 1.0;
    let mut f = 0.0;
    let mut values = Vec::with_capacity(all.grid.len());
    for ((&t, &dj), &da) in all.grid.iter().zip(&cause.increments).zip(&all.increments) {
        if dj > da + 1e-15 {
            return Err(Error::InvalidHazard { time: t, increment: dj });
        }
        f += s_prev * dj;
        s_prev *= 1.0 - da;
        values.push(f);
    }
    Ok(CifCurve { base: StepFunction::new(0.0, all.grid.clone(), values)? })
}

/// Exact integral `∫_0^τ f(u) du` of a right-continuous step function.
pub fn restricted_integral(curve: &StepFunction, tau: f64) -> f64 {
    let mut total = 0.0;
    let mut left = 0.0;
    let mut value = curve.initial_value;
    for (&t, &v) in curve.jump_times.iter().zip(&curve.jump_values) {
        if t >= tau {
            break;
        }
        total += value * (t - left);
        left = t;
        value = v;
    }
    total + value * (tau - left).max(0.0)
}

/// Which counting process a martingale integral refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventFilter {
    /// `N(u) = I(T̃ ≤ u, J̃ ≥ 1)`.
    AllCause,
    /// `N_j(u) = I(T̃ ≤ u, J̃ = j)`.
    Cause(u8),
    /// Every cause except `j`, the counting process for `ĵ`.
    AllExcept(u8),
    /// `N^C(u) = I(T̃ ≤ u, J̃ = 0)`.
    Censoring,
}

impl EventFilter {
    pub fn counts(self, cause: u8) -> bool {
        match self {
            EventFilter::AllCause => cause >= 1,
            EventFilter::Cause(j) => cause == j,
            EventFilter::AllExcept(j) => cause >= 1 && cause != j,
            EventFilter::Censoring => cause == 0,
        }
    }
}

/// Evaluation point handed to integrands: either a grid index or an
/// off-grid time (only used for the counting term when `T̃` is not a knot).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Point {
    Grid(usize),
    Off(f64),
}

/// `Σ_{u} f(u) dM(u)` over `(0, horizon ∧ T̃]` on `grid` with compensator
/// increments `dlambda`.
///
/// Ties: events precede censoring, so the censoring at-risk set at `u`
/// excludes a subject who fails at `u`.
pub(crate) fn martingale_sum<F: FnMut(Point) -> f64>(
    time: f64,
    cause: u8,
    grid: &[f64],
    dlambda: &[f64],
    filter: EventFilter,
    horizon: f64,
    mut f: F,
) -> f64 {
    let upper = horizon.min(time);
    let end = grid.partition_point(|&u| u <= upper);
    let mut compensator = 0.0;
    for k in 0..end {
        let d = dlambda[k];
        if d == 0.0 {
            continue;
        }
        compensator += f(Point::Grid(k)) * d;
    }
    let mut total = -compensator;
    if filter == EventFilter::Censoring && cause >= 1 && end > 0 && grid[end - 1] == time {
        // Failure at a knot: not at risk for censoring there.
        let d = dlambda[end - 1];
        if d != 0.0 {
            total += f(Point::Grid(end - 1)) * d;
        }
    }
    if time <= horizon && filter.counts(cause) {
        let point = match grid.binary_search_by(|u| u.total_cmp(&time)) {
            Ok(k) => Point::Grid(k),
            Err(_) => Point::Off(time),
        };
        total += f(point);
    }
    total
}

/// `∫_0^{horizon ∧ T̃} f(u) dM(u)` for the counting process selected by
/// `filter`, with `dM = dN − R dΛ`.
pub fn martingale_integral(
    obs: &Observation,
    integrand: &StepFunction,
    hazard: &CumulativeHazard,
    filter: EventFilter,
    horizon: f64,
) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let grid = hazard.grid();
    Ok(martingale_sum(obs.time, obs.cause, grid, hazard.increments(), filter, horizon, |p| match p {
        Point::Grid(k) => integrand.eval(grid[k]),
        Point::Off(t) => integrand.eval(t),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halving() -> StepFunction {
        StepFunction::new(1.0, vec![2.0], vec![0.5]).unwrap()
    }

    fn obs(time: f64, cause: u8) -> Observation {
        Observation::new(0, vec![], 0, time, cause).unwrap()
    }

    #[test]
    fn step_evaluation_is_right_continuous() {
        let f = halving();
        assert_eq!(step_eval(&f, 1.9), 1.0);
        assert_eq!(step_eval(&f, 2.0), 0.5);
        assert_eq!(step_eval(&f, 3.0), 0.5);
        assert_eq!(step_left_limit(&f, 2.0), 1.0);
        assert_eq!(step_left_limit(&f, 2.5), 0.5);
        assert_eq!(step_left_limit(&StepFunction::constant(0.3), 7.0), 0.3);
    }

    #[test]
    fn rejects_unsorted_jumps() {
        assert!(StepFunction::new(0.0, vec![2.0, 1.0], vec![1.0, 2.0]).is_err());
        assert!(StepFunction::new(0.0, vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn product_limit_examples() {
        let one = CumulativeHazard::from_increments(vec![1.0], vec![0.5]).unwrap();
        let s = product_limit(&one).unwrap();
        assert_eq!(s.base.eval(1.0), 0.5);
        assert_eq!(s.base.eval(0.99), 1.0);

        let two = CumulativeHazard::from_increments(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(product_limit(&two).unwrap().base.eval(2.0), 0.25);

        let zero = CumulativeHazard::zero(vec![1.0, 2.0, 3.0]).unwrap();
        let s = product_limit(&zero).unwrap();
        assert!([0.5, 1.0, 2.5, 9.0].iter().all(|&t| s.base.eval(t) == 1.0));

        assert!(CumulativeHazard::from_increments(vec![1.0], vec![1.2]).is_err());
    }

    #[test]
    fn cif_examples() {
        let h = CumulativeHazard::from_increments(vec![1.0], vec![0.4]).unwrap();
        assert!((cif_from_hazards(&h, &h).unwrap().base.eval(1.0) - 0.4).abs() < 1e-15);

        let zero = CumulativeHazard::zero(vec![1.0]).unwrap();
        assert_eq!(cif_from_hazards(&zero, &h).unwrap().base.eval(5.0), 0.0);

        let h1 = CumulativeHazard::from_increments(vec![1.0], vec![0.2]).unwrap();
        let h2 = CumulativeHazard::from_increments(vec![1.0], vec![0.1]).unwrap();
        let all = CumulativeHazard::from_increments(vec![1.0], vec![0.2 + 0.1]).unwrap();
        let f1 = cif_from_hazards(&h1, &all).unwrap().base.eval(1.0);
        let f2 = cif_from_hazards(&h2, &all).unwrap().base.eval(1.0);
        let s = product_limit(&all).unwrap().base.eval(1.0);
        assert!((f1 - 0.2).abs() < 1e-15 && (f2 - 0.1).abs() < 1e-15 && (s - 0.7).abs() < 1e-15);
        assert!((f1 + f2 + s - 1.0).abs() < 1e-15);

        let other = CumulativeHazard::zero(vec![2.0]).unwrap();
        assert!(matches!(cif_from_hazards(&other, &h), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn restricted_integral_examples() {
        assert_eq!(restricted_integral(&StepFunction::constant(1.0), 5.0), 5.0);
        assert_eq!(restricted_integral(&halving(), 4.0), 3.0);
        assert_eq!(restricted_integral(&StepFunction::constant(0.0), 3.0), 0.0);
        // Horizon before the jump and exactly at the jump.
        assert_eq!(restricted_integral(&halving(), 1.5), 1.5);
        assert_eq!(restricted_integral(&halving(), 2.0), 2.0);
    }

    #[test]
    fn martingale_integral_examples() {
        let one = StepFunction::constant(1.0);
        let lam = CumulativeHazard::from_increments(vec![1.0], vec![0.3]).unwrap();
        let v = martingale_integral(&obs(2.0, 1), &one, &lam, EventFilter::AllCause, 3.0).unwrap();
        assert!((v - 0.7).abs() < 1e-15);

        let zero = CumulativeHazard::zero(vec![1.0]).unwrap();
        let v = martingale_integral(&obs(2.0, 1), &one, &zero, EventFilter::AllCause, 3.0).unwrap();
        assert_eq!(v, 1.0);

        let v = martingale_integral(&obs(2.0, 0), &one, &lam, EventFilter::AllCause, 3.0).unwrap();
        assert!((v + 0.3).abs() < 1e-15);

        assert!(martingale_integral(&obs(2.0, 0), &one, &lam, EventFilter::AllCause, 0.0).is_err());
    }

    #[test]
    fn censoring_at_risk_excludes_tied_failure() {
        let one = StepFunction::constant(1.0);
        let lam = CumulativeHazard::from_increments(vec![1.0, 2.0], vec![0.1, 0.2]).unwrap();
        let failed = martingale_integral(&obs(2.0, 1), &one, &lam, EventFilter::Censoring, 5.0).unwrap();
        assert!((failed + 0.1).abs() < 1e-15);
        let censored = martingale_integral(&obs(2.0, 0), &one, &lam, EventFilter::Censoring, 5.0).unwrap();
        assert!((censored - 0.7).abs() < 1e-15);
    }

    #[test]
    fn restricted_integral_is_linear() {
        let f = StepFunction::new(0.2, vec![1.0, 3.0], vec![0.5, 0.1]).unwrap();
        let g = StepFunction::new(1.0, vec![1.0, 3.0], vec![0.5, 0.4]).unwrap();
        let sum = StepFunction::new(1.2, vec![1.0, 3.0], vec![1.0, 0.5]).unwrap();
        for tau in [0.5, 1.0, 2.0, 4.5] {
            let lhs = restricted_integral(&sum, tau);
            let rhs = restricted_integral(&f, tau) + restricted_integral(&g, tau);
            assert!((lhs - rhs).abs() < 1e-12);
            assert!(restricted_integral(&f, tau) <= restricted_integral(&g, tau) + 1e-12);
        }
    }
}
