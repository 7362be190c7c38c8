//! Simulation settings with known ground truth.
//!
//! Settings 1–2 have a single cause with log-logistic (arm 0) and lognormal
//! (arm 1) event times; Settings 3–4 have two competing causes with
//! covariate-dependent constant hazards. Settings 2 and 4 differ from 1 and 3
//! only in the propensity model, which has five times the slopes and
//! therefore poor overlap.
//!
//! Covariates are not specified by the settings themselves; the default law
//! is iid `Uniform(−1, 1)` with a standard-normal alternative.

use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::nuisance::regress::expit;
use crate::nuisance::{ArmCurves, Grid, NuisanceProvider, NuisanceSet};
use crate::par;
use crate::survival::Observation;
use crate::transforms::{EstimandSpec, Family};

pub const N_COVARIATES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingId {
    S1,
    S2,
    S3,
    S4,
}

impl SettingId {
    pub const ALL: [SettingId; 4] = [SettingId::S1, SettingId::S2, SettingId::S3, SettingId::S4];

    pub fn name(self) -> &'static str {
        match self {
            SettingId::S1 => "s1",
            SettingId::S2 => "s2",
            SettingId::S3 => "s3",
            SettingId::S4 => "s4",
        }
    }

    pub fn n_causes(self) -> usize {
        match self {
            SettingId::S1 | SettingId::S2 => 1,
            SettingId::S3 | SettingId::S4 => 2,
        }
    }

    pub fn law(self) -> Law {
        let good = Linear::new(0.3, [0.2, 0.3, 0.3, -0.2, -0.3, -0.2]);
        let poor = Linear::new(-1.0, [1.0, 1.5, 1.5, -1.0, -1.5, -1.0]);
        let propensity = match self {
            SettingId::S1 | SettingId::S3 => good,
            SettingId::S2 | SettingId::S4 => poor,
        };
        match self {
            SettingId::S1 | SettingId::S2 => Law {
                propensity,
                event: EventLaw::Single([
                    LogTime { noise: Noise::Logistic, scale: 0.2, loc: Linear::new(0.8, [-0.8, 1.0, 0.8, 0.4, -0.4, 0.8]) },
                    LogTime { noise: Noise::Normal, scale: 1.0, loc: Linear::new(0.4, [0.6, -0.8, 1.2, 0.6, -0.3, 0.5]) },
                ]),
                censoring: [
                    LogTime { noise: Noise::Normal, scale: 0.8, loc: Linear::new(1.8, [0.6, -0.8, 0.5, 0.7, -0.4, -0.2]) },
                    LogTime { noise: Noise::Logistic, scale: 0.8, loc: Linear::new(2.2, [0.6, -0.8, 0.5, 0.7, 0.8, 1.2]) },
                ],
            },
            SettingId::S3 | SettingId::S4 => Law {
                propensity,
                event: EventLaw::Competing {
                    cause1: [
                        ConstantHazard { rate: 0.12, lin: Linear::new(0.1, [0.1, -0.2, 0.2, 0.1, 0.8, -0.2]) },
                        ConstantHazard { rate: 0.15, lin: Linear::new(0.17, [0.2, -0.1, 0.4, 0.2, 0.3, 0.4]) },
                    ],
                    cause2: [
                        ConstantHazard { rate: 0.1, lin: Linear::new(0.12, [-0.1, 0.3, 0.1, 0.2, -0.4, 0.5]) },
                        ConstantHazard { rate: 0.08, lin: Linear::new(0.1, [-0.2, -0.1, 0.2, 0.3, 0.3, -0.3]) },
                    ],
                },
                censoring: [
                    LogTime { noise: Noise::Normal, scale: 0.8, loc: Linear::new(2.5, [0.6, -0.4, 0.7, 1.5, 1.2, 1.6]) },
                    LogTime { noise: Noise::Logistic, scale: 0.8, loc: Linear::new(2.0, [0.6, 0.8, 0.5, 1.2, 1.6, 1.2]) },
                ],
            },
        }
    }
}

impl std::fmt::Display for SettingId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SettingId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SettingId::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown setting `{s}`")))
    }
}

/// `intercept + β·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub intercept: f64,
    pub beta: [f64; N_COVARIATES],
}

impl Linear {
    pub const fn new(intercept: f64, beta: [f64; N_COVARIATES]) -> Self {
        Self { intercept, beta }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// `log U − log(1 − U)`.
    Logistic,
    /// `Φ⁻¹(U)`.
    Normal,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

impl Noise {
    fn quantile(self, u: f64) -> f64 {
        match self {
            Noise::Logistic => u.ln() - (-u).ln_1p(),
            Noise::Normal => std_normal().inverse_cdf(u),
        }
    }

    fn upper_tail(self, z: f64) -> f64 {
        match self {
            Noise::Logistic => expit(-z),
            Noise::Normal => std_normal().sf(z),
        }
    }
}

/// `log T = scale · ε + loc(x)` with `ε` from `noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogTime {
    pub noise: Noise,
    pub scale: f64,
    pub loc: Linear,
}

impl LogTime {
    pub fn survival(&self, x: &[f64], t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        self.noise.upper_tail((t.ln() - self.loc.eval(x)) / self.scale)
    }

    pub fn sample(&self, x: &[f64], u: f64) -> f64 {
        (self.scale * self.noise.quantile(u) + self.loc.eval(x)).exp()
    }
}

/// `rate · exp(lin(x))`, constant in time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantHazard {
    pub rate: f64,
    pub lin: Linear,
}

impl ConstantHazard {
    pub fn at(&self, x: &[f64]) -> f64 {
        self.rate * self.lin.eval(x).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EventLaw {
    /// One cause; entry `a` is the law of `T^{a}`.
    Single([LogTime; 2]),
    /// Two causes; `causeK[a]` is the hazard of cause `K` when the treatment
    /// component acting on cause `K` is set to `a`.
    Competing { cause1: [ConstantHazard; 2], cause2: [ConstantHazard; 2] },
}

/// Full data-generating law of one setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Law {
    /// `π(1|X) = expit(−propensity(X))`.
    pub propensity: Linear,
    pub event: EventLaw,
    /// Censoring law by arm.
    pub censoring: [LogTime; 2],
}

/// Counterfactual outcomes of one subject. `time[b][c]` and `cause[b][c]`
/// refer to the component arms `(b, c)` acting on cause 1 and cause 2; with a
/// single cause only the diagonal is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactuals {
    pub time: [[f64; 2]; 2],
    pub cause: [[u8; 2]; 2],
    /// Censoring time under each arm.
    pub censor: [f64; 2],
}

fn rmst_quadrature(f: impl Fn(f64) -> f64, tau: f64) -> f64 {
    quadrature::double_exponential::integrate(f, 0.0, tau, 1e-10).integral
}

impl Law {
    pub fn n_causes(&self) -> usize {
        match self.event {
            EventLaw::Single(_) => 1,
            EventLaw::Competing { .. } => 2,
        }
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        expit(-self.propensity.eval(x))
    }

    /// Hazards of `(cause 1, cause 2)` when cause 1's component is `b` and
    /// cause 2's is `c`.
    fn rates(&self, b: u8, c: u8, x: &[f64]) -> Option<(f64, f64)> {
        match &self.event {
            EventLaw::Single(_) => None,
            EventLaw::Competing { cause1, cause2 } => Some((cause1[b as usize].at(x), cause2[c as usize].at(x))),
        }
    }

    /// `P(T^{b,c} > t)`; single-cause laws use arm `b`.
    pub fn survival(&self, b: u8, c: u8, x: &[f64], t: f64) -> f64 {
        match &self.event {
            EventLaw::Single(arms) => arms[b as usize].survival(x, t),
            EventLaw::Competing { .. } => {
                let (l1, l2) = self.rates(b, c, x).expect("competing law");
                (-(l1 + l2) * t.max(0.0)).exp()
            }
        }
    }

    /// `P(T^{b,c} ≤ t, J^{b,c} = j)`.
    pub fn cif(&self, j: u8, b: u8, c: u8, x: &[f64], t: f64) -> f64 {
        match &self.event {
            EventLaw::Single(_) => {
                if j == 1 {
                    1.0 - self.survival(b, c, x, t)
                } else {
                    0.0
                }
            }
            EventLaw::Competing { .. } => {
                let (l1, l2) = self.rates(b, c, x).expect("competing law");
                let total = l1 + l2;
                let lj = if j == 1 { l1 } else { l2 };
                lj / total * -(-total * t.max(0.0)).exp_m1()
            }
        }
    }

    pub fn rmst(&self, b: u8, c: u8, x: &[f64], tau: f64) -> f64 {
        match &self.event {
            EventLaw::Single(_) => rmst_quadrature(|u| self.survival(b, c, x, u), tau),
            EventLaw::Competing { .. } => {
                let (l1, l2) = self.rates(b, c, x).expect("competing law");
                let total = l1 + l2;
                -(-total * tau).exp_m1() / total
            }
        }
    }

    /// `∫_0^τ F_j(u) du`.
    pub fn rmtl(&self, j: u8, b: u8, c: u8, x: &[f64], tau: f64) -> f64 {
        match &self.event {
            EventLaw::Single(_) => {
                if j == 1 {
                    tau - self.rmst(b, c, x, tau)
                } else {
                    0.0
                }
            }
            EventLaw::Competing { .. } => {
                let (l1, l2) = self.rates(b, c, x).expect("competing law");
                let total = l1 + l2;
                let lj = if j == 1 { l1 } else { l2 };
                lj / total * (tau + (-total * tau).exp_m1() / total)
            }
        }
    }

    pub fn censoring_survival(&self, a: u8, x: &[f64], t: f64) -> f64 {
        self.censoring[a as usize].survival(x, t)
    }

    /// Component arms `(b, c)` acting on `(cause 1, cause 2)` when cause `j`
    /// receives `aj` and the other cause receives `ajbar`.
    fn components(j: u8, aj: u8, ajbar: u8) -> (u8, u8) {
        if j == 1 {
            (aj, ajbar)
        } else {
            (ajbar, aj)
        }
    }

    /// The counterfactual functional targeted by the arm-`arm` CUT of `spec`.
    pub fn arm_value(&self, spec: &EstimandSpec, arm: u8, x: &[f64]) -> Result<f64> {
        spec.validate(self.n_causes())?;
        let h = spec.horizon;
        let (aj, ajbar) = spec.target_arms(arm);
        Ok(match spec.family {
            Family::Survival => self.survival(arm, arm, x, h),
            Family::Rmst => self.rmst(arm, arm, x, h),
            Family::Cif { cause } => self.cif(cause, arm, arm, x, h),
            Family::Rmtl { cause } => self.rmtl(cause, arm, arm, x, h),
            Family::SeparableDirectCif { cause, .. } | Family::SeparableIndirectCif { cause, .. } => {
                let (b, c) = Self::components(cause, aj, ajbar);
                self.cif(cause, b, c, x, h)
            }
            Family::SeparableDirectRmtl { cause, .. } | Family::SeparableIndirectRmtl { cause, .. } => {
                let (b, c) = Self::components(cause, aj, ajbar);
                self.rmtl(cause, b, c, x, h)
            }
        })
    }

    /// `ψ₀(x)`: arm-1 functional minus arm-0 functional.
    pub fn true_hte(&self, spec: &EstimandSpec, x: &[f64]) -> Result<f64> {
        if x.len() != N_COVARIATES {
            return Err(Error::InvalidArgument(format!("expected {N_COVARIATES} covariates, got {}", x.len())));
        }
        Ok(self.arm_value(spec, 1, x)? - self.arm_value(spec, 0, x)?)
    }

    /// Counterfactual times from one uniform stream.
    pub fn draw<R: Rng>(&self, x: &[f64], rng: &mut R) -> Counterfactuals {
        let mut u = || rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
        let (time, cause) = match &self.event {
            EventLaw::Single(arms) => {
                let t0 = arms[0].sample(x, u());
                let t1 = arms[1].sample(x, u());
                ([[t0, f64::NAN], [f64::NAN, t1]], [[1, 0], [0, 1]])
            }
            EventLaw::Competing { cause1, cause2 } => {
                // One latent time per (cause, component arm), shared by every
                // pair that sets that component.
                let t1 = [-u().ln() / cause1[0].at(x), -u().ln() / cause1[1].at(x)];
                let t2 = [-u().ln() / cause2[0].at(x), -u().ln() / cause2[1].at(x)];
                let mut time = [[0.0; 2]; 2];
                let mut cause = [[0; 2]; 2];
                for b in 0..2 {
                    for c in 0..2 {
                        let (t, j) = if t1[b] <= t2[c] { (t1[b], 1) } else { (t2[c], 2) };
                        time[b][c] = t;
                        cause[b][c] = j;
                    }
                }
                (time, cause)
            }
        };
        let censor = [self.censoring[0].sample(x, u()), self.censoring[1].sample(x, u())];
        Counterfactuals { time, cause, censor }
    }

    /// Nuisance curves of arm `a` at covariates `x`, exact at every knot of
    /// `grid`: increments are chosen so that the product-limit survival and
    /// the cumulative incidences equal the true curves at the knots.
    pub fn arm_curves(&self, a: u8, x: &[f64], grid: &Grid) -> Result<ArmCurves> {
        let k = grid.len();
        let j = self.n_causes();
        let mut d_cause = vec![vec![0.0; k]; j];
        let mut d_cens = vec![0.0; k];
        let (mut s_prev, mut g_prev) = (1.0, 1.0);
        let mut f_prev = vec![0.0; j];
        for (i, &t) in grid.iter().enumerate() {
            let s = self.survival(a, a, x, t);
            let g = self.censoring_survival(a, x, t);
            for c in 0..j {
                let f = self.cif(c as u8 + 1, a, a, x, t);
                if s_prev > 0.0 {
                    d_cause[c][i] = ((f - f_prev[c]) / s_prev).clamp(0.0, 1.0);
                }
                f_prev[c] = f;
            }
            let total: f64 = (0..j).map(|c| d_cause[c][i]).sum();
            if total > 1.0 {
                for d in d_cause.iter_mut() {
                    d[i] /= total;
                }
            }
            if g_prev > 0.0 {
                d_cens[i] = (1.0 - g / g_prev).clamp(0.0, 1.0);
            }
            s_prev = s;
            g_prev = g;
        }
        ArmCurves::new(grid.clone(), d_cause, d_cens)
    }

    /// Flattened coefficients, for provenance hashing.
    pub fn coefficients(&self) -> Vec<f64> {
        fn lin(v: &mut Vec<f64>, l: &Linear) {
            v.push(l.intercept);
            v.extend_from_slice(&l.beta);
        }
        fn log_time(v: &mut Vec<f64>, t: &LogTime) {
            v.push(match t.noise {
                Noise::Logistic => 0.0,
                Noise::Normal => 1.0,
            });
            v.push(t.scale);
            lin(v, &t.loc);
        }
        let mut v = Vec::new();
        lin(&mut v, &self.propensity);
        match &self.event {
            EventLaw::Single(arms) => arms.iter().for_each(|t| log_time(&mut v, t)),
            EventLaw::Competing { cause1, cause2 } => {
                for h in cause1.iter().chain(cause2) {
                    v.push(h.rate);
                    lin(&mut v, &h.lin);
                }
            }
        }
        self.censoring.iter().for_each(|t| log_time(&mut v, t));
        v
    }
}

/// `ψ₀(x)` under simulation setting `setting`.
pub fn true_hte(setting: SettingId, spec: &EstimandSpec, x: &[f64]) -> Result<f64> {
    setting.law().true_hte(spec, x)
}

/// Evenly spaced knots `δ, 2δ, …` up to the first one at or beyond `upper`.
pub fn lattice(delta: f64, upper: f64) -> Result<Grid> {
    if !(delta > 0.0 && upper >= delta && (upper / delta) < 1e7) {
        return Err(Error::InvalidArgument(format!("bad lattice: step {delta}, upper {upper}")));
    }
    let k = (upper / delta).ceil() as usize;
    Ok((1..=k).map(|i| i as f64 * delta).collect::<Vec<_>>().into())
}

/// Round `t` up to the lattice `δ, 2δ, …`, bit-identical to [`lattice`].
pub fn round_up(t: f64, delta: f64) -> f64 {
    ((t / delta).ceil().max(1.0) as usize) as f64 * delta
}

/// True nuisances of a law, usable in place of fitted models.
#[derive(Clone, Debug)]
pub struct TrueNuisance {
    pub law: Law,
    /// Fixed grid (for lattice-valued data); the caller's grid otherwise.
    pub grid: Option<Grid>,
}

impl TrueNuisance {
    pub fn new(law: Law) -> Self {
        Self { law, grid: None }
    }
}

impl NuisanceProvider for TrueNuisance {
    fn nuisance_set(&self, subject: &Observation, grid: &Grid) -> Result<NuisanceSet> {
        let x = &subject.covariates;
        NuisanceSet::new(
            subject.id,
            None,
            self.law.arm_curves(0, x, grid)?,
            self.law.arm_curves(1, x, grid)?,
            self.law.propensity(x),
        )
    }

    fn grid(&self) -> Option<Grid> {
        self.grid.clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    /// iid `Uniform(−1, 1)`.
    #[default]
    Uniform,
    /// iid standard normal.
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub setting: SettingId,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub covariates: CovariateLaw,
    /// Round observed times up to this lattice step.
    #[serde(default)]
    pub lattice: Option<f64>,
}

impl SimConfig {
    pub fn new(setting: SettingId, n: usize, seed: u64) -> Self {
        Self { setting, n, seed, covariates: CovariateLaw::Uniform, lattice: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: u64,
    pub propensity: f64,
    pub counterfactual: Counterfactuals,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub setting: SettingId,
    pub law: Law,
    pub subjects: Vec<SubjectTruth>,
}

impl GroundTruth {
    /// `ψ₀(X_i)` for every subject of `data` (same order).
    pub fn psi(&self, spec: &EstimandSpec, data: &[Observation]) -> Result<Vec<f64>> {
        data.iter().map(|o| self.law.true_hte(spec, &o.covariates)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    pub observations: Vec<Observation>,
    pub truth: GroundTruth,
}

/// Stream for subject `id`, independent of how many subjects are drawn.
fn subject_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn draw_covariates<R: Rng>(law: CovariateLaw, rng: &mut R) -> Vec<f64> {
    (0..N_COVARIATES)
        .map(|_| match law {
            CovariateLaw::Uniform => rng.random_range(-1.0..1.0),
            CovariateLaw::Normal => rng.sample(StandardNormal),
        })
        .collect()
}

/// Observed `(T̃, J̃)` for arm `a`; with a lattice, event and censoring times
/// are both rounded up and events win ties.
pub fn observe(cf: &Counterfactuals, a: u8, lattice: Option<f64>) -> (f64, u8) {
    let a = a as usize;
    let (mut t, mut c) = (cf.time[a][a], cf.censor[a]);
    if let Some(d) = lattice {
        t = round_up(t, d);
        c = round_up(c, d);
    }
    if t <= c {
        (t, cf.cause[a][a])
    } else {
        (c, 0)
    }
}

pub fn generate(config: &SimConfig) -> Result<SimData> {
    if config.n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if let Some(d) = config.lattice {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidArgument(format!("lattice step {d} must be positive")));
        }
    }
    let law = config.setting.law();
    let ids: Vec<u64> = (0..config.n as u64).collect();
    let draws = par::map(&ids, |&id| -> Result<(Observation, SubjectTruth)> {
        let mut rng = subject_rng(config.seed, id);
        let x = draw_covariates(config.covariates, &mut rng);
        let p = law.propensity(&x);
        let a = u8::from(rng.random::<f64>() < p);
        let cf = law.draw(&x, &mut rng);
        let (time, cause) = observe(&cf, a, config.lattice);
        Ok((Observation::new(id, x, a, time, cause)?, SubjectTruth { id, propensity: p, counterfactual: cf }))
    });
    let mut observations = Vec::with_capacity(config.n);
    let mut subjects = Vec::with_capacity(config.n);
    for d in draws {
        let (o, s) = d?;
        observations.push(o);
        subjects.push(s);
    }
    Ok(SimData { observations, truth: GroundTruth { setting: config.setting, law, subjects } })
}

/// Dataset CSV: `id,x1,...,x6,a,time,status`.
pub fn write_dataset_csv<W: Write>(data: &[Observation], mut w: W) -> io::Result<()> {
    let p = data.first().map_or(N_COVARIATES, |o| o.covariates.len());
    let xs: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    writeln!(w, "id,{},a,time,status", xs.join(","))?;
    for o in data {
        write!(w, "{}", o.id)?;
        for x in &o.covariates {
            write!(w, ",{x}")?;
        }
        writeln!(w, ",{},{},{}", o.arm, o.time, o.cause)?;
    }
    Ok(())
}

/// Ground-truth CSV keyed by id: propensity, one column per estimand, and
/// the counterfactual times.
pub fn write_truth_csv<W: Write>(
    truth: &GroundTruth,
    data: &[Observation],
    estimands: &[EstimandSpec],
    mut w: W,
) -> Result<()> {
    let io = |e: io::Error| Error::InvalidArgument(format!("write failed: {e}"));
    let cols: Vec<Vec<f64>> = estimands.iter().map(|e| truth.psi(e, data)).collect::<Result<_>>()?;
    let mut header = vec!["id".to_string(), "propensity".into()];
    header.extend(estimands.iter().map(|e| format!("psi_{}", e.label())));
    let competing = truth.law.n_causes() == 2;
    if competing {
        for b in 0..2 {
            for c in 0..2 {
                header.push(format!("t_{b}{c}"));
                header.push(format!("j_{b}{c}"));
            }
        }
    } else {
        header.extend(["t_0", "t_1"].map(String::from));
    }
    header.extend(["c_0", "c_1"].map(String::from));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, s) in truth.subjects.iter().enumerate() {
        let mut line = format!("{},{}", s.id, s.propensity);
        for c in &cols {
            line.push_str(&format!(",{}", c[i]));
        }
        let cf = &s.counterfactual;
        if competing {
            for b in 0..2 {
                for c in 0..2 {
                    line.push_str(&format!(",{},{}", cf.time[b][c], cf.cause[b][c]));
                }
            }
        } else {
            line.push_str(&format!(",{},{}", cf.time[0][0], cf.time[1][1]));
        }
        line.push_str(&format!(",{},{}", cf.censor[0], cf.censor[1]));
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}
