//! Censoring-unbiased transformations (CUTs), influence-function
//! transformations and the weighted pseudo-outcomes consumed by the
//! transformed-minimization learners.
//!
//! Every function here is a pure per-observation computation on a
//! [`NuisanceSet`](crate::nuisance::NuisanceSet).

mod cut;
mod influence;
mod separable;
mod table;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::Point;

pub use cut::cut_value;
pub use influence::{aiptw_transform, if_transform, implied_mean};
pub use separable::{cut_separable, hybrid_value};
pub use table::{minimization_target, RaVariant, TransformedSample};

/// Lower bound applied to every survival or censoring-survival factor that
/// appears in a denominator.
pub const DENOMINATOR_FLOOR: f64 = 0.01;

/// Target functional of the counterfactual outcome distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// `P(T^a > t)`.
    Survival,
    /// `E min(T^a, τ)`.
    Rmst,
    /// `P(T^a ≤ t, J^a = j)`.
    Cif { cause: u8 },
    /// `E{τ − min(T^a, τ)} I(J^a = j)`.
    Rmtl { cause: u8 },
    /// Cause-`j` CIF contrast over `a_j` with the competing hazard held at
    /// `competing_arm`.
    SeparableDirectCif { cause: u8, competing_arm: u8 },
    SeparableDirectRmtl { cause: u8, competing_arm: u8 },
    /// Cause-`j` CIF contrast over `a_ĵ` with the cause-`j` hazard held at
    /// `cause_arm`.
    SeparableIndirectCif { cause: u8, cause_arm: u8 },
    SeparableIndirectRmtl { cause: u8, cause_arm: u8 },
}

/// A family evaluated at a horizon (`t` for probabilities, `τ` for
/// restricted means).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub family: Family,
    pub horizon: f64,
}

impl EstimandSpec {
    pub fn new(family: Family, horizon: f64) -> Result<Self> {
        let spec = Self { family, horizon };
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if let Some(j) = spec.cause() {
            if j == 0 {
                return Err(Error::InvalidArgument("causes are numbered from 1".into()));
            }
        }
        match family {
            Family::SeparableDirectCif { competing_arm: a, .. }
            | Family::SeparableDirectRmtl { competing_arm: a, .. }
            | Family::SeparableIndirectCif { cause_arm: a, .. }
            | Family::SeparableIndirectRmtl { cause_arm: a, .. }
                if a > 1 =>
            {
                Err(Error::InvalidArgument(format!("arm must be 0 or 1, got {a}")))
            }
            _ => Ok(spec),
        }
    }

    pub fn survival(t: f64) -> Self {
        Self { family: Family::Survival, horizon: t }
    }

    pub fn rmst(tau: f64) -> Self {
        Self { family: Family::Rmst, horizon: tau }
    }

    pub fn cif(cause: u8, t: f64) -> Self {
        Self { family: Family::Cif { cause }, horizon: t }
    }

    pub fn rmtl(cause: u8, tau: f64) -> Self {
        Self { family: Family::Rmtl { cause }, horizon: tau }
    }

    /// Cause of interest, if the family has one.
    pub fn cause(&self) -> Option<u8> {
        match self.family {
            Family::Survival | Family::Rmst => None,
            Family::Cif { cause }
            | Family::Rmtl { cause }
            | Family::SeparableDirectCif { cause, .. }
            | Family::SeparableDirectRmtl { cause, .. }
            | Family::SeparableIndirectCif { cause, .. }
            | Family::SeparableIndirectRmtl { cause, .. } => Some(cause),
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(
            self.family,
            Family::SeparableDirectCif { .. }
                | Family::SeparableDirectRmtl { .. }
                | Family::SeparableIndirectCif { .. }
                | Family::SeparableIndirectRmtl { .. }
        )
    }

    /// Restricted-mean families (RMST, RMTL and their separable versions).
    pub fn is_restricted_mean(&self) -> bool {
        matches!(
            self.family,
            Family::Rmst | Family::Rmtl { .. } | Family::SeparableDirectRmtl { .. } | Family::SeparableIndirectRmtl { .. }
        )
    }

    /// The arm pair `(a_j, a_ĵ)` targeted when the observation's own arm is
    /// `arm`. Plain families target `(arm, arm)`.
    pub fn target_arms(&self, arm: u8) -> (u8, u8) {
        match self.family {
            Family::SeparableDirectCif { competing_arm, .. } | Family::SeparableDirectRmtl { competing_arm, .. } => {
                (arm, competing_arm)
            }
            Family::SeparableIndirectCif { cause_arm, .. } | Family::SeparableIndirectRmtl { cause_arm, .. } => {
                (cause_arm, arm)
            }
            _ => (arm, arm),
        }
    }

    /// Admissible range of the conditional effect.
    pub fn clip_range(&self) -> (f64, f64) {
        if self.is_restricted_mean() {
            (-self.horizon, self.horizon)
        } else {
            (-1.0, 1.0)
        }
    }

    /// Short stable label used in file headers, e.g. `rmst@2` or `sep_dir_cif1[a2=1]@2`.
    pub fn label(&self) -> String {
        let h = self.horizon;
        match self.family {
            Family::Survival => format!("surv@{h}"),
            Family::Rmst => format!("rmst@{h}"),
            Family::Cif { cause } => format!("cif{cause}@{h}"),
            Family::Rmtl { cause } => format!("rmtl{cause}@{h}"),
            Family::SeparableDirectCif { cause, competing_arm } => format!("sepdir_cif{cause}[{competing_arm}]@{h}"),
            Family::SeparableDirectRmtl { cause, competing_arm } => format!("sepdir_rmtl{cause}[{competing_arm}]@{h}"),
            Family::SeparableIndirectCif { cause, cause_arm } => format!("sepind_cif{cause}[{cause_arm}]@{h}"),
            Family::SeparableIndirectRmtl { cause, cause_arm } => format!("sepind_rmtl{cause}[{cause_arm}]@{h}"),
        }
    }

    /// Check the estimand against the number of causes in the data.
    pub fn validate(&self, n_causes: usize) -> Result<()> {
        if let Some(j) = self.cause() {
            if j == 0 || j as usize > n_causes {
                return Err(Error::Incompatible(format!(
                    "{} asks for cause {j} but the nuisances carry {n_causes} cause(s)",
                    self.label()
                )));
            }
        }
        if self.is_separable() && n_causes < 2 {
            return Err(Error::Incompatible(format!("{} needs at least two causes", self.label())));
        }
        Ok(())
    }

    /// The uncensored outcome functional for an observation with event time
    /// `time` and cause `cause` (plain families only).
    pub fn outcome(&self, time: f64, cause: u8) -> Option<f64> {
        let h = self.horizon;
        Some(match self.family {
            Family::Survival => f64::from(u8::from(time > h)),
            Family::Rmst => time.min(h),
            Family::Cif { cause: j } => f64::from(u8::from(time <= h && cause == j)),
            Family::Rmtl { cause: j } => {
                if cause == j {
                    h - time.min(h)
                } else {
                    0.0
                }
            }
            _ => return None,
        })
    }
}

/// Parses the labels produced by [`EstimandSpec::label`]; `survival@t` is
/// accepted as well.
impl FromStr for EstimandSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse estimand `{s}`"));
        let (head, h) = s.trim().rsplit_once('@').ok_or_else(bad)?;
        let horizon: f64 = h.parse().map_err(|_| bad())?;
        let head = head.to_ascii_lowercase();
        let digit = |t: &str| t.parse::<u8>().map_err(|_| bad());
        let family = match head.as_str() {
            "surv" | "survival" => Family::Survival,
            "rmst" => Family::Rmst,
            _ => {
                if let Some((name, arm)) = head.strip_suffix(']').and_then(|h| h.split_once('[')) {
                    let arm = digit(arm)?;
                    if arm > 1 {
                        return Err(bad());
                    }
                    let (kind, cause) = name.split_once('_').ok_or_else(bad)?;
                    let (rmtl, cause) = match (cause.strip_prefix("cif"), cause.strip_prefix("rmtl")) {
                        (Some(c), _) => (false, digit(c)?),
                        (_, Some(c)) => (true, digit(c)?),
                        _ => return Err(bad()),
                    };
                    match (kind, rmtl) {
                        ("sepdir", false) => Family::SeparableDirectCif { cause, competing_arm: arm },
                        ("sepdir", true) => Family::SeparableDirectRmtl { cause, competing_arm: arm },
                        ("sepind", false) => Family::SeparableIndirectCif { cause, cause_arm: arm },
                        ("sepind", true) => Family::SeparableIndirectRmtl { cause, cause_arm: arm },
                        _ => return Err(bad()),
                    }
                } else if let Some(c) = head.strip_prefix("cif") {
                    Family::Cif { cause: digit(c)? }
                } else if let Some(c) = head.strip_prefix("rmtl") {
                    Family::Rmtl { cause: digit(c)? }
                } else {
                    return Err(bad());
                }
            }
        };
        EstimandSpec::new(family, horizon)
    }
}

/// Algebraic representation of an augmented CUT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AipcwForm {
    /// IPCW term plus an integral against the censoring martingale.
    Censoring,
    /// Model-based term plus integrals against the event martingales.
    #[default]
    Event,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CutKind {
    /// Model-based imputation of the censored tail.
    Bj,
    /// `I(T̃ > t) / G(t)`; survival only.
    Ipcw1,
    /// `Δ I(T̃ > t) / G(T̃−)`; survival only.
    Ipcw2,
    /// Weight observed outcomes by the inverse censoring survival (IPCW2 for
    /// the survival family).
    Ipcw,
    Aipcw {
        #[serde(default)]
        form: AipcwForm,
    },
}

impl CutKind {
    pub const AIPCW: CutKind = CutKind::Aipcw { form: AipcwForm::Event };

    pub fn label(&self) -> &'static str {
        match self {
            CutKind::Bj => "bj",
            CutKind::Ipcw1 => "ipcw1",
            CutKind::Ipcw2 => "ipcw2",
            CutKind::Ipcw => "ipcw",
            CutKind::Aipcw { form: AipcwForm::Event } => "aipcw",
            CutKind::Aipcw { form: AipcwForm::Censoring } => "aipcw_c",
        }
    }

    /// Whether this kind is defined for `spec`.
    pub fn check(&self, spec: &EstimandSpec) -> Result<()> {
        let ok = match self {
            CutKind::Ipcw1 | CutKind::Ipcw2 => spec.family == Family::Survival,
            CutKind::Bj | CutKind::Ipcw => !spec.is_separable(),
            CutKind::Aipcw { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Incompatible(format!("cut kind {} is not defined for {}", self.label(), spec.label())))
        }
    }
}

impl FromStr for CutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "bj" => CutKind::Bj,
            "ipcw1" => CutKind::Ipcw1,
            "ipcw2" => CutKind::Ipcw2,
            "ipcw" => CutKind::Ipcw,
            "aipcw" => CutKind::AIPCW,
            "aipcw_c" => CutKind::Aipcw { form: AipcwForm::Censoring },
            _ => return Err(Error::InvalidArgument(format!("unknown cut kind `{s}`"))),
        })
    }
}

/// A transformed value together with the number of denominators that had
/// to be floored while computing it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cut {
    pub value: f64,
    pub floored: u32,
}

/// Counts floored denominators during one evaluation.
#[derive(Debug, Default)]
pub(crate) struct Floor {
    pub count: u32,
}

impl Floor {
    #[inline]
    pub fn den(&mut self, v: f64) -> f64 {
        if v < DENOMINATOR_FLOOR {
            self.count += 1;
            DENOMINATOR_FLOOR
        } else {
            v
        }
    }
}

/// Locate `t` on `grid`.
pub(crate) fn point_of(grid: &[f64], t: f64) -> Point {
    match grid.binary_search_by(|u| u.total_cmp(&t)) {
        Ok(k) => Point::Grid(k),
        Err(_) => Point::Off(t),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::sync::Arc;

    use rand::Rng;

    use crate::nuisance::{ArmCurves, Grid, NuisanceSet};
    use crate::survival::Observation;

    /// Random hazards on a random grid containing the horizon.
    pub fn random_set<R: Rng>(rng: &mut R, causes: usize, horizon: f64, censor: bool) -> NuisanceSet {
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

    /// An observation whose time is either a grid knot or an off-grid point.
    pub fn random_obs<R: Rng>(rng: &mut R, eta: &NuisanceSet, causes: u8, arm: u8) -> Observation {
        let grid = eta.arm(0).grid();
        let time = if rng.random_bool(0.7) {
            grid[rng.random_range(0..grid.len())]
        } else {
            rng.random_range(0.01..grid[grid.len() - 1] * 1.2)
        };
        let cause = rng.random_range(0..=causes);
        Observation::new(0, vec![0.0], arm, time, cause).unwrap()
    }
}
