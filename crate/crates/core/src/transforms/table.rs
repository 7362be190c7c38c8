use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::LearnerKind;
use crate::survival::Observation;

/// Floor on `|A − π(1|X)|` in the R- and U-learner outcomes.
pub const RESIDUAL_FLOOR: f64 = 1e-3;

/// Which conditional mean the RA learner subtracts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaVariant {
    /// `A{Y − μ(0,X)} + (1 − A){μ(1,X) − Y}`: imputed individual effects.
    #[default]
    CrossArm,
    /// `A{Y − μ(1,X)} + (1 − A){μ(0,X) − Y}`, the residual form.
    OwnArm,
}

/// Weighted pseudo-outcome `(w*, Y*)` for one observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformedSample {
    pub id: u64,
    pub fold: Option<usize>,
    pub learner: LearnerKind,
    pub weight: f64,
    pub outcome: f64,
    /// Denominators floored while building this sample.
    pub floored: u32,
}

/// Weight and outcome for a transformed-minimization learner, given the
/// CUT value `y` (the influence-function transform for the IF learner),
/// the conditional means `mu0`, `mu1` and the propensity `pi1`.
pub fn minimization_target(
    kind: LearnerKind,
    y: f64,
    obs: &Observation,
    mu0: f64,
    mu1: f64,
    pi1: f64,
    ra: RaVariant,
) -> Result<TransformedSample> {
    if !(pi1 > 0.0 && pi1 < 1.0) {
        return Err(Error::InvalidArgument(format!("propensity {pi1} outside (0, 1)")));
    }
    if !(y.is_finite() && mu0.is_finite() && mu1.is_finite()) {
        return Err(Error::Numerical(format!("non-finite inputs for subject {}", obs.id)));
    }
    let pi0 = 1.0 - pi1;
    let a = f64::from(obs.arm);
    let sign = 2.0 * a - 1.0;
    let mu = pi0 * mu0 + pi1 * mu1;
    let mut floored = 0;
    let mut resid = a - pi1;
    if resid.abs() < RESIDUAL_FLOOR && matches!(kind, LearnerKind::R | LearnerKind::U) {
        floored += 1;
        resid = RESIDUAL_FLOOR.copysign(resid);
    }
    let mc_weight = sign * (a - pi1) / (4.0 * pi0 * pi1);
    let (weight, outcome) = match kind {
        LearnerKind::Iptw => (1.0, y * (a - pi1) / (pi0 * pi1)),
        LearnerKind::Ra => match (ra, obs.arm) {
            (RaVariant::CrossArm, 1) => (1.0, y - mu0),
            (RaVariant::CrossArm, _) => (1.0, mu1 - y),
            (RaVariant::OwnArm, 1) => (1.0, y - mu1),
            (RaVariant::OwnArm, _) => (1.0, mu0 - y),
        },
        LearnerKind::Aiptw => (1.0, super::aiptw_transform(y, obs.arm, mu0, mu1, pi1)),
        LearnerKind::If => (1.0, y),
        LearnerKind::Mc => (mc_weight, 2.0 * sign * y),
        LearnerKind::Mcea => (mc_weight, 2.0 * sign * (y - mu)),
        LearnerKind::R => (resid * resid, (y - mu) / resid),
        LearnerKind::U => (1.0, (y - mu) / resid),
        LearnerKind::S | LearnerKind::T | LearnerKind::X => {
            return Err(Error::Incompatible(format!("{kind} is not a transformed-minimization learner")))
        }
    };
    Ok(TransformedSample { id: obs.id, fold: None, learner: kind, weight, outcome, floored })
}
