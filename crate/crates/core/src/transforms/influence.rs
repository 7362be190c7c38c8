use crate::error::{Error, Result};
use crate::nuisance::NuisanceSet;
use crate::survival::Observation;

use super::cut::{censoring_form, model_value};
use super::separable::{hybrid_value, separable_if};
use super::{Cut, EstimandSpec, Floor};

/// Conditional mean `μ(arm, X)` of the CUT implied by the hazard nuisances:
/// `S(t)`, `RMST(τ)`, `F_j(t)`, `RMTL_j(τ)`, or the hybrid-arm value for
/// separable families.
pub fn implied_mean(eta: &NuisanceSet, spec: &EstimandSpec, arm: u8) -> Result<f64> {
    spec.validate(eta.n_causes())?;
    if arm > 1 {
        return Err(Error::InvalidArgument(format!("arm must be 0 or 1, got {arm}")));
    }
    if spec.is_separable() {
        let (b, c) = spec.target_arms(arm);
        hybrid_value(eta, spec, b, c)
    } else {
        Ok(model_value(eta.arm(arm), spec))
    }
}

/// Uncentered influence-function transformation `φ = φ(1) − φ(0)` with
/// `φ(a) = I(A=a)/π(a) · Y_C(a) + {1 − I(A=a)/π(a)} μ(a)`, where `Y_C` is the
/// censoring-martingale form of the augmented CUT.
pub fn if_transform(obs: &Observation, eta: &NuisanceSet, spec: &EstimandSpec) -> Result<Cut> {
    spec.validate(eta.n_causes())?;
    if spec.is_separable() {
        return separable_if(obs, eta, spec);
    }
    let mut fl = Floor::default();
    let mut phi = [0.0; 2];
    for (a, slot) in phi.iter_mut().enumerate() {
        let c = eta.arm(a as u8);
        let mu = model_value(c, spec);
        *slot = if obs.arm as usize == a {
            mu + (censoring_form(obs, c, spec, &mut fl) - mu) / eta.pi(a as u8)
        } else {
            mu
        };
    }
    Ok(Cut { value: phi[1] - phi[0], floored: fl.count })
}

/// AIPTW pseudo-outcome
/// `μ1 − μ0 + A(Y − μ1)/π1 − (1 − A)(Y − μ0)/π0`.
pub fn aiptw_transform(y: f64, arm: u8, mu0: f64, mu1: f64, pi1: f64) -> f64 {
    if arm == 1 {
        mu1 - mu0 + (y - mu1) / pi1
    } else {
        mu1 - mu0 - (y - mu0) / (1.0 - pi1)
    }
}
