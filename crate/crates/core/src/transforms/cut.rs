use crate::error::{Error, Result};
use crate::nuisance::{ArmCurves, NuisanceSet};
use crate::survival::{martingale_sum, EventFilter, Observation, Point};

use super::{point_of, AipcwForm, Cut, CutKind, EstimandSpec, Family, Floor};

/// CUT of `kind` for `spec`, built from the arm-`arm` curves of `eta`.
///
/// In learner use `arm` is the observation's own arm. Separable families are
/// delegated to [`cut_separable`](super::cut_separable).
pub fn cut_value(obs: &Observation, eta: &NuisanceSet, spec: &EstimandSpec, kind: CutKind, arm: u8) -> Result<Cut> {
    spec.validate(eta.n_causes())?;
    kind.check(spec)?;
    if arm > 1 {
        return Err(Error::InvalidArgument(format!("arm must be 0 or 1, got {arm}")));
    }
    if spec.is_separable() {
        return super::cut_separable(obs, eta, spec, arm);
    }
    let c = eta.arm(arm);
    let mut fl = Floor::default();
    let value = plain_cut(obs, c, spec, kind, &mut fl);
    Ok(Cut { value, floored: fl.count })
}

pub(crate) fn plain_cut(obs: &Observation, c: &ArmCurves, spec: &EstimandSpec, kind: CutKind, fl: &mut Floor) -> f64 {
    let h = spec.horizon;
    let x = obs.time;
    let grid = c.grid();
    let px = point_of(grid, x);
    let event = obs.cause >= 1;
    match (spec.family, kind) {
        (Family::Survival, CutKind::Bj) => {
            if x > h {
                1.0
            } else if event {
                0.0
            } else {
                c.s_at(h) / fl.den(c.s(px))
            }
        }
        (Family::Survival, CutKind::Ipcw1) => ipcw1(x, h, c, fl),
        (Family::Survival, CutKind::Ipcw2 | CutKind::Ipcw) => {
            if event && x > h {
                1.0 / fl.den(c.g_left(px))
            } else {
                0.0
            }
        }
        (Family::Rmst, CutKind::Bj) => {
            let mut y = x.min(h);
            if !event && x < h {
                y += (c.rmst_at(h) - c.rmst(px)) / fl.den(c.s(px));
            }
            y
        }
        (Family::Rmst, CutKind::Ipcw) => rmst_ipcw(x, obs.cause, h, c, px, fl),
        (Family::Cif { cause: j }, CutKind::Bj) => {
            if x > h {
                0.0
            } else if event {
                f64::from(u8::from(obs.cause == j))
            } else {
                (c.f_at(j, h) - c.f(j, px)) / fl.den(c.s(px))
            }
        }
        (Family::Cif { cause: j }, CutKind::Ipcw) => cif_ipcw(x, obs.cause, j, h, c, px, fl),
        (Family::Rmtl { cause: j }, CutKind::Bj) => {
            if obs.cause == j {
                h - x.min(h)
            } else if !event && x < h {
                rmtl_tail(c, j, h, c.rmtl_at(j, h), px) / fl.den(c.s(px))
            } else {
                0.0
            }
        }
        (Family::Rmtl { cause: j }, CutKind::Ipcw) => rmtl_ipcw(x, obs.cause, j, h, c, px, fl),
        (_, CutKind::Aipcw { form: AipcwForm::Censoring }) => censoring_form(obs, c, spec, fl),
        (_, CutKind::Aipcw { form: AipcwForm::Event }) => event_form(obs, c, spec, fl),
        _ => unreachable!("kind compatibility is checked by the caller"),
    }
}

fn ipcw1(x: f64, h: f64, c: &ArmCurves, fl: &mut Floor) -> f64 {
    if x > h {
        1.0 / fl.den(c.g_at(h))
    } else {
        0.0
    }
}

/// Subjects followed past `τ` count `τ / G(τ)`; events by `τ` count
/// `T̃ / G(T̃−)`. A subject censored exactly at `τ` contributes zero here and
/// is handled by the augmentation.
fn rmst_ipcw(x: f64, cause: u8, h: f64, c: &ArmCurves, px: Point, fl: &mut Floor) -> f64 {
    if x > h {
        h / fl.den(c.g_at(h))
    } else if cause >= 1 {
        x / fl.den(c.g_left(px))
    } else {
        0.0
    }
}

fn cif_ipcw(x: f64, cause: u8, j: u8, h: f64, c: &ArmCurves, px: Point, fl: &mut Floor) -> f64 {
    if x <= h && cause == j {
        1.0 / fl.den(c.g_left(px))
    } else {
        0.0
    }
}

fn rmtl_ipcw(x: f64, cause: u8, j: u8, h: f64, c: &ArmCurves, px: Point, fl: &mut Floor) -> f64 {
    if x < h && cause == j {
        (h - x) / fl.den(c.g_left(px))
    } else {
        0.0
    }
}

/// `E[{τ − min(T, τ)} I(J = j) | T > u] · S(u)`, i.e.
/// `RMTL_j(τ) − RMTL_j(u) − (τ − u) F_j(u)`, given `rmtl_h = RMTL_j(τ)`.
pub(crate) fn rmtl_tail(c: &ArmCurves, j: u8, h: f64, rmtl_h: f64, p: Point) -> f64 {
    let u = c.time(p);
    rmtl_h - c.rmtl(j, p) - (h - u) * c.f(j, p)
}

/// Tail functional `V(h) − V(u)` adjusted so that `tail(u)/S(u)` is the
/// conditional remaining outcome given survival past `u`. `at_h` is
/// `model_value(c, spec)`, hoisted out of the martingale loops.
pub(crate) fn tail(c: &ArmCurves, spec: &EstimandSpec, at_h: f64, p: Point) -> f64 {
    match spec.family {
        Family::Survival => at_h,
        Family::Rmst => at_h - c.rmst(p),
        Family::Cif { cause } => at_h - c.f(cause, p),
        Family::Rmtl { cause } => rmtl_tail(c, cause, spec.horizon, at_h, p),
        _ => unreachable!("plain families only"),
    }
}

/// Model-based value `μ(a, X)` of a plain family.
pub(crate) fn model_value(c: &ArmCurves, spec: &EstimandSpec) -> f64 {
    let h = spec.horizon;
    match spec.family {
        Family::Survival => c.s_at(h),
        Family::Rmst => c.rmst_at(h),
        Family::Cif { cause } => c.f_at(cause, h),
        Family::Rmtl { cause } => c.rmtl_at(cause, h),
        _ => unreachable!("plain families only"),
    }
}

/// IPCW term plus `Σ_u k(u) dM^C(u)` with
/// `k(u) = {outcome so far}/G(u) + tail(u)/{S(u) G(u)}`.
pub(crate) fn censoring_form(obs: &Observation, c: &ArmCurves, spec: &EstimandSpec, fl: &mut Floor) -> f64 {
    let h = spec.horizon;
    let x = obs.time;
    let px = point_of(c.grid(), x);
    let base = match spec.family {
        Family::Survival => ipcw1(x, h, c, fl),
        Family::Rmst => rmst_ipcw(x, obs.cause, h, c, px, fl),
        Family::Cif { cause: j } => cif_ipcw(x, obs.cause, j, h, c, px, fl),
        Family::Rmtl { cause: j } => rmtl_ipcw(x, obs.cause, j, h, c, px, fl),
        _ => unreachable!("plain families only"),
    };
    let at_h = model_value(c, spec);
    let aug = martingale_sum(x, obs.cause, c.grid(), c.d_cens(), EventFilter::Censoring, h, |p| {
        let sg = fl.den(c.s(p)) * fl.den(c.g(p));
        let mut k = tail(c, spec, at_h, p) / sg;
        if spec.family == Family::Rmst {
            k += c.time(p) / fl.den(c.g(p));
        }
        k
    });
    base + aug
}

/// `μ − Σ_u tail(u)/{S(u) G(u−)} dM(u) + Σ_u w(u)/G(u−) dM_j(u)`, where the
/// cause-specific term appears for CIF (`w = 1`) and RMTL (`w = τ − u`).
pub(crate) fn event_form(obs: &Observation, c: &ArmCurves, spec: &EstimandSpec, fl: &mut Floor) -> f64 {
    let h = spec.horizon;
    let x = obs.time;
    let at_h = model_value(c, spec);
    let mut y = at_h;
    y -= martingale_sum(x, obs.cause, c.grid(), c.d_all(), EventFilter::AllCause, h, |p| {
        tail(c, spec, at_h, p) / (fl.den(c.s(p)) * fl.den(c.g_left(p)))
    });
    match spec.family {
        Family::Cif { cause: j } => {
            y += martingale_sum(x, obs.cause, c.grid(), c.d_cause(j), EventFilter::Cause(j), h, |p| {
                1.0 / fl.den(c.g_left(p))
            });
        }
        Family::Rmtl { cause: j } => {
            y += martingale_sum(x, obs.cause, c.grid(), c.d_cause(j), EventFilter::Cause(j), h, |p| {
                (h - c.time(p)) / fl.den(c.g_left(p))
            });
        }
        _ => {}
    }
    y
}
