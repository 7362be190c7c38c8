//! Separable direct and indirect effects: hybrid-arm curves that combine the
//! cause-`j` hazard of one arm with the competing hazard of the other.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nuisance::{ArmCurves, NuisanceSet};
use crate::survival::{martingale_sum, EventFilter, Observation, Point};

use super::cut::{event_form, rmtl_tail};
use super::{Cut, EstimandSpec, Family, Floor};

/// Which separable functional a spec refers to.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Sep {
    pub cause: u8,
    pub rmtl: bool,
    pub horizon: f64,
}

impl Sep {
    pub fn of(spec: &EstimandSpec) -> Option<Self> {
        let (cause, rmtl) = match spec.family {
            Family::SeparableDirectCif { cause, .. } | Family::SeparableIndirectCif { cause, .. } => (cause, false),
            Family::SeparableDirectRmtl { cause, .. } | Family::SeparableIndirectRmtl { cause, .. } => (cause, true),
            _ => return None,
        };
        Some(Self { cause, rmtl, horizon: spec.horizon })
    }

    /// The matching plain family evaluated on one arm.
    fn plain(&self) -> EstimandSpec {
        if self.rmtl {
            EstimandSpec::rmtl(self.cause, self.horizon)
        } else {
            EstimandSpec::cif(self.cause, self.horizon)
        }
    }

    /// `tail(u)` for cause index `j` of `c`, given `at_h = self.value(c, j)`.
    fn tail(&self, c: &ArmCurves, j: u8, at_h: f64, p: Point) -> f64 {
        if self.rmtl {
            rmtl_tail(c, j, self.horizon, at_h, p)
        } else {
            at_h - c.f(j, p)
        }
    }

    /// Weight of the cause-`j` counting term: `1` or `τ − u`.
    fn w(&self, c: &ArmCurves, p: Point) -> f64 {
        if self.rmtl {
            self.horizon - c.time(p)
        } else {
            1.0
        }
    }

    fn value(&self, c: &ArmCurves, j: u8) -> f64 {
        if self.rmtl {
            c.rmtl_at(j, self.horizon)
        } else {
            c.f_at(j, self.horizon)
        }
    }
}

/// Number of leading knots that can influence a functional at `horizon`:
/// every knot `≤ horizon` plus one, so the prefix is never empty.
fn span(grid: &[f64], horizon: f64) -> usize {
    (grid.partition_point(|&u| u <= horizon) + 1).min(grid.len())
}

/// Increments of every cause other than `j` over the first `len` knots.
fn competing_increments(c: &ArmCurves, j: u8, len: usize) -> Vec<f64> {
    c.d_all()[..len].iter().zip(c.d_cause(j)).map(|(a, b)| (a - b).max(0.0)).collect()
}

/// Curves with cause 1 = cause `j` of arm `b` and cause 2 = the competing
/// causes of arm `c`, on the first `len` knots. The competing increment is
/// capped so that the all-cause increment stays within `[0, 1]`.
pub(crate) fn hybrid_curves(eta: &NuisanceSet, j: u8, b: u8, c: u8, len: usize) -> Result<ArmCurves> {
    let cb = eta.arm(b);
    let cc = eta.arm(c);
    let dj = cb.d_cause(j)[..len].to_vec();
    let dbar: Vec<f64> = competing_increments(cc, j, len).iter().zip(&dj).map(|(x, y)| x.min(1.0 - y)).collect();
    let grid = if len == cb.grid().len() { cb.grid().clone() } else { Arc::from(&cb.grid()[..len]) };
    ArmCurves::new(grid, vec![dj, dbar], vec![0.0; len])
}

/// `F_j(h | a_j = b, a_ĵ = c)` or `RMTL_j(h | b, c)` for a separable spec.
pub fn hybrid_value(eta: &NuisanceSet, spec: &EstimandSpec, b: u8, c: u8) -> Result<f64> {
    let sep = Sep::of(spec).ok_or_else(|| Error::Incompatible(format!("{} is not separable", spec.label())))?;
    spec.validate(eta.n_causes())?;
    if b == c {
        return Ok(sep.value(eta.arm(b), sep.cause));
    }
    Ok(sep.value(&hybrid_curves(eta, sep.cause, b, c, span(eta.arm(b).grid(), sep.horizon))?, 1))
}

/// Product-limit survival of the competing causes over the first `len` knots.
fn competing_survival(c: &ArmCurves, j: u8, len: usize) -> Vec<f64> {
    let mut s = 1.0;
    competing_increments(c, j, len)
        .into_iter()
        .map(|d| {
            s *= 1.0 - d;
            s
        })
        .collect()
}

fn at(values: &[f64], grid: &[f64], p: Point) -> f64 {
    let k = match p {
        Point::Grid(k) => k + 1,
        Point::Off(t) => grid.partition_point(|&u| u <= t),
    };
    if k == 0 {
        1.0
    } else {
        values[k - 1]
    }
}

/// Martingale pieces evaluated on the curves of arm `a` for an observation
/// in that arm.
pub(crate) struct Pieces<'a> {
    obs: &'a Observation,
    eta: &'a NuisanceSet,
    sep: Sep,
}

impl<'a> Pieces<'a> {
    pub fn new(obs: &'a Observation, eta: &'a NuisanceSet, sep: Sep) -> Self {
        Self { obs, eta, sep }
    }

    /// `Σ ρ(u) w(u)/G(u−) dM_j − Σ ρ(u) tail_a(u)/{S(u) G(u−)} dM` on arm `a`,
    /// with `ρ = r` (`direct`) or `ρ = 1 − r`, where
    /// `r(u) = S_ĵ(u | a*) / S_ĵ(u | a)`.
    pub fn own(&self, a: u8, a_star: u8, direct: bool, fl: &mut Floor) -> f64 {
        let (sep, obs) = (self.sep, self.obs);
        let c = self.eta.arm(a);
        let grid = c.grid();
        let h = sep.horizon;
        let len = span(grid, h);
        let s_own = competing_survival(c, sep.cause, len);
        let s_star = if a_star == a { s_own.clone() } else { competing_survival(self.eta.arm(a_star), sep.cause, len) };
        let ratio = |p: Point, fl: &mut Floor| {
            let r = at(&s_star, grid, p) / fl.den(at(&s_own, grid, p));
            if direct {
                r
            } else {
                1.0 - r
            }
        };
        let j = sep.cause;
        let mj = martingale_sum(obs.time, obs.cause, grid, c.d_cause(j), EventFilter::Cause(j), h, |p| {
            ratio(p, fl) * sep.w(c, p) / fl.den(c.g_left(p))
        });
        let at_h = sep.value(c, j);
        let m = martingale_sum(obs.time, obs.cause, grid, c.d_all(), EventFilter::AllCause, h, |p| {
            ratio(p, fl) * sep.tail(c, j, at_h, p) / (fl.den(c.s(p)) * fl.den(c.g_left(p)))
        });
        mj - m
    }

    /// `Σ tail_h(u)/{S(u) G(u−)} dM_ĵ(u)` on arm `a`, where `tail_h` comes from
    /// the hybrid curves `(b, c)`.
    pub fn competing(&self, a: u8, b: u8, c: u8, fl: &mut Floor) -> Result<f64> {
        let (sep, obs) = (self.sep, self.obs);
        let own = self.eta.arm(a);
        let len = span(own.grid(), sep.horizon);
        let built;
        let hyb = if b == c {
            self.eta.arm(b)
        } else {
            built = hybrid_curves(self.eta, sep.cause, b, c, len)?;
            &built
        };
        let jh = if b == c { sep.cause } else { 1 };
        let d = competing_increments(own, sep.cause, len);
        let at_h = sep.value(hyb, jh);
        Ok(martingale_sum(obs.time, obs.cause, own.grid(), &d, EventFilter::AllExcept(sep.cause), sep.horizon, |p| {
            sep.tail(hyb, jh, at_h, p) / (fl.den(own.s(p)) * fl.den(own.g_left(p)))
        }))
    }
}

/// Separable CUT computed from the arm-`arm` curves.
///
/// Direct family with competing arm `a*`: the target is `(a_j, a_ĵ) = (arm, a*)`.
/// When `a* = arm` this is the ordinary CIF/RMTL CUT; otherwise
/// `V_h + Σ r w/G− dM_j − Σ r tail_a/(S G−) dM + Σ tail_h/(S G−) dM_ĵ`.
///
/// Indirect family with cause arm `b` (so `a* = 1 − b`): the target is
/// `(b, arm)` and the CUT is
/// `V + Σ (1−r) w/G− dM_j − Σ (1−r) tail_a/(S G−) dM − Σ tail_{h*}/(S G−) dM_ĵ`
/// with `h* = (1 − a*, a*)`.
pub fn cut_separable(obs: &Observation, eta: &NuisanceSet, spec: &EstimandSpec, arm: u8) -> Result<Cut> {
    let sep = Sep::of(spec).ok_or_else(|| Error::Incompatible(format!("{} is not separable", spec.label())))?;
    spec.validate(eta.n_causes())?;
    if arm > 1 {
        return Err(Error::InvalidArgument(format!("arm must be 0 or 1, got {arm}")));
    }
    let mut fl = Floor::default();
    let pieces = Pieces::new(obs, eta, sep);
    let value = match spec.family {
        Family::SeparableDirectCif { competing_arm, .. } | Family::SeparableDirectRmtl { competing_arm, .. } => {
            let a_star = competing_arm;
            if a_star == arm {
                event_form(obs, eta.arm(arm), &sep.plain(), &mut fl)
            } else {
                hybrid_value(eta, spec, arm, a_star)?
                    + pieces.own(arm, a_star, true, &mut fl)
                    + pieces.competing(arm, arm, a_star, &mut fl)?
            }
        }
        Family::SeparableIndirectCif { cause_arm, .. } | Family::SeparableIndirectRmtl { cause_arm, .. } => {
            let a_star = 1 - cause_arm;
            hybrid_value(eta, spec, cause_arm, arm)?
                + pieces.own(arm, a_star, false, &mut fl)
                - pieces.competing(arm, cause_arm, a_star, &mut fl)?
        }
        _ => unreachable!(),
    };
    Ok(Cut { value, floored: fl.count })
}

/// Influence-function transformation of a separable contrast.
pub(crate) fn separable_if(obs: &Observation, eta: &NuisanceSet, spec: &EstimandSpec) -> Result<Cut> {
    let sep = Sep::of(spec).ok_or_else(|| Error::Incompatible(format!("{} is not separable", spec.label())))?;
    spec.validate(eta.n_causes())?;
    let mut fl = Floor::default();
    let pieces = Pieces::new(obs, eta, sep);
    let own_arm = obs.arm;
    let ind = |arm: u8| f64::from(u8::from(own_arm == arm));
    let mut phi = [0.0; 2];
    for (a, slot) in phi.iter_mut().enumerate() {
        let a = a as u8;
        *slot = match spec.family {
            Family::SeparableDirectCif { competing_arm, .. } | Family::SeparableDirectRmtl { competing_arm, .. } => {
                let a_star = competing_arm;
                let mut v = hybrid_value(eta, spec, a, a_star)?;
                if own_arm == a {
                    v += pieces.own(a, a_star, true, &mut fl) / eta.pi(a);
                }
                if a != a_star {
                    let coef = ind(a) / eta.pi(a) - ind(a_star) / eta.pi(a_star);
                    if coef != 0.0 {
                        v += coef * pieces.competing(own_arm, 1 - a_star, a_star, &mut fl)?;
                    }
                }
                v
            }
            Family::SeparableIndirectCif { cause_arm, .. } | Family::SeparableIndirectRmtl { cause_arm, .. } => {
                let a_star = 1 - cause_arm;
                let mut v = hybrid_value(eta, spec, cause_arm, a)?;
                if own_arm == a {
                    v += pieces.own(a, a_star, false, &mut fl) / eta.pi(a);
                }
                if a != a_star {
                    let coef = ind(a) / eta.pi(a) - ind(a_star) / eta.pi(a_star);
                    if coef != 0.0 {
                        v -= coef * pieces.competing(own_arm, cause_arm, a_star, &mut fl)?;
                    }
                }
                v
            }
            _ => unreachable!(),
        };
    }
    Ok(Cut { value: phi[1] - phi[0], floored: fl.count })
}
