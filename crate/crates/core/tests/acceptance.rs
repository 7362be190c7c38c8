//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p survcut --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use common::{conditional_sample, covering_grid, cut_values, random_eta, random_obs, splice, true_eta, Mc, DELTA, X_POINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survcut::crossfit::{run_pipeline, PipelineSpec};
use survcut::learners::LearnerKind;
use survcut::metrics::evaluate;
use survcut::nuisance::{
    fit_nuisances, predict_nuisances, EnsembleConfig, FittedEnsemble, HazardConfig, HazardLearner, Matrix, NuisanceConfig,
    NuisanceSet,
};
use survcut::simgen::{generate, lattice, observe, SettingId, SimConfig};
use survcut::survival::Observation;
use survcut::transforms::{
    aiptw_transform, cut_value, if_transform, implied_mean, minimization_target, AipcwForm, CutKind, EstimandSpec, Family,
    RaVariant,
};

const HORIZON: f64 = 2.0;
const MC_DRAWS: usize = 100_000;
const SE_BOUND: f64 = 4.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn plain_specs(h: f64, causes: u8) -> Vec<EstimandSpec> {
    let mut v = vec![EstimandSpec::survival(h), EstimandSpec::rmst(h)];
    for j in 1..=causes {
        v.push(EstimandSpec::cif(j, h));
        v.push(EstimandSpec::rmtl(j, h));
    }
    v
}

fn separable_specs(h: f64) -> Vec<EstimandSpec> {
    let mut v = Vec::new();
    for cause in 1..=1u8 {
        for arm in 0..2u8 {
            for fam in [
                Family::SeparableDirectCif { cause, competing_arm: arm },
                Family::SeparableDirectRmtl { cause, competing_arm: arm },
                Family::SeparableIndirectCif { cause, cause_arm: arm },
                Family::SeparableIndirectRmtl { cause, cause_arm: arm },
            ] {
                v.push(EstimandSpec::new(fam, h).unwrap());
            }
        }
    }
    v
}

const AIPCW_FORMS: [CutKind; 2] =
    [CutKind::Aipcw { form: AipcwForm::Event }, CutKind::Aipcw { form: AipcwForm::Censoring }];

fn kinds_for(spec: &EstimandSpec) -> Vec<CutKind> {
    if spec.is_separable() {
        // The separable transformation has a single augmented form.
        return vec![CutKind::AIPCW];
    }
    let all = [CutKind::Bj, CutKind::Ipcw1, CutKind::Ipcw2, CutKind::Ipcw, AIPCW_FORMS[0], AIPCW_FORMS[1]];
    all.into_iter().filter(|k| k.check(spec).is_ok()).collect()
}

fn uncensored_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..1000 {
        let causes = 1 + i % 2;
        let h = rng.random_range(0.3..3.0);
        let eta = random_eta(&mut rng, causes, h, false);
        let obs = random_obs(&mut rng, &eta, causes as u8, true);
        for spec in plain_specs(h, causes as u8) {
            let raw = spec.outcome(obs.time, obs.cause).unwrap();
            for kind in kinds_for(&spec) {
                let y = cut_value(&obs, &eta, &spec, kind, obs.arm).unwrap().value;
                worst = worst.max((y - raw).abs());
                checked += 1;
            }
        }
    }
    Outcome { pass: worst <= 1e-10, detail: format!("max |CUT - raw outcome| = {worst:.2e} over {checked} values") }
}

fn aipcw_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut forms, mut surv, mut rmst): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut floored = 0;
    for i in 0..1000 {
        let causes = 1 + i % 2;
        let h = rng.random_range(0.3..3.0);
        let eta = random_eta(&mut rng, causes, h, true);
        let obs = random_obs(&mut rng, &eta, causes as u8, false);
        let cut = |spec: &EstimandSpec, kind: CutKind| {
            let c = cut_value(&obs, &eta, spec, kind, obs.arm).unwrap();
            (c.value, c.floored)
        };
        for spec in plain_specs(h, causes as u8) {
            let (a, fa) = cut(&spec, AIPCW_FORMS[0]);
            let (b, fb) = cut(&spec, AIPCW_FORMS[1]);
            floored += fa + fb;
            forms = forms.max((a - b).abs());
        }
        let sum = |head: EstimandSpec, part: fn(u8, f64) -> EstimandSpec| {
            cut(&head, CutKind::AIPCW).0 + (1..=causes as u8).map(|j| cut(&part(j, h), CutKind::AIPCW).0).sum::<f64>()
        };
        surv = surv.max((sum(EstimandSpec::survival(h), EstimandSpec::cif) - 1.0).abs());
        rmst = rmst.max((sum(EstimandSpec::rmst(h), EstimandSpec::rmtl) - h).abs());
    }
    Outcome {
        pass: forms <= 1e-8 && surv <= 1e-10 && rmst <= 1e-8,
        detail: format!(
            "forms {forms:.2e} (<= 1e-8), survival adding-up {surv:.2e} (<= 1e-10), restricted-mean adding-up {rmst:.2e} (<= 1e-8), {floored} floored"
        ),
    }
}

fn aiptw_of_aipcw() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let causes = 1 + i % 2;
        let h = rng.random_range(0.3..3.0);
        let eta = random_eta(&mut rng, causes, h, true);
        let obs = random_obs(&mut rng, &eta, causes as u8, false);
        for spec in plain_specs(h, causes as u8).into_iter().take(4) {
            let y = cut_value(&obs, &eta, &spec, CutKind::AIPCW, obs.arm).unwrap().value;
            let mu0 = implied_mean(&eta, &spec, 0).unwrap();
            let mu1 = implied_mean(&eta, &spec, 1).unwrap();
            let lhs = aiptw_transform(y, obs.arm, mu0, mu1, eta.pi1);
            let rhs = if_transform(&obs, &eta, &spec).unwrap().value;
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Outcome { pass: worst <= 1e-8, detail: format!("max |AIPTW(AIPCW) - IF| = {worst:.2e} over 4 families") }
}

/// Running tally of standardized Monte Carlo errors.
#[derive(Default)]
struct Tally {
    checks: usize,
    worst: f64,
    label: String,
    failures: Vec<String>,
    floored: u64,
}

impl Tally {
    fn add(&mut self, z: f64, label: impl FnOnce() -> String) {
        self.checks += 1;
        if z > SE_BOUND || z > self.worst || self.checks == 1 {
            let l = label();
            if z > SE_BOUND {
                self.failures.push(format!("{l} at {z:.1} SE"));
            }
            if z > self.worst || self.checks == 1 {
                self.worst = z;
                self.label = l;
            }
        }
    }

    fn outcome(&self) -> Outcome {
        let mut detail = format!(
            "{} checks, worst {:.2} SE ({}), {} floored denominators",
            self.checks, self.worst, self.label, self.floored
        );
        if !self.failures.is_empty() {
            let shown: Vec<&str> = self.failures.iter().take(6).map(String::as_str).collect();
            detail += &format!("; {} beyond {SE_BOUND} SE: {}", self.failures.len(), shown.join(", "));
        }
        Outcome { pass: self.checks > 0 && self.failures.is_empty(), detail }
    }
}

fn unbiasedness() -> Outcome {
    let mut tally = Tally::default();
    for (setting, seed_base) in [(SettingId::S1, 100u64), (SettingId::S3, 200)] {
        let law = setting.law();
        let mut specs = plain_specs(HORIZON, law.n_causes() as u8);
        if law.n_causes() == 2 {
            specs.extend(separable_specs(HORIZON));
        }
        for (p, x) in X_POINTS.iter().enumerate() {
            for arm in 0..2u8 {
                let data = conditional_sample(&law, x, arm, MC_DRAWS, seed_base + 10 * p as u64 + arm as u64, DELTA);
                let eta = true_eta(&law, x, &covering_grid(HORIZON, &[&data]));
                for spec in &specs {
                    let target = implied_mean(&eta, spec, arm).unwrap();
                    for kind in kinds_for(spec) {
                        let mc = Mc::of(&cut_values(&data, &eta, spec, kind, &mut tally.floored));
                        tally.add(mc.z(target), || format!("{setting} x#{p} arm {arm} {} {}", spec.label(), kind.label()));
                    }
                }
            }
        }
    }
    tally.outcome()
}

/// Covariate-free Nelson–Aalen nuisances fitted on a large lattice sample.
fn nelson_aalen(setting: SettingId) -> survcut::nuisance::NuisanceModels {
    let mut sim = SimConfig::new(setting, 20_000, 55);
    sim.lattice = Some(DELTA);
    let data = generate(&sim).unwrap();
    let config = NuisanceConfig {
        hazard: HazardConfig { learner: HazardLearner::NelsonAalen, ..HazardConfig::default() },
        ..NuisanceConfig::default()
    };
    fit_nuisances(&data.observations, setting.n_causes(), &config, None).unwrap()
}

fn double_robustness() -> Outcome {
    let mut tally = Tally::default();
    let mut bias_when_both_wrong: f64 = 0.0;
    for (setting, seed_base) in [(SettingId::S1, 300u64), (SettingId::S3, 400)] {
        let law = setting.law();
        let na = nelson_aalen(setting);
        let specs = plain_specs(HORIZON, law.n_causes() as u8);
        for (p, x) in X_POINTS.iter().enumerate() {
            let samples: Vec<Vec<Observation>> = (0..2u8)
                .map(|arm| conditional_sample(&law, x, arm, MC_DRAWS, seed_base + 10 * p as u64 + arm as u64, DELTA))
                .collect();
            let grid = covering_grid(HORIZON, &[&samples[0], &samples[1]]);
            let truth = true_eta(&law, x, &grid);
            let probe = Observation::new(0, x.to_vec(), 0, 1.0, 0).unwrap();
            let wrong = predict_nuisances(&na, &probe, &grid).unwrap();
            let mix = |events: &NuisanceSet, cens: &NuisanceSet| {
                NuisanceSet::new(0, None, splice(events.arm(0), cens.arm(0)), splice(events.arm(1), cens.arm(1)), truth.pi1)
                    .unwrap()
            };
            let variants = [("censoring misspecified", mix(&truth, &wrong)), ("events misspecified", mix(&wrong, &truth))];
            for arm in 0..2u8 {
                let data = &samples[arm as usize];
                for spec in &specs {
                    let target = implied_mean(&truth, spec, arm).unwrap();
                    for (what, eta) in &variants {
                        for kind in AIPCW_FORMS {
                            let mc = Mc::of(&cut_values(data, eta, spec, kind, &mut tally.floored));
                            tally.add(mc.z(target), || {
                                format!("{setting} x#{p} arm {arm} {} {} {what}", spec.label(), kind.label())
                            });
                        }
                    }
                    let both = Mc::of(&cut_values(data, &wrong, spec, CutKind::AIPCW, &mut 0));
                    bias_when_both_wrong = bias_when_both_wrong.max(both.z(target));
                }
            }
        }
    }
    let mut out = tally.outcome();
    out.detail += &format!("; both sides wrong reaches {bias_when_both_wrong:.1} SE");
    out
}

/// Cell-wise population minimizer `Σ w y / Σ w` with a linearized SE.
fn weighted_mean(w: &[f64], y: &[f64]) -> Mc {
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ss: f64 = w.iter().zip(y).map(|(a, b)| (a * (b - mean)).powi(2)).sum();
    Mc { mean, se: ss.sqrt() / sw }
}

fn minimizer() -> Outcome {
    let probe_grid = lattice(DELTA, HORIZON).unwrap();
    let cells = &X_POINTS[..4];
    let per_cell = 50_000;
    let mut tally = Tally::default();
    for (setting, spec) in [(SettingId::S1, EstimandSpec::survival(HORIZON)), (SettingId::S3, EstimandSpec::cif(1, HORIZON))] {
        let law = setting.law();
        for (c, x) in cells.iter().enumerate() {
            let pi1 = true_eta(&law, x, &probe_grid).pi1;
            let mut rng = ChaCha8Rng::seed_from_u64(500 + c as u64);
            let data: Vec<Observation> = (0..per_cell as u64)
                .map(|id| {
                    let a = u8::from(rng.random::<f64>() < pi1);
                    let cf = law.draw(x, &mut rng);
                    let (t, j) = observe(&cf, a, Some(DELTA));
                    Observation::new(id, x.to_vec(), a, t, j).unwrap()
                })
                .collect();
            let eta = true_eta(&law, x, &covering_grid(HORIZON, &[&data]));
            let y = cut_values(&data, &eta, &spec, CutKind::AIPCW, &mut tally.floored);
            let mu = [implied_mean(&eta, &spec, 0).unwrap(), implied_mean(&eta, &spec, 1).unwrap()];
            let psi0 = mu[1] - mu[0];
            let by_arm = |a: u8, f: &dyn Fn(usize) -> f64| {
                let v: Vec<f64> = (0..data.len()).filter(|&i| data[i].arm == a).map(f).collect();
                Mc::of(&v)
            };
            for kind in LearnerKind::ALL {
                let est = match kind {
                    LearnerKind::S | LearnerKind::T => by_arm(1, &|i| y[i]).minus(by_arm(0, &|i| y[i])),
                    LearnerKind::X => {
                        let t1 = by_arm(1, &|i| y[i] - mu[0]);
                        let t0 = by_arm(0, &|i| mu[1] - y[i]);
                        Mc {
                            mean: pi1 * t0.mean + (1.0 - pi1) * t1.mean,
                            se: (pi1 * t0.se).hypot((1.0 - pi1) * t1.se),
                        }
                    }
                    _ => {
                        let (mut w, mut ys) = (Vec::new(), Vec::new());
                        for (i, o) in data.iter().enumerate() {
                            let yi = if kind == LearnerKind::If { if_transform(o, &eta, &spec).unwrap().value } else { y[i] };
                            let t = minimization_target(kind, yi, o, mu[0], mu[1], pi1, RaVariant::CrossArm).unwrap();
                            w.push(t.weight);
                            ys.push(t.outcome);
                        }
                        weighted_mean(&w, &ys)
                    }
                };
                tally.add(est.z(psi0), || format!("{setting} cell {c} {} learner", kind.name()));
            }
        }
    }
    tally.outcome()
}

fn separable_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut analytic: f64 = 0.0;
    for setting in [SettingId::S3, SettingId::S4] {
        let law = setting.law();
        for _ in 0..500 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            for (direct, indirect, total) in decompositions(HORIZON) {
                let r = law.true_hte(&direct, &x).unwrap() + law.true_hte(&indirect, &x).unwrap()
                    - law.true_hte(&total, &x).unwrap();
                analytic = analytic.max(r.abs());
            }
        }
    }
    let law = SettingId::S3.law();
    let mut tally = Tally::default();
    for (p, x) in X_POINTS[..3].iter().enumerate() {
        let data: Vec<Vec<Observation>> =
            (0..2u8).map(|a| conditional_sample(&law, x, a, MC_DRAWS, 600 + 10 * p as u64 + a as u64, DELTA)).collect();
        let eta = true_eta(&law, x, &covering_grid(HORIZON, &[&data[0], &data[1]]));
        for (direct, indirect, total) in decompositions(HORIZON) {
            let arm_mean = |a: usize, floored: &mut u64| {
                let d = cut_values(&data[a], &eta, &direct, CutKind::AIPCW, floored);
                let i = cut_values(&data[a], &eta, &indirect, CutKind::AIPCW, floored);
                let t = cut_values(&data[a], &eta, &total, CutKind::AIPCW, floored);
                let r: Vec<f64> = (0..d.len()).map(|k| d[k] + i[k] - t[k]).collect();
                Mc::of(&r)
            };
            let resid = arm_mean(1, &mut tally.floored).minus(arm_mean(0, &mut tally.floored));
            tally.add(resid.z(0.0), || format!("x#{p} {}", direct.label()));
        }
    }
    let mc = tally.outcome();
    Outcome {
        pass: analytic <= 1e-10 && mc.pass,
        detail: format!("analytic residual {analytic:.2e} (<= 1e-10); Monte Carlo: {}", mc.detail),
    }
}

/// `(direct at a*, indirect at a_j = 1 − a*, total)` triples.
fn decompositions(h: f64) -> Vec<(EstimandSpec, EstimandSpec, EstimandSpec)> {
    let mut v = Vec::new();
    for cause in 1..=2u8 {
        for a_star in 0..2u8 {
            let mk = |f| EstimandSpec::new(f, h).unwrap();
            v.push((
                mk(Family::SeparableDirectCif { cause, competing_arm: a_star }),
                mk(Family::SeparableIndirectCif { cause, cause_arm: 1 - a_star }),
                EstimandSpec::cif(cause, h),
            ));
            v.push((
                mk(Family::SeparableDirectRmtl { cause, competing_arm: a_star }),
                mk(Family::SeparableIndirectRmtl { cause, cause_arm: 1 - a_star }),
                EstimandSpec::rmtl(cause, h),
            ));
        }
    }
    v
}

fn ensemble_selector() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = f64::NEG_INFINITY;
    for task in 0..20u64 {
        let n = rng.random_range(150..400);
        let p = rng.random_range(1..=6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let kind = task % 4;
        let noise = rng.random_range(0.05..1.0);
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let signal = match kind {
                    0 => 0.0,
                    1 => 2.0 * r[0] - r[p - 1],
                    2 => (3.0 * r[0]).sin() + f64::from(u8::from(r[p - 1] > 0.0)),
                    _ => r[0] * r[p - 1] + r[0].powi(2),
                };
                signal + noise * rng.random_range(-1.0..1.0)
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let config = EnsembleConfig { seed: task, ..EnsembleConfig::default() };
        let fit = FittedEnsemble::fit(&x, &y, &w, &config).unwrap();
        let best = fit.candidate_cv_loss.iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.max(fit.ensemble_cv_loss - best);
    }
    Outcome {
        pass: worst <= 1e-8,
        detail: format!("max (ensemble CV loss - best candidate CV loss) = {worst:.2e} over 20 tasks"),
    }
}

/// Median PEHE per learner over replications, plus the number of audit
/// violations across every run.
fn bench(setting: SettingId, reps: u64) -> (Vec<(LearnerKind, f64)>, usize, usize) {
    let spec = PipelineSpec::default();
    let estimand = spec.estimands[0];
    let mut pehe: Vec<Vec<f64>> = vec![Vec::new(); spec.learners.len()];
    let (mut violations, mut runs) = (0, 0);
    for rep in 0..reps {
        let data = generate(&SimConfig::new(setting, 2000, 1000 + rep)).unwrap();
        let run_spec = PipelineSpec { seed: rep, ..spec.clone() };
        let out = run_pipeline(&data.observations, &run_spec).unwrap();
        violations += out.data.audit().violations.len();
        runs += 1;
        let psi0 = data.truth.psi(&estimand, &data.observations).unwrap();
        for (k, l) in spec.learners.iter().enumerate() {
            let fit = out.fit(&estimand, *l).unwrap();
            let psi: Vec<f64> = data.observations.iter().map(|o| fit.estimate.predict(&o.covariates).unwrap()).collect();
            pehe[k].push(evaluate(&psi, &psi0, None).unwrap().pehe);
        }
    }
    let medians = spec
        .learners
        .iter()
        .zip(pehe)
        .map(|(l, mut v)| {
            v.sort_unstable_by(f64::total_cmp);
            let m = v.len();
            (*l, if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
        })
        .collect();
    (medians, violations, runs)
}

fn fmt_medians(m: &[(LearnerKind, f64)]) -> String {
    m.iter().map(|(l, v)| format!("{}={v:.4}", l.name())).collect::<Vec<_>>().join(" ")
}

fn main() {
    type Check = (usize, &'static str, Option<Duration>, fn() -> Outcome);
    let checks: [Check; 8] = [
        (1, "uncensored reduction", Some(Duration::from_secs(1)), uncensored_reduction),
        (2, "augmented identities", Some(Duration::from_secs(10)), aipcw_identities),
        (3, "AIPTW of AIPCW equals IF", Some(Duration::from_secs(10)), aiptw_of_aipcw),
        (4, "CUT unbiasedness", Some(Duration::from_secs(300)), unbiasedness),
        (5, "double robustness", Some(Duration::from_secs(300)), double_robustness),
        (6, "cell-wise minimizer", Some(Duration::from_secs(300)), minimizer),
        (7, "separable decomposition", None, separable_decomposition),
        (8, "ensemble selector", None, ensemble_selector),
    ];
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, limit: Option<Duration>, elapsed: Duration, out: Outcome| {
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = out.pass && in_time;
        let budget = limit.map_or(String::new(), |l| format!(" of {}s", l.as_secs()));
        println!(
            "criterion {id} [{name}]: {} ({}; {:.1}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    };
    for (id, name, limit, f) in checks {
        let start = Instant::now();
        let out = f();
        report(id, name, limit, start.elapsed(), out);
    }

    let start = Instant::now();
    let (s1, v1, r1) = bench(SettingId::S1, 10);
    let (s2, v2, r2) = bench(SettingId::S2, 10);
    let elapsed = start.elapsed();
    let ipw = [LearnerKind::Iptw, LearnerKind::Mc];
    let others: Vec<f64> = s1.iter().filter(|(l, _)| !ipw.contains(l)).map(|e| e.1).collect();
    let best = others.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = others.iter().copied().fold(0.0, f64::max) / best;
    let med = |m: &[(LearnerKind, f64)], l: LearnerKind| m.iter().find(|e| e.0 == l).unwrap().1;
    let contrast = ipw.iter().all(|&bad| {
        [LearnerKind::Ra, LearnerKind::Aiptw, LearnerKind::R].iter().all(|&good| med(&s2, bad) > med(&s2, good))
    });
    report(
        9,
        "overlap contrast at desk scale",
        Some(Duration::from_secs(1800)),
        elapsed,
        Outcome {
            pass: spread <= 2.0 && contrast,
            detail: format!(
                "(a) setting 1 max/min median PEHE excluding IPTW and MC = {spread:.2} (<= 2); (b) setting 2 IPTW and MC above RA, AIPTW, R: {contrast}; s1 [{}]; s2 [{}]",
                fmt_medians(&s1),
                fmt_medians(&s2)
            ),
        },
    );
    report(
        10,
        "fold-hygiene audit",
        None,
        Duration::ZERO,
        Outcome { pass: v1 + v2 == 0, detail: format!("{} violations over {} pipeline runs", v1 + v2, r1 + r2) },
    );
    if failed.is_empty() {
        println!("all criteria pass");
    } else {
        println!("failed criteria: {failed:?}");
        // Failures are reported, not fatal, unless asked for.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
