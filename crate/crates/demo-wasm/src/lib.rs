//! Browser demo. Three operations are exported to JavaScript, each returning
//! JSON: a summary of a simulated dataset, the true effect traced along one
//! covariate, and transformation values under the true nuisances.

use serde::Serialize;
use survcut::nuisance::{evaluation_grid, NuisanceProvider};
use survcut::simgen::{generate, SettingId, SimConfig, TrueNuisance, N_COVARIATES};
use survcut::transforms::{cut_value, CutKind, EstimandSpec};
use wasm_bindgen::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] survcut::Error),
    #[error("{0}")]
    Input(String),
}

const MAX_N: usize = 20_000;

fn parse_setting(s: &str) -> Result<SettingId, DemoError> {
    s.parse().map_err(|_| DemoError::Input(format!("unknown setting `{s}`")))
}

fn parse_estimand(s: &str, setting: SettingId) -> Result<EstimandSpec, DemoError> {
    let spec: EstimandSpec = s.parse().map_err(|_| DemoError::Input(format!("unknown estimand `{s}`")))?;
    spec.validate(setting.n_causes())?;
    Ok(spec)
}

fn check_n(n: usize) -> Result<(), DemoError> {
    if n == 0 || n > MAX_N {
        return Err(DemoError::Input(format!("n must be between 1 and {MAX_N}")));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DatasetSummary {
    pub setting: SettingId,
    pub n: usize,
    pub treated_fraction: f64,
    /// Entry 0 counts censored subjects, entry `j` cause-`j` events.
    pub status_counts: Vec<usize>,
    /// Quartiles of the observed times.
    pub time_quartiles: [f64; 3],
    /// Share of propensities outside `[0.1, 0.9]`.
    pub extreme_propensity_fraction: f64,
}

pub fn simulate_summary(setting: &str, n: usize, seed: u64) -> Result<DatasetSummary, DemoError> {
    let setting = parse_setting(setting)?;
    check_n(n)?;
    let sim = generate(&SimConfig::new(setting, n, seed))?;
    let obs = &sim.observations;
    let mut status_counts = vec![0; setting.n_causes() + 1];
    for o in obs {
        status_counts[o.cause as usize] += 1;
    }
    let mut times: Vec<f64> = obs.iter().map(|o| o.time).collect();
    times.sort_unstable_by(f64::total_cmp);
    let q = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    let extreme = sim.truth.subjects.iter().filter(|s| !(0.1..=0.9).contains(&s.propensity)).count();
    Ok(DatasetSummary {
        setting,
        n,
        treated_fraction: obs.iter().filter(|o| o.arm == 1).count() as f64 / n as f64,
        status_counts,
        time_quartiles: [q(0.25), q(0.5), q(0.75)],
        extreme_propensity_fraction: extreme as f64 / n as f64,
    })
}

/// True effect `ψ₀(x)` at `points` values of covariate `covariate` spread
/// over `[−1, 1]`, with the other covariates at zero.
pub fn effect_curve(setting: &str, estimand: &str, covariate: usize, points: usize) -> Result<Vec<(f64, f64)>, DemoError> {
    let setting = parse_setting(setting)?;
    let spec = parse_estimand(estimand, setting)?;
    if covariate >= N_COVARIATES {
        return Err(DemoError::Input(format!("covariate must be below {N_COVARIATES}")));
    }
    if !(2..=1000).contains(&points) {
        return Err(DemoError::Input("points must be between 2 and 1000".into()));
    }
    let law = setting.law();
    (0..points)
        .map(|i| {
            let v = -1.0 + 2.0 * i as f64 / (points - 1) as f64;
            let mut x = [0.0; N_COVARIATES];
            x[covariate] = v;
            Ok((v, law.true_hte(&spec, &x)?))
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TransformRow {
    pub arm: u8,
    pub time: f64,
    pub status: u8,
    /// Transformed outcome under the true nuisances.
    pub value: f64,
    /// Its conditional mean given covariates and arm.
    pub target: f64,
}

#[derive(Debug, Serialize)]
pub struct TransformSample {
    pub estimand: String,
    pub kind: String,
    pub rows: Vec<TransformRow>,
    pub mean_value: f64,
    pub mean_target: f64,
}

/// Simulates `n` subjects and transforms each outcome with the true
/// nuisances, so that the transformed values average to the targets.
pub fn transform_sample(setting: &str, estimand: &str, kind: &str, n: usize, seed: u64) -> Result<TransformSample, DemoError> {
    let setting = parse_setting(setting)?;
    let spec = parse_estimand(estimand, setting)?;
    let kind: CutKind = kind.parse().map_err(|_| DemoError::Input(format!("unknown transformation `{kind}`")))?;
    kind.check(&spec)?;
    check_n(n)?;
    let sim = generate(&SimConfig::new(setting, n, seed))?;
    let law = sim.truth.law;
    let oracle = TrueNuisance::new(law);
    let grid = evaluation_grid(sim.observations.iter().map(|o| o.time), &[spec.horizon], 4096)?;
    let rows = sim
        .observations
        .iter()
        .map(|o| {
            let eta = oracle.nuisance_set(o, &grid)?;
            Ok(TransformRow {
                arm: o.arm,
                time: o.time,
                status: o.cause,
                value: cut_value(o, &eta, &spec, kind, o.arm)?.value,
                target: law.arm_value(&spec, o.arm, &o.covariates)?,
            })
        })
        .collect::<Result<Vec<_>, DemoError>>()?;
    let mean = |f: fn(&TransformRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(TransformSample {
        estimand: spec.label(),
        kind: kind.label().to_string(),
        mean_value: mean(|r| r.value),
        mean_target: mean(|r| r.target),
        rows,
    })
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = simulateSummary)]
pub fn simulate_summary_js(setting: &str, n: u32, seed: u32) -> Result<String, JsError> {
    to_js(simulate_summary(setting, n as usize, seed as u64))
}

#[wasm_bindgen(js_name = effectCurve)]
pub fn effect_curve_js(setting: &str, estimand: &str, covariate: u32, points: u32) -> Result<String, JsError> {
    to_js(effect_curve(setting, estimand, covariate as usize, points as usize))
}

#[wasm_bindgen(js_name = transformSample)]
pub fn transform_sample_js(setting: &str, estimand: &str, kind: &str, n: u32, seed: u32) -> Result<String, JsError> {
    to_js(transform_sample(setting, estimand, kind, n as usize, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_counts_every_subject() {
        let s = simulate_summary("s3", 500, 1).unwrap();
        assert_eq!(s.status_counts.iter().sum::<usize>(), 500);
        assert_eq!(s.status_counts.len(), 3);
        assert!(simulate_summary("s9", 10, 1).is_err());
        assert!(simulate_summary("s1", 0, 1).is_err());
    }

    #[test]
    fn curve_spans_the_interval() {
        let c = effect_curve("s1", "surv@2", 0, 5).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!((c[0].0, c[4].0), (-1.0, 1.0));
        assert!(c.iter().all(|(_, y)| y.abs() <= 1.0));
        assert!(effect_curve("s1", "cif2@2", 0, 5).is_err());
    }

    #[test]
    fn transformed_values_track_their_targets() {
        let t = transform_sample("s1", "rmst@2", "aipcw", 4000, 3).unwrap();
        assert_eq!(t.rows.len(), 4000);
        assert!((t.mean_value - t.mean_target).abs() < 0.05, "{} vs {}", t.mean_value, t.mean_target);
        assert!(transform_sample("s1", "rmst@2", "ipcw1", 10, 3).is_err());
    }
}
