use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use survcut::crossfit::{key, run_evaluation_pipeline_with, run_pipeline_with, NuisanceSource, PipelineOutput};
use survcut::learners::{HteSummary, LearnerKind};
use survcut::metrics::{evaluate, overlap_weights, shape_diagnostics, Level};
use survcut::simgen::{generate, lattice, write_dataset_csv, write_truth_csv, Law, SettingId, SimConfig, SimData, TrueNuisance};
use survcut::survival::Observation;
use survcut::transforms::{CutKind, EstimandSpec};

use crate::config::{Evaluation, ExperimentConfig, NuisanceMode};
use crate::error::CliError;
use crate::io::{csv_bytes, read_dataset, sha256_hex, OutDir};
use crate::summary::{box_stats, spread, BoxStats, Spread};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn setting_code(s: SettingId) -> u64 {
    SettingId::ALL.iter().position(|&t| t == s).unwrap_or(0) as u64
}

/// Seed of the simulated dataset for one replication.
pub fn data_seed(seed: u64, setting: SettingId, rep: usize) -> u64 {
    key(&[seed, setting_code(setting), rep as u64, 0])
}

fn pipeline_seed(seed: u64, setting: SettingId, rep: usize) -> u64 {
    key(&[seed, setting_code(setting), rep as u64, 1])
}

/// SHA-256 of the little-endian coefficient vector of a setting's law.
pub fn coefficient_hash(setting: SettingId) -> String {
    let bytes: Vec<u8> = setting.law().coefficients().iter().flat_map(|c| c.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

fn simulate_one(cfg: &ExperimentConfig, setting: SettingId, rep: usize) -> Result<SimData, CliError> {
    let sim = SimConfig {
        setting,
        n: cfg.n,
        seed: data_seed(cfg.seed, setting, rep),
        covariates: cfg.covariates,
        lattice: cfg.lattice,
    };
    Ok(generate(&sim)?)
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(SettingId, usize)> {
    cfg.settings.iter().flat_map(|&s| (0..cfg.replications).map(move |r| (s, r))).collect()
}

fn treated_fraction(data: &[Observation]) -> f64 {
    data.iter().filter(|o| o.arm == 1).count() as f64 / data.len() as f64
}

#[derive(Serialize)]
struct SettingRecord {
    setting: SettingId,
    coefficient_hash: String,
}

fn setting_records(cfg: &ExperimentConfig) -> Vec<SettingRecord> {
    cfg.settings.iter().map(|&s| SettingRecord { setting: s, coefficient_hash: coefficient_hash(s) }).collect()
}

#[derive(Serialize)]
struct DatasetRecord {
    setting: SettingId,
    replication: usize,
    seed: u64,
    n: usize,
    treated_fraction: f64,
    event_fraction: f64,
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    settings: Vec<SettingRecord>,
    datasets: Vec<DatasetRecord>,
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let runs: Vec<(SettingId, usize, SimData)> = jobs(cfg)
        .into_par_iter()
        .map(|(s, r)| simulate_one(cfg, s, r).map(|d| (s, r, d)))
        .collect::<Result<_, _>>()?;
    let mut dir = OutDir::create(out)?;
    let mut datasets = Vec::new();
    for (s, r, d) in &runs {
        let mut data = Vec::new();
        write_dataset_csv(&d.observations, &mut data).map_err(|e| CliError::io(out, e))?;
        dir.write(&format!("data_{s}_r{r}.csv"), &data)?;
        let mut truth = Vec::new();
        write_truth_csv(&d.truth, &d.observations, &cfg.estimands, &mut truth)?;
        dir.write(&format!("truth_{s}_r{r}.csv"), &truth)?;
        datasets.push(DatasetRecord {
            setting: *s,
            replication: *r,
            seed: data_seed(cfg.seed, *s, *r),
            n: d.observations.len(),
            treated_fraction: treated_fraction(&d.observations),
            event_fraction: d.observations.iter().filter(|o| o.cause > 0).count() as f64 / d.observations.len() as f64,
        });
    }
    dir.finish(&SimulateManifest {
        command: "simulate",
        version: VERSION,
        config: cfg,
        settings: setting_records(cfg),
        datasets,
    })
}

fn run_cut(
    cfg: &ExperimentConfig,
    data: &[Observation],
    kind: CutKind,
    seed: u64,
    law: Option<&Law>,
) -> Result<PipelineOutput, CliError> {
    let spec = cfg.pipeline(kind, seed);
    let truth = law.map(|l| {
        let horizon = cfg.estimands.iter().map(|e| e.horizon).fold(0.0, f64::max);
        let grid = cfg.lattice.map(|d| lattice(d, horizon)).transpose();
        grid.map(|g| TrueNuisance { law: *l, grid: g })
    });
    let truth = truth.transpose()?;
    let source = match (&truth, cfg.nuisances) {
        (Some(t), NuisanceMode::True) => NuisanceSource::Known(t),
        _ => NuisanceSource::Fitted,
    };
    Ok(match cfg.evaluation {
        Evaluation::Final => run_pipeline_with(data, &spec, source)?,
        Evaluation::CrossFit => run_evaluation_pipeline_with(data, &spec, source)?,
    })
}

/// `ψ̂(X_i)` for every subject, in data order.
fn predictions(
    cfg: &ExperimentConfig,
    out: &PipelineOutput,
    data: &[Observation],
    e: &EstimandSpec,
    l: LearnerKind,
) -> Result<Vec<f64>, CliError> {
    let missing = || CliError::Runtime(format!("no predictions for learner {l} on {}", e.label()));
    match cfg.evaluation {
        Evaluation::Final => {
            let fit = out.fit(e, l).ok_or_else(missing)?;
            Ok(data.iter().map(|o| fit.estimate.predict(&o.covariates)).collect::<Result<_, _>>()?)
        }
        Evaluation::CrossFit => Ok(out.out_of_fold(e, l).ok_or_else(missing)?.to_vec()),
    }
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: u64,
    cut: &'a str,
    estimand: &'a str,
    learner: &'a str,
    psi: f64,
}

#[derive(Serialize)]
struct FitDiagnostics {
    estimand: String,
    learner: LearnerKind,
    floored_fraction: f64,
    summary: Option<HteSummary>,
}

#[derive(Serialize)]
struct AuditRecord {
    checked: usize,
    violations: usize,
}

#[derive(Serialize)]
struct RunDiagnostics {
    cut: &'static str,
    n: usize,
    n_causes: usize,
    warnings: Vec<String>,
    audit: AuditRecord,
    fits: Vec<FitDiagnostics>,
}

#[derive(Serialize)]
struct FitManifest<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    source: String,
    pipeline_seed: u64,
    settings: Vec<SettingRecord>,
}

pub fn fit(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let (data, law, source) = match &cfg.data {
        Some(path) => (read_dataset(path)?, None, path.display().to_string()),
        None => {
            let s = cfg.settings[0];
            let d = simulate_one(cfg, s, 0)?;
            (d.observations, Some(d.truth.law), format!("simulated {s}, seed {}", data_seed(cfg.seed, s, 0)))
        }
    };
    let setting = cfg.settings[0];
    let seed = pipeline_seed(cfg.seed, setting, 0);
    let runs: Vec<PipelineOutput> =
        cfg.cut_kinds.par_iter().map(|&k| run_cut(cfg, &data, k, seed, law.as_ref())).collect::<Result<_, _>>()?;
    let mut dir = OutDir::create(out)?;
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let mut violations = 0;
    let labels: Vec<String> = cfg.estimands.iter().map(|e| e.label()).collect();
    for (kind, run) in cfg.cut_kinds.iter().zip(&runs) {
        let mut fits = Vec::new();
        for (e, label) in cfg.estimands.iter().zip(&labels) {
            for &l in &cfg.learners {
                let psi = predictions(cfg, run, &data, e, l)?;
                rows.extend(data.iter().zip(&psi).map(|(o, &psi)| PredictionRow {
                    id: o.id,
                    cut: kind.label(),
                    estimand: label,
                    learner: l.name(),
                    psi,
                }));
                let summary = run.fit(e, l).map(|f| f.estimate.summary());
                fits.push(FitDiagnostics {
                    estimand: label.clone(),
                    learner: l,
                    floored_fraction: summary.as_ref().map_or(f64::NAN, |s| s.diagnostics.floored_fraction()),
                    summary,
                });
            }
        }
        let audit = run.data.audit();
        violations += audit.violations.len();
        diagnostics.push(RunDiagnostics {
            cut: kind.label(),
            n: data.len(),
            n_causes: run.n_causes,
            warnings: run.warnings.clone(),
            audit: AuditRecord { checked: audit.checked, violations: audit.violations.len() },
            fits,
        });
        let mut aug = Vec::new();
        run.data.write_csv(&mut aug).map_err(|e| CliError::io(out, e))?;
        dir.write(&format!("augmented_{}.csv", kind.label()), &aug)?;
    }
    dir.write("predictions.csv", &csv_bytes(&rows)?)?;
    let mut text = serde_json::to_string_pretty(&diagnostics).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    dir.write("diagnostics.json", text.as_bytes())?;
    dir.finish(&FitManifest {
        command: "fit",
        version: VERSION,
        config: cfg,
        source,
        pipeline_seed: seed,
        settings: if law.is_some() { vec![SettingRecord { setting, coefficient_hash: coefficient_hash(setting) }] } else { vec![] },
    })?;
    if violations > 0 {
        return Err(CliError::Runtime(format!("fold-hygiene audit found {violations} violation(s)")));
    }
    Ok(())
}

/// Learner label of the reference rows that score the truth itself.
pub const ORACLE: &str = "oracle";
const TRUTH_CUT: &str = "none";

#[derive(Clone, Serialize)]
struct MetricRow {
    setting: SettingId,
    replication: usize,
    cut: &'static str,
    learner: &'static str,
    estimand: String,
    metric: &'static str,
    value: f64,
}

#[derive(Serialize)]
struct ShapeRow {
    setting: SettingId,
    replication: usize,
    cut: &'static str,
    learner: &'static str,
    check: String,
    median_abs: f64,
    max_abs: f64,
}

#[derive(Serialize)]
struct ReplicationRecord {
    setting: SettingId,
    replication: usize,
    data_seed: u64,
    pipeline_seed: u64,
    treated_fraction: f64,
    audit_checked: usize,
    audit_violations: usize,
    warnings: Vec<String>,
}

/// Everything one replication contributes to the bench outputs.
struct RepResult {
    record: ReplicationRecord,
    metrics: Vec<MetricRow>,
    shape: Vec<ShapeRow>,
    /// `(cut, learner, estimand index, ψ̂)`.
    psi: Vec<(&'static str, &'static str, usize, Vec<f64>)>,
}

fn bench_one(cfg: &ExperimentConfig, setting: SettingId, rep: usize) -> Result<RepResult, CliError> {
    let sim = simulate_one(cfg, setting, rep)?;
    let data = &sim.observations;
    let seed = pipeline_seed(cfg.seed, setting, rep);
    let propensity: Vec<f64> = sim.truth.subjects.iter().map(|s| s.propensity).collect();
    let h = cfg.overlap_weights.then(|| overlap_weights(&propensity));
    let truths: Vec<Vec<f64>> = cfg.estimands.iter().map(|e| sim.truth.psi(e, data)).collect::<Result<_, _>>()?;
    let mut res = RepResult {
        record: ReplicationRecord {
            setting,
            replication: rep,
            data_seed: data_seed(cfg.seed, setting, rep),
            pipeline_seed: seed,
            treated_fraction: treated_fraction(data),
            audit_checked: 0,
            audit_violations: 0,
            warnings: Vec::new(),
        },
        metrics: Vec::new(),
        shape: Vec::new(),
        psi: Vec::new(),
    };
    let score = |res: &mut RepResult, cut: &'static str, learner: &'static str, estimates: Vec<Vec<f64>>| -> Result<(), CliError> {
        for (k, (e, psi)) in cfg.estimands.iter().zip(&estimates).enumerate() {
            let m = evaluate(psi, &truths[k], h.as_deref())?;
            res.metrics.extend(m.entries().into_iter().map(|(metric, value)| MetricRow {
                setting,
                replication: rep,
                cut,
                learner,
                estimand: e.label(),
                metric,
                value,
            }));
        }
        let pairs: Vec<(EstimandSpec, &[f64])> = cfg.estimands.iter().copied().zip(estimates.iter().map(|v| v.as_slice())).collect();
        let shape = shape_diagnostics(&pairs, setting.n_causes(), Level::Contrast)?;
        res.shape.extend(shape.checks.into_iter().map(|c| ShapeRow {
            setting,
            replication: rep,
            cut,
            learner,
            check: c.name,
            median_abs: c.quantiles[2],
            max_abs: c.quantiles[4],
        }));
        res.psi.extend(estimates.into_iter().enumerate().map(|(k, v)| (cut, learner, k, v)));
        Ok(())
    };
    score(&mut res, TRUTH_CUT, ORACLE, truths.clone())?;
    for &kind in &cfg.cut_kinds {
        let run = run_cut(cfg, data, kind, seed, Some(&sim.truth.law))?;
        let audit = run.data.audit();
        res.record.audit_checked += audit.checked;
        res.record.audit_violations += audit.violations.len();
        res.record.warnings.extend(run.warnings.iter().map(|w| format!("{}: {w}", kind.label())));
        for &l in &cfg.learners {
            let estimates =
                cfg.estimands.iter().map(|e| predictions(cfg, &run, data, e, l)).collect::<Result<Vec<_>, _>>()?;
            score(&mut res, kind.label(), l.name(), estimates)?;
        }
    }
    Ok(res)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    setting: SettingId,
    cut: &'a str,
    learner: &'a str,
    estimand: &'a str,
    metric: &'a str,
    count: usize,
    q25: f64,
    median: f64,
    q75: f64,
}

#[derive(Serialize)]
struct PsiRow<'a> {
    setting: SettingId,
    cut: &'a str,
    learner: &'a str,
    estimand: &'a str,
    count: usize,
    whisker_low: f64,
    q25: f64,
    median: f64,
    q75: f64,
    whisker_high: f64,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct BenchManifest<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    settings: Vec<SettingRecord>,
    replications: Vec<ReplicationRecord>,
}

/// Groups values by key, keeping first-seen key order.
struct Groups<K> {
    keys: Vec<K>,
    values: Vec<Vec<f64>>,
    index: HashMap<K, usize>,
}

impl<K: Clone + Eq + std::hash::Hash> Groups<K> {
    fn new() -> Self {
        Self { keys: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, k: K, v: impl IntoIterator<Item = f64>) {
        let i = *self.index.entry(k.clone()).or_insert_with(|| {
            self.keys.push(k);
            self.values.push(Vec::new());
            self.keys.len() - 1
        });
        self.values[i].extend(v);
    }
}

pub fn bench(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let results: Vec<RepResult> =
        jobs(cfg).into_par_iter().map(|(s, r)| bench_one(cfg, s, r)).collect::<Result<_, _>>()?;
    let mut dir = OutDir::create(out)?;
    let metrics: Vec<&MetricRow> = results.iter().flat_map(|r| &r.metrics).collect();
    dir.write("metrics.csv", &csv_bytes(&metrics)?)?;

    let mut groups = Groups::new();
    for m in &metrics {
        groups.push((m.setting, m.cut, m.learner, m.estimand.as_str(), m.metric), [m.value]);
    }
    let summary: Vec<SummaryRow> = groups
        .keys
        .iter()
        .zip(&groups.values)
        .map(|(&(setting, cut, learner, estimand, metric), v)| {
            let Spread { count, q25, median, q75 } = spread(v);
            SummaryRow { setting, cut, learner, estimand, metric, count, q25, median, q75 }
        })
        .collect();
    dir.write("summary.csv", &csv_bytes(&summary)?)?;

    let labels: Vec<String> = cfg.estimands.iter().map(|e| e.label()).collect();
    let mut psi = Groups::new();
    for r in &results {
        for (cut, learner, k, v) in &r.psi {
            psi.push((r.record.setting, *cut, *learner, *k), v.iter().copied());
        }
    }
    let psi_rows: Vec<PsiRow> = psi
        .keys
        .iter()
        .zip(&psi.values)
        .map(|(&(setting, cut, learner, k), v)| {
            let BoxStats { count, whisker_low, q25, median, q75, whisker_high, min, max } = box_stats(v);
            PsiRow { setting, cut, learner, estimand: &labels[k], count, whisker_low, q25, median, q75, whisker_high, min, max }
        })
        .collect();
    dir.write("psi_summary.csv", &csv_bytes(&psi_rows)?)?;

    let shape: Vec<&ShapeRow> = results.iter().flat_map(|r| &r.shape).collect();
    if !shape.is_empty() {
        dir.write("shape.csv", &csv_bytes(&shape)?)?;
    }
    let violations: usize = results.iter().map(|r| r.record.audit_violations).sum();
    dir.finish(&BenchManifest {
        command: "bench",
        version: VERSION,
        config: cfg,
        settings: setting_records(cfg),
        replications: results.into_iter().map(|r| r.record).collect(),
    })?;
    if violations > 0 {
        return Err(CliError::Runtime(format!("fold-hygiene audit found {violations} violation(s)")));
    }
    Ok(())
}
