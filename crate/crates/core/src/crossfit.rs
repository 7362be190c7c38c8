//! Cross-fitted estimation.
//!
//! Nuisance models, CUTs and influence-function values come from one split;
//! the conditional means and propensities behind the learner pseudo-outcomes
//! come from a second, independent split; the evaluation variant adds a
//! third split so that effect predictions are out-of-fold as well.
//!
//! Every value written to the [`AugmentedDataset`] records the models it was
//! computed from, so [`AugmentedDataset::audit`] can check that no value for
//! a subject depends on a model trained on that subject.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{
    fit_mean_difference, fit_transformed, fit_x_learner, CutSample, Diagnostics, HteEstimate, HteModel,
    LearnerConfig, LearnerKind, XWeight,
};
use crate::nuisance::{evaluation_grid, fit_nuisances, fit_propensity, FittedEnsemble, Matrix, NuisanceConfig, NuisanceProvider};
use crate::par;
use crate::survival::Observation;
use crate::transforms::{
    cut_value, if_transform, implied_mean, minimization_target, Cut, CutKind, EstimandSpec, RaVariant,
    TransformedSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Nuisance models, CUTs and influence-function values.
    Nuisance,
    /// Conditional means and propensities behind the pseudo-outcomes.
    Learner,
    /// Out-of-fold effect regressions.
    Evaluation,
    /// Effect regressions on the whole augmented dataset.
    Final,
}

impl Stage {
    fn code(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Nuisance => "nuisance",
            Stage::Learner => "learner",
            Stage::Evaluation => "evaluation",
            Stage::Final => "final",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a tuple of integers, used to derive seeds.
pub fn key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_CAFE, |h, &p| mix(h ^ p))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    /// Balance arms and event/censoring status across folds.
    pub stratify: bool,
    /// Redraws allowed when a training complement lacks an arm.
    pub max_attempts: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { k1: 5, k2: 5, k3: 5, stratify: true, max_attempts: 100 }
    }
}

/// Fold labels for one stage, aligned with the id-sorted data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub stage: Stage,
    pub k: usize,
    pub folds: Vec<usize>,
    /// Zero-based draw that produced this assignment.
    pub attempt: u32,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

/// Fold of each subject, keyed on `(seed, stage, attempt, id)` so the
/// assignment does not depend on row order.
pub fn assign_folds(data: &[Observation], k: usize, stage: Stage, seed: u64, config: &SplitConfig) -> Result<FoldAssignment> {
    let n = data.len();
    if k < 2 || k > n / 2 {
        return Err(Error::InvalidArgument(format!(
            "{stage} split: fold count {k} must lie in [2, {}] for n = {n}",
            n / 2
        )));
    }
    let arms = [data.iter().filter(|o| o.arm == 0).count(), data.iter().filter(|o| o.arm == 1).count()];
    let mut bad = 0;
    for attempt in 0..config.max_attempts.max(1) {
        let mut strata: BTreeMap<(u8, bool), Vec<(u64, u64, usize)>> = BTreeMap::new();
        for (i, o) in data.iter().enumerate() {
            let s = if config.stratify { (o.arm, o.cause > 0) } else { (0, false) };
            let h = key(&[seed, stage.code(), u64::from(attempt), o.id]);
            strata.entry(s).or_default().push((h, o.id, i));
        }
        let mut folds = vec![0; n];
        let mut next = (key(&[seed, stage.code(), u64::from(attempt)]) % k as u64) as usize;
        for (_, mut members) in strata {
            members.sort_unstable();
            for (_, _, i) in members {
                folds[i] = next;
                next = (next + 1) % k;
            }
        }
        let mut in_fold = vec![[0usize; 2]; k];
        for (i, o) in data.iter().enumerate() {
            in_fold[folds[i]][o.arm as usize] += 1;
        }
        match (0..k).find(|&f| arms[0] == in_fold[f][0] || arms[1] == in_fold[f][1]) {
            None => return Ok(FoldAssignment { stage, k, folds, attempt }),
            Some(f) => bad = f,
        }
    }
    Err(Error::Split(format!(
        "{stage} split: the training complement of fold {bad} lacks an arm after {} draws",
        config.max_attempts.max(1)
    )))
}

/// Fold assignments for every stage of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Subject ids in the order the fold vectors refer to.
    pub ids: Vec<u64>,
    pub stages: Vec<FoldAssignment>,
}

impl SplitPlan {
    pub fn draw(data: &[Observation], config: &SplitConfig, seed: u64, stages: &[(Stage, usize)]) -> Result<Self> {
        let kmax = stages.iter().map(|s| s.1).max().unwrap_or(2);
        if data.len() < 4 * kmax {
            return Err(Error::InvalidArgument(format!(
                "{} subjects are too few for {kmax} folds (need at least {})",
                data.len(),
                4 * kmax
            )));
        }
        let stages =
            stages.iter().map(|&(s, k)| assign_folds(data, k, s, seed, config)).collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, ids: data.iter().map(|o| o.id).collect(), stages })
    }

    pub fn stage(&self, stage: Stage) -> Option<&FoldAssignment> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// How `μ(a, X)` and `π(1|X)` entering the learner pseudo-outcomes are
/// obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondStage {
    /// Regress the CUT on `X` within each arm and refit the propensity, both
    /// on the second-split training folds.
    #[default]
    Refit,
    /// Reuse the means implied by the first-stage hazards and the
    /// first-stage propensity.
    Nuisance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSpec {
    pub estimands: Vec<EstimandSpec>,
    pub cut_kind: CutKind,
    pub learners: Vec<LearnerKind>,
    pub nuisance: NuisanceConfig,
    pub learner: LearnerConfig,
    pub split: SplitConfig,
    pub seed: u64,
    pub ra_variant: RaVariant,
    pub second_stage: SecondStage,
    /// Number of event causes; `0` infers it from the data and estimands.
    pub n_causes: usize,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            estimands: vec![EstimandSpec::survival(2.0)],
            cut_kind: CutKind::AIPCW,
            learners: LearnerKind::ALL.to_vec(),
            nuisance: NuisanceConfig::default(),
            learner: LearnerConfig::default(),
            split: SplitConfig::default(),
            seed: 0,
            ra_variant: RaVariant::default(),
            second_stage: SecondStage::default(),
            n_causes: 0,
        }
    }
}

impl PipelineSpec {
    /// Compatibility checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.estimands.is_empty() {
            return Err(Error::InvalidArgument("no estimands requested".into()));
        }
        if self.learners.is_empty() {
            return Err(Error::InvalidArgument("no learners requested".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.estimands {
            self.cut_kind.check(e)?;
            if self.n_causes > 0 {
                e.validate(self.n_causes)?;
            }
            if !seen.insert(e.label()) {
                return Err(Error::InvalidArgument(format!("estimand {} listed twice", e.label())));
            }
        }
        let mut seen = HashSet::new();
        for l in &self.learners {
            if !seen.insert(*l) {
                return Err(Error::InvalidArgument(format!("learner `{l}` listed twice")));
            }
        }
        Ok(())
    }

    fn causes_for(&self, data: &[Observation]) -> usize {
        if self.n_causes > 0 {
            return self.n_causes;
        }
        let in_data = data.iter().map(|o| o.cause as usize).max().unwrap_or(0);
        let asked = self.estimands.iter().filter_map(|e| e.cause()).max().unwrap_or(0) as usize;
        let sep = if self.estimands.iter().any(|e| e.is_separable()) { 2 } else { 1 };
        in_data.max(asked).max(sep)
    }
}

/// Where the first-stage nuisances come from.
#[derive(Clone, Copy)]
pub enum NuisanceSource<'a> {
    /// Fit on the training complement of each first-split fold.
    Fitted,
    /// A known law (for example the data-generating process); the first
    /// split is skipped for nuisances only.
    Known(&'a dyn NuisanceProvider),
}

/// One fitted model and the subjects it saw.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRecord {
    pub stage: Stage,
    pub fold: Option<usize>,
    pub label: String,
    /// Sorted ids of the training subjects.
    pub training_ids: Arc<[u64]>,
}

impl ModelRecord {
    pub fn trained_on(&self, id: u64) -> bool {
        self.training_ids.binary_search(&id).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
    /// Denominators floored while computing each value.
    pub floored: Vec<u32>,
    /// Models (indices into [`AugmentedDataset::models`]) that produced each
    /// value directly.
    pub sources: Vec<Vec<u32>>,
    /// Columns each value was computed from, row by row.
    pub inputs: Vec<usize>,
}

/// The data sorted by id plus every derived column.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub rows: Vec<Observation>,
    pub columns: Vec<Column>,
    pub models: Vec<ModelRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub id: u64,
    pub column: String,
    pub model: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// (value, model) pairs inspected.
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl AugmentedDataset {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.column(name).map(|c| c.values.as_slice())
    }

    /// Walk every column's input chain and check, row by row, that no model
    /// behind a subject's value was trained on that subject.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let mut done = vec![false; self.columns.len()];
        for root in 0..self.columns.len() {
            let mut stack = vec![root];
            while let Some(c) = stack.pop() {
                if std::mem::replace(&mut done[c], true) {
                    continue;
                }
                let col = &self.columns[c];
                stack.extend(col.inputs.iter().copied());
                for (row, sources) in col.sources.iter().enumerate() {
                    let id = self.rows[row].id;
                    for &m in sources {
                        report.checked += 1;
                        let model = &self.models[m as usize];
                        if model.trained_on(id) {
                            report.violations.push(Violation {
                                id,
                                column: col.name.clone(),
                                model: format!("{} fold {:?}: {}", model.stage, model.fold, model.label),
                            });
                        }
                    }
                }
            }
        }
        report
    }

    /// Original columns followed by every derived column. Unset values are
    /// written as empty fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let p = self.rows.first().map_or(0, |o| o.covariates.len());
        let mut header: Vec<String> = vec!["id".into()];
        header.extend((1..=p).map(|j| format!("x{j}")));
        header.extend(["a", "time", "status"].map(String::from));
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        writeln!(w, "{}", header.join(","))?;
        for (i, o) in self.rows.iter().enumerate() {
            write!(w, "{}", o.id)?;
            for x in &o.covariates {
                write!(w, ",{x}")?;
            }
            write!(w, ",{},{},{}", o.arm, o.time, o.cause)?;
            for c in &self.columns {
                let v = c.values[i];
                if v.is_nan() {
                    write!(w, ",")?;
                } else {
                    write!(w, ",{v}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// A learner fitted for one estimand, with the models behind it.
#[derive(Clone, Debug)]
pub struct LearnerFit {
    pub estimand: EstimandSpec,
    pub learner: LearnerKind,
    pub estimate: HteEstimate,
    /// Indices into [`AugmentedDataset::models`].
    pub models: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub plan: SplitPlan,
    pub data: AugmentedDataset,
    pub fits: Vec<LearnerFit>,
    pub n_causes: usize,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn fit(&self, estimand: &EstimandSpec, learner: LearnerKind) -> Option<&LearnerFit> {
        self.fits.iter().find(|f| f.estimand == *estimand && f.learner == learner)
    }

    /// Out-of-fold predictions `ψ̂(X_i)` (evaluation pipeline only).
    pub fn out_of_fold(&self, estimand: &EstimandSpec, learner: LearnerKind) -> Option<&[f64]> {
        self.data.values(&names::psi(learner, estimand))
    }
}

/// Column names of the augmented dataset.
pub mod names {
    use super::*;

    pub const PI1: &str = "eta_pi1";
    pub const PI1_REFIT: &str = "pi1_refit";

    pub fn cut(kind: CutKind, e: &EstimandSpec) -> String {
        format!("cut_{}_{}", kind.label(), e.label())
    }

    pub fn influence(e: &EstimandSpec) -> String {
        format!("if_{}", e.label())
    }

    /// Conditional mean implied by the first-stage hazards.
    pub fn implied(arm: u8, e: &EstimandSpec) -> String {
        format!("eta_mu{arm}_{}", e.label())
    }

    /// Conditional mean regressed on the second split.
    pub fn mean(arm: u8, e: &EstimandSpec) -> String {
        format!("mu{arm}_{}", e.label())
    }

    pub fn weight(l: LearnerKind, e: &EstimandSpec) -> String {
        format!("w_{l}_{}", e.label())
    }

    /// Pseudo-outcome of a transformed learner, or the imputed effect for the
    /// X-learner.
    pub fn outcome(l: LearnerKind, e: &EstimandSpec) -> String {
        format!("y_{l}_{}", e.label())
    }

    pub fn psi(l: LearnerKind, e: &EstimandSpec) -> String {
        format!("psi_{l}_{}", e.label())
    }

    pub fn fold(stage: Stage) -> String {
        format!("fold_{stage}")
    }
}

struct Builder<'a> {
    spec: &'a PipelineSpec,
    rows: Vec<Observation>,
    n_causes: usize,
    models: Vec<ModelRecord>,
    columns: Vec<Column>,
    index: HashMap<String, usize>,
    warnings: Vec<String>,
}

/// First-stage values for one subject and estimand.
struct StageOne {
    cut: Cut,
    phi: Cut,
    mu: [f64; 2],
}

impl<'a> Builder<'a> {
    fn new(data: &[Observation], spec: &'a PipelineSpec) -> Result<Self> {
        spec.validate()?;
        let mut rows = data.to_vec();
        rows.sort_by_key(|o| o.id);
        if let Some(w) = rows.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument(format!("duplicate subject id {}", w[0].id)));
        }
        for o in &rows {
            o.validate()?;
        }
        if let Some(o) = rows.iter().find(|o| o.covariates.len() != rows[0].covariates.len()) {
            return Err(Error::InvalidArgument(format!("subject {} has a different number of covariates", o.id)));
        }
        let n_causes = spec.causes_for(&rows);
        if let Some(o) = rows.iter().find(|o| o.cause as usize > n_causes) {
            return Err(Error::InvalidArgument(format!("subject {} has cause {} beyond {n_causes}", o.id, o.cause)));
        }
        for e in &spec.estimands {
            e.validate(n_causes)?;
        }
        Ok(Self {
            spec,
            rows,
            n_causes,
            models: Vec::new(),
            columns: Vec::new(),
            index: HashMap::new(),
            warnings: Vec::new(),
        })
    }

    fn seed(&self, parts: &[u64]) -> u64 {
        let mut all = vec![self.spec.seed];
        all.extend_from_slice(parts);
        key(&all)
    }

    fn add_model(&mut self, stage: Stage, fold: Option<usize>, label: String, ids: Arc<[u64]>) -> u32 {
        self.models.push(ModelRecord { stage, fold, label, training_ids: ids });
        (self.models.len() - 1) as u32
    }

    fn ids_of(&self, idx: &[usize]) -> Arc<[u64]> {
        idx.iter().map(|&i| self.rows[i].id).collect()
    }

    fn add_column(&mut self, name: String, inputs: Vec<usize>) -> usize {
        let n = self.rows.len();
        self.columns.push(Column {
            name: name.clone(),
            values: vec![f64::NAN; n],
            floored: vec![0; n],
            sources: vec![Vec::new(); n],
            inputs,
        });
        self.index.insert(name, self.columns.len() - 1);
        self.columns.len() - 1
    }

    fn col(&self, name: &str) -> usize {
        self.index[name]
    }

    fn set(&mut self, c: usize, row: usize, value: f64, floored: u32, sources: &[u32]) {
        let col = &mut self.columns[c];
        col.values[row] = value;
        col.floored[row] = floored;
        col.sources[row] = sources.to_vec();
    }

    fn add_fold_column(&mut self, a: &FoldAssignment) {
        let c = self.add_column(names::fold(a.stage), vec![]);
        for (i, &f) in a.folds.iter().enumerate() {
            self.columns[c].values[i] = f as f64;
        }
    }

    fn horizons(&self) -> Vec<f64> {
        self.spec.estimands.iter().map(|e| e.horizon).collect()
    }

    fn stage_one_row(&self, obs: &Observation, eta_source: &dyn NuisanceProvider, grid: &crate::nuisance::Grid) -> Result<(f64, Vec<StageOne>)> {
        let eta = eta_source.nuisance_set(obs, grid)?;
        let values = self
            .spec
            .estimands
            .iter()
            .map(|e| {
                Ok(StageOne {
                    cut: cut_value(obs, &eta, e, self.spec.cut_kind, obs.arm)?,
                    phi: if_transform(obs, &eta, e)?,
                    mu: [implied_mean(&eta, e, 0)?, implied_mean(&eta, e, 1)?],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((eta.pi1, values))
    }

    /// Steps 1–3: nuisances, CUTs, influence-function values and implied
    /// conditional means.
    fn stage_one(&mut self, plan: &SplitPlan, source: NuisanceSource) -> Result<()> {
        let c_pi = self.add_column(names::PI1.into(), vec![]);
        let spec = self.spec;
        let mut cols = Vec::new();
        for e in &spec.estimands {
            cols.push([
                self.add_column(names::cut(spec.cut_kind, e), vec![]),
                self.add_column(names::influence(e), vec![]),
                self.add_column(names::implied(0, e), vec![]),
                self.add_column(names::implied(1, e), vec![]),
            ]);
        }
        let horizons = self.horizons();
        let cap = spec.nuisance.grid_cap;
        // (model id, member rows, per-row results)
        let mut blocks: Vec<(u32, Vec<usize>, Vec<(f64, Vec<StageOne>)>)> = Vec::new();
        match source {
            NuisanceSource::Known(provider) => {
                let m = self.add_model(Stage::Nuisance, None, "known nuisance law".into(), Arc::from(Vec::new()));
                let grid = match provider.grid() {
                    Some(g) => g,
                    None => evaluation_grid(self.rows.iter().map(|o| o.time), &horizons, cap)?,
                };
                let idx: Vec<usize> = (0..self.rows.len()).collect();
                let this = &*self;
                let out = par::map(&idx, |&i| this.stage_one_row(&this.rows[i], provider, &grid));
                blocks.push((m, idx, out.into_iter().collect::<Result<Vec<_>>>()?));
            }
            NuisanceSource::Fitted => {
                let a = plan.stage(Stage::Nuisance).expect("first split drawn");
                let folds: Vec<usize> = (0..a.k).collect();
                let this = &*self;
                let fitted = par::map(&folds, |&f| -> Result<_> {
                    let train: Vec<Observation> = a.complement(f).iter().map(|&i| this.rows[i].clone()).collect();
                    let mut config = spec.nuisance.clone();
                    config.ensemble.seed = this.seed(&[Stage::Nuisance.code(), f as u64]);
                    let models = fit_nuisances(&train, this.n_causes, &config, Some(f))?;
                    let members = a.members(f);
                    let grid = evaluation_grid(members.iter().map(|&i| this.rows[i].time), &horizons, cap)?;
                    let values = members
                        .iter()
                        .map(|&i| this.stage_one_row(&this.rows[i], &models, &grid))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((models.training_ids.clone(), models.warnings.clone(), members, values))
                });
                for (f, r) in fitted.into_iter().enumerate() {
                    let (ids, warnings, members, values) = r?;
                    let m = self.add_model(Stage::Nuisance, Some(f), "propensity and hazards".into(), ids);
                    self.warnings.extend(warnings.into_iter().map(|w| format!("nuisance fold {f}: {w}")));
                    blocks.push((m, members, values));
                }
            }
        }
        for (m, members, values) in blocks {
            for (i, (pi1, per)) in members.into_iter().zip(values) {
                self.set(c_pi, i, pi1, 0, &[m]);
                for (c, v) in cols.iter().zip(per) {
                    self.set(c[0], i, v.cut.value, v.cut.floored, &[m]);
                    self.set(c[1], i, v.phi.value, v.phi.floored, &[m]);
                    self.set(c[2], i, v.mu[0], 0, &[m]);
                    self.set(c[3], i, v.mu[1], 0, &[m]);
                }
            }
        }
        Ok(())
    }

    fn pseudo_learners(&self) -> Vec<LearnerKind> {
        self.spec.learners.iter().copied().filter(|l| l.is_transformed() && *l != LearnerKind::If).collect()
    }

    fn needs_means(&self) -> bool {
        self.spec.learners.iter().any(|l| {
            matches!(l, LearnerKind::X | LearnerKind::Ra | LearnerKind::Aiptw | LearnerKind::Mcea | LearnerKind::R | LearnerKind::U)
        })
    }

    /// Steps 5–6: pseudo-outcomes and weights from conditional means and
    /// propensities estimated on the second split.
    fn stage_two(&mut self, plan: &SplitPlan) -> Result<()> {
        let spec = self.spec;
        let pseudo = self.pseudo_learners();
        let has_x = spec.learners.contains(&LearnerKind::X);
        if pseudo.is_empty() && !has_x {
            return Ok(());
        }
        let refit = spec.second_stage == SecondStage::Refit;
        let fit_means = refit && self.needs_means();
        let c_pi = if refit { self.add_column(names::PI1_REFIT.into(), vec![]) } else { self.col(names::PI1) };
        let mut mean_cols = Vec::new();
        for e in &spec.estimands {
            let c_cut = self.col(&names::cut(spec.cut_kind, e));
            mean_cols.push(if fit_means {
                [self.add_column(names::mean(0, e), vec![c_cut]), self.add_column(names::mean(1, e), vec![c_cut])]
            } else {
                [self.col(&names::implied(0, e)), self.col(&names::implied(1, e))]
            });
        }
        if refit {
            let a = plan.stage(Stage::Learner).expect("second split drawn");
            let folds: Vec<usize> = (0..a.k).collect();
            let this = &*self;
            let cut_cols: Vec<usize> = spec.estimands.iter().map(|e| this.col(&names::cut(spec.cut_kind, e))).collect();
            let fitted = par::map(&folds, |&f| this.stage_two_fold(a, f, &cut_cols, fit_means));
            for (f, r) in fitted.into_iter().enumerate() {
                let (train, members, pi, means) = r?;
                let ids = self.ids_of(&train);
                let m_pi = self.add_model(Stage::Learner, Some(f), "propensity".into(), ids.clone());
                for (r, &i) in members.iter().enumerate() {
                    self.set(c_pi, i, pi[r], 0, &[m_pi]);
                }
                for (e, mu) in means.into_iter().enumerate() {
                    let Some(mu) = mu else { continue };
                    for arm in 0..2 {
                        let label = format!("mean arm {arm} of {}", spec.estimands[e].label());
                        let m = self.add_model(Stage::Learner, Some(f), label, ids.clone());
                        for (r, &i) in members.iter().enumerate() {
                            self.set(mean_cols[e][arm], i, mu[arm][r], 0, &[m]);
                        }
                    }
                }
            }
        }
        for (e, est) in spec.estimands.iter().enumerate() {
            let c_cut = self.col(&names::cut(spec.cut_kind, est));
            let [c_mu0, c_mu1] = mean_cols[e];
            let inputs = vec![c_cut, c_mu0, c_mu1, c_pi];
            let mut targets = Vec::new();
            for &l in &pseudo {
                targets.push((
                    l,
                    self.add_column(names::weight(l, est), inputs.clone()),
                    self.add_column(names::outcome(l, est), inputs.clone()),
                ));
            }
            let c_x = has_x.then(|| self.add_column(names::outcome(LearnerKind::X, est), vec![c_cut, c_mu0, c_mu1]));
            for i in 0..self.rows.len() {
                let y = self.columns[c_cut].values[i];
                let fl = self.columns[c_cut].floored[i];
                let (mu0, mu1, pi1) =
                    (self.columns[c_mu0].values[i], self.columns[c_mu1].values[i], self.columns[c_pi].values[i]);
                let obs = &self.rows[i];
                let mut out = Vec::with_capacity(targets.len() + 1);
                for &(l, cw, cy) in &targets {
                    let t = minimization_target(l, y, obs, mu0, mu1, pi1, spec.ra_variant)?;
                    out.push((cw, cy, t.weight, t.outcome, t.floored + fl));
                }
                if let Some(cx) = c_x {
                    let t = minimization_target(LearnerKind::Ra, y, obs, mu0, mu1, pi1, RaVariant::CrossArm)?;
                    out.push((cx, cx, 1.0, t.outcome, fl));
                }
                for (cw, cy, w, v, f) in out {
                    if cw != cy {
                        self.set(cw, i, w, f, &[]);
                    }
                    self.set(cy, i, v, f, &[]);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn stage_two_fold(
        &self,
        a: &FoldAssignment,
        f: usize,
        cut_cols: &[usize],
        fit_means: bool,
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>, Vec<Option<[Vec<f64>; 2]>>)> {
        let spec = self.spec;
        let train = a.complement(f);
        let members = a.members(f);
        let train_obs: Vec<Observation> = train.iter().map(|&i| self.rows[i].clone()).collect();
        let mut ens = spec.nuisance.ensemble.clone();
        ens.seed = self.seed(&[Stage::Learner.code(), f as u64]);
        let prop = fit_propensity(&train_obs, &spec.nuisance.propensity, &ens)?;
        let pi: Vec<f64> = members.iter().map(|&i| prop.p1(&self.rows[i].covariates)).collect();
        let mut means = Vec::new();
        for (e, &c) in cut_cols.iter().enumerate() {
            if !fit_means {
                means.push(None);
                continue;
            }
            let mut mu = [Vec::new(), Vec::new()];
            for arm in 0..2u8 {
                let rows: Vec<usize> = train.iter().copied().filter(|&i| self.rows[i].arm == arm).collect();
                if rows.len() < spec.learner.min_arm_size.max(2) {
                    return Err(Error::Split(format!(
                        "learner fold {f}: arm {arm} has {} training subject(s), fewer than {}",
                        rows.len(),
                        spec.learner.min_arm_size.max(2)
                    )));
                }
                let x = Matrix::from_rows(&rows.iter().map(|&i| self.rows[i].covariates.as_slice()).collect::<Vec<_>>())?;
                let y: Vec<f64> = rows.iter().map(|&i| self.columns[c].values[i]).collect();
                let mut config = spec.learner.ensemble.clone();
                config.seed = self.seed(&[Stage::Learner.code(), f as u64, e as u64, u64::from(arm)]);
                let fit = FittedEnsemble::fit(&x, &y, &vec![1.0; y.len()], &config)?;
                use crate::nuisance::Predictor;
                mu[arm as usize] = members.iter().map(|&i| fit.predict_row(&self.rows[i].covariates)).collect();
            }
            means.push(Some(mu));
        }
        Ok((train, members, pi, means))
    }

    /// Columns a learner regresses: outcome, optional weight, and the
    /// column whose floored counts describe it.
    fn learner_columns(&self, kind: LearnerKind, e: &EstimandSpec) -> (usize, Option<usize>) {
        match kind {
            LearnerKind::S | LearnerKind::T => (self.col(&names::cut(self.spec.cut_kind, e)), None),
            LearnerKind::X => (self.col(&names::outcome(kind, e)), None),
            LearnerKind::If => (self.col(&names::influence(e)), None),
            _ => (self.col(&names::outcome(kind, e)), Some(self.col(&names::weight(kind, e)))),
        }
    }

    /// Steps 4 and 7 on the rows `train`.
    fn fit_learner(&self, kind: LearnerKind, e: usize, train: &[usize], tag: &[u64]) -> Result<HteEstimate> {
        let spec = self.spec;
        let est = &spec.estimands[e];
        let mut config: LearnerConfig = spec.learner.clone();
        let mut parts = vec![e as u64, kind as u64];
        parts.extend_from_slice(tag);
        config.ensemble.seed = self.seed(&parts);
        let (cy, cw) = self.learner_columns(kind, est);
        let y = &self.columns[cy];
        let floored = train.iter().filter(|&&i| y.floored[i] > 0).count();
        let mut fit = match kind {
            LearnerKind::S | LearnerKind::T | LearnerKind::X => {
                let samples: Vec<CutSample> = train
                    .iter()
                    .map(|&i| CutSample { x: &self.rows[i].covariates, arm: self.rows[i].arm, y: y.values[i] })
                    .collect();
                if kind == LearnerKind::X {
                    let prop = if config.x_weight == XWeight::Propensity {
                        let obs: Vec<Observation> = train.iter().map(|&i| self.rows[i].clone()).collect();
                        Some(fit_propensity(&obs, &spec.nuisance.propensity, &config.ensemble)?)
                    } else {
                        None
                    };
                    fit_x_learner(&samples, prop, est, &config)?
                } else {
                    fit_mean_difference(kind, &samples, est, &config)?
                }
            }
            _ => {
                let x: Vec<&[f64]> = train.iter().map(|&i| self.rows[i].covariates.as_slice()).collect();
                let samples: Vec<TransformedSample> = train
                    .iter()
                    .map(|&i| TransformedSample {
                        id: self.rows[i].id,
                        fold: None,
                        learner: kind,
                        weight: cw.map_or(1.0, |c| self.columns[c].values[i]),
                        outcome: y.values[i],
                        floored: y.floored[i],
                    })
                    .collect();
                fit_transformed(kind, &x, &samples, est, &config)?
            }
        };
        if !kind.is_transformed() {
            fit.diagnostics.floored_observations = floored;
        }
        Ok(fit)
    }

    fn jobs(&self) -> Vec<(usize, LearnerKind)> {
        (0..self.spec.estimands.len()).flat_map(|e| self.spec.learners.iter().map(move |&l| (e, l))).collect()
    }

    fn final_fits(&mut self, fold_sizes: Vec<usize>) -> Result<Vec<LearnerFit>> {
        let all: Vec<usize> = (0..self.rows.len()).collect();
        let jobs = self.jobs();
        let this = &*self;
        let fitted = par::map(&jobs, |&(e, l)| this.fit_learner(l, e, &all, &[Stage::Final.code()]));
        let ids = self.ids_of(&all);
        let mut out = Vec::new();
        for ((e, l), r) in jobs.into_iter().zip(fitted) {
            let mut estimate = r?;
            estimate.diagnostics.fold_sizes = fold_sizes.clone();
            let label = format!("{l} learner for {}", self.spec.estimands[e].label());
            let m = self.add_model(Stage::Final, None, label, ids.clone());
            out.push(LearnerFit { estimand: self.spec.estimands[e], learner: l, estimate, models: vec![m as usize] });
        }
        Ok(out)
    }

    /// Third split: every `ψ̂(X_i)` comes from a model not trained on `i`.
    fn evaluation_fits(&mut self, plan: &SplitPlan) -> Result<Vec<LearnerFit>> {
        let a = plan.stage(Stage::Evaluation).expect("third split drawn");
        let jobs: Vec<(usize, LearnerKind, usize)> =
            self.jobs().into_iter().flat_map(|(e, l)| (0..a.k).map(move |f| (e, l, f))).collect();
        let this = &*self;
        let fitted = par::map(&jobs, |&(e, l, f)| -> Result<(HteEstimate, Vec<f64>)> {
            let fit = this.fit_learner(l, e, &a.complement(f), &[Stage::Evaluation.code(), f as u64])?;
            let pred = a.members(f).iter().map(|&i| fit.predict(&this.rows[i].covariates)).collect::<Result<_>>()?;
            Ok((fit, pred))
        });
        let mut fitted = fitted.into_iter();
        let mut out = Vec::new();
        for (e, l) in self.jobs() {
            let est = self.spec.estimands[e];
            let (cy, cw) = self.learner_columns(l, &est);
            let c = self.add_column(names::psi(l, &est), std::iter::once(cy).chain(cw).collect());
            let mut models = Vec::new();
            let mut members_fit = Vec::new();
            let mut diag = Diagnostics::default();
            for f in 0..a.k {
                let (fit, pred) = fitted.next().expect("one result per job")?;
                let label = format!("{l} learner for {}", est.label());
                let m = self.add_model(Stage::Evaluation, Some(f), label, self.ids_of(&a.complement(f)));
                for (&i, v) in a.members(f).iter().zip(pred) {
                    self.set(c, i, v, 0, &[m]);
                }
                diag.n_train += fit.diagnostics.n_train;
                diag.floored_observations += fit.diagnostics.floored_observations;
                diag.fold_sizes.push(fit.diagnostics.n_train);
                models.push(m as usize);
                members_fit.push(fit);
            }
            let dim = members_fit[0].dim;
            let estimate = HteEstimate {
                spec: est,
                learner: l,
                model: HteModel::Average(members_fit.into_iter().map(|f| f.model).collect()),
                dim,
                diagnostics: diag,
            };
            out.push(LearnerFit { estimand: est, learner: l, estimate, models });
        }
        Ok(out)
    }

    fn finish(self, plan: SplitPlan, fits: Vec<LearnerFit>) -> PipelineOutput {
        PipelineOutput {
            plan,
            data: AugmentedDataset { rows: self.rows, columns: self.columns, models: self.models },
            fits,
            n_causes: self.n_causes,
            warnings: self.warnings,
        }
    }
}

fn stages(spec: &PipelineSpec, source: NuisanceSource, evaluation: bool) -> Vec<(Stage, usize)> {
    let mut s = Vec::new();
    if matches!(source, NuisanceSource::Fitted) {
        s.push((Stage::Nuisance, spec.split.k1));
    }
    if spec.second_stage == SecondStage::Refit {
        s.push((Stage::Learner, spec.split.k2));
    }
    if evaluation {
        s.push((Stage::Evaluation, spec.split.k3));
    }
    s
}

fn run(data: &[Observation], spec: &PipelineSpec, source: NuisanceSource, evaluation: bool) -> Result<PipelineOutput> {
    let mut b = Builder::new(data, spec)?;
    let plan = SplitPlan::draw(&b.rows, &spec.split, spec.seed, &stages(spec, source, evaluation))?;
    for a in &plan.stages {
        b.add_fold_column(a);
    }
    b.stage_one(&plan, source)?;
    b.stage_two(&plan)?;
    let fits = if evaluation {
        b.evaluation_fits(&plan)?
    } else {
        let sizes = plan.stages.first().map(|a| a.sizes()).unwrap_or_default();
        b.final_fits(sizes)?
    };
    Ok(b.finish(plan, fits))
}

/// Two-split pipeline: effect learners are fitted on the whole augmented
/// dataset.
pub fn run_pipeline(data: &[Observation], spec: &PipelineSpec) -> Result<PipelineOutput> {
    run(data, spec, NuisanceSource::Fitted, false)
}

pub fn run_pipeline_with(data: &[Observation], spec: &PipelineSpec, source: NuisanceSource) -> Result<PipelineOutput> {
    run(data, spec, source, false)
}

/// Three-split pipeline: effect predictions for each subject come from
/// learners trained without that subject.
pub fn run_evaluation_pipeline(data: &[Observation], spec: &PipelineSpec) -> Result<PipelineOutput> {
    run(data, spec, NuisanceSource::Fitted, true)
}

pub fn run_evaluation_pipeline_with(
    data: &[Observation],
    spec: &PipelineSpec,
    source: NuisanceSource,
) -> Result<PipelineOutput> {
    run(data, spec, source, true)
}
