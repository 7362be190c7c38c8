//! Experiment configuration: a TOML file validated up front so that bad
//! input fails before any simulation or fitting starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survcut::crossfit::{PipelineSpec, SecondStage, SplitConfig};
use survcut::learners::{LearnerConfig, LearnerKind};
use survcut::nuisance::NuisanceConfig;
use survcut::simgen::{CovariateLaw, SettingId};
use survcut::transforms::{CutKind, EstimandSpec, RaVariant};

use crate::error::CliError;

/// How first-stage nuisances are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    #[default]
    Fitted,
    /// The data-generating law (simulated data only).
    True,
}

/// Which predictions are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// Final learners refitted on all pseudo-outcomes, predicted at every `X_i`.
    #[default]
    Final,
    /// Out-of-fold predictions from the cross-fitted learner stage.
    CrossFit,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(alias = "settings")]
    setting: Option<OneOrMany>,
    n: Option<usize>,
    replications: Option<usize>,
    seed: Option<u64>,
    covariates: Option<CovariateLaw>,
    lattice: Option<f64>,
    estimands: Option<Vec<String>>,
    cut_kinds: Option<Vec<String>>,
    learners: Option<Vec<String>>,
    nuisances: Option<NuisanceMode>,
    evaluation: Option<Evaluation>,
    second_stage: Option<SecondStage>,
    ra_variant: Option<RaVariant>,
    overlap_weights: Option<bool>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    nuisance: Option<NuisanceConfig>,
    learner: Option<LearnerConfig>,
    split: Option<SplitConfig>,
}

/// A validated experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub settings: Vec<SettingId>,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub covariates: CovariateLaw,
    pub lattice: Option<f64>,
    pub estimands: Vec<EstimandSpec>,
    pub cut_kinds: Vec<CutKind>,
    pub learners: Vec<LearnerKind>,
    pub nuisances: NuisanceMode,
    pub evaluation: Evaluation,
    pub second_stage: SecondStage,
    pub ra_variant: RaVariant,
    /// Score with overlap weights `π(1−π)` in the weighted metrics; `h ≡ 1`
    /// otherwise.
    pub overlap_weights: bool,
    /// Dataset for `fit`, resolved against the config file's directory.
    pub data: Option<PathBuf>,
    /// Output directory; left out of manifests so reruns elsewhere match.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub nuisance: NuisanceConfig,
    pub learner: LearnerConfig,
    pub split: SplitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineSpec::default();
        Self {
            settings: vec![SettingId::S1],
            n: 500,
            replications: 1,
            seed: 0,
            covariates: CovariateLaw::Uniform,
            lattice: None,
            estimands: p.estimands,
            cut_kinds: vec![p.cut_kind],
            learners: p.learners,
            nuisances: NuisanceMode::Fitted,
            evaluation: Evaluation::Final,
            second_stage: p.second_stage,
            ra_variant: p.ra_variant,
            overlap_weights: true,
            data: None,
            out: None,
            nuisance: p.nuisance,
            learner: p.learner,
            split: p.split,
        }
    }
}

fn parse_list<T>(field: &str, items: Vec<String>, parse: impl Fn(&str) -> Option<T>, expected: &str) -> Result<Vec<T>, CliError> {
    if items.is_empty() {
        return Err(CliError::config(field, "must not be empty"));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, s)| {
            parse(s).ok_or_else(|| CliError::config(format!("{field}[{i}]"), format!("unknown value `{s}` (expected {expected})")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
        let mut c = Self::default();
        if let Some(s) = raw.setting {
            let list = match s {
                OneOrMany::One(s) => vec![s],
                OneOrMany::Many(v) => v,
            };
            c.settings = parse_list("setting", list, |s| s.parse().ok(), "s1, s2, s3 or s4")?;
        }
        if let Some(e) = raw.estimands {
            c.estimands = parse_list("estimands", e, |s| s.parse().ok(), "labels such as surv@2, rmst@2, cif1@2, sepdir_cif1[1]@2")?;
        }
        if let Some(k) = raw.cut_kinds {
            c.cut_kinds = parse_list("cut_kinds", k, |s| s.parse().ok(), "bj, ipcw1, ipcw2, ipcw, aipcw or aipcw_c")?;
        }
        if let Some(l) = raw.learners {
            c.learners = if l.len() == 1 && l[0].eq_ignore_ascii_case("all") {
                LearnerKind::ALL.to_vec()
            } else {
                let names: Vec<&str> = LearnerKind::ALL.iter().map(|k| k.name()).collect();
                parse_list("learners", l, |s| s.parse().ok(), &names.join(", "))?
            };
        }
        c.n = raw.n.unwrap_or(c.n);
        c.replications = raw.replications.unwrap_or(c.replications);
        c.seed = raw.seed.unwrap_or(c.seed);
        c.covariates = raw.covariates.unwrap_or(c.covariates);
        c.lattice = raw.lattice;
        c.nuisances = raw.nuisances.unwrap_or_default();
        c.evaluation = raw.evaluation.unwrap_or_default();
        c.second_stage = raw.second_stage.unwrap_or(c.second_stage);
        c.ra_variant = raw.ra_variant.unwrap_or(c.ra_variant);
        c.overlap_weights = raw.overlap_weights.unwrap_or(true);
        c.data = raw.data.map(|p| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        });
        c.out = raw.out;
        c.nuisance = raw.nuisance.unwrap_or(c.nuisance);
        c.learner = raw.learner.unwrap_or(c.learner);
        c.split = raw.split.unwrap_or(c.split);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent()).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Compatibility rules checked before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n == 0 {
            return Err(CliError::config("n", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(CliError::config("replications", "must be at least 1"));
        }
        if let Some(d) = self.lattice {
            if !(d > 0.0 && d.is_finite()) {
                return Err(CliError::config("lattice", "must be a positive step"));
            }
        }
        let kmax = self.split.k1.max(self.split.k2).max(self.split.k3);
        if self.split.k1 < 2 || self.split.k2 < 2 || self.split.k3 < 2 {
            return Err(CliError::config("split", "every fold count must be at least 2"));
        }
        if self.data.is_none() && self.n < 4 * kmax {
            return Err(CliError::config("n", format!("must be at least {} for {kmax} folds", 4 * kmax)));
        }
        if self.nuisances == NuisanceMode::True && self.data.is_some() {
            return Err(CliError::config("nuisances", "true nuisances need simulated data, not a dataset file"));
        }
        for kind in &self.cut_kinds {
            let spec = self.pipeline(*kind, 0);
            spec.validate().map_err(|e| CliError::config("estimands", e.to_string()))?;
        }
        if self.data.is_none() {
            for s in &self.settings {
                for e in &self.estimands {
                    e.validate(s.n_causes())
                        .map_err(|err| CliError::config("estimands", format!("{} for setting {s}: {err}", e.label())))?;
                }
            }
        }
        Ok(())
    }

    pub fn pipeline(&self, cut_kind: CutKind, seed: u64) -> PipelineSpec {
        PipelineSpec {
            estimands: self.estimands.clone(),
            cut_kind,
            learners: self.learners.clone(),
            nuisance: self.nuisance.clone(),
            learner: self.learner.clone(),
            split: self.split.clone(),
            seed,
            ra_variant: self.ra_variant,
            second_stage: self.second_stage,
            n_causes: 0,
        }
    }
}
