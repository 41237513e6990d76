//! Run configuration: one TOML file per run, unknown keys rejected.

use std::path::{Path, PathBuf};

use ecg_icd::build::{BuildInputs, BuildOptions};
use ecg_icd::cohort::IngestMode;
use ecg_icd::dataset::ScenarioSpec;
use ecg_icd::eval::{BootstrapConfig, CiMethod};
use ecg_icd::models::{Family, ModelConfig, Preset};
use ecg_icd::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}
fn default_scenario() -> ScenarioSpec {
    "T(ALL2ALL)-E(ALL2ALL)".parse().expect("valid scenario")
}
fn default_threshold() -> usize {
    2000
}
fn default_n_boot() -> usize {
    1000
}
fn default_alpha() -> f64 {
    0.05
}
fn default_coverage() -> Vec<f64> {
    vec![0.9, 0.8]
}
fn default_below() -> Vec<f64> {
    vec![0.7]
}
fn default_top_mcc() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory is `out_dir/name`.
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_scenario")]
    pub scenario: ScenarioSpec,
    /// Worker threads; 0 uses one per core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub seeds: Seeds,
    pub inputs: Option<Inputs>,
    #[serde(default)]
    pub build: BuildSection,
    pub model: ModelSection,
    /// Training settings; `train.seed` is taken from `seeds.train`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub folds: u64,
    #[serde(default)]
    pub init: u64,
    #[serde(default)]
    pub train: u64,
    #[serde(default)]
    pub bootstrap: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds { folds: seed, init: seed, train: seed, bootstrap: seed }
    }
}

/// Raw tables; relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub records: PathBuf,
    pub ed_stays: PathBuf,
    pub admissions: PathBuf,
    pub ed_diagnoses: PathBuf,
    pub hosp_diagnoses: PathBuf,
    pub mapping: PathBuf,
    /// Optional `code<TAB>description` table for reports.
    pub descriptions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSection {
    #[serde(default = "default_threshold")]
    pub threshold: usize,
    #[serde(default)]
    pub mode: IngestMode,
}

impl Default for BuildSection {
    fn default() -> Self {
        BuildSection { threshold: default_threshold(), mode: IngestMode::Strict }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub preset: Preset,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub ci_method: CiMethod,
    /// Thresholds for "AUROC above" coverage tables.
    #[serde(default = "default_coverage")]
    pub coverage: Vec<f64>,
    /// Thresholds for "AUROC below" tables.
    #[serde(default = "default_below")]
    pub below: Vec<f64>,
    /// Strongest label pairs listed in the MCC table.
    #[serde(default = "default_top_mcc")]
    pub top_mcc: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_boot: default_n_boot(),
            alpha: default_alpha(),
            ci_method: CiMethod::Percentile,
            coverage: default_coverage(),
            below: default_below(),
            top_mcc: default_top_mcc(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub scenario: Option<ScenarioSpec>,
}

impl RunConfig {
    /// Reads, applies overrides, makes paths absolute and validates.
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Absolute, so the snapshot written beside the outputs stays valid.
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("."))).map_err(|e| CliError::io(path, e))?;
        cfg.resolve(&base, ov)?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path, ov: &Overrides) -> Result<(), CliError> {
        if let Some(s) = ov.seed {
            self.seeds = Seeds::all(s);
        }
        if let Some(t) = ov.threads {
            self.threads = t;
        }
        if let Some(s) = &ov.scenario {
            self.scenario = *s;
        }
        if self.train.seed != 0 && self.train.seed != self.seeds.train {
            return Err(CliError::Config("set the training seed through seeds.train, not train.seed".into()));
        }
        self.train.seed = self.seeds.train;
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." || self.name == "." {
            return Err(CliError::Config(format!("run name {:?} must be a plain directory name", self.name)));
        }
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.out_dir);
        if let Some(i) = &mut self.inputs {
            for p in [&mut i.records, &mut i.ed_stays, &mut i.admissions, &mut i.ed_diagnoses, &mut i.hosp_diagnoses, &mut i.mapping] {
                abs(p);
            }
            if let Some(d) = &mut i.descriptions {
                abs(d);
            }
        }
        if let Some(p) = self.model.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(CliError::Config(format!("model.dropout {p} outside [0, 1)")));
            }
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) || self.eval.n_boot == 0 {
            return Err(CliError::Config("eval.alpha must lie in (0, 1) and eval.n_boot be positive".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn inputs(&self) -> Result<&Inputs, CliError> {
        self.inputs.as_ref().ok_or_else(|| CliError::Config("the build command needs an [inputs] table".into()))
    }

    pub fn build_inputs(&self) -> Result<BuildInputs, CliError> {
        let i = self.inputs()?;
        Ok(BuildInputs {
            records: i.records.clone(),
            ed_stays: i.ed_stays.clone(),
            admissions: i.admissions.clone(),
            ed_diagnoses: i.ed_diagnoses.clone(),
            hosp_diagnoses: i.hosp_diagnoses.clone(),
            mapping: i.mapping.clone(),
        })
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions { threshold: self.build.threshold, seed: self.seeds.folds, mode: self.build.mode }
    }

    pub fn model_config(&self, in_leads: usize, n_labels: usize) -> ModelConfig {
        let mut m = ModelConfig::preset(self.model.family, self.model.preset, in_leads, n_labels);
        m.input_len = self.train.crop_len;
        m.seed = self.seeds.init;
        if let Some(p) = self.model.dropout {
            m.dropout = p;
        }
        m
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig { n_boot: self.eval.n_boot, alpha: self.eval.alpha, seed: self.seeds.bootstrap, method: self.eval.ci_method }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
