//! Run configuration, read from JSON.

use std::path::{Path, PathBuf};

use idw_core::diagnostics::ChecklistOptions;
use idw_core::model::Centering;
use idw_core::oracle::{JointKind, Scenario};
use idw_core::solver::GramTolerance;
use idw_core::{PatchPolicy, SolverTolerances, TemplateOptions, TreatmentSet};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::ColumnMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Population Gram from the design columns.
    Population,
    /// Sample Gram from the observed treatments.
    #[default]
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceProfile {
    Strict,
    #[default]
    Default,
    Loose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub template: String,
    #[serde(default)]
    pub options: TemplateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    pub checklist: ChecklistOptions,
    pub profile_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { enabled: true, checklist: ChecklistOptions::default(), profile_bins: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Trimming thresholds ε for the trimmed ATE.
    pub trim: Vec<f64>,
    pub patch: PatchPolicy,
    pub stabilized: bool,
    /// Division guard for IPW.
    pub eps: f64,
    pub unit_weights: Option<PathBuf>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            trim: Vec::new(),
            patch: PatchPolicy::Quantile(5),
            stabilized: false,
            eps: idw_core::estimators::DIVISION_GUARD,
            unit_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("idw-out") }
    }
}

/// Individual solver tolerances replacing the profile's values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceOverrides {
    pub rank_cutoff: Option<f64>,
    pub inconsistency: Option<f64>,
    pub properness: Option<f64>,
    pub gram_population: Option<f64>,
    pub gram_estimated: Option<GramTolerance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    pub profile: ToleranceProfile,
    pub overrides: ToleranceOverrides,
}

impl ToleranceConfig {
    pub fn resolve(&self) -> SolverTolerances {
        let mut t = match self.profile {
            ToleranceProfile::Strict => SolverTolerances::strict(),
            ToleranceProfile::Default => SolverTolerances::default(),
            ToleranceProfile::Loose => SolverTolerances::loose(),
        };
        let o = &self.overrides;
        t.rank_cutoff = o.rank_cutoff.unwrap_or(t.rank_cutoff);
        t.inconsistency = o.inconsistency.unwrap_or(t.inconsistency);
        t.properness = o.properness.unwrap_or(t.properness);
        t.gram_population = o.gram_population.unwrap_or(t.gram_population);
        t.gram_estimated = o.gram_estimated.unwrap_or(t.gram_estimated);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Monte Carlo consistency scenario.
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Joint assignment distribution to draw from.
    pub joint: Option<JointKind>,
}

fn default_reps() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogModeConfig {
    /// Plug in the design columns.
    Population,
    /// Plug in observed treatments.
    #[default]
    Estimated,
    /// Solve for a self-consistent design, starting from the design columns.
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    pub template: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Second covariate block for `interaction`.
    #[serde(default)]
    pub interacted: Vec<String>,
    pub t: Option<Centering>,
    #[serde(default)]
    pub event_times: Vec<i64>,
    #[serde(default)]
    pub mode: CatalogModeConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Columns holding π(1), …, π(J) (or all of π(0), …, π(J)).
    #[serde(default)]
    pub design_columns: Vec<String>,
    pub treatments: Option<TreatmentSet>,
    pub spec: Option<SpecConfig>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub estimators: EstimatorConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    pub simulate: Option<SimulateConfig>,
    pub catalog: Option<CatalogConfig>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(what: &str, p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} `{}` does not exist", p.display())))
    }
}

impl RunConfig {
    /// Parses a config file, resolving paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data = cfg.data.map(|p| resolve(base, &p));
        cfg.estimators.unit_weights = cfg.estimators.unit_weights.map(|p| resolve(base, &p));
        cfg.output.dir = resolve(base, &cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that every referenced input exists.
    pub fn validate(&self) -> CliResult<()> {
        if let Some(p) = &self.data {
            require_file("data file", p)?;
        }
        if let Some(p) = &self.estimators.unit_weights {
            require_file("unit-weights file", p)?;
        }
        for &e in &self.estimators.trim {
            if !(0.0..0.5).contains(&e) {
                return Err(CliError::Config(format!("trimming threshold {e} outside [0, 0.5)")));
            }
        }
        Ok(())
    }
}
