//! Subcommand pipelines.

use std::path::Path;

use idw_core::catalog::{self, CatalogMode, CatalogResult};
use idw_core::diagnostics::{DiagnosticsReport, OutcomeProfile};
use idw_core::estimand::Decomposition;
use idw_core::estimators::{ate_weights, IpwEstimate, PatchBin, PatchedOptions, TrimmedEstimate};
use idw_core::oracle::{finish_report, summarize, ConsistencyReport, JointKind, ScenarioSetup};
use idw_core::solver::{GramBand, MembershipReport, StatusCounts};
use idw_core::weights::WeightMatrixDiagnostic;
use idw_core::{
    build_template, check_candidate_design, contamination_decomposition, identification_strength, ipw_estimate,
    outcome_by_design_profile, patch_design, patched_estimate, population_gram, potential_weights,
    run_design_checklist, sample_gram, solve_implicit_design, trimmed_ate, Design, DesignKind, ImplicitDesignReport,
    JointDesign, PatchPolicy, PotentialWeightSet, RegressionSpec, SolverTolerances, Verdict,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CatalogModeConfig, Mode, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::{read_dataset, read_unit_weights, Dataset};
use crate::report::{cell, format_f64, OutputDir, Table, SCHEMA_VERSION};

#[derive(Debug, Clone, Serialize)]
struct InputSummary {
    data: Option<String>,
    n: usize,
    periods: usize,
    balanced: bool,
    treatments: Vec<String>,
    covariates: Vec<String>,
    has_outcomes: bool,
    has_design: bool,
}

impl InputSummary {
    fn new(cfg: &RunConfig, ds: &Dataset) -> Self {
        InputSummary {
            data: cfg.data.as_deref().and_then(Path::file_name).map(|f| f.to_string_lossy().into_owned()),
            n: ds.pop.n(),
            periods: ds.pop.periods(),
            balanced: ds.pop.is_balanced(),
            treatments: ds.ts.labels().to_vec(),
            covariates: ds.pop.covariate_names.clone(),
            has_outcomes: ds.pop.outcomes.is_some(),
            has_design: ds.design.is_some(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct SpecSummary {
    template: String,
    regressors: Vec<String>,
    contrasts: usize,
    notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct GramSummary {
    mode: Mode,
    dim: usize,
    min_eigenvalue: f64,
    trace: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EstimandSummary {
    wate_mean: Option<f64>,
    contamination: Vec<f64>,
    negative_cells: usize,
    zero_sum_error: f64,
}

/// Everything `analyze` computes before writing.
pub struct Analysis {
    pub ds: Dataset,
    pub spec: RegressionSpec,
    pub pws: PotentialWeightSet,
    pub report: ImplicitDesignReport,
    pub tol: SolverTolerances,
    strength: WeightMatrixDiagnostic,
    membership: Option<MembershipReport>,
    notes: Vec<String>,
}

impl Analysis {
    /// Implicit design when one was assembled, else the design columns.
    fn working_design(&self) -> Option<&Design> {
        self.report.design.as_ref().or(self.ds.design.as_ref())
    }

    fn oob_share(&self) -> Option<f64> {
        let d = self.report.design.as_ref()?;
        let tol = self.tol.properness;
        let bad = d.probs().iter().filter(|r| r.iter().any(|&p| p < -tol || p > 1.0 + tol)).count();
        Some(bad as f64 / d.n() as f64)
    }
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let path = cfg.data.as_ref().ok_or_else(|| CliError::Config("no data file (use --data or `data`)".into()))?;
    read_dataset(path, &cfg.columns, &cfg.design_columns, cfg.treatments.as_ref())
}

pub fn analyze_pipeline(cfg: &RunConfig) -> CliResult<Analysis> {
    let ds = load_dataset(cfg)?;
    let spec_cfg = cfg.spec.as_ref().ok_or_else(|| CliError::Config("no `spec` in the configuration".into()))?;
    let mut options = spec_cfg.options.clone();
    options.centering_design = ds.design.clone();
    let spec = build_template(&spec_cfg.template, &options, &ds.pop, &ds.ts)?;
    let gram = match cfg.mode {
        Mode::Estimated => sample_gram(&spec, &ds.pop)?,
        Mode::Population => {
            let d =
                ds.design.as_ref().ok_or_else(|| CliError::Config("population mode needs `design_columns`".into()))?;
            population_gram(&spec, &ds.pop, d)?
        }
    };
    let pws = potential_weights(&spec, &ds.pop, &gram)?;
    let strength = identification_strength(&pws);
    let tol = cfg.tolerances.resolve();
    let report = solve_implicit_design(&pws, &spec, &ds.pop, &tol).map_err(CliError::from)?;
    let mut notes = ds.notes.clone();
    let membership = match &ds.design {
        Some(d) => {
            let band = match cfg.mode {
                Mode::Population => GramBand::Uniform(tol.gram_population),
                Mode::Estimated => GramBand::Uniform(tol.gram_estimated.resolve(ds.pop.n())),
            };
            match check_candidate_design(d, &spec, &ds.pop, &band, &tol) {
                Ok(m) => Some(m),
                Err(e) => {
                    notes.push(format!("design-column membership check skipped: {e}"));
                    None
                }
            }
        }
        None => None,
    };
    Ok(Analysis { ds, spec, pws, report, tol, strength, membership, notes })
}

fn design_table(a: &Analysis) -> Table {
    let labels = a.ds.ts.labels();
    let mut t = Table::new(
        ["unit", "status"]
            .into_iter()
            .map(String::from)
            .chain(labels.iter().map(|l| format!("pi_{l}")))
            .chain(["proper".to_string(), "residual".to_string()]),
    );
    for (i, u) in a.report.per_unit.iter().enumerate() {
        let status = serde_json::to_value(u.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let mut row = vec![a.ds.pop.unit_ids[i].clone(), status];
        let values = a.report.design.as_ref().map(|d| d.row(i).to_vec()).or_else(|| u.design_row.clone());
        for w in 0..labels.len() {
            row.push(cell(values.as_ref().map(|v| v[w])));
        }
        row.push(u.proper.to_string());
        row.push(format_f64(u.residual));
        t.push(row);
    }
    t
}

fn weights_table(a: &Analysis) -> Table {
    let omega = a.report.estimand.as_ref().map(|e| &e.omega);
    let mut t = Table::new(["unit", "period", "level", "contrast", "rho", "omega"]);
    for i in 0..a.pws.n_units() {
        for w in 0..a.pws.levels() {
            let rho = a.pws.rho(i, w);
            for j in 0..rho.nrows() {
                for p in 0..rho.ncols() {
                    if !a.pws.is_present(i, p) {
                        continue;
                    }
                    t.push(vec![
                        a.ds.pop.unit_ids[i].clone(),
                        a.ds.pop.period_ids[p].clone(),
                        a.ds.ts.labels()[w].clone(),
                        j.to_string(),
                        format_f64(rho[(j, p)]),
                        cell(omega.map(|o| o[i][w][(j, p)])),
                    ]);
                }
            }
        }
    }
    t
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    input: InputSummary,
    spec: SpecSummary,
    gram: GramSummary,
    tolerances: &'a SolverTolerances,
    verdict: Verdict,
    counts: &'a StatusCounts,
    gram_consistent: Option<bool>,
    gram_discrepancy: Option<f64>,
    gram_tolerance: Option<f64>,
    oob_share: Option<f64>,
    design_mean: Option<Vec<f64>>,
    identification: &'a WeightMatrixDiagnostic,
    design_columns_membership: Option<&'a MembershipReport>,
    estimand: Option<EstimandSummary>,
    decomposition: Option<Decomposition>,
    diagnostics: Option<DiagnosticsReport>,
    profile: Option<OutcomeProfile>,
    notes: Vec<String>,
    files: Vec<String>,
}

pub fn cmd_analyze(cfg: &RunConfig) -> CliResult<()> {
    let a = analyze_pipeline(cfg)?;
    let mut notes = a.notes.clone();
    let cross_section = a.ds.pop.periods() == 1;
    let estimand = a.report.estimand.as_ref().map(|e| EstimandSummary {
        wate_mean: e.wate_mean,
        contamination: e.contamination.clone(),
        negative_cells: e.negativity.len(),
        zero_sum_error: e.zero_sum_error(),
    });
    let decomposition = match &a.report.estimand {
        Some(e) if cross_section => match contamination_decomposition(e, &a.ds.pop, None) {
            Ok(d) => Some(d),
            Err(err) => {
                notes.push(format!("decomposition skipped: {err}"));
                None
            }
        },
        _ => None,
    };
    let (mut diagnostics, mut profile) = (None, None);
    if cfg.diagnostics.enabled {
        match &a.report.design {
            Some(d) => {
                match run_design_checklist(d, &a.ds.pop, &cfg.diagnostics.checklist) {
                    Ok(r) => diagnostics = Some(r),
                    Err(e) => notes.push(format!("design checklist skipped: {e}")),
                }
                if let (Some(e), true, true) =
                    (&a.report.estimand, d.levels() == 2 && cross_section, a.ds.pop.outcomes.is_some())
                {
                    let omega: Vec<f64> = (0..d.n()).map(|i| e.omega[i][1][(0, 0)]).collect();
                    match outcome_by_design_profile(d, &a.ds.pop, cfg.diagnostics.profile_bins, &omega) {
                        Ok(p) => profile = Some(p),
                        Err(err) => notes.push(format!("outcome profile skipped: {err}")),
                    }
                }
            }
            None => notes.push("diagnostics skipped: no implicit design".into()),
        }
    }

    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.csv("design.csv", &design_table(&a))?;
    out.csv("weights.csv", &weights_table(&a))?;
    let mut files = out.written().to_vec();
    files.push("report.json".into());
    let gram = a.pws.gram();
    let rep = AnalyzeReport {
        schema_version: SCHEMA_VERSION,
        command: "analyze",
        seed: cfg.seed,
        input: InputSummary::new(cfg, &a.ds),
        spec: SpecSummary {
            template: cfg.spec.as_ref().map(|s| s.template.clone()).unwrap_or_default(),
            regressors: a.spec.names().to_vec(),
            contrasts: a.spec.n_contrasts(),
            notes: a.spec.notes().to_vec(),
        },
        gram: GramSummary {
            mode: cfg.mode,
            dim: gram.dim(),
            min_eigenvalue: gram.min_eigenvalue(),
            trace: gram.trace(),
        },
        tolerances: &a.tol,
        verdict: a.report.verdict,
        counts: &a.report.counts,
        gram_consistent: a.report.gram_consistent,
        gram_discrepancy: a.report.gram_discrepancy,
        gram_tolerance: a.report.gram_tolerance,
        oob_share: a.oob_share(),
        design_mean: a.report.design.as_ref().map(Design::mean_row),
        identification: &a.strength,
        design_columns_membership: a.membership.as_ref(),
        estimand,
        decomposition,
        diagnostics,
        profile,
        notes,
        files,
    };
    out.json("report.json", &rep)
}

#[derive(Serialize)]
struct PatchReport {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    verdict: Verdict,
    policy: PatchPolicy,
    bins: Vec<PatchBin>,
    excluded: Vec<String>,
    estimate: Option<IpwEstimate>,
    trimmed: Vec<TrimmedEstimate>,
    notes: Vec<String>,
}

fn require_design(a: &Analysis) -> CliResult<Design> {
    a.working_design()
        .cloned()
        .ok_or_else(|| CliError::Solve(idw_core::Error::Invalid("no implicit design and no design columns".into())))
}

fn trims(cfg: &RunConfig, design: &Design, a: &Analysis, notes: &mut Vec<String>) -> CliResult<Vec<TrimmedEstimate>> {
    if cfg.estimators.trim.is_empty() {
        return Ok(Vec::new());
    }
    if a.ds.pop.outcomes.is_none() {
        notes.push("trimmed ATE skipped: no outcomes".into());
        return Ok(Vec::new());
    }
    cfg.estimators.trim.iter().map(|&e| trimmed_ate(design, &a.ds.pop, e).map_err(CliError::from)).collect()
}

pub fn cmd_patch(cfg: &RunConfig) -> CliResult<()> {
    let a = analyze_pipeline(cfg)?;
    let design = require_design(&a)?;
    let pd = patch_design(&design, &a.ds.pop, cfg.estimators.patch)?;
    let mut notes = pd.notes.clone();
    let estimate = if a.ds.pop.outcomes.is_some() {
        let weights = ate_weights(a.ds.pop.n(), &pd.excluded);
        Some(patched_estimate(&pd, &a.ds.pop, &weights, PatchedOptions { stabilized: cfg.estimators.stabilized })?)
    } else {
        notes.push("patched estimate skipped: no outcomes".into());
        None
    };
    let trimmed = trims(cfg, &design, &a, &mut notes)?;

    let mut out = OutputDir::create(&cfg.output.dir)?;
    let mut t = Table::new(["unit", "pi", "patched", "excluded"]);
    let base = design.treated();
    for i in 0..a.ds.pop.n() {
        t.push(vec![
            a.ds.pop.unit_ids[i].clone(),
            format_f64(base[i]),
            format_f64(pd.patched_probs[i]),
            pd.excluded.contains(&i).to_string(),
        ]);
    }
    out.csv("patched.csv", &t)?;
    let rep = PatchReport {
        schema_version: SCHEMA_VERSION,
        command: "patch",
        seed: cfg.seed,
        verdict: a.report.verdict,
        policy: cfg.estimators.patch,
        bins: pd.bins.clone(),
        excluded: pd.excluded.iter().map(|&i| a.ds.pop.unit_ids[i].clone()).collect(),
        estimate,
        trimmed,
        notes,
    };
    out.json("patch.json", &rep)
}

#[derive(Serialize)]
struct EstimateReport {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    verdict: Verdict,
    design_kind: DesignKind,
    weights: &'static str,
    estimate: IpwEstimate,
    trimmed: Vec<TrimmedEstimate>,
    notes: Vec<String>,
}

pub fn cmd_estimate(cfg: &RunConfig) -> CliResult<()> {
    let a = analyze_pipeline(cfg)?;
    let design = require_design(&a)?;
    let pop = &a.ds.pop;
    let (weights, source) = match &cfg.estimators.unit_weights {
        Some(p) => (read_unit_weights(p, pop, a.ds.ts.len(), a.spec.n_contrasts())?, "unit_weights"),
        None if design.levels() == 2 && pop.periods() == 1 => (ate_weights(pop.n(), &[]), "ate"),
        None => return Err(CliError::Config("non-binary or panel estimates need --unit-weights".into())),
    };
    let estimate = ipw_estimate(&design, pop, &weights, cfg.estimators.eps)?;
    let mut notes = a.notes.clone();
    let trimmed = trims(cfg, &design, &a, &mut notes)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let rep = EstimateReport {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        seed: cfg.seed,
        verdict: a.report.verdict,
        design_kind: design.kind(),
        weights: source,
        estimate,
        trimmed,
        notes,
    };
    out.json("estimate.json", &rep)
}

#[derive(Serialize)]
struct AssignmentSummary {
    reps: usize,
    n: usize,
    /// Empirical treatment frequencies per unit and level.
    empirical: Vec<Vec<f64>>,
    /// max |empirical − marginal| when the marginals are known.
    max_marginal_error: Option<f64>,
}

#[derive(Serialize)]
struct SimulateReport {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    consistency: Option<ConsistencyReport>,
    assignment: Option<AssignmentSummary>,
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let sim =
        cfg.simulate.as_ref().ok_or_else(|| CliError::Config("no `simulate` section in the configuration".into()))?;
    if sim.scenario.is_none() && sim.joint.is_none() {
        return Err(CliError::Config("`simulate` needs a `scenario` or a `joint` design".into()));
    }
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let consistency = match sim.scenario {
        Some(scenario) => {
            if sim.n_grid.is_empty() {
                return Err(CliError::Config("`simulate.n_grid` is empty".into()));
            }
            let mut points = Vec::with_capacity(sim.n_grid.len());
            for &n in &sim.n_grid {
                let setup = ScenarioSetup::new(scenario, n, cfg.seed)?;
                let runs = (0..sim.reps as u64)
                    .into_par_iter()
                    .map(|r| setup.replicate(r))
                    .collect::<idw_core::Result<Vec<_>>>()?;
                points.push(summarize(&setup, &runs));
            }
            Some(finish_report(scenario, points))
        }
        None => None,
    };
    let assignment = match &sim.joint {
        Some(kind) => Some(simulate_joint(kind, cfg.seed, sim.reps, &mut out)?),
        None => None,
    };
    let rep =
        SimulateReport { schema_version: SCHEMA_VERSION, command: "simulate", seed: cfg.seed, consistency, assignment };
    out.json("simulate.json", &rep)
}

fn simulate_joint(kind: &JointKind, seed: u64, reps: usize, out: &mut OutputDir) -> CliResult<AssignmentSummary> {
    let jd = JointDesign { kind: kind.clone(), seed };
    let draws = (0..reps as u64).into_par_iter().map(|r| jd.draw(r)).collect::<idw_core::Result<Vec<_>>>()?;
    let n = jd.n();
    let levels = match kind {
        JointKind::Independent(d) | JointKind::Rejective { design: d, .. } => d.levels(),
        JointKind::CompleteRandomization { .. } => 2,
    };
    let mut empirical = vec![vec![0.0; levels]; n];
    let mut t = Table::new(std::iter::once("rep".to_string()).chain((0..n).map(|i| format!("u{i}"))));
    for (r, w) in draws.iter().enumerate() {
        for (i, &wi) in w.iter().enumerate() {
            empirical[i][wi] += 1.0;
        }
        t.push(std::iter::once(r.to_string()).chain(w.iter().map(|v| v.to_string())).collect());
    }
    out.csv("assignments.csv", &t)?;
    for row in &mut empirical {
        row.iter_mut().for_each(|v| *v /= reps as f64);
    }
    let max_marginal_error = jd.marginals().map(|m| {
        (0..n)
            .flat_map(|i| (0..levels).map(move |w| (i, w)))
            .map(|(i, w)| (empirical[i][w] - m.prob(i, w)).abs())
            .fold(0.0, f64::max)
    });
    Ok(AssignmentSummary { reps, n, empirical, max_marginal_error })
}

#[derive(Serialize)]
struct CatalogReport {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    input: InputSummary,
    result: CatalogResult,
}

pub fn cmd_catalog(cfg: &RunConfig) -> CliResult<()> {
    let c = cfg.catalog.as_ref().ok_or_else(|| CliError::Config("no `catalog` section in the configuration".into()))?;
    let ds = load_dataset(cfg)?;
    let (pop, ts) = (&ds.pop, &ds.ts);
    let fallback;
    let mode = match c.mode {
        CatalogModeConfig::Estimated => CatalogMode::Estimated,
        CatalogModeConfig::Population => CatalogMode::Population(
            ds.design.as_ref().ok_or_else(|| CliError::Config("population mode needs `design_columns`".into()))?,
        ),
        CatalogModeConfig::FixedPoint => CatalogMode::FixedPoint(match &ds.design {
            Some(d) => d,
            None => {
                fallback = Design::constant(&vec![1.0 / ts.len() as f64; ts.len()], pop.n(), DesignKind::Candidate)?;
                &fallback
            }
        }),
    };
    let cols = &c.covariates;
    let need_t = || c.t.ok_or_else(|| CliError::Config("`catalog.t` is required for interacted_t".into()));
    let result = match c.template.as_str() {
        "angrist" => catalog::angrist_design(pop, ts, cols, mode)?,
        "multivalued" => catalog::multivalued_design(pop, ts, cols, mode)?,
        "saturated_interacted" => catalog::saturated_interacted_design(pop, ts, cols, mode)?,
        "kline" => catalog::kline_design(pop, ts, cols, mode)?,
        "interacted_t" => catalog::interacted_t_design(pop, ts, cols, need_t()?, mode)?,
        "interaction" => catalog::forbidden_interaction_check(pop, ts, cols, &c.interacted, mode)?,
        "twfe" => catalog::twfe_design(pop, ts, mode)?,
        "twfe_covariates" => catalog::twfe_covariate_condition(pop, ts, cols, mode)?,
        "unbalanced_twfe" => catalog::unbalanced_twfe_condition(pop, ts, mode)?,
        "owfe" => catalog::owfe_check(ts)?,
        "event_study" => catalog::event_study_design(pop, ts, &c.event_times, mode)?,
        other => return Err(CliError::Spec(idw_core::Error::UnknownTemplate(other.to_string()))),
    };
    let mut out = OutputDir::create(&cfg.output.dir)?;
    if let Some(d) = &result.design {
        let mut t =
            Table::new(std::iter::once("unit".to_string()).chain(ts.labels().iter().map(|l| format!("pi_{l}"))));
        for i in 0..d.n() {
            t.push(std::iter::once(pop.unit_ids[i].clone()).chain(d.row(i).iter().map(|&p| format_f64(p))).collect());
        }
        out.csv("catalog_design.csv", &t)?;
    }
    let rep = CatalogReport {
        schema_version: SCHEMA_VERSION,
        command: "catalog",
        seed: cfg.seed,
        input: InputSummary::new(cfg, &ds),
        result,
    };
    out.json("catalog.json", &rep)
}
