//! Populations, treatment sets, designs and regression specifications.

mod template;

pub use template::{
    adoption_index, build_template, interaction_spec, Centering, NamedCentering, TemplateOptions, TEMPLATE_NAMES,
};
pub(crate) use template::{cells as template_cells, centering_point, event_dummies, interacted_spec};

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::convert::TryFrom;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sum-to-one tolerance for designs.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// The ordered set 𝒲 of treatment values, each a length-T vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreatmentSetRaw")]
pub struct TreatmentSet {
    values: Vec<Vec<f64>>,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct TreatmentSetRaw {
    values: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl TryFrom<TreatmentSetRaw> for TreatmentSet {
    type Error = Error;
    fn try_from(raw: TreatmentSetRaw) -> Result<Self> {
        TreatmentSet::new(raw.values, raw.labels)
    }
}

impl TreatmentSet {
    pub fn new(values: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Invalid("a treatment set needs at least two values".into()));
        }
        if labels.len() != values.len() {
            return Err(Error::Dimension(format!("{} labels for {} treatment values", labels.len(), values.len())));
        }
        let t = values[0].len();
        if t == 0 {
            return Err(Error::Invalid("treatment vectors must have length T >= 1".into()));
        }
        for (j, v) in values.iter().enumerate() {
            if v.len() != t {
                return Err(Error::Dimension(format!("treatment value {j} has length {} != {t}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("treatment value {j} is not finite")));
            }
            if values[..j].iter().any(|u| u == v) {
                return Err(Error::Invalid(format!("treatment value {j} is a duplicate")));
            }
        }
        Ok(TreatmentSet { values, labels })
    }

    /// Unlabeled constructor; labels are the value indices.
    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let labels = (0..values.len()).map(|j| j.to_string()).collect();
        Self::new(values, labels)
    }

    pub fn binary() -> Self {
        Self::from_values(vec![vec![0.0], vec![1.0]]).expect("valid")
    }

    /// Scalar treatments 0, 1, …, J.
    pub fn multivalued(j: usize) -> Result<Self> {
        Self::from_values((0..=j).map(|v| vec![v as f64]).collect())
    }

    /// Staggered-adoption paths over `periods` periods. `Some(a)` switches on
    /// at period index `a` (0-based); `None` is never treated.
    pub fn staggered(periods: usize, cohorts: &[Option<usize>]) -> Result<Self> {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for c in cohorts {
            let path: Vec<f64> = (0..periods)
                .map(|t| match c {
                    Some(a) if t >= *a => 1.0,
                    _ => 0.0,
                })
                .collect();
            values.push(path);
            labels.push(match c {
                Some(a) => format!("adopt@{a}"),
                None => "never".to_string(),
            });
        }
        let ts = Self::new(values, labels)?;
        debug_assert!(ts.is_staggered());
        Ok(ts)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, w: usize) -> &[f64] {
        &self.values[w]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// J + 1.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn periods(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_staggered(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|&x| x == 0.0 || x == 1.0) && v.windows(2).all(|p| p[0] <= p[1]))
    }

    pub fn index_of(&self, value: &[f64]) -> Option<usize> {
        self.values.iter().position(|v| v.as_slice() == value)
    }
}

/// A finite population of units observed over T periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub unit_ids: Vec<String>,
    pub period_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Unit-level covariates, n × d.
    pub covariates: Vec<Vec<f64>>,
    /// Optional time-varying covariates, n × T × d, sharing `covariate_names`.
    pub varying_covariates: Option<Vec<Vec<Vec<f64>>>>,
    /// 𝒯_i as an n × T mask.
    pub observed_periods: Vec<Vec<bool>>,
    /// W_i as an index into the treatment set.
    pub treatment: Option<Vec<usize>>,
    /// Y_it with explicit absence.
    pub outcomes: Option<Vec<Vec<Option<f64>>>>,
}

impl Population {
    pub fn cross_section(covariate_names: Vec<String>, covariates: Vec<Vec<f64>>) -> Self {
        Self::panel(covariate_names, covariates, 1)
    }

    /// Balanced panel with unit-level covariates.
    pub fn panel(covariate_names: Vec<String>, covariates: Vec<Vec<f64>>, periods: usize) -> Self {
        let n = covariates.len();
        Population {
            unit_ids: (0..n).map(|i| i.to_string()).collect(),
            period_ids: (1..=periods).map(|t| t.to_string()).collect(),
            covariate_names,
            covariates,
            varying_covariates: None,
            observed_periods: vec![vec![true; periods]; n],
            treatment: None,
            outcomes: None,
        }
    }

    pub fn with_treatment(mut self, w: Vec<usize>) -> Self {
        self.treatment = Some(w);
        self
    }

    pub fn with_outcomes(mut self, y: Vec<Vec<Option<f64>>>) -> Self {
        self.outcomes = Some(y);
        self
    }

    /// Cross-section outcomes.
    pub fn with_scalar_outcomes(self, y: &[f64]) -> Self {
        self.with_outcomes(y.iter().map(|&v| vec![Some(v)]).collect())
    }

    pub fn with_observed_periods(mut self, mask: Vec<Vec<bool>>) -> Self {
        self.observed_periods = mask;
        self
    }

    pub fn with_varying_covariates(mut self, x: Vec<Vec<Vec<f64>>>) -> Self {
        self.varying_covariates = Some(x);
        self
    }

    pub fn n(&self) -> usize {
        self.observed_periods.len()
    }

    pub fn periods(&self) -> usize {
        self.period_ids.len()
    }

    pub fn d(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.covariate_names.iter().position(|c| c == name).ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i]
    }

    /// Covariates of unit `i` at period `t`; unit-level values when no
    /// time-varying covariates are stored.
    pub fn x_at(&self, i: usize, t: usize) -> &[f64] {
        match &self.varying_covariates {
            Some(v) => &v[i][t],
            None => &self.covariates[i],
        }
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.observed_periods[i][t]
    }

    pub fn observed_count(&self, i: usize) -> usize {
        self.observed_periods[i].iter().filter(|&&b| b).count()
    }

    pub fn is_balanced(&self) -> bool {
        self.observed_periods.iter().all(|row| row.iter().all(|&b| b))
    }

    pub fn treatment_of(&self, i: usize) -> Option<usize> {
        self.treatment.as_ref().map(|w| w[i])
    }

    pub fn outcome(&self, i: usize, t: usize) -> Option<f64> {
        self.outcomes.as_ref().and_then(|y| y[i][t])
    }

    /// Observed treatment as a required vector.
    pub fn require_treatment(&self) -> Result<&[usize]> {
        self.treatment.as_deref().ok_or_else(|| Error::Invalid("population has no observed treatments".into()))
    }

    pub fn require_outcomes(&self) -> Result<&[Vec<Option<f64>>]> {
        self.outcomes.as_deref().ok_or_else(|| Error::Invalid("population has no observed outcomes".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub unit: Option<usize>,
    pub period: Option<usize>,
    pub message: String,
}

/// Invariant violations found by [`validate_population`]; empty iff valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, unit: Option<usize>, period: Option<usize>, message: &str) {
        self.violations.push(Violation { unit, period, message: message.to_string() });
    }
}

pub fn validate_population(pop: &Population, ts: &TreatmentSet) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = pop.n();
    let t_len = pop.periods();
    let d = pop.d();
    if ts.periods() != t_len {
        rep.push(None, None, "treatment vectors do not match the period count");
    }
    if pop.unit_ids.len() != n || pop.covariates.len() != n {
        rep.push(None, None, "unit count mismatch between ids, covariates and periods");
    }
    for (i, row) in pop.covariates.iter().enumerate() {
        if row.len() != d {
            rep.push(Some(i), None, "covariate row has the wrong width");
        } else if row.iter().any(|x| !x.is_finite()) {
            rep.push(Some(i), None, "non-finite covariate");
        }
    }
    if let Some(v) = &pop.varying_covariates {
        if v.len() != n || v.iter().any(|u| u.len() != t_len || u.iter().any(|r| r.len() != d)) {
            rep.push(None, None, "time-varying covariates have the wrong shape");
        }
    }
    for (i, mask) in pop.observed_periods.iter().enumerate() {
        if mask.len() != t_len {
            rep.push(Some(i), None, "observed-period mask has the wrong length");
        } else if !mask.iter().any(|&b| b) {
            rep.push(Some(i), None, "unit has no observed period");
        }
    }
    if let Some(w) = &pop.treatment {
        if w.len() != n {
            rep.push(None, None, "treatment vector length differs from unit count");
        }
        for (i, &wi) in w.iter().enumerate() {
            if wi >= ts.len() {
                rep.push(Some(i), None, "treatment index out of range");
            }
        }
    }
    if let Some(y) = &pop.outcomes {
        if y.len() != n {
            rep.push(None, None, "outcome rows differ from unit count");
        }
        for (i, row) in y.iter().enumerate().take(n) {
            if row.len() != t_len {
                rep.push(Some(i), None, "outcome row has the wrong length");
                continue;
            }
            for (t, v) in row.iter().enumerate() {
                let observed = pop.observed_periods[i].get(t).copied().unwrap_or(false);
                match (v, observed) {
                    (Some(_), false) => rep.push(Some(i), Some(t), "outcome outside observed period"),
                    (None, true) => rep.push(Some(i), Some(t), "missing outcome in observed period"),
                    (Some(y), true) if !y.is_finite() => rep.push(Some(i), Some(t), "non-finite outcome"),
                    _ => {}
                }
            }
        }
    }
    rep
}

/// y_i(w) for every unit and treatment value (simulation and oracle use).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeTable {
    /// n × (J+1) × T.
    pub y: Vec<Vec<Vec<f64>>>,
}

impl PotentialOutcomeTable {
    pub fn new(y: Vec<Vec<Vec<f64>>>) -> Self {
        PotentialOutcomeTable { y }
    }

    pub fn from_fn(n: usize, levels: usize, periods: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let y = (0..n).map(|i| (0..levels).map(|w| (0..periods).map(|t| f(i, w, t)).collect()).collect()).collect();
        PotentialOutcomeTable { y }
    }

    pub fn get(&self, i: usize, w: usize, t: usize) -> f64 {
        self.y[i][w][t]
    }

    /// Observed outcomes implied by the table at the observed treatments.
    pub fn realize(&self, pop: &Population) -> Result<Vec<Vec<Option<f64>>>> {
        let w = pop.require_treatment()?;
        Ok((0..pop.n())
            .map(|i| (0..pop.periods()).map(|t| pop.is_observed(i, t).then(|| self.y[i][w[i]][t])).collect())
            .collect())
    }

    /// Mismatches between the realized slice and the observed outcomes.
    pub fn check_realized(&self, pop: &Population) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let (Some(w), Some(y)) = (&pop.treatment, &pop.outcomes) else {
            return rep;
        };
        for i in 0..pop.n() {
            for t in 0..pop.periods() {
                if let Some(obs) = y[i][t] {
                    if self.y[i][w[i]][t] != obs {
                        rep.push(Some(i), Some(t), "realized potential outcome differs from observed outcome");
                    }
                }
            }
        }
        rep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    True,
    Implicit,
    Estimated,
    Patched,
    Candidate,
}

/// Per-unit treatment probabilities π_i(w).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignRaw")]
pub struct Design {
    probs: Vec<Vec<f64>>,
    kind: DesignKind,
}

#[derive(Deserialize)]
struct DesignRaw {
    probs: Vec<Vec<f64>>,
    kind: DesignKind,
}

impl TryFrom<DesignRaw> for Design {
    type Error = Error;
    fn try_from(raw: DesignRaw) -> Result<Self> {
        Design::new(raw.probs, raw.kind)
    }
}

impl Design {
    pub fn new(probs: Vec<Vec<f64>>, kind: DesignKind) -> Result<Self> {
        let levels = probs.first().map_or(0, |r| r.len());
        if levels < 2 {
            return Err(Error::Invalid("design rows need at least two treatment values".into()));
        }
        for (i, row) in probs.iter().enumerate() {
            if row.len() != levels {
                return Err(Error::Dimension(format!("design row {i} has {} entries, expected {levels}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite()) {
                return Err(Error::Invalid(format!("design row {i} is not finite")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Invalid(format!("design row {i} sums to {s}")));
            }
        }
        Ok(Design { probs, kind })
    }

    /// Binary design from treated probabilities π_i(1).
    pub fn binary(treated: &[f64], kind: DesignKind) -> Result<Self> {
        Self::new(treated.iter().map(|&p| vec![1.0 - p, p]).collect(), kind)
    }

    /// Point masses at the observed treatments.
    pub fn point_mass(treatment: &[usize], levels: usize) -> Result<Self> {
        let probs = treatment
            .iter()
            .map(|&w| {
                if w >= levels {
                    return Err(Error::Invalid(format!("treatment index {w} out of range")));
                }
                let mut row = vec![0.0; levels];
                row[w] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(probs, DesignKind::Estimated)
    }

    pub fn constant(row: &[f64], n: usize, kind: DesignKind) -> Result<Self> {
        Self::new(vec![row.to_vec(); n], kind)
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i]
    }

    pub fn prob(&self, i: usize, w: usize) -> f64 {
        self.probs[i][w]
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: DesignKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    pub fn levels(&self) -> usize {
        self.probs[0].len()
    }

    /// π_i(1) for binary designs.
    pub fn treated(&self) -> Vec<f64> {
        self.probs.iter().map(|r| r[1]).collect()
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        self.probs.iter().flatten().all(|&p| p >= -tol && p <= 1.0 + tol)
    }

    /// Constant row when π_i(·) is the same for all units within `tol`.
    pub fn constant_row(&self, tol: f64) -> Option<Vec<f64>> {
        let first = &self.probs[0];
        self.probs.iter().all(|r| r.iter().zip(first).all(|(a, b)| (a - b).abs() <= tol)).then(|| first.clone())
    }

    /// Mean row (1/n) Σ_i π_i(·).
    pub fn mean_row(&self) -> Vec<f64> {
        let n = self.n() as f64;
        let mut m = vec![0.0; self.levels()];
        for r in &self.probs {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Regressors z_t(x_i, w), contrast Λ and treatment set of a regression.
///
/// The transform is materialized as one T×K matrix per (unit, treatment
/// value) so that specs serialize exactly. Rows for periods outside 𝒯_i are
/// never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    #[serde(with = "crate::linalg::serde_mat::nested")]
    regressors: Vec<Vec<DMatrix<f64>>>,
    #[serde(with = "crate::linalg::serde_mat")]
    contrast: DMatrix<f64>,
    names: Vec<String>,
    within_demeaned: bool,
    template_tag: Option<String>,
    treatments: TreatmentSet,
    notes: Vec<String>,
}

impl RegressionSpec {
    pub fn new(regressors: Vec<Vec<DMatrix<f64>>>, contrast: DMatrix<f64>, treatments: TreatmentSet) -> Result<Self> {
        let k = contrast.ncols();
        let t = treatments.periods();
        for (i, unit) in regressors.iter().enumerate() {
            if unit.len() != treatments.len() {
                return Err(Error::Dimension(format!("unit {i} has {} treatment slices", unit.len())));
            }
            for z in unit {
                if z.shape() != (t, k) {
                    return Err(Error::Dimension(format!(
                        "unit {i} regressor block is {:?}, expected ({t}, {k})",
                        z.shape()
                    )));
                }
            }
        }
        if contrast.nrows() == 0 {
            return Err(Error::Invalid("contrast has no rows".into()));
        }
        let names = (0..k).map(|j| format!("z{j}")).collect();
        Ok(RegressionSpec {
            regressors,
            contrast,
            names,
            within_demeaned: false,
            template_tag: None,
            treatments,
            notes: Vec::new(),
        })
    }

    /// Builds the regressor tensor from a pure map (unit, period, treatment
    /// index) → K-vector.
    pub fn from_fn(
        n: usize,
        treatments: TreatmentSet,
        contrast: DMatrix<f64>,
        f: impl Fn(usize, usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let k = contrast.ncols();
        let t_len = treatments.periods();
        let mut regressors = Vec::with_capacity(n);
        for i in 0..n {
            let mut unit = Vec::with_capacity(treatments.len());
            for w in 0..treatments.len() {
                let mut z = DMatrix::zeros(t_len, k);
                for t in 0..t_len {
                    let row = f(i, t, w);
                    if row.len() != k {
                        return Err(Error::Dimension(format!(
                            "transform returned {} entries, expected {k}",
                            row.len()
                        )));
                    }
                    for (c, v) in row.into_iter().enumerate() {
                        z[(t, c)] = v;
                    }
                }
                unit.push(z);
            }
            regressors.push(unit);
        }
        Self::new(regressors, contrast, treatments)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_regressors() {
            return Err(Error::Dimension("regressor name count".into()));
        }
        self.names = names;
        Ok(self)
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.template_tag = Some(tag.to_string());
        self
    }

    pub fn with_note(mut self, note: String) -> Self {
        self.notes.push(note);
        self
    }

    pub fn with_contrast(mut self, contrast: DMatrix<f64>) -> Result<Self> {
        if contrast.ncols() != self.n_regressors() || contrast.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "contrast is {:?}, expected k × {}",
                contrast.shape(),
                self.n_regressors()
            )));
        }
        self.contrast = contrast;
        Ok(self)
    }

    /// Within-transformation over each unit's observed periods. Rows outside
    /// 𝒯_i are zeroed.
    pub fn within_demean(mut self, pop: &Population) -> Result<Self> {
        if pop.n() != self.n_units() || pop.periods() != self.periods() {
            return Err(Error::Dimension("population does not match spec".into()));
        }
        for (i, unit) in self.regressors.iter_mut().enumerate() {
            let obs: Vec<usize> = (0..pop.periods()).filter(|&t| pop.is_observed(i, t)).collect();
            let l = obs.len() as f64;
            for z in unit.iter_mut() {
                for c in 0..z.ncols() {
                    let mean = obs.iter().map(|&t| z[(t, c)]).sum::<f64>() / l;
                    for t in 0..z.nrows() {
                        z[(t, c)] = if pop.is_observed(i, t) { z[(t, c)] - mean } else { 0.0 };
                    }
                }
            }
        }
        self.within_demeaned = true;
        Ok(self)
    }

    /// Largest |Σ_{t∈𝒯_i} z_t(x_i, w)| over units, treatments and regressors.
    pub fn demeaning_error(&self, pop: &Population) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, unit) in self.regressors.iter().enumerate() {
            for z in unit {
                for c in 0..z.ncols() {
                    let s: f64 = (0..z.nrows()).filter(|&t| pop.is_observed(i, t)).map(|t| z[(t, c)]).sum();
                    worst = worst.max(s.abs());
                }
            }
        }
        worst
    }

    pub fn z(&self, i: usize, w: usize) -> &DMatrix<f64> {
        &self.regressors[i][w]
    }

    pub fn regressors(&self) -> &[Vec<DMatrix<f64>>] {
        &self.regressors
    }

    pub fn contrast(&self) -> &DMatrix<f64> {
        &self.contrast
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn within_demeaned(&self) -> bool {
        self.within_demeaned
    }

    pub fn template_tag(&self) -> Option<&str> {
        self.template_tag.as_deref()
    }

    pub fn treatments(&self) -> &TreatmentSet {
        &self.treatments
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn n_units(&self) -> usize {
        self.regressors.len()
    }

    /// J + 1.
    pub fn levels(&self) -> usize {
        self.treatments.len()
    }

    pub fn periods(&self) -> usize {
        self.treatments.periods()
    }

    /// K.
    pub fn n_regressors(&self) -> usize {
        self.contrast.ncols()
    }

    /// k.
    pub fn n_contrasts(&self) -> usize {
        self.contrast.nrows()
    }

    pub(crate) fn replace_regressors(
        &self,
        regressors: Vec<Vec<DMatrix<f64>>>,
        contrast: DMatrix<f64>,
        names: Vec<String>,
        tag: Option<String>,
    ) -> Self {
        RegressionSpec {
            regressors,
            contrast,
            names,
            within_demeaned: self.within_demeaned,
            template_tag: tag,
            treatments: self.treatments.clone(),
            notes: self.notes.clone(),
        }
    }

    pub(crate) fn check_population(&self, pop: &Population) -> Result<()> {
        if pop.n() != self.n_units() {
            return Err(Error::Dimension(format!("spec has {} units, population {}", self.n_units(), pop.n())));
        }
        if pop.periods() != self.periods() {
            return Err(Error::Dimension(format!("spec has {} periods, population {}", self.periods(), pop.periods())));
        }
        Ok(())
    }

    pub(crate) fn check_design(&self, design: &Design) -> Result<()> {
        if design.n() != self.n_units() || design.levels() != self.levels() {
            return Err(Error::Dimension(format!(
                "design is {} × {}, spec expects {} × {}",
                design.n(),
                design.levels(),
                self.n_units(),
                self.levels()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn consistent_cross_section_validates() {
        let pop = Population::cross_section(names(&["x"]), vec![vec![0.0], vec![1.0]])
            .with_treatment(vec![0, 1])
            .with_scalar_outcomes(&[1.0, 2.0]);
        assert!(validate_population(&pop, &TreatmentSet::binary()).is_valid());
    }

    #[test]
    fn outcome_outside_observed_period_is_reported() {
        let pop = Population::panel(names(&[]), vec![vec![]], 2)
            .with_observed_periods(vec![vec![true, false]])
            .with_outcomes(vec![vec![Some(1.0), Some(2.0)]])
            .with_treatment(vec![0]);
        let ts = TreatmentSet::staggered(2, &[None, Some(1)]).unwrap();
        let rep = validate_population(&pop, &ts);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].message, "outcome outside observed period");
    }

    #[test]
    fn treatment_index_out_of_range_is_reported() {
        let pop = Population::cross_section(names(&[]), vec![vec![], vec![]]).with_treatment(vec![0, 2]);
        let rep = validate_population(&pop, &TreatmentSet::binary());
        assert!(rep.violations.iter().any(|v| v.message == "treatment index out of range" && v.unit == Some(1)));
    }

    #[test]
    fn treatment_set_rejects_duplicates_and_ragged_values() {
        assert!(TreatmentSet::from_values(vec![vec![0.0], vec![0.0]]).is_err());
        assert!(TreatmentSet::from_values(vec![vec![0.0], vec![1.0, 1.0]]).is_err());
        assert!(TreatmentSet::from_values(vec![vec![0.0]]).is_err());
    }

    #[test]
    fn staggered_paths_are_monotone() {
        let ts = TreatmentSet::staggered(3, &[None, Some(1), Some(2)]).unwrap();
        assert!(ts.is_staggered());
        assert_eq!(ts.value(1), &[0.0, 1.0, 1.0]);
        let bad = TreatmentSet::from_values(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(!bad.is_staggered());
    }

    #[test]
    fn design_rows_must_sum_to_one() {
        assert!(Design::new(vec![vec![0.5, 0.5 + 1e-9]], DesignKind::True).is_err());
        assert!(Design::new(vec![vec![-0.2, 1.2]], DesignKind::Implicit).is_ok());
    }

    #[test]
    fn design_deserialization_validates_rows() {
        let bad = r#"{"probs":[[0.3,0.3]],"kind":"true"}"#;
        assert!(serde_json::from_str::<Design>(bad).is_err());
    }

    #[test]
    fn within_demean_sums_to_zero_over_observed_periods() {
        let ts = TreatmentSet::staggered(3, &[None, Some(1)]).unwrap();
        let pop = Population::panel(names(&[]), vec![vec![], vec![]], 3)
            .with_observed_periods(vec![vec![true, true, true], vec![true, false, true]]);
        let spec = RegressionSpec::from_fn(2, ts.clone(), DMatrix::from_row_slice(1, 1, &[1.0]), |_, t, w| {
            vec![ts.value(w)[t] + t as f64]
        })
        .unwrap()
        .within_demean(&pop)
        .unwrap();
        assert!(spec.demeaning_error(&pop) < 1e-15);
        assert_eq!(spec.z(1, 1)[(1, 0)], 0.0);
    }
}
