use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Design, Population, RegressionSpec, TreatmentSet};
use crate::error::{Error, Result};
use crate::linalg;

pub const TEMPLATE_NAMES: [&str; 9] = [
    "angrist",
    "multivalued",
    "saturated_interacted",
    "interacted_t",
    "kline",
    "twfe",
    "owfe",
    "event_study",
    "custom",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedCentering {
    /// t = α₀, which centers at the overall mean x̄.
    Ate,
    /// t = 1.
    Att,
    /// t = 0.
    Atu,
}

/// Centering parameter t of the interacted regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Centering {
    Named(NamedCentering),
    At(f64),
}

impl Centering {
    /// Numeric t, or `None` for ATE centering (t = α₀).
    pub fn value(self) -> Option<f64> {
        match self {
            Centering::At(t) => Some(t),
            Centering::Named(NamedCentering::Att) => Some(1.0),
            Centering::Named(NamedCentering::Atu) => Some(0.0),
            Centering::Named(NamedCentering::Ate) => None,
        }
    }
}

/// Options accepted by [`build_template`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateOptions {
    /// Covariate columns entering the specification.
    pub covariates: Vec<String>,
    /// Centering for `interacted_t`.
    pub t: Option<Centering>,
    /// Relative event times for `event_study`.
    pub event_times: Vec<i64>,
    /// Reference cell index for `saturated_interacted` (cells sorted by value).
    pub reference_cell: Option<usize>,
    /// Regressor terms for `custom`: `1`, `w`, `d:<j>`, `t:<p>`, `<col>`,
    /// `w:<col>`, `d:<j>:<col>`.
    pub terms: Vec<String>,
    /// Contrast override (required for `custom`).
    pub contrast: Option<Vec<Vec<f64>>>,
    /// Within-demean a `custom` spec over observed periods.
    pub demean: bool,
    /// π* used for x̄_t centering; observed-treatment plug-ins otherwise.
    #[serde(skip)]
    pub centering_design: Option<Design>,
}

/// First period index with a nonzero entry.
pub fn adoption_index(w: &[f64]) -> Option<usize> {
    w.iter().position(|&v| v != 0.0)
}

pub fn build_template(
    name: &str,
    options: &TemplateOptions,
    pop: &Population,
    ts: &TreatmentSet,
) -> Result<RegressionSpec> {
    if ts.periods() != pop.periods() {
        return Err(Error::Dimension(format!(
            "treatment paths have length {}, population has {} periods",
            ts.periods(),
            pop.periods()
        )));
    }
    let cols = &options.covariates;
    let spec = match name {
        "angrist" => angrist(pop, ts, cols)?,
        "multivalued" => multivalued(pop, ts, cols)?,
        "saturated_interacted" => saturated_interacted(pop, ts, cols, options.reference_cell)?,
        "interacted_t" => {
            let t = options.t.ok_or_else(|| Error::MissingOption("t".into()))?;
            interacted_t(pop, ts, cols, t, options.centering_design.as_ref(), "interacted_t")?
        }
        "kline" => interacted_t(
            pop,
            ts,
            cols,
            Centering::Named(NamedCentering::Att),
            options.centering_design.as_ref(),
            "kline",
        )?,
        "twfe" => twfe(pop, ts, cols)?,
        "owfe" => owfe(pop, ts)?,
        "event_study" => event_study(pop, ts, &options.event_times)?,
        "custom" => custom(pop, ts, options)?,
        other => return Err(Error::UnknownTemplate(other.to_string())),
    };
    match (&options.contrast, name) {
        (Some(c), n) if n != "custom" => spec.with_contrast(contrast_matrix(c)?),
        _ => Ok(spec),
    }
}

fn contrast_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = rows.len();
    let kk = rows.first().map_or(0, |r| r.len());
    if k == 0 || kk == 0 || rows.iter().any(|r| r.len() != kk) {
        return Err(Error::Dimension("contrast must be a non-empty rectangular matrix".into()));
    }
    Ok(DMatrix::from_fn(k, kk, |a, b| rows[a][b]))
}

fn selector(k_total: usize, picks: &[usize]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(picks.len(), k_total);
    for (r, &c) in picks.iter().enumerate() {
        m[(r, c)] = 1.0;
    }
    m
}

fn columns(pop: &Population, cols: &[String]) -> Result<Vec<usize>> {
    cols.iter().map(|c| pop.column(c)).collect()
}

/// Unit-level covariate rows restricted to `idx`.
fn unit_rows(pop: &Population, idx: &[usize]) -> Vec<Vec<f64>> {
    (0..pop.n()).map(|i| idx.iter().map(|&c| pop.x(i)[c]).collect()).collect()
}

fn collinearity_note(rows: &[Vec<f64>], with_constant: bool) -> Option<String> {
    let d = rows.first().map_or(0, |r| r.len());
    if d == 0 {
        return None;
    }
    let extra = usize::from(with_constant);
    let m = DMatrix::from_fn(rows.len(), d + extra, |i, j| if j < extra { 1.0 } else { rows[i][j - extra] });
    let r = linalg::rank(&m, 1e-10);
    (r < d + extra).then(|| format!("covariates are collinear (rank {r} of {} columns)", d + extra))
}

fn require_cross_section(ts: &TreatmentSet, what: &str) -> Result<()> {
    if ts.periods() != 1 {
        return Err(Error::Invalid(format!("{what} needs a cross-section (T = 1)")));
    }
    Ok(())
}

fn require_binary(ts: &TreatmentSet, what: &str) -> Result<()> {
    require_cross_section(ts, what)?;
    if ts.len() != 2 {
        return Err(Error::Invalid(format!("{what} needs a binary treatment")));
    }
    Ok(())
}

fn finish(spec: RegressionSpec, names: Vec<String>, tag: &str, note: Option<String>) -> Result<RegressionSpec> {
    let spec = spec.with_names(names)?.with_tag(tag);
    Ok(match note {
        Some(n) => spec.with_note(n),
        None => spec,
    })
}

/// Y = τW + x'γ with x = [1, x₁]: z(x, w) = [w, 1, x₁], Λ = e₁.
fn angrist(pop: &Population, ts: &TreatmentSet, cols: &[String]) -> Result<RegressionSpec> {
    require_binary(ts, "angrist")?;
    let idx = columns(pop, cols)?;
    let x = unit_rows(pop, &idx);
    let k = 2 + idx.len();
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), selector(k, &[0]), |i, _, w| {
        let mut z = vec![ts.value(w)[0], 1.0];
        z.extend_from_slice(&x[i]);
        z
    })?;
    let mut names = vec!["w".to_string(), "1".to_string()];
    names.extend(cols.iter().cloned());
    finish(spec, names, "angrist", collinearity_note(&x, true))
}

/// Y = Σ_j τ_j 1{W=j} + x'γ with Λ selecting the J treatment dummies.
fn multivalued(pop: &Population, ts: &TreatmentSet, cols: &[String]) -> Result<RegressionSpec> {
    require_cross_section(ts, "multivalued")?;
    let j = ts.len() - 1;
    let idx = columns(pop, cols)?;
    let x = unit_rows(pop, &idx);
    let k = j + 1 + idx.len();
    let picks: Vec<usize> = (0..j).collect();
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), selector(k, &picks), |i, _, w| {
        let mut z: Vec<f64> = (1..=j).map(|l| f64::from(u8::from(w == l))).collect();
        z.push(1.0);
        z.extend_from_slice(&x[i]);
        z
    })?;
    let mut names: Vec<String> = (1..=j).map(|l| format!("d{l}")).collect();
    names.push("1".into());
    names.extend(cols.iter().cloned());
    finish(spec, names, "multivalued", collinearity_note(&x, true))
}

/// Distinct covariate rows in sorted order and each unit's cell index.
pub(crate) fn cells(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut distinct: Vec<Vec<f64>> = rows.to_vec();
    distinct.sort_by(|a, b| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(core::cmp::Ordering::Equal)
    });
    distinct.dedup();
    let index = rows.iter().map(|r| distinct.iter().position(|d| d == r).expect("present")).collect();
    (distinct, index)
}

/// Y = γ₀ + x'γ₁ + τW + W(x − x̄)'γ₂ on cell dummies x of a discrete covariate.
fn saturated_interacted(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    reference: Option<usize>,
) -> Result<RegressionSpec> {
    require_binary(ts, "saturated_interacted")?;
    if cols.is_empty() {
        return Err(Error::MissingOption("covariates".into()));
    }
    let idx = columns(pop, cols)?;
    let (levels, cell) = cells(&unit_rows(pop, &idx));
    let reference = reference.unwrap_or(0);
    if reference >= levels.len() {
        return Err(Error::Invalid(format!("reference cell {reference} out of range")));
    }
    let others: Vec<usize> = (0..levels.len()).filter(|&c| c != reference).collect();
    let l = others.len();
    let n = pop.n() as f64;
    let xbar: Vec<f64> = others.iter().map(|&c| cell.iter().filter(|&&u| u == c).count() as f64 / n).collect();
    let k = 2 + 2 * l;
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), selector(k, &[1 + l]), |i, _, w| {
        let wv = ts.value(w)[0];
        let dum: Vec<f64> = others.iter().map(|&c| f64::from(u8::from(cell[i] == c))).collect();
        let mut z = vec![1.0];
        z.extend_from_slice(&dum);
        z.push(wv);
        z.extend(dum.iter().zip(&xbar).map(|(d, m)| wv * (d - m)));
        z
    })?;
    let mut names = vec!["1".to_string()];
    names.extend(others.iter().map(|c| format!("cell{c}")));
    names.push("w".into());
    names.extend(others.iter().map(|c| format!("w:cell{c}")));
    finish(spec, names, "saturated_interacted", None)
}

/// x̄_t = t·x̄₁ + (1−t)·x̄₀ from π* or the observed treatment.
pub(crate) fn centering_point(
    x: &[Vec<f64>],
    t: Centering,
    pop: &Population,
    design: Option<&Design>,
) -> Result<Vec<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, |r| r.len());
    let mean = |wts: &dyn Fn(usize) -> f64| -> Result<Vec<f64>> {
        let total: f64 = (0..n).map(wts).sum();
        if total <= 0.0 {
            return Err(Error::Invalid("centering weights sum to zero".into()));
        }
        Ok((0..d).map(|c| (0..n).map(|i| wts(i) * x[i][c]).sum::<f64>() / total).collect())
    };
    let Some(tv) = t.value() else {
        return mean(&|_| 1.0);
    };
    let treated: Vec<f64> = match design {
        Some(dz) => dz.treated(),
        None => pop
            .treatment
            .as_ref()
            .ok_or_else(|| Error::MissingOption("centering design (or observed treatment)".into()))?
            .iter()
            .map(|&w| w as f64)
            .collect(),
    };
    if d == 0 {
        return Ok(Vec::new());
    }
    let x1 = mean(&|i| treated[i])?;
    let x0 = mean(&|i| 1.0 - treated[i])?;
    Ok(x1.iter().zip(&x0).map(|(a, b)| tv * a + (1.0 - tv) * b).collect())
}

/// Y = γ₀ + x'γ₁ + τ_t W + W(x − x̄_t)'γ₂.
fn interacted_t(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    t: Centering,
    design: Option<&Design>,
    tag: &str,
) -> Result<RegressionSpec> {
    require_binary(ts, tag)?;
    let idx = columns(pop, cols)?;
    let x = unit_rows(pop, &idx);
    let xt = centering_point(&x, t, pop, design)?;
    interacted_spec(pop.n(), ts, &x, &xt, cols, tag)
}

pub(crate) fn interacted_spec(
    n: usize,
    ts: &TreatmentSet,
    x: &[Vec<f64>],
    xt: &[f64],
    cols: &[String],
    tag: &str,
) -> Result<RegressionSpec> {
    let d = xt.len();
    let k = 2 + 2 * d;
    let spec = RegressionSpec::from_fn(n, ts.clone(), selector(k, &[1 + d]), |i, _, w| {
        let wv = ts.value(w)[0];
        let mut z = vec![1.0];
        z.extend_from_slice(&x[i]);
        z.push(wv);
        z.extend(x[i].iter().zip(xt).map(|(a, m)| wv * (a - m)));
        z
    })?;
    let mut names = vec!["1".to_string()];
    names.extend(cols.iter().cloned());
    names.push("w".into());
    names.extend(cols.iter().map(|c| format!("w:{c}")));
    finish(spec, names, tag, collinearity_note(x, true))
}

/// Y = γ₀ + Wτ₀ + W x₁'τ₁ + x₂'γ₁ with Λ selecting (τ₀, τ₁).
pub fn interaction_spec(pop: &Population, ts: &TreatmentSet, x1: &[String], x2: &[String]) -> Result<RegressionSpec> {
    require_binary(ts, "interaction")?;
    let i1 = columns(pop, x1)?;
    let i2 = columns(pop, x2)?;
    let a = unit_rows(pop, &i1);
    let b = unit_rows(pop, &i2);
    let d2 = i2.len();
    let k = 2 + d2 + i1.len();
    let picks: Vec<usize> = (1 + d2..k).collect();
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), selector(k, &picks), |i, _, w| {
        let wv = ts.value(w)[0];
        let mut z = vec![1.0];
        z.extend_from_slice(&b[i]);
        z.push(wv);
        z.extend(a[i].iter().map(|v| wv * v));
        z
    })?;
    let mut names = vec!["1".to_string()];
    names.extend(x2.iter().cloned());
    names.push("w".into());
    names.extend(x1.iter().map(|c| format!("w:{c}")));
    finish(spec, names, "interaction", collinearity_note(&b, true))
}

fn time_dummy_names(pop: &Population) -> Vec<String> {
    pop.period_ids.iter().skip(1).map(|p| format!("time:{p}")).collect()
}

/// Within-demeaned [time dummies (first period dropped), w_t, x_it].
fn twfe(pop: &Population, ts: &TreatmentSet, cols: &[String]) -> Result<RegressionSpec> {
    let t_len = ts.periods();
    if t_len < 2 {
        return Err(Error::Invalid("twfe needs at least two periods".into()));
    }
    let idx = columns(pop, cols)?;
    let k = t_len + idx.len();
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), selector(k, &[t_len - 1]), |i, t, w| {
        let mut z: Vec<f64> = (1..t_len).map(|s| f64::from(u8::from(s == t))).collect();
        z.push(ts.value(w)[t]);
        let x = pop.x_at(i, t);
        z.extend(idx.iter().map(|&c| x[c]));
        z
    })?
    .within_demean(pop)?;
    let mut names = time_dummy_names(pop);
    names.push("w".into());
    names.extend(cols.iter().cloned());
    finish(spec, names, "twfe", None)
}

/// Within-demeaned w_t with unit effects only.
fn owfe(pop: &Population, ts: &TreatmentSet) -> Result<RegressionSpec> {
    let spec =
        RegressionSpec::from_fn(pop.n(), ts.clone(), DMatrix::from_element(1, 1, 1.0), |_, t, w| vec![ts.value(w)[t]])?
            .within_demean(pop)?;
    finish(spec, vec!["w".into()], "owfe", None)
}

/// Within-demeaned [time dummies, f_t(w)] with f_{t,e}(w) = 1{t − a(w) = e}.
fn event_study(pop: &Population, ts: &TreatmentSet, event_times: &[i64]) -> Result<RegressionSpec> {
    if event_times.is_empty() {
        return Err(Error::MissingOption("event_times".into()));
    }
    if !ts.is_staggered() {
        return Err(Error::Invalid("event_study needs staggered-adoption paths".into()));
    }
    let t_len = ts.periods();
    let m = event_times.len();
    let k = t_len - 1 + m;
    let picks: Vec<usize> = (t_len - 1..k).collect();
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), selector(k, &picks), |_, t, w| {
        let mut z: Vec<f64> = (1..t_len).map(|s| f64::from(u8::from(s == t))).collect();
        z.extend_from_slice(&event_dummies(ts.value(w), t, event_times));
        z
    })?
    .within_demean(pop)?;
    let mut names = time_dummy_names(pop);
    names.extend(event_times.iter().map(|e| format!("event:{e}")));
    finish(spec, names, "event_study", None)
}

/// f_t(w) for the given relative event times.
pub(crate) fn event_dummies(path: &[f64], t: usize, event_times: &[i64]) -> Vec<f64> {
    let a = adoption_index(path);
    event_times
        .iter()
        .map(|&e| match a {
            Some(a) => f64::from(u8::from(t as i64 - a as i64 == e)),
            None => 0.0,
        })
        .collect()
}

enum Term {
    One,
    W,
    Dummy(usize),
    Time(usize),
    Col(usize),
    WCol(usize),
    DummyCol(usize, usize),
}

fn parse_term(term: &str, pop: &Population, ts: &TreatmentSet) -> Result<Term> {
    let index = |s: &str, bound: usize, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&j| j < bound)
            .ok_or_else(|| Error::Invalid(format!("bad {what} index in term `{term}`")))
    };
    let parts: Vec<&str> = term.split(':').collect();
    Ok(match parts.as_slice() {
        ["1"] => Term::One,
        ["w"] => Term::W,
        ["d", j] => Term::Dummy(index(j, ts.len(), "treatment")?),
        ["t", p] => Term::Time(index(p, ts.periods(), "period")?),
        ["w", c] => Term::WCol(pop.column(c)?),
        ["d", j, c] => Term::DummyCol(index(j, ts.len(), "treatment")?, pop.column(c)?),
        [c] => Term::Col(pop.column(c)?),
        _ => return Err(Error::Invalid(format!("cannot parse term `{term}`"))),
    })
}

fn custom(pop: &Population, ts: &TreatmentSet, options: &TemplateOptions) -> Result<RegressionSpec> {
    if options.terms.is_empty() {
        return Err(Error::MissingOption("terms".into()));
    }
    let contrast =
        contrast_matrix(options.contrast.as_deref().ok_or_else(|| Error::MissingOption("contrast".into()))?)?;
    if contrast.ncols() != options.terms.len() {
        return Err(Error::Dimension(format!(
            "contrast has {} columns for {} terms",
            contrast.ncols(),
            options.terms.len()
        )));
    }
    let terms = options.terms.iter().map(|t| parse_term(t, pop, ts)).collect::<Result<Vec<_>>>()?;
    let spec = RegressionSpec::from_fn(pop.n(), ts.clone(), contrast, |i, t, w| {
        let x = pop.x_at(i, t);
        let wv = ts.value(w)[t];
        terms
            .iter()
            .map(|term| match *term {
                Term::One => 1.0,
                Term::W => wv,
                Term::Dummy(j) => f64::from(u8::from(w == j)),
                Term::Time(p) => f64::from(u8::from(t == p)),
                Term::Col(c) => x[c],
                Term::WCol(c) => wv * x[c],
                Term::DummyCol(j, c) => f64::from(u8::from(w == j)) * x[c],
            })
            .collect()
    })?;
    let spec = if options.demean { spec.within_demean(pop)? } else { spec };
    finish(spec, options.terms.clone(), "custom", None)
}
