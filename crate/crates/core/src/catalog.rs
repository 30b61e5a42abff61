//! Closed-form implicit designs for the standard specifications.
//!
//! Every function returns a [`CatalogResult`]; designs computed here are
//! meant to be cross-checked against [`crate::solve_implicit_design`] on the
//! matching template.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::twfe_weights;
use crate::gram::{gram_values, GramMatrix, GramSource};
use crate::linalg;
use crate::model::{
    centering_point, event_dummies, interacted_spec, template_cells, Centering, Design, DesignKind, Population,
    TreatmentSet,
};
use crate::weights::potential_weights;

/// Relative threshold for exact span and moment conditions.
pub const CONDITION_TOL: f64 = 1e-8;
/// Guard on the fractional-linear denominator 1 − Γ₂'(x − x̄_t).
pub const DENOMINATOR_GUARD: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITER: usize = 1000;
pub const FIXED_POINT_TOL: f64 = 1e-12;

/// Where the design-generating probabilities come from.
#[derive(Debug, Clone, Copy)]
pub enum CatalogMode<'a> {
    /// Population quantities under the given π*.
    Population(&'a Design),
    /// Sample analogues: π* replaced by point masses at the observed W.
    Estimated,
    /// Self-consistent design reached by iteration from a seed
    /// (`interacted_t` only).
    FixedPoint(&'a Design),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimandForm {
    #[serde(rename = "WATE_variance")]
    WateVariance,
    #[serde(rename = "contaminated")]
    Contaminated,
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "TWFE_random")]
    TwfeRandom,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub slack: f64,
    pub threshold: f64,
    pub holds: bool,
}

impl Condition {
    fn new(name: &str, slack: f64, threshold: f64) -> Self {
        Condition { name: name.to_string(), slack, threshold, holds: slack <= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogResult {
    pub template: String,
    /// `None` when no implicit design exists or it is not pinned down.
    pub design: Option<Design>,
    pub exists: Option<bool>,
    pub estimand_form: EstimandForm,
    pub parameters: BTreeMap<String, Vec<f64>>,
    pub conditions: Vec<Condition>,
    pub notes: Vec<String>,
}

impl CatalogResult {
    fn new(template: &str, form: EstimandForm) -> Self {
        CatalogResult {
            template: template.to_string(),
            design: None,
            exists: None,
            estimand_form: form,
            parameters: BTreeMap::new(),
            conditions: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn param(&mut self, name: &str, v: Vec<f64>) {
        self.parameters.insert(name.to_string(), v);
    }

    fn scalar(&mut self, name: &str, v: f64) {
        self.param(name, vec![v]);
    }

    pub fn parameter(&self, name: &str) -> Option<&[f64]> {
        self.parameters.get(name).map(|v| v.as_slice())
    }

    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

fn covariate_rows(pop: &Population, cols: &[String]) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = cols.iter().map(|c| pop.column(c)).collect::<Result<_>>()?;
    Ok((0..pop.n()).map(|i| idx.iter().map(|&c| pop.x(i)[c]).collect()).collect())
}

fn with_constant(x: &[Vec<f64>]) -> DMatrix<f64> {
    let d = x.first().map_or(0, |r| r.len());
    DMatrix::from_fn(x.len(), d + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

fn require_binary(ts: &TreatmentSet, what: &str) -> Result<()> {
    if ts.periods() != 1 || ts.len() != 2 {
        return Err(Error::Invalid(format!("{what} needs a binary cross-section")));
    }
    Ok(())
}

/// π*(w) rows, or point masses at the observed treatment.
fn assignment_rows(mode: CatalogMode<'_>, pop: &Population, levels: usize) -> Result<Vec<Vec<f64>>> {
    match mode {
        CatalogMode::Population(d) | CatalogMode::FixedPoint(d) => {
            if d.n() != pop.n() || d.levels() != levels {
                return Err(Error::Dimension("design does not match the population".into()));
            }
            Ok(d.probs().to_vec())
        }
        CatalogMode::Estimated => Ok(Design::point_mass(pop.require_treatment()?, levels)?.probs().to_vec()),
    }
}

fn treated_probs(mode: CatalogMode<'_>, pop: &Population) -> Result<Vec<f64>> {
    Ok(assignment_rows(mode, pop, 2)?.into_iter().map(|r| r[1]).collect())
}

fn design_kind(mode: CatalogMode<'_>) -> DesignKind {
    match mode {
        CatalogMode::Estimated => DesignKind::Estimated,
        _ => DesignKind::Implicit,
    }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn properness(design: &[f64]) -> f64 {
    design.iter().map(|&p| (-p).max(p - 1.0).max(0.0)).fold(0.0, f64::max)
}

fn add_properness(res: &mut CatalogResult, treated: &[f64]) {
    let c = Condition::new("proper", properness(treated), 1e-9);
    if !c.holds {
        let count = treated.iter().filter(|&&p| !(-1e-9..=1.0 + 1e-9).contains(&p)).count();
        res.notes.push(format!("{count} fitted values outside [0, 1]"));
    }
    res.conditions.push(c);
}

fn add_match_condition(res: &mut CatalogResult, mode: CatalogMode<'_>, design: &[f64], truth: &[f64]) {
    if let CatalogMode::Population(_) = mode {
        res.conditions.push(Condition::new("equals_true_design", max_gap(design, truth), CONDITION_TOL));
    }
}

/// π_i = x̃_i'δ with δ the projection of π* (or W) on x̃ = [1, x].
pub fn angrist_design(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    require_binary(ts, "angrist")?;
    let pi = treated_probs(mode, pop)?;
    let xt = with_constant(&covariate_rows(pop, cols)?);
    let delta = linalg::ols(&xt, &DVector::from_column_slice(&pi))
        .map_err(|_| Error::Singular("collinear covariates".into()))?;
    let fitted: Vec<f64> = (&xt * &delta).iter().cloned().collect();
    let mut res = CatalogResult::new("angrist", EstimandForm::WateVariance);
    res.param("delta", delta.iter().cloned().collect());
    let v: Vec<f64> = fitted.iter().map(|p| p * (1.0 - p)).collect();
    let mean_v = v.iter().sum::<f64>() / v.len() as f64;
    res.param("omega", v.iter().map(|x| x / mean_v).collect());
    add_properness(&mut res, &fitted);
    add_match_condition(&mut res, mode, &fitted, &pi);
    res.design = Some(Design::binary(&fitted, design_kind(mode))?);
    res.exists = Some(true);
    Ok(res)
}

/// π_i(j) = x̃_i'δ_j for j = 1..J.
pub fn multivalued_design(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    if ts.periods() != 1 {
        return Err(Error::Invalid("multivalued needs a cross-section".into()));
    }
    let levels = ts.len();
    let rows = assignment_rows(mode, pop, levels)?;
    let xt = with_constant(&covariate_rows(pop, cols)?);
    let n = pop.n();
    let mut probs = vec![vec![0.0; levels]; n];
    let mut res = CatalogResult::new("multivalued", EstimandForm::Contaminated);
    for j in 1..levels {
        let y = DVector::from_fn(n, |i, _| rows[i][j]);
        let delta = linalg::ols(&xt, &y).map_err(|_| Error::Singular("collinear covariates".into()))?;
        let fit = &xt * &delta;
        for i in 0..n {
            probs[i][j] = fit[i];
        }
        res.param(&format!("delta_{j}"), delta.iter().cloned().collect());
    }
    for row in probs.iter_mut() {
        row[0] = 1.0 - row[1..].iter().sum::<f64>();
    }
    let flat: Vec<f64> = probs.iter().flatten().cloned().collect();
    add_properness(&mut res, &flat);
    if let CatalogMode::Population(_) = mode {
        let truth: Vec<f64> = rows.iter().flatten().cloned().collect();
        res.conditions.push(Condition::new("equals_true_design", max_gap(&flat, &truth), CONDITION_TOL));
    }
    res.design = Some(Design::new(probs, design_kind(mode))?);
    res.exists = Some(true);
    Ok(res)
}

/// π_i = mean of π* (or W) within the covariate cell of unit i.
pub fn saturated_interacted_design(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    require_binary(ts, "saturated_interacted")?;
    let pi = treated_probs(mode, pop)?;
    let (levels, cell) = template_cells(&covariate_rows(pop, cols)?);
    let mut sum = vec![0.0; levels.len()];
    let mut count = vec![0usize; levels.len()];
    for (i, &c) in cell.iter().enumerate() {
        sum[c] += pi[i];
        count[c] += 1;
    }
    let shares: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let design: Vec<f64> = cell.iter().map(|&c| shares[c]).collect();
    let mut res = CatalogResult::new("saturated_interacted", EstimandForm::Ate);
    res.param("cell_shares", shares);
    res.param("cell_sizes", count.iter().map(|&c| c as f64).collect());
    add_properness(&mut res, &design);
    add_match_condition(&mut res, mode, &design, &pi);
    res.design = Some(Design::binary(&design, design_kind(mode))?);
    res.exists = Some(true);
    Ok(res)
}

fn weighted_mean(x: &[Vec<f64>], w: &[f64]) -> Result<DVector<f64>> {
    let d = x.first().map_or(0, |r| r.len());
    let total: f64 = w.iter().sum();
    if total.abs() <= 1e-300 {
        return Err(Error::Invalid("weights sum to zero".into()));
    }
    Ok(DVector::from_fn(d, |c, _| x.iter().zip(w).map(|(r, wi)| wi * r[c]).sum::<f64>() / total))
}

/// (1/n) Σ w_i (x_i − a)(x_i − b)'.
fn cross_moment(x: &[Vec<f64>], w: &[f64], a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let d = a.len();
    let n = x.len() as f64;
    let mut m = DMatrix::zeros(d, d);
    for (r, &wi) in x.iter().zip(w) {
        let u = DVector::from_fn(d, |c, _| r[c] - a[c]);
        let v = DVector::from_fn(d, |c, _| r[c] - b[c]);
        m += (u * v.transpose()) * wi;
    }
    m / n
}

fn solve_square(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if linalg::condition_number(m) > 1e12 {
        return Err(Error::Singular(format!("{what} is singular")));
    }
    m.clone().lu().solve(b).ok_or_else(|| Error::Singular(format!("{what} is singular")))
}

/// π_i/(1 − π_i) = δ₀ + δ₁'(x_i − x̄₀), the implicit design of the
/// ATT-centered interacted regression.
pub fn kline_design(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    require_binary(ts, "kline")?;
    if cols.is_empty() {
        return Err(Error::MissingOption("covariates".into()));
    }
    let pi = treated_probs(mode, pop)?;
    let x = covariate_rows(pop, cols)?;
    let n = x.len() as f64;
    let alpha0 = pi.iter().sum::<f64>() / n;
    if alpha0 <= 0.0 || alpha0 >= 1.0 {
        return Err(Error::Invalid("mean propensity must lie strictly inside (0, 1)".into()));
    }
    let untreated: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    let x0 = weighted_mean(&x, &untreated)?;
    let u0 = cross_moment(&x, &untreated, &x0, &x0);
    let d = x0.len();
    let rhs = DVector::from_fn(d, |c, _| x.iter().zip(&pi).map(|(r, p)| p * (r[c] - x0[c])).sum::<f64>() / n);
    let delta1 = solve_square(&u0, &rhs, "U₀")?;
    let delta0 = alpha0 / (1.0 - alpha0);
    let design: Vec<f64> = x
        .iter()
        .map(|r| {
            let odds = delta0 + (0..d).map(|c| delta1[c] * (r[c] - x0[c])).sum::<f64>();
            odds / (1.0 + odds)
        })
        .collect();
    let mut res = CatalogResult::new("kline", EstimandForm::Att);
    res.scalar("delta0", delta0);
    res.param("delta1", delta1.iter().cloned().collect());
    res.param("xbar0", x0.iter().cloned().collect());
    res.param("xbar1", weighted_mean(&x, &pi)?.iter().cloned().collect());
    add_properness(&mut res, &design);
    add_match_condition(&mut res, mode, &design, &pi);
    res.notes.push("Gram consistency is not automatic for this specification; verify with the solver".into());
    res.design = Some(Design::binary(&design, design_kind(mode))?);
    res.exists = Some(true);
    Ok(res)
}

/// Coefficients of the fractional-linear design
/// π = (θ₀ + θ₁'(x − x̄)) / (1 − Γ₂'(x − x̄_t)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionalLinear {
    pub theta0: f64,
    pub theta1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

impl FractionalLinear {
    pub fn from_result(res: &CatalogResult) -> Option<Self> {
        Some(FractionalLinear {
            theta0: *res.parameter("theta0")?.first()?,
            theta1: res.parameter("theta1")?.to_vec(),
            gamma2: res.parameter("gamma2")?.to_vec(),
        })
    }

    /// Design on covariates `x`, with numerator centered at `xbar` and
    /// denominator at `xbar_t`.
    pub fn evaluate(&self, x: &[Vec<f64>], xbar: &[f64], xbar_t: &[f64]) -> Result<Vec<f64>> {
        x.iter()
            .enumerate()
            .map(|(i, r)| {
                let num =
                    self.theta0 + r.iter().zip(xbar).zip(&self.theta1).map(|((a, m), b)| b * (a - m)).sum::<f64>();
                let den = 1.0 - r.iter().zip(xbar_t).zip(&self.gamma2).map(|((a, m), g)| g * (a - m)).sum::<f64>();
                if den.abs() <= DENOMINATOR_GUARD {
                    return Err(Error::Denominator { unit: i, value: den });
                }
                Ok(num / den)
            })
            .collect()
    }
}

struct InteractedParts {
    t: f64,
    alpha0: f64,
    xbar: DVector<f64>,
    xbar0: DVector<f64>,
    xbar1: DVector<f64>,
    xbar_t: DVector<f64>,
    alpha1: DVector<f64>,
    gamma0: DVector<f64>,
    gamma1: DMatrix<f64>,
    gamma2: DVector<f64>,
    theta0: f64,
    theta1: DVector<f64>,
    /// t V₁(θ₁ + Γ₂) − (1 − t) U₀θ₁.
    necessary: DVector<f64>,
}

fn interacted_parts(x: &[Vec<f64>], pi: &[f64], t: Centering) -> Result<InteractedParts> {
    let n = x.len() as f64;
    let ones = vec![1.0; x.len()];
    let untreated: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    let alpha0 = pi.iter().sum::<f64>() / n;
    let xbar = weighted_mean(x, &ones)?;
    let xbar1 = weighted_mean(x, pi)?;
    let xbar0 = weighted_mean(x, &untreated)?;
    let tv = t.value().unwrap_or(alpha0);
    let xbar_t = &xbar1 * tv + &xbar0 * (1.0 - tv);
    let d = xbar.len();
    let a = cross_moment(x, &ones, &xbar, &xbar);
    let a_inv = linalg::sym_inverse(&a, 1e-12).map_err(|_| Error::Singular("covariate second moment A".into()))?;
    let v_t = cross_moment(x, pi, &xbar_t, &xbar_t);
    let gamma0 = DVector::from_fn(d, |c, _| x.iter().zip(pi).map(|(r, p)| p * (r[c] - xbar_t[c])).sum::<f64>() / n);
    let m0 = DVector::from_fn(d, |c, _| x.iter().zip(pi).map(|(r, p)| p * (r[c] - xbar[c])).sum::<f64>() / n);
    let alpha1 = &a_inv * m0;
    let gamma1 = cross_moment(x, pi, &xbar_t, &xbar) * &a_inv;
    let shift = &xbar_t - &xbar;
    let lhs = &v_t
        - &gamma0 * gamma0.transpose()
        - &v_t * gamma1.transpose()
        - &gamma0 * shift.transpose() * gamma1.transpose();
    let rhs = &gamma0 - &gamma0 * alpha0 - &v_t * &alpha1 - &gamma0 * (shift.transpose() * &alpha1)[(0, 0)];
    let gamma2 = solve_square(&lhs, &rhs, "the Γ₂ system")?;
    let theta0 = alpha0 - gamma2.dot(&gamma0);
    let theta1 = &alpha1 - gamma1.transpose() * &gamma2;
    let v1 = cross_moment(x, pi, &xbar1, &xbar1);
    let u0 = cross_moment(x, &untreated, &xbar0, &xbar0);
    let necessary = &v1 * (&theta1 + &gamma2) * tv - &u0 * &theta1 * (1.0 - tv);
    Ok(InteractedParts {
        t: tv,
        alpha0,
        xbar,
        xbar0,
        xbar1,
        xbar_t,
        alpha1,
        gamma0,
        gamma1,
        gamma2,
        theta0,
        theta1,
        necessary,
    })
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

/// Iterates π ← −ρ(0)/(ρ(1) − ρ(0)) with ρ computed under G(π).
fn fixed_point(
    pop: &Population,
    ts: &TreatmentSet,
    x: &[Vec<f64>],
    cols: &[String],
    t: Centering,
    seed: &Design,
    notes: &mut Vec<String>,
) -> Result<(Vec<f64>, usize)> {
    let n = x.len();
    let mut pi = seed.treated();
    let mut last_step = f64::INFINITY;
    let mut rising = 0usize;
    let mut damping = 1.0;
    for it in 1..=FIXED_POINT_MAX_ITER {
        let design = Design::binary(&pi, DesignKind::Implicit)?;
        let xt = centering_point(x, t, pop, Some(&design))?;
        let spec = interacted_spec(n, ts, x, &xt, cols, "interacted_t")?;
        let g = GramMatrix::new(
            gram_values(&spec, pop, &|i, w| design.prob(i, w)),
            GramSource::Population(design.clone()),
        )?;
        let pws = potential_weights(&spec, pop, &g)?;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let r0 = pws.rho(i, 0)[(0, 0)];
            let r1 = pws.rho(i, 1)[(0, 0)];
            let den = r1 - r0;
            if den.abs() <= DENOMINATOR_GUARD * r1.abs().max(r0.abs()).max(f64::MIN_POSITIVE) {
                return Err(Error::Denominator { unit: i, value: den });
            }
            next.push(-r0 / den);
        }
        let step = max_gap(&next, &pi);
        if !step.is_finite() {
            return Err(Error::NoConvergence { iterations: it, last_step: step });
        }
        for (p, q) in pi.iter_mut().zip(&next) {
            *p += damping * (q - *p);
        }
        if step < FIXED_POINT_TOL {
            return Ok((pi, it));
        }
        rising = if step > last_step { rising + 1 } else { 0 };
        if rising >= 10 && damping == 1.0 {
            damping = 0.5;
            notes.push(format!("fixed point diverging at iteration {it}; switched to damping 0.5"));
        }
        last_step = step;
    }
    Err(Error::NoConvergence { iterations: FIXED_POINT_MAX_ITER, last_step })
}

/// Implicit design of Y = γ₀ + x'γ₁ + τ_t W + W(x − x̄_t)'γ₂.
pub fn interacted_t_design(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    t: Centering,
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    require_binary(ts, "interacted_t")?;
    if cols.is_empty() {
        return Err(Error::MissingOption("covariates".into()));
    }
    let x = covariate_rows(pop, cols)?;
    let form = if t.value() == Some(1.0) { EstimandForm::Att } else { EstimandForm::None };
    let mut res = CatalogResult::new("interacted_t", form);
    let pi = match mode {
        CatalogMode::FixedPoint(seed) => {
            let (p, iters) = fixed_point(pop, ts, &x, cols, t, seed, &mut res.notes)?;
            res.scalar("iterations", iters as f64);
            p
        }
        _ => treated_probs(mode, pop)?,
    };
    let parts = interacted_parts(&x, &pi, t)?;
    let frac = FractionalLinear { theta0: parts.theta0, theta1: to_vec(&parts.theta1), gamma2: to_vec(&parts.gamma2) };
    let design = frac.evaluate(&x, parts.xbar.as_slice(), parts.xbar_t.as_slice())?;
    res.scalar("t", parts.t);
    res.scalar("alpha0", parts.alpha0);
    res.param("alpha1", to_vec(&parts.alpha1));
    res.param("gamma0", to_vec(&parts.gamma0));
    res.param("gamma1", parts.gamma1.transpose().iter().cloned().collect());
    res.param("gamma2", to_vec(&parts.gamma2));
    res.scalar("theta0", parts.theta0);
    res.param("theta1", to_vec(&parts.theta1));
    res.param("xbar", to_vec(&parts.xbar));
    res.param("xbar0", to_vec(&parts.xbar0));
    res.param("xbar1", to_vec(&parts.xbar1));
    res.param("xbar_t", to_vec(&parts.xbar_t));
    let scale = parts.theta1.amax().max(parts.gamma2.amax()).max(1.0);
    res.conditions.push(Condition::new("necessary_condition", parts.necessary.amax(), CONDITION_TOL * scale));
    add_properness(&mut res, &design);
    match mode {
        CatalogMode::Population(_) => {
            res.conditions.push(Condition::new("equals_true_design", max_gap(&design, &pi), CONDITION_TOL))
        }
        CatalogMode::FixedPoint(_) => {
            res.conditions.push(Condition::new("fractional_linear_fit", max_gap(&design, &pi), 1e-9))
        }
        CatalogMode::Estimated => {}
    }
    res.design = Some(Design::binary(&design, design_kind(mode))?);
    res.exists = Some(true);
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantReport {
    pub design: Vec<f64>,
    /// max_i |π̃_i ρ_i(1) + (1 − π̃_i) ρ_i(0)|.
    pub residual: f64,
}

/// Evaluates ATE-centered fractional-linear parameters on new covariates.
///
/// The design π̃ is formed on `eval_x` (centered at its own mean). Potential
/// weights use the contrast and regressors of `eval_x`, but the Gram
/// matrix is accumulated over `gram_x` with weights π̃, reproducing the
/// reference computation this mirrors.
pub fn transplant_residual(
    params: &FractionalLinear,
    eval_x: &[Vec<f64>],
    gram_x: &[Vec<f64>],
) -> Result<TransplantReport> {
    let n = eval_x.len();
    if gram_x.len() != n {
        return Err(Error::Dimension("covariate sets differ in size".into()));
    }
    let d = params.theta1.len();
    let ones = vec![1.0; n];
    let center = to_vec(&weighted_mean(eval_x, &ones)?);
    let design = params.evaluate(eval_x, &center, &center)?;
    let z = |x: &[f64], w: f64| -> DVector<f64> {
        let mut v = vec![1.0];
        v.extend_from_slice(x);
        v.push(w);
        v.extend(x.iter().zip(&center).map(|(a, m)| w * (a - m)));
        DVector::from_vec(v)
    };
    let k = 2 + 2 * d;
    let mut g = DMatrix::zeros(k, k);
    for (i, x) in gram_x.iter().enumerate() {
        let z0 = z(x, 0.0);
        let z1 = z(x, 1.0);
        g += &z0 * z0.transpose() * (1.0 - design[i]) + &z1 * z1.transpose() * design[i];
    }
    g /= n as f64;
    let h = linalg::sym_inverse(&linalg::symmetrize(&g), linalg::GRAM_EIGEN_CUTOFF)?.row(1 + d).clone_owned();
    let mut residual: f64 = 0.0;
    for (i, x) in eval_x.iter().enumerate() {
        let r0 = (&h * z(x, 0.0))[(0, 0)];
        let r1 = (&h * z(x, 1.0))[(0, 0)];
        residual = residual.max((design[i] * r1 + (1.0 - design[i]) * r0).abs());
    }
    Ok(TransplantReport { design, residual })
}

/// Existence check for Y = γ₀ + τ₀W + Wx₁'τ₁ + x₂'γ₁.
pub fn forbidden_interaction_check(
    pop: &Population,
    ts: &TreatmentSet,
    x1: &[String],
    x2: &[String],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    require_binary(ts, "interaction")?;
    let pi = treated_probs(mode, pop)?;
    let a = covariate_rows(pop, x1)?;
    let b = with_constant(&covariate_rows(pop, x2)?);
    let n = pop.n();
    let delta =
        linalg::ols(&b, &DVector::from_column_slice(&pi)).map_err(|_| Error::Singular("collinear x₂".into()))?;
    let fit = &b * &delta;
    let d1 = x1.len();
    let mut res = CatalogResult::new("interaction", EstimandForm::None);
    res.param("delta", to_vec(&delta));
    let mut slack: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for c in 0..d1 {
        let y = DVector::from_fn(n, |i, _| pi[i] * a[i][c]);
        let gamma = linalg::ols(&b, &y)?;
        let g_fit = &b * &gamma;
        for i in 0..n {
            slack = slack.max((fit[i] * a[i][c] - g_fit[i]).abs());
            scale = scale.max(y[i].abs());
        }
        res.param(&format!("gamma_{c}"), to_vec(&gamma));
    }
    let cond = Condition::new("existence", slack, CONDITION_TOL * scale.max(1.0));
    let exists = cond.holds;
    res.conditions.push(cond);
    res.exists = Some(exists);
    if exists {
        let design: Vec<f64> = fit.iter().cloned().collect();
        add_properness(&mut res, &design);
        res.design = Some(Design::binary(&design, design_kind(mode))?);
    } else {
        res.notes.push("no implicit design: π*·x₁ is not linear in x₂".into());
    }
    Ok(res)
}

/// Whether the nonzero columns are linearly independent and their span
/// excludes 1_T; returns the distance of 1_T/√T to that span too.
fn rich_variation(vectors: &[Vec<f64>]) -> (bool, f64) {
    let nonzero: Vec<&Vec<f64>> = vectors.iter().filter(|v| v.iter().any(|&x| x != 0.0)).collect();
    let t_len = vectors.first().map_or(0, |v| v.len());
    if nonzero.is_empty() || t_len == 0 {
        return (false, 1.0);
    }
    let m = DMatrix::from_fn(t_len, nonzero.len(), |t, j| nonzero[j][t]);
    let independent = linalg::rank(&m, 1e-10) == nonzero.len();
    let basis = linalg::orthonormal_basis(&m, 1e-10);
    let dist = linalg::span_distance(&basis, &DVector::from_element(t_len, 1.0 / libm::sqrt(t_len as f64)));
    (independent && dist > CONDITION_TOL, dist)
}

fn constant_row(mode: CatalogMode<'_>, pop: &Population, levels: usize) -> Result<Vec<f64>> {
    let rows = assignment_rows(mode, pop, levels)?;
    let n = rows.len() as f64;
    Ok((0..levels).map(|w| rows.iter().map(|r| r[w]).sum::<f64>() / n).collect())
}

/// π(w) = (1/n) Σ_i π*_i(w) for the two-way fixed-effects regression.
pub fn twfe_design(pop: &Population, ts: &TreatmentSet, mode: CatalogMode<'_>) -> Result<CatalogResult> {
    let row = constant_row(mode, pop, ts.len())?;
    let mut res = CatalogResult::new("twfe", EstimandForm::TwfeRandom);
    let (rich, dist) = rich_variation(ts.values());
    res.conditions.push(Condition {
        name: "rich_variation".into(),
        slack: dist,
        threshold: CONDITION_TOL,
        holds: rich,
    });
    let design = Design::constant(&row, pop.n(), design_kind(mode))?;
    let tw = twfe_weights(&design, ts)?;
    res.conditions.push(Condition::new(
        "no_forbidden_comparisons",
        tw.forbidden.iter().map(|f| -f.weight).fold(0.0, f64::max),
        0.0,
    ));
    res.param("pi_bar", row);
    res.param("weights", tw.weights.iter().flatten().cloned().collect());
    if !rich {
        res.notes.push("paths lack rich variation; the design may not be unique".into());
    }
    if !pop.is_balanced() {
        res.notes.push("panel is unbalanced; see unbalanced_twfe_condition".into());
    }
    res.design = Some(design);
    res.exists = Some(true);
    Ok(res)
}

/// β_{w→x} projection with two-way fixed effects on a balanced panel.
fn beta_w_to_x(pop: &Population, ts: &TreatmentSet, idx: &[usize], rows: &[Vec<f64>]) -> Result<DVector<f64>> {
    let n = pop.n();
    let t_len = pop.periods();
    let d = idx.len();
    let x = |i: usize, t: usize| -> DVector<f64> { DVector::from_fn(d, |c, _| pop.x_at(i, t)[idx[c]]) };
    let mut unit_mean = vec![DVector::zeros(d); n];
    let mut time_mean = vec![DVector::zeros(d); t_len];
    let mut grand = DVector::zeros(d);
    for i in 0..n {
        for t in 0..t_len {
            let v = x(i, t);
            unit_mean[i] += &v / t_len as f64;
            time_mean[t] += &v / n as f64;
            grand += &v / (n * t_len) as f64;
        }
    }
    let mut xx = DMatrix::zeros(d, d);
    let mut xw = DVector::zeros(d);
    for i in 0..n {
        for t in 0..t_len {
            let dd = x(i, t) - &unit_mean[i] - &time_mean[t] + &grand;
            let ew: f64 = rows[i].iter().enumerate().map(|(w, p)| p * ts.value(w)[t]).sum();
            xx += &dd * dd.transpose();
            xw += &dd * ew;
        }
    }
    solve_square(&xx, &xw, "the two-way demeaned covariate moment")
}

/// Checks (x_i − x̄)β_{w→x} ∈ Span(𝒲 ∪ {1_T}) for every unit.
pub fn twfe_covariate_condition(
    pop: &Population,
    ts: &TreatmentSet,
    cols: &[String],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    if !pop.is_balanced() {
        return Err(Error::Invalid("the covariate condition needs a balanced panel".into()));
    }
    let rows = assignment_rows(mode, pop, ts.len())?;
    let idx: Vec<usize> = cols.iter().map(|c| pop.column(c)).collect::<Result<_>>()?;
    let beta = beta_w_to_x(pop, ts, &idx, &rows)?;
    let n = pop.n();
    let t_len = pop.periods();
    let mut res = CatalogResult::new("twfe_covariates", EstimandForm::TwfeRandom);
    res.param("beta_w_to_x", to_vec(&beta));
    let mut span: Vec<DVector<f64>> = ts.values().iter().map(|w| DVector::from_column_slice(w)).collect();
    span.push(DVector::from_element(t_len, 1.0));
    let basis = linalg::orthonormal_basis(&DMatrix::from_columns(&span), 1e-10);
    let proj: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            DVector::from_fn(t_len, |t, _| idx.iter().enumerate().map(|(c, &k)| beta[c] * pop.x_at(i, t)[k]).sum())
        })
        .collect();
    let mean: DVector<f64> = proj.iter().fold(DVector::zeros(t_len), |acc, v| acc + v) / n as f64;
    let dists: Vec<f64> = proj.iter().map(|v| linalg::span_distance(&basis, &(v - &mean))).collect();
    let scale = proj.iter().map(|v| (v - &mean).norm()).fold(0.0, f64::max).max(1.0);
    let worst = dists.iter().cloned().fold(0.0, f64::max);
    res.param("span_distance", dists);
    let cond = Condition::new("span_membership", worst, CONDITION_TOL * scale);
    let holds = cond.holds;
    res.conditions.push(cond);
    if beta.amax() <= 1e-12 {
        let (rich, _) = rich_variation(ts.values());
        let row = constant_row(mode, pop, ts.len())?;
        res.param("pi_bar", row.clone());
        res.design = Some(Design::constant(&row, n, design_kind(mode))?);
        res.exists = Some(true);
        if !rich {
            res.notes.push("paths lack rich variation; the constant design may not be unique".into());
        }
    } else if !holds {
        res.exists = Some(false);
        res.estimand_form = EstimandForm::None;
        res.notes.push("no implicit design: the covariate projection leaves the span of the paths".into());
    } else {
        res.notes.push("necessary condition holds; solve the system to settle existence".into());
    }
    Ok(res)
}

/// A contiguous window inside the common observed periods on which the
/// paths have rich variation.
fn rich_window(pop: &Population, ts: &TreatmentSet) -> Option<(usize, usize)> {
    let t_len = pop.periods();
    let common: Vec<bool> = (0..t_len).map(|t| (0..pop.n()).all(|i| pop.is_observed(i, t))).collect();
    let mut best: Option<(usize, usize)> = None;
    for start in 0..t_len {
        for end in start + 1..=t_len {
            if !common[start..end].iter().all(|&c| c) {
                break;
            }
            let restricted: Vec<Vec<f64>> = ts.values().iter().map(|w| w[start..end].to_vec()).collect();
            let nonzero: Vec<&Vec<f64>> = restricted.iter().filter(|v| v.iter().any(|&x| x != 0.0)).collect();
            let distinct_nonzero = ts.values().iter().filter(|w| w.iter().any(|&x| x != 0.0)).count();
            if nonzero.len() == distinct_nonzero
                && rich_variation(&restricted).0
                && best.is_none_or(|(s, e)| end - start > e - s)
            {
                best = Some((start, end));
            }
        }
    }
    best
}

/// Two sides of the missingness condition for TWFE on an unbalanced panel.
pub fn unbalanced_twfe_condition(pop: &Population, ts: &TreatmentSet, mode: CatalogMode<'_>) -> Result<CatalogResult> {
    let rows = assignment_rows(mode, pop, ts.len())?;
    let n = pop.n();
    let t_len = pop.periods();
    let levels = ts.len();
    let pibar: Vec<f64> = (0..levels).map(|w| rows.iter().map(|r| r[w]).sum::<f64>() / n as f64).collect();
    let q = |i: usize, w: usize| -> f64 {
        let obs: Vec<usize> = (0..t_len).filter(|&t| pop.is_observed(i, t)).collect();
        obs.iter().map(|&t| ts.value(w)[t]).sum::<f64>() / obs.len() as f64
    };
    let mut lhs = vec![0.0; t_len];
    let mut rhs = vec![0.0; t_len];
    for i in 0..n {
        if pop.observed_count(i) == 0 {
            continue;
        }
        for t in 0..t_len {
            if !pop.is_observed(i, t) {
                continue;
            }
            for w in 0..levels {
                let g = ts.value(w)[t] - q(i, w);
                lhs[t] += pibar[w] * g;
                rhs[t] += rows[i][w] * g;
            }
        }
    }
    let slack_t: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs() / n as f64).collect();
    let worst = slack_t.iter().cloned().fold(0.0, f64::max);
    let mut res = CatalogResult::new("unbalanced_twfe", EstimandForm::TwfeRandom);
    res.param("lhs", lhs);
    res.param("rhs", rhs);
    res.param("slack_by_period", slack_t);
    res.param("pi_bar", pibar.clone());
    let window = rich_window(pop, ts);
    res.conditions.push(Condition {
        name: "rich_variation".into(),
        slack: f64::from(u8::from(window.is_none())),
        threshold: 0.0,
        holds: window.is_some(),
    });
    if let Some((s, e)) = window {
        res.param("rich_window", vec![s as f64, e as f64]);
    }
    if !ts.is_staggered() || ts.values().iter().any(|w| w.iter().all(|&x| x == 1.0)) {
        res.notes.push("the characterization assumes staggered adoption without always-treated paths".into());
    }
    let cond = Condition::new("missingness_uncorrelated", worst, CONDITION_TOL);
    let holds = cond.holds;
    res.conditions.push(cond);
    res.exists = Some(holds);
    if holds {
        res.design = Some(Design::constant(&pibar, n, design_kind(mode))?);
    } else {
        res.estimand_form = EstimandForm::None;
        res.notes.push("no implicit design: treatment timing correlates with missingness".into());
    }
    Ok(res)
}

/// Emptiness of the one-way fixed-effects design set.
pub fn owfe_check(ts: &TreatmentSet) -> Result<CatalogResult> {
    let t_len = ts.periods();
    let m = DMatrix::from_fn(t_len, ts.len(), |t, w| ts.value(w)[t]);
    let basis = linalg::orthonormal_basis(&m, 1e-10);
    let dist = linalg::span_distance(&basis, &DVector::from_element(t_len, 1.0 / libm::sqrt(t_len as f64)));
    let mut res = CatalogResult::new("owfe", EstimandForm::None);
    res.scalar("ones_distance", dist);
    res.conditions.push(Condition {
        name: "ones_in_span".into(),
        slack: dist,
        threshold: CONDITION_TOL,
        holds: dist <= CONDITION_TOL,
    });
    if dist > CONDITION_TOL {
        res.exists = Some(false);
        res.notes.push("no implicit design: 1_T is outside the span of the paths".into());
    } else {
        res.notes.push("1_T is in the span of the paths; emptiness is not implied".into());
    }
    Ok(res)
}

/// Constant design for the event-study regression, plus the per-column
/// uniqueness conditions.
pub fn event_study_design(
    pop: &Population,
    ts: &TreatmentSet,
    event_times: &[i64],
    mode: CatalogMode<'_>,
) -> Result<CatalogResult> {
    let t_len = ts.periods();
    let row = constant_row(mode, pop, ts.len())?;
    let mut res = CatalogResult::new("event_study", EstimandForm::TwfeRandom);
    let mut unique = false;
    let mut column_ok = Vec::with_capacity(event_times.len());
    for k in 0..event_times.len() {
        let cols: Vec<Vec<f64>> =
            ts.values().iter().map(|w| (0..t_len).map(|t| event_dummies(w, t, event_times)[k]).collect()).collect();
        let zeros = cols.iter().filter(|v| v.iter().all(|&x| x == 0.0)).count();
        let (rich, _) = rich_variation(&cols);
        let ok = zeros <= 1 && rich;
        column_ok.push(f64::from(u8::from(ok)));
        unique |= ok;
    }
    res.param("column_unique", column_ok);
    res.param("pi_bar", row.clone());
    res.conditions.push(Condition {
        name: "uniqueness".into(),
        slack: f64::from(u8::from(!unique)),
        threshold: 0.0,
        holds: unique,
    });
    if !unique {
        res.notes.push("no column meets the uniqueness conditions; other implicit designs may exist".into());
    }
    res.design = Some(Design::constant(&row, pop.n(), design_kind(mode))?);
    res.exists = Some(true);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Population {
        Population::cross_section(vec!["x".into()], (0..n).map(|i| vec![i as f64 / n as f64]).collect())
    }

    #[test]
    fn angrist_recovers_linear_truth() {
        let pop = grid(10);
        let truth: Vec<f64> = (0..10).map(|i| 0.2 + 0.5 * i as f64 / 10.0).collect();
        let d = Design::binary(&truth, DesignKind::True).unwrap();
        let res = angrist_design(&pop, &TreatmentSet::binary(), &["x".into()], CatalogMode::Population(&d)).unwrap();
        let got = res.design.as_ref().unwrap().treated();
        assert!(max_gap(&got, &truth) < 1e-12);
        assert!(res.condition("equals_true_design").unwrap().holds);
    }

    #[test]
    fn angrist_hand_example() {
        // (x, W) = (0,0), (0,1), (1,1), (1,1): fitted shares 1/2 and 1.
        let pop = Population::cross_section(vec!["x".into()], vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]])
            .with_treatment(vec![0, 1, 1, 1]);
        let res = angrist_design(&pop, &TreatmentSet::binary(), &["x".into()], CatalogMode::Estimated).unwrap();
        let got = res.design.unwrap().treated();
        assert!(max_gap(&got, &[0.5, 0.5, 1.0, 1.0]) < 1e-12);
    }

    #[test]
    fn kline_is_interacted_at_one() {
        let pop = grid(12);
        let truth: Vec<f64> = (0..12).map(|i| 0.3 + 0.4 * (i as f64 / 12.0).powi(2)).collect();
        let d = Design::binary(&truth, DesignKind::True).unwrap();
        let ts = TreatmentSet::binary();
        let cols = ["x".to_string()];
        let k = kline_design(&pop, &ts, &cols, CatalogMode::Population(&d)).unwrap();
        let it = interacted_t_design(&pop, &ts, &cols, Centering::At(1.0), CatalogMode::Population(&d)).unwrap();
        assert!(max_gap(&k.design.unwrap().treated(), &it.design.unwrap().treated()) < 1e-10);
    }

    #[test]
    fn owfe_without_always_treated_is_empty() {
        let ts = TreatmentSet::staggered(4, &[None, Some(1), Some(2)]).unwrap();
        assert_eq!(owfe_check(&ts).unwrap().exists, Some(false));
        let with_ones = TreatmentSet::staggered(3, &[None, Some(0)]).unwrap();
        assert_eq!(owfe_check(&with_ones).unwrap().exists, None);
    }

    #[test]
    fn rich_variation_rules() {
        assert!(rich_variation(&[vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0], vec![0.0, 0.0, 1.0]]).0);
        assert!(!rich_variation(&[vec![0.0, 0.0], vec![1.0, 1.0]]).0);
    }

    #[test]
    fn listing_fixed_point_and_transplant() {
        let n = 100;
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 / n as f64).powi(3)]).collect();
        let pop = Population::cross_section(vec!["x".into()], x.clone());
        let seed: Vec<f64> = x
            .iter()
            .map(|r| {
                let l = 1.0 + (r[0] - 0.5) * 0.25;
                l / (1.0 + 2.0 * l)
            })
            .collect();
        let seed = Design::binary(&seed, DesignKind::Candidate).unwrap();
        let ts = TreatmentSet::binary();
        let res = interacted_t_design(
            &pop,
            &ts,
            &["x".into()],
            Centering::Named(crate::model::NamedCentering::Ate),
            CatalogMode::FixedPoint(&seed),
        )
        .unwrap();
        let frac = FractionalLinear::from_result(&res).unwrap();
        assert!((frac.theta0 - 0.3254446337090774).abs() < 1e-9);
        assert!((frac.theta1[0] - 0.014146176384094272).abs() < 1e-9);
        assert!((frac.gamma2[0] - 0.044263163071495276).abs() < 1e-9);
        assert!(res.condition("fractional_linear_fit").unwrap().holds);
        let new_x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let tr = transplant_residual(&frac, &new_x, &x).unwrap();
        assert!((tr.residual - 0.08293240507391064).abs() < 1e-9);
        assert!(tr.design.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
