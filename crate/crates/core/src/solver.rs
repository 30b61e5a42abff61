//! Per-unit level-irrelevance solves, verdicts and candidate-design checks.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::{implicit_estimand, ImplicitEstimand};
use crate::gram::{candidate_gram, gram_values, sample_gram};
use crate::linalg;
use crate::model::{Design, DesignKind, Population, RegressionSpec};
use crate::weights::{potential_weights, PotentialWeightSet, WeightMode, UNCONSTRAINED_TOL};

/// Gram-consistency tolerance, relative to the largest Gram entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramTolerance {
    Relative(f64),
    /// `c / √n`.
    RootN(f64),
}

impl GramTolerance {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            GramTolerance::Relative(v) => v,
            GramTolerance::RootN(c) => c / libm::sqrt(n as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverTolerances {
    /// Relative singular-value cutoff for rank decisions.
    pub rank_cutoff: f64,
    /// Residual above this multiple of ‖ρ_i‖ means no solution.
    pub inconsistency: f64,
    /// Entries in [−tol, 1+tol] count as proper.
    pub properness: f64,
    pub gram_population: f64,
    pub gram_estimated: GramTolerance,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        SolverTolerances {
            rank_cutoff: 1e-9,
            inconsistency: 1e-8,
            properness: 1e-9,
            gram_population: 1e-10,
            gram_estimated: GramTolerance::RootN(10.0),
        }
    }
}

impl SolverTolerances {
    pub fn strict() -> Self {
        SolverTolerances {
            rank_cutoff: 1e-10,
            inconsistency: 1e-9,
            properness: 1e-12,
            gram_population: 1e-10,
            gram_estimated: GramTolerance::Relative(1e-6),
        }
    }

    pub fn loose() -> Self {
        SolverTolerances {
            rank_cutoff: 1e-8,
            inconsistency: 1e-6,
            properness: 1e-6,
            gram_population: 1e-8,
            gram_estimated: GramTolerance::RootN(30.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Unique,
    #[serde(rename = "none")]
    NoSolution,
    Underdetermined,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSolveStatus {
    pub status: UnitStatus,
    /// Solution when unique; minimum-norm base point when underdetermined.
    pub design_row: Option<Vec<f64>>,
    /// ‖Σ_w π_i(w)ρ_i(w)‖∞ at the returned point (least-squares point for
    /// `none`).
    pub residual: f64,
    pub proper: bool,
    /// Null-space basis of the stacked system (underdetermined only).
    pub nullspace: Vec<Vec<f64>>,
    /// A solution inside the simplex, when one exists.
    pub proper_point: Option<Vec<f64>>,
}

impl UnitSolveStatus {
    /// Row used when assembling a full design.
    fn assembled_row(&self, levels: usize) -> Option<Vec<f64>> {
        match self.status {
            UnitStatus::NoSolution => None,
            UnitStatus::Unconstrained => Some(vec![1.0 / levels as f64; levels]),
            UnitStatus::Unique => self.design_row.clone(),
            UnitStatus::Underdetermined => self.proper_point.clone().or_else(|| self.design_row.clone()),
        }
    }

    /// Whether `row` solves this unit's system.
    pub fn admits(&self, row: &[f64], tol: f64) -> bool {
        match self.status {
            UnitStatus::Unconstrained => true,
            UnitStatus::NoSolution => false,
            UnitStatus::Unique => {
                let base = self.design_row.as_ref().expect("unique row");
                base.iter().zip(row).all(|(a, b)| (a - b).abs() <= tol)
            }
            UnitStatus::Underdetermined => {
                let base = self.design_row.as_ref().expect("base row");
                let diff = DVector::from_iterator(row.len(), row.iter().zip(base).map(|(a, b)| a - b));
                let basis = DMatrix::from_columns(
                    &self.nullspace.iter().map(|v| DVector::from_column_slice(v)).collect::<Vec<_>>(),
                );
                linalg::span_distance(&basis, &diff) <= tol
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Tenable,
    Improper,
    Nonexistent,
    GramInconsistent,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub unique: usize,
    pub none: usize,
    pub underdetermined: usize,
    pub unconstrained: usize,
    pub improper: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitDesignReport {
    pub per_unit: Vec<UnitSolveStatus>,
    pub design: Option<Design>,
    pub gram_consistent: Option<bool>,
    /// ‖G(π) − G‖∞.
    pub gram_discrepancy: Option<f64>,
    /// Absolute tolerance the discrepancy was compared to.
    pub gram_tolerance: Option<f64>,
    pub verdict: Verdict,
    pub counts: StatusCounts,
    pub estimand: Option<ImplicitEstimand>,
}

impl ImplicitDesignReport {
    /// Whether `design` lies in the solution set of every unit.
    pub fn contains(&self, design: &Design, tol: f64) -> bool {
        self.per_unit.iter().enumerate().all(|(i, u)| u.admits(design.row(i), tol))
    }
}

/// Finds x ≥ 0 with `a x = b` by phase-one simplex (Bland's rule).
pub fn simplex_feasible_point(a: &DMatrix<f64>, b: &[f64], tol: f64) -> Option<Vec<f64>> {
    let (m, n) = a.shape();
    let width = n + m + 1;
    let rhs = n + m;
    let mut tab = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[i][j] = sign * a[(i, j)];
        }
        tab[i][n + i] = 1.0;
        tab[i][rhs] = sign * b[i];
    }
    for j in 0..n {
        tab[m][j] = -(0..m).map(|i| tab[i][j]).sum::<f64>();
    }
    tab[m][rhs] = -(0..m).map(|i| tab[i][rhs]).sum::<f64>();
    let mut basis: Vec<usize> = (n..n + m).collect();
    let eps = 1e-12;
    for _ in 0..10_000 {
        let Some(enter) = (0..n + m).find(|&j| tab[m][j] < -eps) else {
            break;
        };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if tab[i][enter] > eps {
                let ratio = tab[i][rhs] / tab[i][enter];
                let better =
                    ratio < best - 1e-15 || (ratio <= best + 1e-15 && leave.is_some_and(|l| basis[i] < basis[l]));
                if leave.is_none() || better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let r = leave?;
        let piv = tab[r][enter];
        for v in tab[r].iter_mut() {
            *v /= piv;
        }
        let pivot_row = tab[r].clone();
        for (i, row) in tab.iter_mut().enumerate() {
            if i != r && row[enter] != 0.0 {
                let f = row[enter];
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
        basis[r] = enter;
    }
    let infeasibility = -tab[m][rhs];
    if infeasibility > tol {
        return None;
    }
    let mut x = vec![0.0; n];
    for (i, &bj) in basis.iter().enumerate() {
        if bj < n {
            x[bj] = tab[i][rhs].max(0.0);
        }
    }
    Some(x)
}

fn solve_unit(r: &DMatrix<f64>, global_scale: f64, tol: &SolverTolerances) -> UnitSolveStatus {
    let levels = r.ncols();
    let s = linalg::max_abs(r);
    if s <= UNCONSTRAINED_TOL * global_scale {
        return UnitSolveStatus {
            status: UnitStatus::Unconstrained,
            design_row: None,
            residual: 0.0,
            proper: true,
            nullspace: Vec::new(),
            proper_point: None,
        };
    }
    let m = r.nrows();
    let mut a = DMatrix::zeros(m + 1, levels);
    a.view_mut((0, 0), (m, levels)).copy_from(&(r / s));
    a.row_mut(m).fill(1.0);
    let mut b = DVector::zeros(m + 1);
    b[m] = 1.0;
    let sol = linalg::min_norm_solve(&a, &b, tol.rank_cutoff);
    let x: Vec<f64> = sol.x.iter().cloned().collect();
    let residual = linalg::max_abs(&(r * &sol.x));
    let sum_err = (x.iter().sum::<f64>() - 1.0).abs();
    if residual > tol.inconsistency * s || sum_err > tol.inconsistency {
        return UnitSolveStatus {
            status: UnitStatus::NoSolution,
            design_row: None,
            residual,
            proper: false,
            nullspace: Vec::new(),
            proper_point: None,
        };
    }
    let in_simplex = |row: &[f64]| row.iter().all(|&p| p >= -tol.properness && p <= 1.0 + tol.properness);
    if sol.nullspace.ncols() == 0 {
        let proper = in_simplex(&x);
        return UnitSolveStatus {
            status: UnitStatus::Unique,
            design_row: Some(x),
            residual,
            proper,
            nullspace: Vec::new(),
            proper_point: None,
        };
    }
    let nullspace: Vec<Vec<f64>> = sol.nullspace.column_iter().map(|c| c.iter().cloned().collect()).collect();
    let proper_point = if in_simplex(&x) {
        Some(x.clone())
    } else {
        let rhs: Vec<f64> = b.iter().cloned().collect();
        simplex_feasible_point(&a, &rhs, 1e-9)
    };
    UnitSolveStatus {
        status: UnitStatus::Underdetermined,
        design_row: Some(x),
        residual,
        proper: proper_point.is_some(),
        nullspace,
        proper_point,
    }
}

fn check_dims(pws: &PotentialWeightSet, spec: &RegressionSpec, pop: &Population) -> Result<()> {
    spec.check_population(pop)?;
    if pws.n_units() != spec.n_units() || pws.levels() != spec.levels() {
        return Err(Error::Dimension("potential weights do not match the spec".into()));
    }
    Ok(())
}

fn finalize(
    per_unit: Vec<UnitSolveStatus>,
    pws: &PotentialWeightSet,
    spec: &RegressionSpec,
    pop: &Population,
    tol: &SolverTolerances,
) -> Result<ImplicitDesignReport> {
    let mut counts = StatusCounts::default();
    for u in &per_unit {
        match u.status {
            UnitStatus::Unique => counts.unique += 1,
            UnitStatus::NoSolution => counts.none += 1,
            UnitStatus::Underdetermined => counts.underdetermined += 1,
            UnitStatus::Unconstrained => counts.unconstrained += 1,
        }
        if !u.proper && u.status != UnitStatus::NoSolution {
            counts.improper += 1;
        }
    }
    let levels = pws.levels();
    let rows: Option<Vec<Vec<f64>>> = per_unit.iter().map(|u| u.assembled_row(levels)).collect();
    let design = match rows {
        Some(r) => Some(Design::new(r, DesignKind::Implicit)?),
        None => None,
    };
    let (mut gram_consistent, mut gram_discrepancy, mut gram_tolerance) = (None, None, None);
    let mut estimand = None;
    if let Some(d) = &design {
        let g = gram_values(spec, pop, &|i, w| d.prob(i, w));
        let reference = pws.gram().values();
        let disc = linalg::max_abs(&(&g - reference));
        let rel = match pws.mode() {
            WeightMode::Population => tol.gram_population,
            WeightMode::Estimated => tol.gram_estimated.resolve(pop.n()),
        };
        let abs_tol = rel * linalg::max_abs(reference);
        gram_consistent = Some(disc <= abs_tol);
        gram_discrepancy = Some(disc);
        gram_tolerance = Some(abs_tol);
        estimand = Some(implicit_estimand(d, pws)?);
    }
    let verdict = if counts.none > 0 {
        Verdict::Nonexistent
    } else if counts.improper > 0 {
        Verdict::Improper
    } else if gram_consistent != Some(true) {
        Verdict::GramInconsistent
    } else {
        Verdict::Tenable
    };
    Ok(ImplicitDesignReport {
        per_unit,
        design,
        gram_consistent,
        gram_discrepancy,
        gram_tolerance,
        verdict,
        counts,
        estimand,
    })
}

/// Solves Σ_w π_i(w)ρ_i(w) = 0, Σ_w π_i(w) = 1 unit by unit.
pub fn solve_implicit_design(
    pws: &PotentialWeightSet,
    spec: &RegressionSpec,
    pop: &Population,
    tol: &SolverTolerances,
) -> Result<ImplicitDesignReport> {
    check_dims(pws, spec, pop)?;
    let scale = pws.scale();
    let per_unit = (0..pws.n_units()).map(|i| solve_unit(&pws.unit_matrix(i), scale, tol)).collect();
    finalize(per_unit, pws, spec, pop, tol)
}

/// π_i = −ρ_i(0)/(ρ_i(1) − ρ_i(0)) for binary cross-sections.
pub fn binary_closed_form(
    pws: &PotentialWeightSet,
    spec: &RegressionSpec,
    pop: &Population,
    tol: &SolverTolerances,
) -> Result<ImplicitDesignReport> {
    check_dims(pws, spec, pop)?;
    if pws.levels() != 2 || pws.n_contrasts() != 1 || pws.periods() != 1 {
        return Err(Error::Dimension("closed form needs k = T = J = 1".into()));
    }
    let scale = pws.scale();
    let per_unit = (0..pws.n_units())
        .map(|i| {
            let r1 = pws.rho(i, 1)[(0, 0)];
            let r0 = pws.rho(i, 0)[(0, 0)];
            let s = r1.abs().max(r0.abs());
            if s <= UNCONSTRAINED_TOL * scale {
                return UnitSolveStatus {
                    status: UnitStatus::Unconstrained,
                    design_row: None,
                    residual: 0.0,
                    proper: true,
                    nullspace: Vec::new(),
                    proper_point: None,
                };
            }
            let diff = r1 - r0;
            if diff.abs() <= tol.rank_cutoff * s {
                return UnitSolveStatus {
                    status: UnitStatus::NoSolution,
                    design_row: None,
                    residual: r0.abs(),
                    proper: false,
                    nullspace: Vec::new(),
                    proper_point: None,
                };
            }
            let p = -r0 / diff;
            let row = vec![1.0 - p, p];
            UnitSolveStatus {
                status: UnitStatus::Unique,
                residual: (p * r1 + (1.0 - p) * r0).abs(),
                proper: p >= -tol.properness && p <= 1.0 + tol.properness,
                design_row: Some(row),
                nullspace: Vec::new(),
                proper_point: None,
            }
        })
        .collect();
    finalize(per_unit, pws, spec, pop, tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub passed: bool,
    pub worst: f64,
    pub unit: Option<usize>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// Level irrelevance with potential weights from G(candidate).
    pub level_irrelevance: ConditionCheck,
    pub properness: ConditionCheck,
    /// max |G(candidate) − Ĝ| against the band (worst = largest ratio to band).
    pub gram_consistency: ConditionCheck,
    /// Level irrelevance with potential weights from Ĝ, for reference.
    pub sample_level_irrelevance: ConditionCheck,
}

impl MembershipReport {
    pub fn passed(&self) -> bool {
        self.level_irrelevance.passed && self.properness.passed && self.gram_consistency.passed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramBand {
    Uniform(f64),
    Elementwise(#[serde(with = "crate::linalg::serde_mat")] DMatrix<f64>),
}

fn level_irrelevance_check(pws: &PotentialWeightSet, design: &Design, tol: &SolverTolerances) -> ConditionCheck {
    let mut worst = 0.0;
    let mut unit = None;
    for i in 0..pws.n_units() {
        let mut s = pws.rho(i, 0) * design.prob(i, 0);
        for w in 1..pws.levels() {
            s += pws.rho(i, w) * design.prob(i, w);
        }
        let r = linalg::max_abs(&s);
        if r > worst {
            worst = r;
            unit = Some(i);
        }
    }
    let threshold = tol.inconsistency * pws.scale().max(f64::MIN_POSITIVE);
    ConditionCheck { passed: worst <= threshold, worst, unit, threshold }
}

/// Checks the three membership conditions of the projection set for a
/// candidate design.
pub fn check_candidate_design(
    candidate: &Design,
    spec: &RegressionSpec,
    pop: &Population,
    band: &GramBand,
    tol: &SolverTolerances,
) -> Result<MembershipReport> {
    let gc = candidate_gram(spec, pop, candidate)?;
    let gs = sample_gram(spec, pop)?;
    let pws_c = potential_weights(spec, pop, &gc)?;
    let level_irrelevance = level_irrelevance_check(&pws_c, candidate, tol);
    let sample_level_irrelevance = match potential_weights(spec, pop, &gs) {
        Ok(p) => level_irrelevance_check(&p, candidate, tol),
        Err(_) => ConditionCheck { passed: false, worst: f64::INFINITY, unit: None, threshold: 0.0 },
    };

    let mut worst_prop = 0.0;
    let mut prop_unit = None;
    for (i, row) in candidate.probs().iter().enumerate() {
        for &p in row {
            let v = (-p).max(p - 1.0).max(0.0);
            if v > worst_prop {
                worst_prop = v;
                prop_unit = Some(i);
            }
        }
    }
    let properness = ConditionCheck {
        passed: worst_prop <= tol.properness,
        worst: worst_prop,
        unit: prop_unit,
        threshold: tol.properness,
    };

    let diff = (gc.values() - gs.values()).abs();
    let k = diff.nrows();
    let mut ratio: f64 = 0.0;
    for a in 0..k {
        for b in 0..k {
            let bound = match band {
                GramBand::Uniform(v) => *v,
                GramBand::Elementwise(m) => m[(a, b)],
            };
            let r = if bound > 0.0 {
                diff[(a, b)] / bound
            } else if diff[(a, b)] > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            ratio = ratio.max(r);
        }
    }
    let gram_consistency = ConditionCheck { passed: ratio <= 1.0, worst: ratio, unit: None, threshold: 1.0 };
    Ok(MembershipReport { level_irrelevance, properness, gram_consistency, sample_level_irrelevance })
}
