//! Potential weights ρ_i(w) = ΛG⁻¹z(x_i, w)' and identification strength.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{GramMatrix, GramSource};
use crate::linalg;
use crate::model::{Population, RegressionSpec, TreatmentSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Population,
    Estimated,
}

/// ρ_i(w) for every unit and treatment value, with the Gram matrix used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialWeightSet {
    #[serde(with = "crate::linalg::serde_mat::nested")]
    rho: Vec<Vec<DMatrix<f64>>>,
    present: Vec<Vec<bool>>,
    gram: GramMatrix,
    mode: WeightMode,
    treatments: TreatmentSet,
}

impl PotentialWeightSet {
    pub fn rho(&self, i: usize, w: usize) -> &DMatrix<f64> {
        &self.rho[i][w]
    }

    pub fn all(&self) -> &[Vec<DMatrix<f64>>] {
        &self.rho
    }

    /// Whether period `t` is in 𝒯_i; absent columns carry no weight.
    pub fn is_present(&self, i: usize, t: usize) -> bool {
        self.present[i][t]
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn treatments(&self) -> &TreatmentSet {
        &self.treatments
    }

    pub fn n_units(&self) -> usize {
        self.rho.len()
    }

    pub fn levels(&self) -> usize {
        self.rho.first().map_or(0, |r| r.len())
    }

    pub fn n_contrasts(&self) -> usize {
        self.rho[0][0].nrows()
    }

    pub fn periods(&self) -> usize {
        self.rho[0][0].ncols()
    }

    /// Number of present periods of unit `i`.
    pub fn present_count(&self, i: usize) -> usize {
        self.present[i].iter().filter(|&&b| b).count()
    }

    /// R_i: column w is vec(ρ_i(w)) over present periods, stacked period by
    /// period (kT × (J+1)).
    pub fn unit_matrix(&self, i: usize) -> DMatrix<f64> {
        let k = self.n_contrasts();
        let periods: Vec<usize> = (0..self.periods()).filter(|&t| self.present[i][t]).collect();
        let rows = k * periods.len();
        DMatrix::from_fn(rows, self.levels(), |r, w| {
            let (p, j) = (r / k, r % k);
            self.rho[i][w][(j, periods[p])]
        })
    }

    /// Largest |ρ| over all units.
    pub fn scale(&self) -> f64 {
        self.rho.iter().flatten().map(linalg::max_abs).fold(0.0, f64::max)
    }
}

/// ρ_i(w) = ΛG⁻¹z(x_i,w)' for all i, w.
pub fn potential_weights(spec: &RegressionSpec, pop: &Population, gram: &GramMatrix) -> Result<PotentialWeightSet> {
    spec.check_population(pop)?;
    if gram.dim() != spec.n_regressors() {
        return Err(Error::Dimension("Gram matrix does not match the spec".into()));
    }
    let h = spec.contrast() * gram.inverse()?;
    let rho = spec
        .regressors()
        .iter()
        .enumerate()
        .map(|(i, unit)| {
            unit.iter()
                .map(|z| {
                    let mut r = &h * z.transpose();
                    for t in 0..r.ncols() {
                        if !pop.is_observed(i, t) {
                            r.column_mut(t).fill(0.0);
                        }
                    }
                    r
                })
                .collect()
        })
        .collect();
    let mode = match gram.source() {
        GramSource::Sample => WeightMode::Estimated,
        _ => WeightMode::Population,
    };
    Ok(PotentialWeightSet {
        rho,
        present: pop.observed_periods.clone(),
        gram: gram.clone(),
        mode,
        treatments: spec.treatments().clone(),
    })
}

/// Realized weights ρ̂_i(W_i).
pub fn estimator_weights(pws: &PotentialWeightSet, pop: &Population) -> Result<Vec<DMatrix<f64>>> {
    if pws.mode() != WeightMode::Estimated {
        return Err(Error::Invalid("estimator weights need sample-Gram potential weights".into()));
    }
    let w = pop.require_treatment()?;
    if w.len() != pws.n_units() {
        return Err(Error::Dimension("treatment vector does not match the weights".into()));
    }
    Ok(w.iter().enumerate().map(|(i, &wi)| pws.rho(i, wi).clone()).collect())
}

/// (1/n) Σ_i Σ_{t∈𝒯_i} ρ̂_it(W_i) Y_it.
pub fn weighted_outcome_sum(weights: &[DMatrix<f64>], pop: &Population) -> Result<Vec<f64>> {
    let y = pop.require_outcomes()?;
    let k = weights.first().map_or(0, |m| m.nrows());
    let mut tau = alloc::vec![0.0; k];
    for (i, m) in weights.iter().enumerate() {
        for t in 0..m.ncols() {
            if let Some(v) = y[i][t] {
                for (j, acc) in tau.iter_mut().enumerate() {
                    *acc += m[(j, t)] * v;
                }
            }
        }
    }
    let n = weights.len() as f64;
    Ok(tau.into_iter().map(|v| v / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStrength {
    /// Singular values of R_i, descending.
    pub singular_values: Vec<f64>,
    /// σ_iJ, the J-th singular value (0 when R_i has fewer than J).
    pub sigma: f64,
    pub unconstrained: bool,
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrixDiagnostic {
    pub units: Vec<UnitStrength>,
    /// Minimum σ_iJ over constrained units.
    pub min_sigma: f64,
    pub median_sigma: f64,
    pub unconstrained_count: usize,
    pub weak_count: usize,
}

/// Relative threshold for treating R_i as identically zero.
pub const UNCONSTRAINED_TOL: f64 = 1e-12;
/// σ_iJ below this multiple of the median is flagged weak.
pub const WEAK_RATIO: f64 = 1e-6;

pub fn identification_strength(pws: &PotentialWeightSet) -> WeightMatrixDiagnostic {
    let j = pws.levels() - 1;
    let scale = pws.scale();
    let mut units: Vec<UnitStrength> = (0..pws.n_units())
        .map(|i| {
            let r = pws.unit_matrix(i);
            let unconstrained = linalg::max_abs(&r) <= UNCONSTRAINED_TOL * scale;
            let singular_values = linalg::singular_values(&r);
            let sigma = if j >= 1 { singular_values.get(j - 1).copied().unwrap_or(0.0) } else { 0.0 };
            UnitStrength { singular_values, sigma, unconstrained, weak: false }
        })
        .collect();
    let mut constrained: Vec<f64> = units.iter().filter(|u| !u.unconstrained).map(|u| u.sigma).collect();
    let min_sigma = constrained.iter().cloned().fold(f64::INFINITY, f64::min);
    let median_sigma = linalg::median(&mut constrained);
    let mut weak_count = 0;
    for u in units.iter_mut().filter(|u| !u.unconstrained) {
        u.weak = u.sigma < WEAK_RATIO * median_sigma;
        weak_count += usize::from(u.weak);
    }
    let unconstrained_count = units.iter().filter(|u| u.unconstrained).count();
    WeightMatrixDiagnostic {
        units,
        min_sigma: if min_sigma.is_finite() { min_sigma } else { 0.0 },
        median_sigma: if median_sigma.is_nan() { 0.0 } else { median_sigma },
        unconstrained_count,
        weak_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::{population_gram, sample_gram};
    use crate::model::{Design, DesignKind, TreatmentSet};
    use alloc::vec;

    fn intercept(n: usize) -> (RegressionSpec, Population) {
        let pop = Population::cross_section(vec![], vec![vec![]; n]);
        let ts = TreatmentSet::binary();
        let spec = RegressionSpec::from_fn(n, ts.clone(), DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), |_, _, w| {
            vec![1.0, ts.value(w)[0]]
        })
        .unwrap();
        (spec, pop)
    }

    #[test]
    fn bernoulli_half_weights_are_plus_minus_two() {
        let (spec, pop) = intercept(5);
        let d = Design::binary(&[0.5; 5], DesignKind::True).unwrap();
        let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &d).unwrap()).unwrap();
        for i in 0..5 {
            assert!((pws.rho(i, 1)[(0, 0)] - 2.0).abs() < 1e-12);
            assert!((pws.rho(i, 0)[(0, 0)] + 2.0).abs() < 1e-12);
        }
        let diag = identification_strength(&pws);
        assert!((diag.units[0].sigma - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(diag.unconstrained_count, 0);
    }

    #[test]
    fn two_unit_difference_in_means() {
        let (spec, pop) = intercept(2);
        let pop = pop.with_treatment(vec![0, 1]).with_scalar_outcomes(&[0.0, 1.0]);
        let pws = potential_weights(&spec, &pop, &sample_gram(&spec, &pop).unwrap()).unwrap();
        let w = estimator_weights(&pws, &pop).unwrap();
        assert!((w[0][(0, 0)] + 2.0).abs() < 1e-12 && (w[1][(0, 0)] - 2.0).abs() < 1e-12);
        assert!((weighted_outcome_sum(&w, &pop).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimator_weights_need_sample_mode() {
        let (spec, pop) = intercept(2);
        let d = Design::binary(&[0.5; 2], DesignKind::True).unwrap();
        let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &d).unwrap()).unwrap();
        assert!(estimator_weights(&pws, &pop.with_treatment(vec![0, 1])).is_err());
    }

    #[test]
    fn zero_weights_flag_unconstrained() {
        // The second unit has z = 0 for both treatments.
        let pop = Population::cross_section(vec![], vec![vec![]; 3]);
        let ts = TreatmentSet::binary();
        let spec = RegressionSpec::from_fn(3, ts.clone(), DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), |i, _, w| {
            if i == 1 {
                vec![0.0, 0.0]
            } else {
                vec![1.0, ts.value(w)[0]]
            }
        })
        .unwrap();
        let d = Design::binary(&[0.5; 3], DesignKind::True).unwrap();
        let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &d).unwrap()).unwrap();
        let diag = identification_strength(&pws);
        assert!(diag.units[1].unconstrained);
        assert_eq!(diag.units[1].sigma, 0.0);
        assert_eq!(diag.unconstrained_count, 1);
    }
}
