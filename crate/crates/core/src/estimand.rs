//! Implicit estimand weights ω_i(π, w) = π_i(w)ρ_i(w) and their
//! decompositions.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Design, Population, PotentialOutcomeTable, TreatmentSet};
use crate::weights::PotentialWeightSet;

/// Cells with ω below this are flagged negative.
pub const NEGATIVE_TOL: f64 = -1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeCell {
    pub unit: usize,
    pub treatment: usize,
    pub contrast_row: usize,
    pub period: usize,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitEstimand {
    /// ω_i(π, w) as k×T matrices, indexed [unit][treatment].
    #[serde(with = "crate::linalg::serde_mat::nested")]
    pub omega: Vec<Vec<DMatrix<f64>>>,
    /// ω_i = π_i ρ_i(1) for binary cross-sections.
    pub wate: Option<Vec<f64>>,
    /// (1/n) Σ ω_i, which is 1 for ATE-normalized estimands.
    pub wate_mean: Option<f64>,
    /// Per contrast j, (1/n) Σ_i Σ_{ℓ∉{0,j}} |ω_ij(ℓ)| (multivalued cross-sections).
    pub contamination: Vec<f64>,
    pub negativity: Vec<NegativeCell>,
}

impl ImplicitEstimand {
    pub fn n_units(&self) -> usize {
        self.omega.len()
    }

    /// max over units of |Σ_w ω_i(w)|, zero for implicit designs.
    pub fn zero_sum_error(&self) -> f64 {
        self.omega
            .iter()
            .map(|unit| {
                let mut s = unit[0].clone();
                for m in &unit[1..] {
                    s += m;
                }
                crate::linalg::max_abs(&s)
            })
            .fold(0.0, f64::max)
    }

    /// (1/n) Σ_i Σ_{t∈𝒯_i} Σ_w ω_i(w) y_i(w).
    pub fn apply(&self, table: &PotentialOutcomeTable, pop: &Population) -> Vec<f64> {
        let k = self.omega[0][0].nrows();
        let mut tau = vec![0.0; k];
        for (i, unit) in self.omega.iter().enumerate() {
            for (w, m) in unit.iter().enumerate() {
                for t in 0..m.ncols() {
                    if !pop.is_observed(i, t) {
                        continue;
                    }
                    let y = table.get(i, w, t);
                    for (j, acc) in tau.iter_mut().enumerate() {
                        *acc += m[(j, t)] * y;
                    }
                }
            }
        }
        let n = self.n_units() as f64;
        tau.into_iter().map(|v| v / n).collect()
    }
}

/// Whether cell (w, j, t) carries an effect weight rather than a control or
/// contamination weight.
fn on_target(ts: &TreatmentSet, w: usize, j: usize, t: usize, k: usize) -> bool {
    if ts.value(w)[t] == 0.0 {
        return false;
    }
    if ts.periods() == 1 && k == ts.len() - 1 {
        return w == j + 1;
    }
    true
}

pub fn implicit_estimand(design: &Design, pws: &PotentialWeightSet) -> Result<ImplicitEstimand> {
    if design.n() != pws.n_units() || design.levels() != pws.levels() {
        return Err(Error::Dimension("design does not match the potential weights".into()));
    }
    let omega: Vec<Vec<DMatrix<f64>>> =
        (0..pws.n_units()).map(|i| (0..pws.levels()).map(|w| pws.rho(i, w) * design.prob(i, w)).collect()).collect();
    let ts = pws.treatments();
    let k = pws.n_contrasts();
    let t_len = pws.periods();
    let j_count = pws.levels() - 1;
    let n = pws.n_units() as f64;

    let binary = pws.levels() == 2 && k == 1 && t_len == 1;
    let wate: Option<Vec<f64>> = binary.then(|| omega.iter().map(|u| u[1][(0, 0)]).collect());
    let wate_mean = wate.as_ref().map(|w| w.iter().sum::<f64>() / n);

    let contamination = if t_len == 1 && k == j_count && j_count > 1 {
        (0..k)
            .map(|j| {
                omega
                    .iter()
                    .map(|u| (1..=j_count).filter(|&l| l != j + 1).map(|l| u[l][(j, 0)].abs()).sum::<f64>())
                    .sum::<f64>()
                    / n
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut negativity = Vec::new();
    for (i, unit) in omega.iter().enumerate() {
        for (w, m) in unit.iter().enumerate() {
            for j in 0..k {
                for t in 0..t_len {
                    if pws.is_present(i, t) && on_target(ts, w, j, t, k) && m[(j, t)] < NEGATIVE_TOL {
                        negativity.push(NegativeCell {
                            unit: i,
                            treatment: w,
                            contrast_row: j,
                            period: t,
                            omega: m[(j, t)],
                        });
                    }
                }
            }
        }
    }
    Ok(ImplicitEstimand { omega, wate, wate_mean, contamination, negativity })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub contrast_row: usize,
    pub group: usize,
    /// n_g / n.
    pub share: f64,
    pub treatment: usize,
    /// Group mean of ω_ij(ℓ), the coefficient on the group-mean effect of ℓ.
    pub coefficient: f64,
    /// Largest deviation of ω_ij(ℓ) from the group mean. The decomposition is
    /// exact in terms of group-mean effects only when this is zero.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub contrast_row: usize,
    pub group: usize,
    pub size: usize,
    /// (1/n) Σ_{i∈g} Σ_{ℓ≥1} ω_ij(ℓ).
    pub sum_omega: f64,
    /// (1/n) Σ_{i∈g} Σ_{ℓ≥1} |ω_ij(ℓ)|.
    pub sum_abs_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Representative covariate row of each group (empty for custom groupings).
    pub group_labels: Vec<Vec<f64>>,
    pub rows: Vec<DecompositionRow>,
    pub groups: Vec<GroupSummary>,
}

/// τ_j = Σ_g (n_g/n) Σ_{ℓ≥1} coefficient_{jgℓ} · mean_{i∈g}(y_i(ℓ) − y_i(0)).
///
/// `grouping` assigns each unit a group index; `None` groups by distinct
/// covariate rows of `pop`.
pub fn contamination_decomposition(
    est: &ImplicitEstimand,
    pop: &Population,
    grouping: Option<&[usize]>,
) -> Result<Decomposition> {
    if est.omega[0][0].ncols() != 1 {
        return Err(Error::Invalid("contamination decomposition needs a cross-section".into()));
    }
    let n = est.n_units();
    let (labels, groups) = match grouping {
        Some(g) => {
            if g.len() != n {
                return Err(Error::Dimension("grouping length".into()));
            }
            let count = g.iter().max().map_or(0, |m| m + 1);
            (Vec::new(), (g.to_vec(), count))
        }
        None => {
            let (distinct, idx) = crate::model::template_cells(&pop.covariates);
            let count = distinct.len();
            (distinct, (idx, count))
        }
    };
    let (assign, count) = groups;
    let levels = est.omega[0].len();
    let k = est.omega[0][0].nrows();
    let nf = n as f64;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for j in 0..k {
        for g in 0..count {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == g).collect();
            if members.is_empty() {
                continue;
            }
            let size = members.len();
            let mut sum_omega = 0.0;
            let mut sum_abs = 0.0;
            for l in 1..levels {
                let vals: Vec<f64> = members.iter().map(|&i| est.omega[i][l][(j, 0)]).collect();
                let mean = vals.iter().sum::<f64>() / size as f64;
                let spread = vals.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
                sum_omega += vals.iter().sum::<f64>();
                sum_abs += vals.iter().map(|v| v.abs()).sum::<f64>();
                rows.push(DecompositionRow {
                    contrast_row: j,
                    group: g,
                    share: size as f64 / nf,
                    treatment: l,
                    coefficient: mean,
                    spread,
                });
            }
            summaries.push(GroupSummary {
                contrast_row: j,
                group: g,
                size,
                sum_omega: sum_omega / nf,
                sum_abs_omega: sum_abs / nf,
            });
        }
    }
    Ok(Decomposition { group_labels: labels, rows, groups: summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForbiddenComparison {
    pub treatment: usize,
    pub period: usize,
    pub weight: f64,
}

/// TWFE estimand weights under a constant design, indexed [treatment][period].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeWeights {
    pub weights: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub forbidden: Vec<ForbiddenComparison>,
}

/// ω_t(π, w) = π(w)g_t(w) / Σ_{t,w} π(w)g_t(w)² with
/// g_t(w) = w_t − w_{π,t} − (1'w − 1'w_π)/T.
pub fn twfe_weights(design: &Design, ts: &TreatmentSet) -> Result<TwfeWeights> {
    if design.levels() != ts.len() {
        return Err(Error::Dimension("design does not match the treatment set".into()));
    }
    let pi = design.constant_row(1e-10).ok_or(Error::NonConstantDesign)?;
    let t_len = ts.periods();
    let tf = t_len as f64;
    let mut wbar = vec![0.0; t_len];
    for (w, &p) in pi.iter().enumerate() {
        for t in 0..t_len {
            wbar[t] += p * ts.value(w)[t];
        }
    }
    let wbar_sum: f64 = wbar.iter().sum();
    let g: Vec<Vec<f64>> = (0..ts.len())
        .map(|w| {
            let v = ts.value(w);
            let s: f64 = v.iter().sum();
            (0..t_len).map(|t| v[t] - wbar[t] - (s - wbar_sum) / tf).collect()
        })
        .collect();
    let denom: f64 = (0..ts.len()).map(|w| pi[w] * g[w].iter().map(|x| x * x).sum::<f64>()).sum();
    if denom <= 0.0 {
        return Err(Error::Singular("treatment paths have no within variation".into()));
    }
    let weights: Vec<Vec<f64>> = (0..ts.len()).map(|w| g[w].iter().map(|x| pi[w] * x / denom).collect()).collect();
    let mut forbidden = Vec::new();
    for w in 0..ts.len() {
        for t in 0..t_len {
            if ts.value(w)[t] == 1.0 && weights[w][t] < NEGATIVE_TOL {
                forbidden.push(ForbiddenComparison { treatment: w, period: t, weight: weights[w][t] });
            }
        }
    }
    Ok(TwfeWeights { weights, g, forbidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DesignKind;

    #[test]
    fn two_period_g_pattern() {
        let ts = TreatmentSet::from_values(vec![vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = Design::constant(&[0.5, 0.5], 3, DesignKind::Implicit).unwrap();
        let tw = twfe_weights(&d, &ts).unwrap();
        assert_eq!(tw.g, vec![vec![0.25, -0.25], vec![-0.25, 0.25]]);
        for t in 0..2 {
            assert!((tw.weights[0][t] + tw.weights[1][t]).abs() < 1e-15);
        }
        assert_eq!(tw.weights[1][1], 1.0);
        assert!(tw.forbidden.is_empty());
    }

    #[test]
    fn non_constant_design_rejected() {
        let ts = TreatmentSet::from_values(vec![vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = Design::new(vec![vec![0.5, 0.5], vec![0.4, 0.6]], DesignKind::Implicit).unwrap();
        assert_eq!(twfe_weights(&d, &ts), Err(Error::NonConstantDesign));
    }
}
