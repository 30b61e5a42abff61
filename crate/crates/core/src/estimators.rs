//! IPW estimators that hold a design fixed: user-weighted IPW, the trimmed
//! ATE and design patching.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{bin_design, Bin, BinPolicy, BinRegion};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Design, DesignKind, Population};

/// Smallest π_i(W_i) allowed for a unit with nonzero weight.
pub const DIVISION_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwEstimate {
    pub estimate: Vec<f64>,
    /// (Σ|a_i|)² / Σa_i² per contrast, a_i the realized IPW weight.
    pub effective_n: Vec<f64>,
    pub n: usize,
}

fn check_weights(weights: &[Vec<DMatrix<f64>>], pop: &Population, levels: usize) -> Result<(usize, usize)> {
    if weights.len() != pop.n() {
        return Err(Error::Dimension("one weight list per unit required".into()));
    }
    let first = weights.first().and_then(|w| w.first()).ok_or_else(|| Error::Invalid("empty weights".into()))?;
    let (k, t) = first.shape();
    if t != pop.periods() {
        return Err(Error::Dimension("weight columns must match the periods".into()));
    }
    for w in weights {
        if w.len() != levels || w.iter().any(|m| m.shape() != (k, t)) {
            return Err(Error::Dimension("weights must be k×T for every treatment".into()));
        }
    }
    Ok((k, t))
}

/// Per-unit realized IPW terms a_i = ω_i(W_i)/π_i(W_i) (k×T each).
fn ipw_terms(design: &Design, pop: &Population, weights: &[Vec<DMatrix<f64>>], eps: f64) -> Result<Vec<DMatrix<f64>>> {
    if design.n() != pop.n() {
        return Err(Error::Dimension("design does not match the population".into()));
    }
    check_weights(weights, pop, design.levels())?;
    let w = pop.require_treatment()?;
    let mut bad = Vec::new();
    let mut terms = Vec::with_capacity(w.len());
    for (i, &wi) in w.iter().enumerate() {
        let om = &weights[i][wi];
        let p = design.prob(i, wi);
        if om.iter().any(|&v| v != 0.0) {
            if p <= eps {
                bad.push(i);
                terms.push(om.clone());
                continue;
            }
            terms.push(om / p);
        } else {
            terms.push(om.clone());
        }
    }
    if !bad.is_empty() {
        return Err(Error::DivisionGuard { units: bad });
    }
    Ok(terms)
}

fn effective_n(terms: &[DMatrix<f64>], pop: &Population) -> Vec<f64> {
    let k = terms.first().map_or(0, |m| m.nrows());
    (0..k)
        .map(|j| {
            let a: Vec<f64> = terms
                .iter()
                .enumerate()
                .map(|(i, m)| (0..m.ncols()).filter(|&t| pop.is_observed(i, t)).map(|t| m[(j, t)]).sum())
                .collect();
            let s1: f64 = a.iter().map(|v| v.abs()).sum();
            let s2: f64 = a.iter().map(|v| v * v).sum();
            if s2 > 0.0 {
                s1 * s1 / s2
            } else {
                0.0
            }
        })
        .collect()
}

/// τ̂(π; ω) = (1/n) Σ_i Σ_w 1{W_i=w}/π_i(w) ω_i(w) y_i(w). `weights[i][w]` is k×T.
pub fn ipw_estimate(design: &Design, pop: &Population, weights: &[Vec<DMatrix<f64>>], eps: f64) -> Result<IpwEstimate> {
    let terms = ipw_terms(design, pop, weights, eps)?;
    Ok(IpwEstimate {
        estimate: crate::weights::weighted_outcome_sum(&terms, pop)?,
        effective_n: effective_n(&terms, pop),
        n: pop.n(),
    })
}

/// ω_i(1) = 1, ω_i(0) = −1 for a binary cross-section; zero for `skip` units.
pub fn ate_weights(n: usize, skip: &[usize]) -> Vec<Vec<DMatrix<f64>>> {
    (0..n)
        .map(|i| {
            let s = if skip.contains(&i) { 0.0 } else { 1.0 };
            vec![DMatrix::from_element(1, 1, -s), DMatrix::from_element(1, 1, s)]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimmedEstimate {
    pub estimate: f64,
    pub eps: f64,
    pub kept: usize,
    pub trimmed: Vec<usize>,
    pub effective_n: f64,
}

fn require_binary_cross_section(design: &Design, pop: &Population) -> Result<()> {
    if design.levels() != 2 || pop.periods() != 1 {
        return Err(Error::Invalid("needs a binary treatment on a cross-section".into()));
    }
    if design.n() != pop.n() {
        return Err(Error::Dimension("design does not match the population".into()));
    }
    Ok(())
}

/// IPW contrast with ω_i ∝ 1(ε < π_i < 1−ε), normalized so (1/n)Σω_i = 1.
pub fn trimmed_ate(design: &Design, pop: &Population, eps: f64) -> Result<TrimmedEstimate> {
    require_binary_cross_section(design, pop)?;
    let pi = design.treated();
    let trimmed: Vec<usize> = (0..pi.len()).filter(|&i| !(pi[i] > eps && pi[i] < 1.0 - eps)).collect();
    let kept = pi.len() - trimmed.len();
    if kept == 0 {
        return Err(Error::AllTrimmed);
    }
    let scale = pi.len() as f64 / kept as f64;
    let mut weights = ate_weights(pi.len(), &trimmed);
    for w in weights.iter_mut() {
        for m in w.iter_mut() {
            *m *= scale;
        }
    }
    let est = ipw_estimate(design, pop, &weights, 0.0)?;
    Ok(TrimmedEstimate { estimate: est.estimate[0], eps, kept, trimmed, effective_n: est.effective_n[0] })
}

/// Thresholds for recursive bin splitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecursiveSplit {
    pub t_threshold: f64,
    pub min_treated: usize,
    pub min_control: usize,
    pub min_total: usize,
}

impl Default for RecursiveSplit {
    fn default() -> Self {
        RecursiveSplit { t_threshold: 1.96, min_treated: 3, min_control: 3, min_total: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPolicy {
    /// Equal-width bins over the in-bounds range.
    FixedBins(usize),
    Quantile(usize),
    /// Split at the median while treated and control π̂ differ.
    Recursive(RecursiveSplit),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchBin {
    #[serde(flatten)]
    pub bin: Bin,
    pub treated: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchedDesign {
    pub base: Design,
    pub bins: Vec<PatchBin>,
    pub patched_probs: Vec<f64>,
    /// Units whose bin has treated share 0 or 1.
    pub excluded: Vec<usize>,
    pub notes: Vec<String>,
}

impl PatchedDesign {
    fn from_bins(base: Design, bins: Vec<Bin>, treatment: &[usize], notes: Vec<String>) -> Self {
        let n = base.n();
        let mut patched = vec![0.0; n];
        let mut excluded = Vec::new();
        let mut out = Vec::with_capacity(bins.len());
        for bin in bins {
            let treated = bin.members.iter().filter(|&&i| treatment[i] == 1).count();
            let share = treated as f64 / bin.members.len() as f64;
            for &i in &bin.members {
                patched[i] = share;
                if share == 0.0 || share == 1.0 {
                    excluded.push(i);
                }
            }
            out.push(PatchBin { bin, treated, share });
        }
        excluded.sort_unstable();
        PatchedDesign { base, bins: out, patched_probs: patched, excluded, notes }
    }

    pub fn design(&self) -> Design {
        Design::binary(&self.patched_probs, DesignKind::Patched).expect("shares lie in [0, 1]")
    }

    /// Bin index of each unit.
    pub fn assignment(&self) -> Vec<usize> {
        let mut a = vec![0; self.base.n()];
        for (b, bin) in self.bins.iter().enumerate() {
            for &i in &bin.bin.members {
                a[i] = b;
            }
        }
        a
    }

    /// Patches the patched design again over the same bins.
    pub fn repatch(&self, pop: &Population) -> Result<PatchedDesign> {
        let bins = self
            .bins
            .iter()
            .map(|b| {
                let v = self.patched_probs[b.bin.members[0]];
                Bin { region: b.bin.region, lower: v, upper: v, members: b.bin.members.clone() }
            })
            .collect();
        Ok(Self::from_bins(self.design(), bins, pop.require_treatment()?, self.notes.clone()))
    }
}

fn t_statistic(members: &[usize], pi: &[f64], w: &[usize]) -> Option<f64> {
    let (t, c): (Vec<f64>, Vec<f64>) = {
        let mut t = Vec::new();
        let mut c = Vec::new();
        for &i in members {
            if w[i] == 1 {
                t.push(pi[i])
            } else {
                c.push(pi[i])
            }
        }
        (t, c)
    };
    if t.len() < 2 || c.len() < 2 {
        return None;
    }
    let mv = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let (m1, v1) = mv(&t);
    let (m0, v0) = mv(&c);
    let se = libm::sqrt(v1 / t.len() as f64 + v0 / c.len() as f64);
    if m1 == m0 {
        return Some(0.0);
    }
    Some((m1 - m0) / se)
}

fn split_recursive(bin: Bin, pi: &[f64], w: &[usize], rule: &RecursiveSplit, out: &mut Vec<Bin>) {
    let enough = |m: &[usize]| {
        let treated = m.iter().filter(|&&i| w[i] == 1).count();
        treated >= rule.min_treated && m.len() - treated >= rule.min_control && m.len() >= rule.min_total
    };
    let stat = t_statistic(&bin.members, pi, w);
    if stat.is_some_and(|t| t.abs() > rule.t_threshold) {
        let mut vals: Vec<f64> = bin.members.iter().map(|&i| pi[i]).collect();
        let med = linalg::median(&mut vals);
        let (left, right): (Vec<usize>, Vec<usize>) = bin.members.iter().partition(|&&i| pi[i] < med);
        if enough(&left) && enough(&right) {
            let mk = |m: Vec<usize>| {
                let lo = m.iter().map(|&i| pi[i]).fold(f64::INFINITY, f64::min);
                let hi = m.iter().map(|&i| pi[i]).fold(f64::NEG_INFINITY, f64::max);
                Bin { region: bin.region, lower: lo, upper: hi, members: m }
            };
            split_recursive(mk(left), pi, w, rule, out);
            split_recursive(mk(right), pi, w, rule, out);
            return;
        }
    }
    out.push(bin);
}

/// Bins π̂ and replaces each value by its bin's empirical treated share.
pub fn patch_design(design: &Design, pop: &Population, policy: PatchPolicy) -> Result<PatchedDesign> {
    require_binary_cross_section(design, pop)?;
    let w = pop.require_treatment()?;
    let pi = design.treated();
    let (bins, notes) = match policy {
        PatchPolicy::FixedBins(k) => bin_design(&pi, BinPolicy::EqualWidth(k)),
        PatchPolicy::Quantile(k) => bin_design(&pi, BinPolicy::Quantile(k)),
        PatchPolicy::Recursive(rule) => {
            let (start, notes) = bin_design(&pi, BinPolicy::Quantile(1));
            let mut out = Vec::new();
            for b in start {
                if b.region == BinRegion::Interior {
                    split_recursive(b, &pi, w, &rule, &mut out);
                } else {
                    out.push(b);
                }
            }
            (out, notes)
        }
    };
    Ok(PatchedDesign::from_bins(design.clone(), bins, w, notes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchedOptions {
    /// Normalize each arm's inverse weights to average one.
    pub stabilized: bool,
}

/// IPW with the patched probabilities. Weights must vanish on excluded units.
pub fn patched_estimate(
    pd: &PatchedDesign,
    pop: &Population,
    weights: &[Vec<DMatrix<f64>>],
    options: PatchedOptions,
) -> Result<IpwEstimate> {
    let offending: Vec<usize> = pd
        .excluded
        .iter()
        .copied()
        .filter(|&i| weights.get(i).is_some_and(|w| w.iter().any(|m| m.iter().any(|&v| v != 0.0))))
        .collect();
    if !offending.is_empty() {
        return Err(Error::ExcludedWeight { units: offending });
    }
    let design = pd.design();
    let mut terms = ipw_terms(&design, pop, weights, DIVISION_GUARD)?;
    if options.stabilized {
        let w = pop.require_treatment()?;
        let n = pop.n() as f64;
        let mut mass = vec![0.0; design.levels()];
        for (i, &wi) in w.iter().enumerate() {
            if !pd.excluded.contains(&i) {
                mass[wi] += 1.0 / design.prob(i, wi) / n;
            }
        }
        for (i, &wi) in w.iter().enumerate() {
            if mass[wi] > 0.0 {
                terms[i] /= mass[wi];
            }
        }
    }
    Ok(IpwEstimate {
        estimate: crate::weights::weighted_outcome_sum(&terms, pop)?,
        effective_n: effective_n(&terms, pop),
        n: pop.n(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pop(w: Vec<usize>, y: &[f64]) -> Population {
        let n = w.len();
        Population::cross_section(vec!["x".into()], (0..n).map(|i| vec![i as f64]).collect())
            .with_treatment(w)
            .with_scalar_outcomes(y)
    }

    #[test]
    fn single_unit_returns_outcome() {
        let p = pop(vec![1], &[3.5]);
        let d = Design::binary(&[1.0], DesignKind::True).unwrap();
        let est = ipw_estimate(&d, &p, &ate_weights(1, &[]), DIVISION_GUARD).unwrap();
        assert_eq!(est.estimate, vec![3.5]);
    }

    #[test]
    fn guard_lists_units() {
        let p = pop(vec![1, 0], &[1.0, 2.0]);
        let d = Design::binary(&[0.0, 0.5], DesignKind::True).unwrap();
        match ipw_estimate(&d, &p, &ate_weights(2, &[]), DIVISION_GUARD) {
            Err(Error::DivisionGuard { units }) => assert_eq!(units, vec![0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_trim_matches_plain_ipw() {
        let p = pop(vec![1, 0, 1, 0], &[2.0, 1.0, 4.0, 0.5]);
        let d = Design::binary(&[0.3, 0.6, 0.5, 0.4], DesignKind::True).unwrap();
        let plain = ipw_estimate(&d, &p, &ate_weights(4, &[]), DIVISION_GUARD).unwrap();
        let t = trimmed_ate(&d, &p, 0.0).unwrap();
        assert!((t.estimate - plain.estimate[0]).abs() < 1e-14);
        assert!(t.trimmed.is_empty());
        let manual = (2.0 / 0.3 - 1.0 / 0.4 + 4.0 / 0.5 - 0.5 / 0.6) / 4.0;
        assert!((plain.estimate[0] - manual).abs() < 1e-14);
    }

    #[test]
    fn all_trimmed_is_an_error() {
        let p = pop(vec![1, 0], &[1.0, 2.0]);
        let d = Design::binary(&[0.01, 0.99], DesignKind::True).unwrap();
        assert!(matches!(trimmed_ate(&d, &p, 0.02), Err(Error::AllTrimmed)));
    }

    #[test]
    fn patched_strata_give_treated_shares() {
        let w = vec![1, 0, 0, 0, 1, 1, 1, 0];
        let p = pop(w, &[0.0; 8]);
        let d = Design::binary(&[0.1, 0.15, 0.2, 0.12, 0.8, 0.9, 0.85, 0.95], DesignKind::Estimated).unwrap();
        let pd = patch_design(&d, &p, PatchPolicy::FixedBins(2)).unwrap();
        assert_eq!(pd.patched_probs[..4], [0.25; 4]);
        assert_eq!(pd.patched_probs[4..], [0.75; 4]);
        assert!(pd.excluded.is_empty());
        let again = pd.repatch(&p).unwrap();
        assert_eq!(again.patched_probs, pd.patched_probs);
        assert_eq!(again.assignment(), pd.assignment());
    }

    #[test]
    fn excluded_units_must_carry_zero_weight() {
        let p = pop(vec![1, 1, 0, 1], &[1.0; 4]);
        let d = Design::binary(&[0.1, 0.1, 0.9, 0.9], DesignKind::Estimated).unwrap();
        let pd = patch_design(&d, &p, PatchPolicy::FixedBins(2)).unwrap();
        assert_eq!(pd.excluded, vec![0, 1]);
        let err = patched_estimate(&pd, &p, &ate_weights(4, &[]), PatchedOptions::default());
        assert!(matches!(err, Err(Error::ExcludedWeight { .. })));
        assert!(patched_estimate(&pd, &p, &ate_weights(4, &pd.excluded), PatchedOptions::default()).is_ok());
    }

    #[test]
    fn identical_design_values_form_one_bin() {
        let p = pop((0..20).map(|i| i % 2).collect(), &[0.0; 20]);
        let d = Design::binary(&[0.4; 20], DesignKind::Estimated).unwrap();
        let pd = patch_design(&d, &p, PatchPolicy::Recursive(RecursiveSplit::default())).unwrap();
        assert_eq!(pd.bins.len(), 1);
    }

    #[test]
    fn recursive_split_separates_informative_bins() {
        // Treated units sit at high π̂ within the bin; a split should follow.
        let n = 80;
        let pi: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * i as f64 / n as f64).collect();
        let w: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2) ^ usize::from(i % 10 == 0)).collect();
        let p = pop(w, &vec![0.0; n]);
        let d = Design::binary(&pi, DesignKind::Estimated).unwrap();
        let pd = patch_design(&d, &p, PatchPolicy::Recursive(RecursiveSplit::default())).unwrap();
        assert!(pd.bins.len() >= 2);
        let covered: usize = pd.bins.iter().map(|b| b.bin.members.len()).sum();
        assert_eq!(covered, n);
    }
}
