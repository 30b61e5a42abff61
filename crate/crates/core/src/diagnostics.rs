//! Design checklists: bounds, calibration, predictiveness, balance, linearity
//! and outcome profiles.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Design, Population};

/// Units with π within this distance of 0 or 1 are skipped in balance sums.
pub const BALANCE_EDGE: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinPolicy {
    Quantile(usize),
    EqualWidth(usize),
}

impl Default for BinPolicy {
    fn default() -> Self {
        BinPolicy::Quantile(DEFAULT_BINS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinRegion {
    Below,
    Interior,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub region: BinRegion,
    pub lower: f64,
    pub upper: f64,
    pub members: Vec<usize>,
}

impl Bin {
    pub fn contains(&self, v: f64) -> bool {
        match self.region {
            BinRegion::Below => v < 0.0,
            BinRegion::Above => v > 1.0,
            BinRegion::Interior => (0.0..=1.0).contains(&v) && v >= self.lower && v <= self.upper,
        }
    }
}

/// Splits units by design value. Values below 0 and above 1 get their own
/// bins; the rest follow `policy`. Ties go to the same bin.
pub fn bin_design(values: &[f64], policy: BinPolicy) -> (Vec<Bin>, Vec<String>) {
    let mut notes = Vec::new();
    let mut below: Vec<usize> = Vec::new();
    let mut above: Vec<usize> = Vec::new();
    let mut inside: Vec<usize> = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        if v < 0.0 {
            below.push(i);
        } else if v > 1.0 {
            above.push(i);
        } else {
            inside.push(i);
        }
    }
    inside.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let range = |m: &[usize]| -> (f64, f64) {
        m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(values[i]), hi.max(values[i])))
    };
    let mut bins = Vec::new();
    if !below.is_empty() {
        let (lo, hi) = range(&below);
        bins.push(Bin { region: BinRegion::Below, lower: lo, upper: hi, members: below });
    }
    let mut interior: Vec<Bin> = Vec::new();
    if !inside.is_empty() {
        match policy {
            BinPolicy::Quantile(k) => {
                let k = k.max(1);
                let m = inside.len();
                let mut start = 0;
                for j in 1..=k {
                    let mut end = (j * m / k).max(start);
                    if j == k {
                        end = m;
                    }
                    while end < m && end > start && values[inside[end]] == values[inside[end - 1]] {
                        end += 1;
                    }
                    if end > start {
                        let members = inside[start..end].to_vec();
                        let (lo, hi) = range(&members);
                        interior.push(Bin { region: BinRegion::Interior, lower: lo, upper: hi, members });
                        start = end;
                    }
                }
                if interior.len() < k {
                    notes.push(format!("{} quantile bins requested, {} formed", k, interior.len()));
                }
            }
            BinPolicy::EqualWidth(k) => {
                let k = k.max(1);
                let (lo, hi) = range(&inside);
                let width = (hi - lo) / k as f64;
                let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
                for &i in &inside {
                    let b = if width > 0.0 { (((values[i] - lo) / width) as usize).min(k - 1) } else { 0 };
                    groups[b].push(i);
                }
                let mut empty = 0;
                let mut pending_lower: Option<f64> = None;
                for (b, members) in groups.into_iter().enumerate() {
                    let edge_lo = lo + width * b as f64;
                    let edge_hi = if b + 1 == k { hi } else { lo + width * (b + 1) as f64 };
                    if members.is_empty() {
                        empty += 1;
                        pending_lower.get_or_insert(edge_lo);
                        if b + 1 == k {
                            if let Some(last) = interior.last_mut() {
                                last.upper = edge_hi;
                            }
                        }
                        continue;
                    }
                    let lower = pending_lower.take().unwrap_or(edge_lo);
                    interior.push(Bin { region: BinRegion::Interior, lower, upper: edge_hi, members });
                }
                if empty > 0 {
                    notes.push(format!("{empty} empty bins merged into neighbors"));
                }
            }
        }
    }
    bins.extend(interior);
    if !above.is_empty() {
        let (lo, hi) = range(&above);
        bins.push(Bin { region: BinRegion::Above, lower: lo, upper: hi, members: above });
    }
    (bins, notes)
}

/// f(x) = x_c^power for balance checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceFunction {
    pub column: String,
    #[serde(default = "one")]
    pub power: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChecklistOptions {
    pub bins: BinPolicy,
    pub balance: Vec<BalanceFunction>,
    /// Factor columns absorbed before the within R².
    pub absorb: Vec<String>,
    /// Highest power of π̂ in the linearity test.
    pub reset_power: usize,
}

impl Default for ChecklistOptions {
    fn default() -> Self {
        ChecklistOptions { bins: BinPolicy::default(), balance: Vec::new(), absorb: Vec::new(), reset_power: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub region: BinRegion,
    pub lower: f64,
    pub upper: f64,
    pub mean_design: f64,
    pub treated_share: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictiveness {
    pub r2: f64,
    pub within_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceStat {
    pub name: String,
    pub value: f64,
    pub sd: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub name: String,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityTest {
    pub powers: usize,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n: usize,
    /// Share of units with some π̂_i(w) outside [0, 1].
    pub oob_share: f64,
    pub oob_below: usize,
    pub oob_above: usize,
    /// Mean and variance of π̂_i(w) for each nonzero treatment w.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub calibration: Vec<CalibrationBin>,
    pub predictiveness: Option<Predictiveness>,
    pub balance: Vec<BalanceStat>,
    pub correlations: Vec<FeatureCorrelation>,
    pub linearity: Option<LinearityTest>,
    pub notes: Vec<String>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Demeans `v` within each factor, alternating until stable.
fn absorb(v: &[f64], factors: &[Vec<usize>]) -> Vec<f64> {
    let mut out = v.to_vec();
    for _ in 0..1000 {
        let mut change: f64 = 0.0;
        for f in factors {
            let groups = f.iter().max().map_or(0, |m| m + 1);
            let mut sum = vec![0.0; groups];
            let mut cnt = vec![0.0; groups];
            for (i, &g) in f.iter().enumerate() {
                sum[g] += out[i];
                cnt[g] += 1.0;
            }
            for (i, &g) in f.iter().enumerate() {
                let m = sum[g] / cnt[g];
                change = change.max(m.abs());
                out[i] -= m;
            }
        }
        if change < 1e-13 || factors.len() <= 1 {
            break;
        }
    }
    out
}

fn factor_codes(pop: &Population, col: usize) -> Vec<usize> {
    let mut distinct: Vec<f64> = (0..pop.n()).map(|i| pop.x(i)[col]).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    (0..pop.n()).map(|i| distinct.iter().position(|&v| v == pop.x(i)[col]).expect("present")).collect()
}

/// Wald test that the powers 2..=p of π̂ add nothing to W ~ 1 + π̂, with
/// heteroskedasticity-robust (HC0) covariance.
pub fn linearity_test(pi: &[f64], w: &[f64], powers: usize) -> Result<LinearityTest> {
    if powers < 2 {
        return Err(Error::Invalid("linearity test needs at least power 2".into()));
    }
    let n = pi.len();
    let k = powers + 1;
    let x = DMatrix::from_fn(n, k, |i, j| libm::pow(pi[i], j as f64));
    let y = DVector::from_column_slice(w);
    let beta =
        linalg::ols(&x, &y).map_err(|_| Error::Singular("design values too few for the linearity test".into()))?;
    let resid = &y - &x * &beta;
    let xtx_inv = linalg::sym_inverse(&(x.transpose() * &x), 1e-14)?;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = x.row(i).transpose();
        meat += &row * row.transpose() * (resid[i] * resid[i]);
    }
    let cov = &xtx_inv * meat * &xtx_inv;
    let q = powers - 1;
    let b = beta.rows(2, q).clone_owned();
    let v = cov.view((2, 2), (q, q)).clone_owned();
    let v_inv = v.clone().try_inverse().ok_or_else(|| Error::Singular("robust covariance".into()))?;
    let statistic = (b.transpose() * v_inv * &b)[(0, 0)];
    Ok(LinearityTest { powers, statistic, df: q, p_value: linalg::chi2_sf(statistic, q) })
}

pub fn run_design_checklist(
    design: &Design,
    pop: &Population,
    options: &ChecklistOptions,
) -> Result<DiagnosticsReport> {
    let n = pop.n();
    if design.n() != n {
        return Err(Error::Dimension("design does not match the population".into()));
    }
    let levels = design.levels();
    let mut notes = Vec::new();
    let mut below = 0;
    let mut above = 0;
    let mut oob_units = 0;
    for row in design.probs() {
        let lo = row.iter().any(|&p| p < 0.0);
        let hi = row.iter().any(|&p| p > 1.0);
        below += usize::from(lo);
        above += usize::from(hi);
        oob_units += usize::from(lo || hi);
    }
    let mut mean = Vec::new();
    let mut variance = Vec::new();
    for w in 1..levels {
        let col: Vec<f64> = design.probs().iter().map(|r| r[w]).collect();
        let (m, v) = mean_var(&col);
        mean.push(m);
        variance.push(v);
    }
    let mut report = DiagnosticsReport {
        n,
        oob_share: oob_units as f64 / n as f64,
        oob_below: below,
        oob_above: above,
        mean,
        variance,
        calibration: Vec::new(),
        predictiveness: None,
        balance: Vec::new(),
        correlations: Vec::new(),
        linearity: None,
        notes: Vec::new(),
    };
    if levels != 2 {
        notes.push("calibration, balance and predictiveness need a binary treatment".into());
        report.notes = notes;
        return Ok(report);
    }
    let pi = design.treated();
    for c in 0..pop.d() {
        let x: Vec<f64> = (0..n).map(|i| pop.x(i)[c]).collect();
        report.correlations.push(FeatureCorrelation {
            name: pop.covariate_names[c].clone(),
            correlation: linalg::correlation(&pi, &x),
        });
    }
    let Some(treatment) = pop.treatment.as_ref() else {
        notes.push("no observed treatment: calibration, balance and predictiveness skipped".into());
        report.notes = notes;
        return Ok(report);
    };
    let w: Vec<f64> = treatment.iter().map(|&t| t as f64).collect();

    let (bins, bin_notes) = bin_design(&pi, options.bins);
    notes.extend(bin_notes);
    for b in &bins {
        let c = b.members.len() as f64;
        report.calibration.push(CalibrationBin {
            region: b.region,
            lower: b.lower,
            upper: b.upper,
            mean_design: b.members.iter().map(|&i| pi[i]).sum::<f64>() / c,
            treated_share: b.members.iter().map(|&i| w[i]).sum::<f64>() / c,
            count: b.members.len(),
        });
    }

    let r = linalg::correlation(&pi, &w);
    let within_r2 = if options.absorb.is_empty() {
        None
    } else {
        let factors: Vec<Vec<usize>> =
            options.absorb.iter().map(|c| pop.column(c).map(|k| factor_codes(pop, k))).collect::<Result<_>>()?;
        let a = absorb(&pi, &factors);
        let b = absorb(&w, &factors);
        let rw = linalg::correlation(&a, &b);
        Some(rw * rw)
    };
    report.predictiveness = Some(Predictiveness { r2: r * r, within_r2 });

    for f in &options.balance {
        let col = pop.column(&f.column)?;
        let mut value = 0.0;
        let mut var = 0.0;
        let mut skipped = 0;
        for i in 0..n {
            let p = pi[i];
            if p <= BALANCE_EDGE || p >= 1.0 - BALANCE_EDGE {
                skipped += 1;
                continue;
            }
            let fx = libm::pow(pop.x(i)[col], f64::from(f.power));
            value += (w[i] / p - (1.0 - w[i]) / (1.0 - p)) * fx;
            var += fx * fx / (p * (1.0 - p));
        }
        let name = if f.power == 1 { f.column.clone() } else { format!("{}^{}", f.column, f.power) };
        report.balance.push(BalanceStat { name, value: value / n as f64, sd: libm::sqrt(var) / n as f64, skipped });
    }

    match linearity_test(&pi, &w, options.reset_power) {
        Ok(t) => report.linearity = Some(t),
        Err(e) => notes.push(format!("linearity test skipped: {e}")),
    }
    report.notes = notes;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub region: BinRegion,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub treated: usize,
    pub control: usize,
    /// `None` when no unit of that arm falls in the bin.
    pub mean_treated: Option<f64>,
    pub mean_control: Option<f64>,
    /// (1/n) Σ_{i∈bin} ω_i.
    pub omega_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProfile {
    pub bins: Vec<ProfileBin>,
    pub notes: Vec<String>,
}

/// Mean outcome by arm and estimand weight mass per design-quantile bin.
pub fn outcome_by_design_profile(
    design: &Design,
    pop: &Population,
    bins: usize,
    omega: &[f64],
) -> Result<OutcomeProfile> {
    let n = pop.n();
    if design.levels() != 2 || pop.periods() != 1 {
        return Err(Error::Invalid("profiles need a binary cross-section".into()));
    }
    if design.n() != n || omega.len() != n {
        return Err(Error::Dimension("design, weights and population differ in size".into()));
    }
    let treatment = pop.require_treatment()?;
    pop.require_outcomes()?;
    let pi = design.treated();
    let (groups, notes) = bin_design(&pi, BinPolicy::Quantile(bins));
    let mut out = Vec::with_capacity(groups.len());
    for b in groups {
        let (mut st, mut sc, mut nt, mut nc, mut mass) = (0.0, 0.0, 0usize, 0usize, 0.0);
        for &i in &b.members {
            mass += omega[i];
            let y = pop.outcome(i, 0).ok_or_else(|| Error::Invalid(format!("unit {i} has no outcome")))?;
            if treatment[i] == 1 {
                st += y;
                nt += 1;
            } else {
                sc += y;
                nc += 1;
            }
        }
        out.push(ProfileBin {
            region: b.region,
            lower: b.lower,
            upper: b.upper,
            count: b.members.len(),
            treated: nt,
            control: nc,
            mean_treated: (nt > 0).then(|| st / nt as f64),
            mean_control: (nc > 0).then(|| sc / nc as f64),
            omega_mass: mass / n as f64,
        });
    }
    Ok(OutcomeProfile { bins: out, notes })
}
