//! Ground truth: direct estimand evaluation, brute-force level-shift tests,
//! exact rational arithmetic, assignment simulation and Monte Carlo
//! consistency curves.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{population_gram, sample_gram};
use crate::linalg;
use crate::model::{
    build_template, Design, DesignKind, Population, PotentialOutcomeTable, RegressionSpec, TemplateOptions,
    TreatmentSet,
};
use crate::solver::{binary_closed_form, solve_implicit_design, SolverTolerances};
use crate::weights::{identification_strength, potential_weights};

/// Reproducible generator for replication `stream` under `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn lambda_ginv(spec: &RegressionSpec, pop: &Population, design: &Design) -> Result<DMatrix<f64>> {
    let g = population_gram(spec, pop, design)?;
    Ok(spec.contrast() * g.inverse()?)
}

fn tau_with(
    spec: &RegressionSpec,
    pop: &Population,
    design: &Design,
    lg: &DMatrix<f64>,
    y: &dyn Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let kk = spec.n_regressors();
    let mut b = vec![0.0; kk];
    for i in 0..spec.n_units() {
        for w in 0..spec.levels() {
            let p = design.prob(i, w);
            if p == 0.0 {
                continue;
            }
            let z = spec.z(i, w);
            for t in 0..spec.periods() {
                if !pop.is_observed(i, t) {
                    continue;
                }
                let v = p * y(i, w, t);
                for (a, acc) in b.iter_mut().enumerate() {
                    *acc += z[(t, a)] * v;
                }
            }
        }
    }
    let n = spec.n_units() as f64;
    (0..lg.nrows()).map(|j| (0..kk).map(|a| lg[(j, a)] * b[a]).sum::<f64>() / n).collect()
}

/// τ = ΛG(π)⁻¹ (1/n) Σ_i Σ_{t∈𝒯_i} Σ_w π_i(w) z_t(x_i,w)' y_it(w).
pub fn evaluate_estimand(
    spec: &RegressionSpec,
    pop: &Population,
    table: &PotentialOutcomeTable,
    design: &Design,
) -> Result<Vec<f64>> {
    check_table(spec, table)?;
    let lg = lambda_ginv(spec, pop, design)?;
    Ok(tau_with(spec, pop, design, &lg, &|i, w, t| table.get(i, w, t)))
}

fn check_table(spec: &RegressionSpec, table: &PotentialOutcomeTable) -> Result<()> {
    let ok = table.y.len() == spec.n_units()
        && table.y.iter().all(|u| u.len() == spec.levels() && u.iter().all(|r| r.len() == spec.periods()));
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension("potential outcome table must be n × levels × T".into()))
    }
}

/// Largest shift magnitude used by random level shifts.
pub const SHIFT_BOUND: f64 = 10.0;
pub const DEFAULT_SHIFTS: usize = 200;
/// Unit-period counts up to this size also get the exact basis sweep.
pub const BASIS_SWEEP_LIMIT: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelIrrelevanceReport {
    /// max |τ(y + c) − τ(y)|∞ over all shifts tried.
    pub max_deviation: f64,
    pub random_shifts: usize,
    pub basis_swept: bool,
    /// (unit, period) of the worst basis shift.
    pub worst_cell: Option<(usize, usize)>,
}

impl LevelIrrelevanceReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_deviation < threshold
    }
}

/// Shifts every y_it(w) by a common c_it and reports how far τ moves.
pub fn level_irrelevance_test(
    spec: &RegressionSpec,
    pop: &Population,
    table: &PotentialOutcomeTable,
    design: &Design,
    shifts: usize,
    seed: u64,
) -> Result<LevelIrrelevanceReport> {
    check_table(spec, table)?;
    let lg = lambda_ginv(spec, pop, design)?;
    let base = tau_with(spec, pop, design, &lg, &|i, w, t| table.get(i, w, t));
    let dev = |c: &dyn Fn(usize, usize) -> f64| {
        let shifted = tau_with(spec, pop, design, &lg, &|i, w, t| table.get(i, w, t) + c(i, t));
        shifted.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (n, periods) = (spec.n_units(), spec.periods());
    let mut rng = rng_stream(seed, 0);
    let mut max_deviation: f64 = 0.0;
    for _ in 0..shifts {
        let c: Vec<f64> = (0..n * periods).map(|_| rng.random_range(-SHIFT_BOUND..=SHIFT_BOUND)).collect();
        max_deviation = max_deviation.max(dev(&|i, t| c[i * periods + t]));
    }
    let basis_swept = n * periods <= BASIS_SWEEP_LIMIT;
    let mut worst_cell = None;
    if basis_swept {
        let mut worst = -1.0;
        for i in 0..n {
            for t in 0..periods {
                let d = dev(&|a, b| if a == i && b == t { 1.0 } else { 0.0 });
                if d > worst {
                    worst = d;
                    worst_cell = Some((i, t));
                }
                max_deviation = max_deviation.max(d);
            }
        }
    }
    Ok(LevelIrrelevanceReport { max_deviation, random_shifts: shifts, basis_swept, worst_cell })
}

/// Exact rational versions of the Gram matrix, potential weights, implicit
/// estimand weights and level-irrelevance residuals.
pub mod exact {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Signed, ToPrimitive, Zero};

    pub type Q = BigRational;

    pub fn q(num: i64, den: i64) -> Q {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    /// Exact value of a finite float.
    pub fn from_f64(x: f64) -> Q {
        BigRational::from_float(x).expect("finite value")
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct QMatrix {
        rows: usize,
        cols: usize,
        data: Vec<Q>,
    }

    impl QMatrix {
        pub fn zeros(rows: usize, cols: usize) -> Self {
            QMatrix { rows, cols, data: vec![Q::zero(); rows * cols] }
        }

        pub fn from_f64(m: &DMatrix<f64>) -> Self {
            let mut out = Self::zeros(m.nrows(), m.ncols());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.data[r * m.ncols() + c] = from_f64(m[(r, c)]);
                }
            }
            out
        }

        pub fn shape(&self) -> (usize, usize) {
            (self.rows, self.cols)
        }

        pub fn get(&self, r: usize, c: usize) -> &Q {
            &self.data[r * self.cols + c]
        }

        fn at(&mut self, r: usize, c: usize) -> &mut Q {
            &mut self.data[r * self.cols + c]
        }

        pub fn to_f64(&self) -> DMatrix<f64> {
            DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).to_f64().unwrap_or(f64::NAN))
        }

        pub fn is_zero(&self) -> bool {
            self.data.iter().all(Zero::is_zero)
        }

        pub fn mul(&self, other: &QMatrix) -> QMatrix {
            assert_eq!(self.cols, other.rows, "inner dimensions differ");
            let mut out = Self::zeros(self.rows, other.cols);
            for r in 0..self.rows {
                for k in 0..self.cols {
                    let a = self.get(r, k);
                    if a.is_zero() {
                        continue;
                    }
                    for c in 0..other.cols {
                        let v = a * other.get(k, c);
                        *out.at(r, c) += v;
                    }
                }
            }
            out
        }

        pub fn scale(&self, s: &Q) -> QMatrix {
            QMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
        }

        pub fn add(&self, other: &QMatrix) -> QMatrix {
            assert_eq!(self.shape(), other.shape());
            QMatrix {
                rows: self.rows,
                cols: self.cols,
                data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            }
        }

        /// Gauss–Jordan inverse.
        pub fn inverse(&self) -> Result<QMatrix> {
            if self.rows != self.cols {
                return Err(Error::Dimension("inverse of a non-square matrix".into()));
            }
            let n = self.rows;
            let mut a = self.clone();
            let mut inv = Self::zeros(n, n);
            for i in 0..n {
                *inv.at(i, i) = Q::one();
            }
            for col in 0..n {
                let pivot = (col..n)
                    .find(|&r| !a.get(r, col).is_zero())
                    .ok_or_else(|| Error::Singular("exact Gram matrix".into()))?;
                for c in 0..n {
                    a.data.swap(col * n + c, pivot * n + c);
                    inv.data.swap(col * n + c, pivot * n + c);
                }
                let p = a.get(col, col).clone();
                for c in 0..n {
                    *a.at(col, c) /= &p;
                    *inv.at(col, c) /= &p;
                }
                for r in 0..n {
                    if r == col || a.get(r, col).is_zero() {
                        continue;
                    }
                    let f = a.get(r, col).clone();
                    for c in 0..n {
                        let da = &f * a.get(col, c);
                        let di = &f * inv.get(col, c);
                        *a.at(r, c) -= da;
                        *inv.at(r, c) -= di;
                    }
                }
            }
            Ok(inv)
        }
    }

    fn check_probs(spec: &RegressionSpec, probs: &[Vec<Q>]) -> Result<()> {
        if probs.len() != spec.n_units() || probs.iter().any(|r| r.len() != spec.levels()) {
            return Err(Error::Dimension("exact design must be n × levels".into()));
        }
        Ok(())
    }

    /// Exact design from small integer fractions.
    pub fn design(rows: &[Vec<(i64, i64)>]) -> Vec<Vec<Q>> {
        rows.iter().map(|r| r.iter().map(|&(a, b)| q(a, b)).collect()).collect()
    }

    pub fn to_design(probs: &[Vec<Q>], kind: DesignKind) -> Result<Design> {
        Design::new(probs.iter().map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()).collect(), kind)
    }

    fn regressors(spec: &RegressionSpec) -> Vec<Vec<QMatrix>> {
        spec.regressors().iter().map(|u| u.iter().map(QMatrix::from_f64).collect()).collect()
    }

    fn gram_from(z: &[Vec<QMatrix>], pop: &Population, probs: &[Vec<Q>]) -> QMatrix {
        let kk = z[0][0].cols;
        let t_len = z[0][0].rows;
        let mut g = QMatrix::zeros(kk, kk);
        for (i, unit) in z.iter().enumerate() {
            for (w, m) in unit.iter().enumerate() {
                let p = &probs[i][w];
                if p.is_zero() {
                    continue;
                }
                for t in 0..t_len {
                    if !pop.is_observed(i, t) {
                        continue;
                    }
                    for a in 0..kk {
                        let za = p * m.get(t, a);
                        if za.is_zero() {
                            continue;
                        }
                        for b in 0..kk {
                            let v = &za * m.get(t, b);
                            *g.at(a, b) += v;
                        }
                    }
                }
            }
        }
        g.scale(&q(1, z.len() as i64))
    }

    /// G(π) in exact arithmetic.
    pub fn gram(spec: &RegressionSpec, pop: &Population, probs: &[Vec<Q>]) -> Result<QMatrix> {
        check_probs(spec, probs)?;
        Ok(gram_from(&regressors(spec), pop, probs))
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct ExactWeights {
        pub gram: QMatrix,
        /// ρ_i(w) = ΛG⁻¹z(x_i,w)' with absent periods zeroed, [unit][treatment].
        pub rho: Vec<Vec<QMatrix>>,
    }

    /// Potential weights under the population Gram at `probs`.
    pub fn potential_weights(spec: &RegressionSpec, pop: &Population, probs: &[Vec<Q>]) -> Result<ExactWeights> {
        check_probs(spec, probs)?;
        let z = regressors(spec);
        let g = gram_from(&z, pop, probs);
        let lg = QMatrix::from_f64(spec.contrast()).mul(&g.inverse()?);
        let rho = z
            .iter()
            .enumerate()
            .map(|(i, unit)| {
                unit.iter()
                    .map(|m| {
                        let mut r = QMatrix::zeros(lg.rows, m.rows);
                        for t in 0..m.rows {
                            if !pop.is_observed(i, t) {
                                continue;
                            }
                            for j in 0..lg.rows {
                                let mut acc = Q::zero();
                                for a in 0..lg.cols {
                                    acc += lg.get(j, a) * m.get(t, a);
                                }
                                *r.at(j, t) = acc;
                            }
                        }
                        r
                    })
                    .collect()
            })
            .collect();
        Ok(ExactWeights { gram: g, rho })
    }

    /// ω_i(w) = π_i(w) ρ_i(w).
    pub fn omega(weights: &ExactWeights, probs: &[Vec<Q>]) -> Vec<Vec<QMatrix>> {
        weights.rho.iter().zip(probs).map(|(unit, p)| unit.iter().zip(p).map(|(r, pw)| r.scale(pw)).collect()).collect()
    }

    /// Σ_w π_i(w) ρ_i(w) per unit.
    pub fn level_irrelevance_residuals(weights: &ExactWeights, probs: &[Vec<Q>]) -> Vec<QMatrix> {
        omega(weights, probs)
            .into_iter()
            .map(|unit| unit.iter().skip(1).fold(unit[0].clone(), |acc, m| acc.add(m)))
            .collect()
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub enum ExactUnit {
        Unique(Vec<Q>),
        NoSolution,
        /// Solution set of the stated dimension.
        Underdetermined(usize),
        Unconstrained,
    }

    /// Solves Σ_w π(w)ρ_i(w) = 0, Σ_w π(w) = 1 by exact row reduction.
    pub fn solve_unit(rho: &[QMatrix]) -> ExactUnit {
        let levels = rho.len();
        if rho.iter().all(QMatrix::is_zero) {
            return ExactUnit::Unconstrained;
        }
        let (k, t) = rho[0].shape();
        let m = k * t + 1;
        let width = levels + 1;
        let mut a = QMatrix::zeros(m, width);
        for (w, r) in rho.iter().enumerate() {
            for j in 0..k {
                for s in 0..t {
                    *a.at(j * t + s, w) = r.get(j, s).clone();
                }
            }
            *a.at(m - 1, w) = Q::one();
        }
        *a.at(m - 1, levels) = Q::one();
        let mut rank = 0;
        let mut pivots = Vec::new();
        for col in 0..levels {
            let Some(p) = (rank..m).find(|&r| !a.get(r, col).is_zero()) else { continue };
            for c in 0..width {
                a.data.swap(rank * width + c, p * width + c);
            }
            let pv = a.get(rank, col).clone();
            for c in 0..width {
                *a.at(rank, c) /= &pv;
            }
            for r in 0..m {
                if r == rank || a.get(r, col).is_zero() {
                    continue;
                }
                let f = a.get(r, col).clone();
                for c in 0..width {
                    let d = &f * a.get(rank, c);
                    *a.at(r, c) -= d;
                }
            }
            pivots.push(col);
            rank += 1;
        }
        if (rank..m).any(|r| !a.get(r, levels).is_zero()) {
            return ExactUnit::NoSolution;
        }
        if rank < levels {
            return ExactUnit::Underdetermined(levels - rank);
        }
        let mut x = vec![Q::zero(); levels];
        for (r, &c) in pivots.iter().enumerate() {
            x[c] = a.get(r, levels).clone();
        }
        ExactUnit::Unique(x)
    }

    /// Whether every unit's residual vanishes exactly.
    pub fn solves(weights: &ExactWeights, probs: &[Vec<Q>]) -> bool {
        level_irrelevance_residuals(weights, probs).iter().all(QMatrix::is_zero)
    }

    /// max |entry| of a rational matrix, as a float.
    pub fn max_abs(m: &QMatrix) -> f64 {
        m.data.iter().map(|v| v.abs().to_f64().unwrap_or(f64::INFINITY)).fold(0.0, f64::max)
    }
}

/// A small random instance: spec, population, a true design and a
/// potential-outcome table.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub spec: RegressionSpec,
    pub pop: Population,
    pub design: Design,
    pub exact_design: Vec<Vec<exact::Q>>,
    pub table: PotentialOutcomeTable,
    /// Regressor family used.
    pub family: &'static str,
}

fn random_paths(rng: &mut ChaCha8Rng, levels: usize, periods: usize) -> Result<TreatmentSet> {
    if periods == 1 {
        return TreatmentSet::multivalued(levels - 1);
    }
    let mut paths: Vec<Vec<f64>> = vec![vec![0.0; periods]];
    while paths.len() < levels {
        let p: Vec<f64> = (0..periods).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        if !paths.contains(&p) {
            paths.push(p);
        }
    }
    TreatmentSet::from_values(paths)
}

fn random_rational_design(rng: &mut ChaCha8Rng, rows: usize, levels: usize) -> Vec<Vec<exact::Q>> {
    (0..rows)
        .map(|_| {
            let den = rng.random_range(levels as i64 + 1..=8);
            let mut parts = vec![1i64; levels];
            for _ in 0..den - levels as i64 {
                parts[rng.random_range(0..levels)] += 1;
            }
            parts.into_iter().map(|p| exact::q(p, den)).collect()
        })
        .collect()
}

/// Draws an instance with n ≤ 6, J ≤ 2 and T ≤ 3 from one of three
/// regressor families: cell×period dummies plus treatment columns with the
/// design constant within cells, the same with a design varying by unit,
/// and integer-valued regressors with an arbitrary design.
pub fn random_instance(seed: u64) -> Result<RandomInstance> {
    for attempt in 0..1000u64 {
        let mut rng = rng_stream(seed, attempt);
        let n = rng.random_range(2..=6usize);
        let levels = rng.random_range(2..=3usize);
        let periods = rng.random_range(1..=3usize);
        let family = ["cell_constant", "cell_varying", "integer"][(seed % 3) as usize];
        let ts = random_paths(&mut rng, levels, periods)?;
        let cells: Vec<usize> = (0..n).map(|_| rng.random_range(0..2usize)).collect();
        let pop = Population::panel(vec!["x".into()], cells.iter().map(|&c| vec![c as f64]).collect(), periods);
        let exact_design = match family {
            "cell_constant" => {
                let proto = random_rational_design(&mut rng, 2, levels);
                cells.iter().map(|&c| proto[c].clone()).collect()
            }
            _ => random_rational_design(&mut rng, n, levels),
        };
        let design = exact::to_design(&exact_design, DesignKind::True)?;
        let spec = match family {
            "integer" => {
                let kk = rng.random_range(2..=4usize);
                let table: Vec<Vec<Vec<Vec<f64>>>> = (0..n)
                    .map(|_| {
                        (0..levels)
                            .map(|_| {
                                (0..periods)
                                    .map(|_| (0..kk).map(|_| f64::from(rng.random_range(-2..=2i8))).collect())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                let mut contrast = DMatrix::zeros(1, kk);
                contrast[(0, rng.random_range(0..kk))] = 1.0;
                RegressionSpec::from_fn(n, ts.clone(), contrast, |i, t, w| table[i][w][t].clone())?
            }
            _ => {
                // [1{cell, period} dummies, one column per nonzero path value].
                let fe = 2 * periods;
                let kk = fe + (levels - 1);
                let mut contrast = DMatrix::zeros(1, kk);
                contrast[(0, fe)] = 1.0;
                let ts2 = ts.clone();
                RegressionSpec::from_fn(n, ts.clone(), contrast, move |i, t, w| {
                    let mut z = vec![0.0; kk];
                    z[cells[i] * periods + t] = 1.0;
                    if w > 0 {
                        z[fe + w - 1] = ts2.value(w)[t];
                    }
                    z
                })?
            }
        };
        let probs = exact_design.clone();
        let g = match exact::gram(&spec, &pop, &probs) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if g.inverse().is_err() {
            continue;
        }
        let y: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..levels).map(|_| (0..periods).map(|_| f64::from(rng.random_range(-5..=5i8))).collect()).collect()
            })
            .collect();
        let table = PotentialOutcomeTable::new(y);
        return Ok(RandomInstance { spec, pop, design, exact_design, table, family });
    }
    Err(Error::Singular("no nonsingular instance found".into()))
}

/// Joint assignment distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    /// Independent draws from each unit's π_i.
    Independent(Design),
    /// Exactly `treated` of `n` units treated, uniformly at random.
    CompleteRandomization { n: usize, treated: usize },
    /// Independent Bernoulli draws conditioned on `treated` units treated,
    /// by rejection (small n only).
    Rejective { design: Design, treated: usize, max_tries: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDesign {
    pub kind: JointKind,
    pub seed: u64,
}

impl JointDesign {
    pub fn n(&self) -> usize {
        match &self.kind {
            JointKind::Independent(d) | JointKind::Rejective { design: d, .. } => d.n(),
            JointKind::CompleteRandomization { n, .. } => *n,
        }
    }

    /// Marginal design, when known in closed form.
    pub fn marginals(&self) -> Option<Design> {
        match &self.kind {
            JointKind::Independent(d) => Some(d.clone()),
            JointKind::CompleteRandomization { n, treated } => Some(
                Design::constant(
                    &[1.0 - *treated as f64 / *n as f64, *treated as f64 / *n as f64],
                    *n,
                    DesignKind::True,
                )
                .ok()?,
            ),
            JointKind::Rejective { .. } => None,
        }
    }

    /// Treatment vector for replication `rep`.
    pub fn draw(&self, rep: u64) -> Result<Vec<usize>> {
        let mut rng = rng_stream(self.seed, rep);
        match &self.kind {
            JointKind::Independent(d) => Ok(draw_independent(d, &mut rng)),
            JointKind::CompleteRandomization { n, treated } => {
                if treated > n {
                    return Err(Error::Invalid("more treated units than units".into()));
                }
                let mut w = vec![0; *n];
                for i in sample(&mut rng, *n, *treated) {
                    w[i] = 1;
                }
                Ok(w)
            }
            JointKind::Rejective { design, treated, max_tries } => {
                if design.levels() != 2 {
                    return Err(Error::Invalid("rejective sampling needs a binary design".into()));
                }
                for _ in 0..*max_tries {
                    let w = draw_independent(design, &mut rng);
                    if w.iter().sum::<usize>() == *treated {
                        return Ok(w);
                    }
                }
                Err(Error::NoConvergence { iterations: *max_tries, last_step: f64::NAN })
            }
        }
    }
}

fn draw_independent(d: &Design, rng: &mut ChaCha8Rng) -> Vec<usize> {
    d.probs()
        .iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (w, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return w;
                }
            }
            row.len() - 1
        })
        .collect()
}

/// `reps` treatment vectors, replication r drawn from stream r.
pub fn simulate_assignment(jd: &JointDesign, reps: usize) -> Result<Vec<Vec<usize>>> {
    (0..reps as u64).map(|r| jd.draw(r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Y ~ W + 1 + x with π*(x) = 0.2 + 0.6x, x ~ U[0, 1].
    AngristLinear,
    /// Y ~ W + 1 under complete randomization of half the units.
    FixedGram,
    /// Y ~ 1 + x + W + W·x with x clustered at 0 and near 1; the effect at
    /// x = 0 puts near-zero weight on the second cluster.
    WeakIdentification,
}

/// Bound C on |π̂| used to report bounded designs.
pub const DESIGN_BOUND: f64 = 10.0;
/// min σ_iJ / median σ_iJ below this marks a population as weakly identified.
pub const UNSTABLE_RATIO: f64 = 1e-3;

/// One population size of a consistency scenario, ready to replicate.
#[derive(Debug, Clone)]
pub struct ScenarioSetup {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    spec: RegressionSpec,
    pop: Population,
    joint: JointDesign,
    truth: Design,
    rho: Vec<Vec<DMatrix<f64>>>,
    pub weak_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    /// max_i max_w |ρ̂_i(w) − ρ_i(w)|∞.
    pub weight_error: f64,
    /// max_i |π̂_i − π_i*|∞, infinite when no estimated design exists.
    pub design_error: f64,
    pub bounded: bool,
}

impl ScenarioSetup {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Result<Self> {
        if n < 4 {
            return Err(Error::Invalid("scenarios need at least 4 units".into()));
        }
        let mut rng = rng_stream(seed ^ 0x5eed, n as u64);
        let ts = TreatmentSet::binary();
        let (pop, probs, options, template, kind) = match scenario {
            Scenario::AngristLinear => {
                let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let probs: Vec<f64> = x.iter().map(|v| 0.2 + 0.6 * v).collect();
                let pop = Population::cross_section(vec!["x".into()], x.into_iter().map(|v| vec![v]).collect());
                let opts = TemplateOptions { covariates: vec!["x".into()], ..Default::default() };
                (pop, probs, opts, "angrist", None)
            }
            Scenario::FixedGram => {
                let pop = Population::cross_section(vec![], vec![vec![]; n]);
                (pop, vec![(n / 2) as f64 / n as f64; n], TemplateOptions::default(), "angrist", Some(n / 2))
            }
            Scenario::WeakIdentification => {
                let x: Vec<f64> =
                    (0..n).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 + 1e-6 * rng.random::<f64>() }).collect();
                let probs: Vec<f64> = x.iter().map(|&v| if v == 0.0 { 0.3 } else { 0.6 }).collect();
                let pop = Population::cross_section(vec!["x".into()], x.into_iter().map(|v| vec![v]).collect());
                let opts = TemplateOptions {
                    terms: vec!["1".into(), "x".into(), "w".into(), "w:x".into()],
                    contrast: Some(vec![vec![0.0, 0.0, 1.0, 0.0]]),
                    ..Default::default()
                };
                (pop, probs, opts, "custom", None)
            }
        };
        let truth = Design::binary(&probs, DesignKind::True)?;
        let mut options = options;
        options.centering_design = Some(truth.clone());
        let spec = build_template(template, &options, &pop, &ts)?;
        let pws = potential_weights(&spec, &pop, &population_gram(&spec, &pop, &truth)?)?;
        let strength = identification_strength(&pws);
        let min_sigma =
            strength.units.iter().filter(|u| !u.unconstrained).map(|u| u.sigma).fold(f64::INFINITY, f64::min);
        let max_sigma = strength.units.iter().map(|u| u.sigma).fold(0.0, f64::max);
        let weak_ratio = if max_sigma > 0.0 { min_sigma / max_sigma } else { 0.0 };
        let joint = JointDesign {
            kind: match kind {
                Some(treated) => JointKind::CompleteRandomization { n, treated },
                None => JointKind::Independent(truth.clone()),
            },
            seed,
        };
        Ok(ScenarioSetup { scenario, n, seed, spec, pop, joint, truth, rho: pws.all().to_vec(), weak_ratio })
    }

    pub fn unstable(&self) -> bool {
        self.weak_ratio < UNSTABLE_RATIO
    }

    /// Draws W, re-estimates the weights from Ĝ and solves for π̂.
    pub fn replicate(&self, rep: u64) -> Result<Replication> {
        let w = self.joint.draw(rep)?;
        if w.iter().all(|&v| v == w[0]) {
            return Ok(Replication { weight_error: f64::INFINITY, design_error: f64::INFINITY, bounded: false });
        }
        let pop = self.pop.clone().with_treatment(w);
        let g = match sample_gram(&self.spec, &pop) {
            Ok(g) if !g.is_singular() => g,
            _ => return Ok(Replication { weight_error: f64::INFINITY, design_error: f64::INFINITY, bounded: false }),
        };
        let pws = potential_weights(&self.spec, &pop, &g)?;
        let mut weight_error: f64 = 0.0;
        for (i, unit) in self.rho.iter().enumerate() {
            for (l, r) in unit.iter().enumerate() {
                weight_error = weight_error.max(linalg::max_abs(&(pws.rho(i, l) - r)));
            }
        }
        let tol = SolverTolerances::default();
        let report = if pws.n_contrasts() == 1 && pws.periods() == 1 {
            binary_closed_form(&pws, &self.spec, &pop, &tol)?
        } else {
            solve_implicit_design(&pws, &self.spec, &pop, &tol)?
        };
        let (design_error, bounded) = match &report.design {
            Some(d) => {
                let err = (0..d.n()).map(|i| (d.prob(i, 1) - self.truth.prob(i, 1)).abs()).fold(0.0, f64::max);
                let bounded = d.probs().iter().all(|r| r.iter().all(|p| p.abs() <= DESIGN_BOUND));
                (err, bounded)
            }
            None => (f64::INFINITY, false),
        };
        Ok(Replication { weight_error, design_error, bounded })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub n: usize,
    pub reps: usize,
    pub median_weight_error: f64,
    pub median_design_error: f64,
    /// Share of replications with an estimated design bounded by C.
    pub bounded_share: f64,
    pub unstable: bool,
}

/// Medians over a batch of replications.
pub fn summarize(setup: &ScenarioSetup, reps: &[Replication]) -> ConsistencyPoint {
    let mut we: Vec<f64> = reps.iter().map(|r| r.weight_error).collect();
    let mut de: Vec<f64> = reps.iter().map(|r| r.design_error).collect();
    ConsistencyPoint {
        n: setup.n,
        reps: reps.len(),
        median_weight_error: linalg::median(&mut we),
        median_design_error: linalg::median(&mut de),
        bounded_share: reps.iter().filter(|r| r.bounded).count() as f64 / reps.len().max(1) as f64,
        unstable: setup.unstable(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub scenario: Scenario,
    pub design_bound: f64,
    pub points: Vec<ConsistencyPoint>,
    /// Median design error strictly decreasing along the grid.
    pub decreasing: bool,
    pub unstable: bool,
    pub notes: Vec<String>,
}

pub fn finish_report(scenario: Scenario, points: Vec<ConsistencyPoint>) -> ConsistencyReport {
    let decreasing = points.windows(2).all(|p| p[1].median_design_error < p[0].median_design_error);
    let unstable = points.iter().any(|p| p.unstable);
    let mut notes = Vec::new();
    if unstable {
        notes.push(format!("weak identification: min σ_iJ below {UNSTABLE_RATIO} of the largest"));
    }
    ConsistencyReport { scenario, design_bound: DESIGN_BOUND, points, decreasing, unstable, notes }
}

/// Sequential driver: `reps` replications at each size in `n_grid`.
pub fn consistency_harness(scenario: Scenario, n_grid: &[usize], reps: usize, seed: u64) -> Result<ConsistencyReport> {
    let mut points = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let setup = ScenarioSetup::new(scenario, n, seed)?;
        let runs = (0..reps as u64).map(|r| setup.replicate(r)).collect::<Result<Vec<_>>>()?;
        points.push(summarize(&setup, &runs));
    }
    Ok(finish_report(scenario, points))
}

#[cfg(test)]
mod tests {
    use super::exact::*;
    use super::*;

    #[test]
    fn zero_outcomes_give_zero_estimand() {
        let inst = random_instance(1).unwrap();
        let zero = PotentialOutcomeTable::from_fn(inst.pop.n(), inst.spec.levels(), inst.spec.periods(), |_, _, _| 0.0);
        let tau = evaluate_estimand(&inst.spec, &inst.pop, &zero, &inst.design).unwrap();
        assert!(tau.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimand_equals_omega_weighted_sum() {
        for seed in 0..12 {
            let inst = random_instance(seed).unwrap();
            let tau = evaluate_estimand(&inst.spec, &inst.pop, &inst.table, &inst.design).unwrap();
            let g = population_gram(&inst.spec, &inst.pop, &inst.design).unwrap();
            let pws = crate::weights::potential_weights(&inst.spec, &inst.pop, &g).unwrap();
            let est = crate::estimand::implicit_estimand(&inst.design, &pws).unwrap();
            let via = est.apply(&inst.table, &inst.pop);
            for (a, b) in tau.iter().zip(&via) {
                assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn exact_inverse_round_trips() {
        let m = QMatrix::from_f64(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
        let inv = m.inverse().unwrap();
        assert_eq!(*inv.get(0, 0), q(3, 5));
        assert_eq!(*inv.get(0, 1), q(-1, 5));
        let id = m.mul(&inv);
        assert_eq!(*id.get(1, 1), q(1, 1));
        assert_eq!(*id.get(1, 0), q(0, 1));
    }

    #[test]
    fn exact_unit_statuses() {
        let r = |a: i64, b: i64| {
            let mut m = QMatrix::zeros(1, 1);
            m = m.add(&QMatrix::from_f64(&DMatrix::from_element(1, 1, a as f64 / b as f64)));
            m
        };
        assert_eq!(solve_unit(&[r(-2, 1), r(2, 1)]), ExactUnit::Unique(vec![q(1, 2), q(1, 2)]));
        assert_eq!(solve_unit(&[r(1, 1), r(1, 1)]), ExactUnit::NoSolution);
        assert_eq!(solve_unit(&[r(0, 1), r(0, 1)]), ExactUnit::Unconstrained);
        assert_eq!(solve_unit(&[r(-1, 1), r(1, 1), r(0, 1)]), ExactUnit::Underdetermined(1));
    }

    #[test]
    fn complete_randomization_has_exact_counts() {
        let jd = JointDesign { kind: JointKind::CompleteRandomization { n: 10, treated: 4 }, seed: 3 };
        for w in simulate_assignment(&jd, 20).unwrap() {
            assert_eq!(w.iter().sum::<usize>(), 4);
        }
        let none = JointDesign { kind: JointKind::CompleteRandomization { n: 5, treated: 0 }, seed: 3 };
        assert_eq!(none.draw(0).unwrap(), vec![0; 5]);
        assert_eq!(jd.draw(7).unwrap(), jd.draw(7).unwrap());
    }

    #[test]
    fn rejective_sampler_conditions_on_count() {
        let d = Design::binary(&[0.3, 0.5, 0.7, 0.4], DesignKind::True).unwrap();
        let jd = JointDesign { kind: JointKind::Rejective { design: d, treated: 2, max_tries: 10_000 }, seed: 9 };
        for w in simulate_assignment(&jd, 50).unwrap() {
            assert_eq!(w.iter().sum::<usize>(), 2);
        }
        assert!(jd.marginals().is_none());
    }

    #[test]
    fn unconstrained_single_unit_is_shift_invariant() {
        let pop = Population::cross_section(vec![], vec![vec![]; 2]);
        let ts = TreatmentSet::binary();
        // Unit 1 carries all of the contrast; unit 0 gets ρ = 0.
        let spec =
            RegressionSpec::from_fn(2, ts.clone(), DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]), |i, _, w| {
                vec![
                    f64::from(u8::from(i == 0)),
                    f64::from(u8::from(i == 1)),
                    if i == 1 { ts.value(w)[0] } else { 0.0 },
                ]
            })
            .unwrap();
        let d = Design::binary(&[0.9, 0.5], DesignKind::True).unwrap();
        let table = PotentialOutcomeTable::from_fn(2, 2, 1, |i, w, _| (i + 3 * w) as f64);
        let rep = level_irrelevance_test(&spec, &pop, &table, &d, 20, 1).unwrap();
        assert!(rep.passes(1e-9), "{}", rep.max_deviation);
        let d2 = Design::binary(&[0.1, 0.5], DesignKind::True).unwrap();
        assert!(level_irrelevance_test(&spec, &pop, &table, &d2, 20, 1).unwrap().passes(1e-9));
    }

    #[test]
    fn fixed_gram_weights_are_exact() {
        let setup = ScenarioSetup::new(Scenario::FixedGram, 40, 5).unwrap();
        for r in 0..5 {
            assert!(setup.replicate(r).unwrap().weight_error < 1e-12);
        }
    }
}
