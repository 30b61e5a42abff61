//! Population and sample Gram matrices, FWL residualization and
//! reparametrization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, GRAM_EIGEN_CUTOFF};
use crate::model::{Design, Population, RegressionSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "design")]
pub enum GramSource {
    Population(Design),
    Sample,
    Candidate(Design),
}

/// A K×K regressor second-moment matrix with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    #[serde(with = "crate::linalg::serde_mat")]
    values: DMatrix<f64>,
    source: GramSource,
    min_eigenvalue: f64,
}

impl GramMatrix {
    pub fn new(values: DMatrix<f64>, source: GramSource) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Dimension("Gram matrix must be square".into()));
        }
        let scale = linalg::max_abs(&values).max(f64::MIN_POSITIVE);
        if linalg::max_abs(&(&values - values.transpose())) > 1e-12 * scale {
            return Err(Error::Invalid("Gram matrix is not symmetric".into()));
        }
        let (lo, _) = linalg::eigen_range(&values);
        Ok(GramMatrix { values, source, min_eigenvalue: lo })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn source(&self) -> &GramSource {
        &self.source
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    /// True when inversion would fail at the default eigenvalue cutoff.
    pub fn is_singular(&self) -> bool {
        self.inverse().is_err()
    }

    /// Positive semidefinite up to −1e-10·trace.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -1e-10 * self.trace().abs()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        linalg::sym_inverse(&self.values, GRAM_EIGEN_CUTOFF)
    }

    pub fn is_sample(&self) -> bool {
        matches!(self.source, GramSource::Sample)
    }
}

/// (1/n) Σ_i Σ_{t∈𝒯_i} Σ_w p_i(w) z z' accumulated without validation.
pub(crate) fn gram_values(
    spec: &RegressionSpec,
    pop: &Population,
    probs: &dyn Fn(usize, usize) -> f64,
) -> DMatrix<f64> {
    let k = spec.n_regressors();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..spec.n_units() {
        for w in 0..spec.levels() {
            let p = probs(i, w);
            if p == 0.0 {
                continue;
            }
            let z = spec.z(i, w);
            for t in 0..spec.periods() {
                if !pop.is_observed(i, t) {
                    continue;
                }
                for a in 0..k {
                    let za = p * z[(t, a)];
                    if za == 0.0 {
                        continue;
                    }
                    for b in a..k {
                        g[(a, b)] += za * z[(t, b)];
                    }
                }
            }
        }
    }
    let n = spec.n_units() as f64;
    for a in 0..k {
        for b in a..k {
            let v = g[(a, b)] / n;
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// G(π) = (1/n) Σ_i Σ_{t∈𝒯_i} Σ_w π_i(w) z_t(x_i,w) z_t(x_i,w)'.
pub fn population_gram(spec: &RegressionSpec, pop: &Population, design: &Design) -> Result<GramMatrix> {
    spec.check_population(pop)?;
    spec.check_design(design)?;
    let g = gram_values(spec, pop, &|i, w| design.prob(i, w));
    GramMatrix::new(g, GramSource::Population(design.clone()))
}

/// Same triple sum tagged as a candidate Gram matrix.
pub fn candidate_gram(spec: &RegressionSpec, pop: &Population, design: &Design) -> Result<GramMatrix> {
    spec.check_population(pop)?;
    spec.check_design(design)?;
    let g = gram_values(spec, pop, &|i, w| design.prob(i, w));
    GramMatrix::new(g, GramSource::Candidate(design.clone()))
}

/// Ĝ: the population Gram matrix at point masses on the observed treatments.
pub fn sample_gram(spec: &RegressionSpec, pop: &Population) -> Result<GramMatrix> {
    spec.check_population(pop)?;
    let w = pop.require_treatment()?;
    if let Some(&bad) = w.iter().find(|&&wi| wi >= spec.levels()) {
        return Err(Error::Invalid(format!("treatment index {bad} out of range")));
    }
    let g = gram_values(spec, pop, &|i, v| if w[i] == v { 1.0 } else { 0.0 });
    GramMatrix::new(g, GramSource::Sample)
}

fn complement(k: usize, keep: &[usize]) -> Result<Vec<usize>> {
    let mut seen = alloc::vec![false; k];
    for &j in keep {
        if j >= k || seen[j] {
            return Err(Error::Invalid(format!("bad keep index {j}")));
        }
        seen[j] = true;
    }
    Ok((0..k).filter(|&j| !seen[j]).collect())
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])])
}

/// Replaces the regressors in `keep` by their residuals z₁ − Γz₂ against the
/// rest, with Γ = G₁₂G₂₂⁻¹ taken from `gram`.
pub fn fwl_residualize(spec: &RegressionSpec, gram: &GramMatrix, keep: &[usize]) -> Result<RegressionSpec> {
    let k = spec.n_regressors();
    if gram.dim() != k {
        return Err(Error::Dimension("Gram matrix does not match the spec".into()));
    }
    let rest = complement(k, keep)?;
    let lambda = spec.contrast();
    if rest.iter().any(|&j| lambda.column(j).iter().any(|&v| v != 0.0)) {
        return Err(Error::Invalid("contrast loads on residualized-out coordinates".into()));
    }
    let g = gram.values();
    let g12 = submatrix(g, keep, &rest);
    let g22 = submatrix(g, &rest, &rest);
    let gamma = if rest.is_empty() {
        DMatrix::zeros(keep.len(), 0)
    } else {
        let inv = linalg::sym_inverse(&g22, GRAM_EIGEN_CUTOFF).map_err(|_| Error::Singular("G₂₂ block".into()))?;
        g12 * inv
    };
    let gamma_t = gamma.transpose();
    let regressors = spec
        .regressors()
        .iter()
        .map(|unit| {
            unit.iter()
                .map(|z| {
                    let t = z.nrows();
                    let z1 = DMatrix::from_fn(t, keep.len(), |r, c| z[(r, keep[c])]);
                    let z2 = DMatrix::from_fn(t, rest.len(), |r, c| z[(r, rest[c])]);
                    z1 - z2 * &gamma_t
                })
                .collect()
        })
        .collect();
    let contrast = DMatrix::from_fn(lambda.nrows(), keep.len(), |r, c| lambda[(r, keep[c])]);
    let names = keep.iter().map(|&j| spec.names()[j].clone()).collect();
    let tag = spec.template_tag().map(|t| format!("fwl({t})"));
    Ok(spec.replace_regressors(regressors, contrast, names, tag))
}

/// z̃ = Mz and Λ̃ = ΛM'.
pub fn reparametrize(spec: &RegressionSpec, m: &DMatrix<f64>) -> Result<RegressionSpec> {
    let k = spec.n_regressors();
    if m.shape() != (k, k) {
        return Err(Error::Dimension(format!("M is {:?}, expected ({k}, {k})", m.shape())));
    }
    let cond = linalg::condition_number(m);
    if !(cond < 1e12) {
        return Err(Error::Singular(format!("reparametrization has condition number {cond:e}")));
    }
    let mt = m.transpose();
    let regressors = spec.regressors().iter().map(|unit| unit.iter().map(|z| z * &mt).collect()).collect();
    let contrast = spec.contrast() * &mt;
    let names: Vec<String> = (0..k).map(|j| format!("m{j}")).collect();
    let tag = spec.template_tag().map(|t| format!("reparam({t})"));
    Ok(spec.replace_regressors(regressors, contrast, names, tag))
}
