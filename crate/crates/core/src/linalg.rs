//! Small dense linear-algebra helpers over `nalgebra`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff below which a Gram matrix counts as singular.
pub const GRAM_EIGEN_CUTOFF: f64 = 1e-10;

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(g: &DMatrix<f64>) -> (f64, f64) {
    if g.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = g.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Inverse of a symmetric positive definite matrix through its
/// eigendecomposition. Eigenvalues below `rel_cutoff * λ_max` are an error
/// rather than being pseudo-inverted.
pub fn sym_inverse(g: &DMatrix<f64>, rel_cutoff: f64) -> Result<DMatrix<f64>> {
    let k = g.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = g.clone().symmetric_eigen();
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let cutoff = rel_cutoff * hi;
    if !hi.is_finite() || hi <= 0.0 || !(lo > cutoff) {
        return Err(Error::SingularGram { min_eigenvalue: lo, cutoff });
    }
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / l);
    }
    let inv = scaled * v.transpose();
    Ok(symmetrize(&inv))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Numerical rank with a relative singular-value cutoff.
pub fn rank(m: &DMatrix<f64>, rel_cutoff: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&hi) if hi > 0.0 => s.iter().filter(|&&x| x > rel_cutoff * hi).count(),
        _ => 0,
    }
}

/// Minimum-norm least-squares solution of `a x = b`.
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub x: DVector<f64>,
    pub rank: usize,
    /// Orthonormal basis of the null space of `a`, one vector per column.
    pub nullspace: DMatrix<f64>,
}

pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> MinNormSolution {
    let (m, n) = a.shape();
    // Pad with zero rows so the thin SVD exposes the full right basis.
    let rows = m.max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (m, n)).copy_from(a);
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, m).copy_from(b);
    let svd = padded.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let hi = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut x = DVector::zeros(n);
    let mut null_cols = Vec::new();
    let mut r = 0;
    for j in 0..svd.singular_values.len() {
        let s = svd.singular_values[j];
        if hi > 0.0 && s > rel_cutoff * hi {
            r += 1;
            let coef = u.column(j).dot(&rhs) / s;
            x += vt.row(j).transpose() * coef;
        } else {
            null_cols.push(vt.row(j).transpose());
        }
    }
    let nullspace = if null_cols.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&null_cols) };
    MinNormSolution { x, rank: r, nullspace }
}

/// Least squares `y ~ x` with full column rank required.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let sol = min_norm_solve(x, y, 1e-12);
    if sol.rank < x.ncols() {
        return Err(Error::Singular(alloc::format!("design matrix has rank {} < {} columns", sol.rank, x.ncols())));
    }
    Ok(sol.x)
}

/// Orthonormal basis for the column span of `m`, from a column-pivoted QR
/// with a relative diagonal cutoff.
pub fn orthonormal_basis(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let q = qr.q();
    let lead = r[(0, 0)].abs();
    if lead == 0.0 {
        return DMatrix::zeros(rows, 0);
    }
    let diag = r.nrows().min(r.ncols());
    let keep = (0..diag).take_while(|&j| r[(j, j)].abs() > rel_cutoff * lead).count();
    q.columns(0, keep).into_owned()
}

/// Euclidean distance from `v` to the span of the orthonormal columns of `basis`.
pub fn span_distance(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    if basis.ncols() == 0 {
        return v.norm();
    }
    let proj = basis * (basis.transpose() * v);
    (v - proj).norm()
}

pub fn max_abs<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Upper tail P(χ²_df > x) via the regularized incomplete gamma Q(df/2, x/2).
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let a = df as f64 / 2.0;
    let z = x / 2.0;
    let log_prefix = a * libm::log(z) - z - libm::lgamma(a);
    if z < a + 1.0 {
        // Series for P(a, z).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= z / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (1.0 - sum * libm::exp(log_prefix)).clamp(0.0, 1.0)
    } else {
        // Lentz continued fraction for Q(a, z).
        let tiny = 1e-300;
        let mut b = z + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (libm::exp(log_prefix) * h).clamp(0.0, 1.0)
    }
}

/// Pearson correlation, 0 when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        return 0.0;
    }
    sab / libm::sqrt(saa * sbb)
}

/// Serde adapters writing matrices as row-major nested arrays.
pub mod serde_mat {
    use alloc::vec::Vec;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().cloned().collect()).collect()
    }

    fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, E> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(E::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?)
    }

    /// `Vec<DMatrix>` adapter.
    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            m.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Vec::<Vec<Vec<f64>>>::deserialize(d)?.into_iter().map(from_rows).collect()
        }
    }

    /// `Vec<Vec<DMatrix>>` adapter.
    pub mod nested {
        use super::*;

        pub fn serialize<S: Serializer>(m: &[Vec<DMatrix<f64>>], s: S) -> Result<S::Ok, S::Error> {
            m.iter().map(|u| u.iter().map(to_rows).collect::<Vec<_>>()).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<DMatrix<f64>>>, D::Error> {
            let raw = Vec::<Vec<Vec<Vec<f64>>>>::deserialize(d)?;
            raw.into_iter().map(|u| u.into_iter().map(from_rows).collect::<Result<Vec<_>, _>>()).collect()
        }
    }
}
