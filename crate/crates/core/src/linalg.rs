//! Small dense linear-algebra helpers shared by the Koopman fit and the mode generator.

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{IscError, Result};

pub type C64 = Complex<f64>;

/// Relative singular-value cutoff used by every pseudoinverse in the crate.
pub const PINV_REL_TOL: f64 = 1e-10;

fn to_faer<T: Copy + faer::traits::ComplexField>(m: &DMatrix<T>) -> faer::Mat<T> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

fn check_finite_nonempty<'a>(dims: (usize, usize), mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 {
        return Err(IscError::DegenerateData("pseudoinverse of an empty matrix".into()));
    }
    if values.any(|v| !v.is_finite()) {
        return Err(IscError::DegenerateData("non-finite entries in matrix".into()));
    }
    Ok(())
}

/// SVD pseudoinverse discarding singular values below `rel_tol * sigma_max`.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    check_finite_nonempty(m.shape(), m.iter())?;
    let svd = to_faer(m)
        .thin_svd()
        .map_err(|e| IscError::DegenerateData(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let rank = s.dim();
    let sigma_max = (0..rank).map(|i| s[i]).fold(0.0, f64::max);
    if sigma_max <= 0.0 {
        return Err(IscError::DegenerateData("all-zero matrix has no pseudoinverse".into()));
    }
    let cutoff = rel_tol * sigma_max;
    let mut out = DMatrix::<f64>::zeros(m.ncols(), m.nrows());
    for k in (0..rank).filter(|&k| s[k] > cutoff) {
        let inv = 1.0 / s[k];
        // out += v_k * inv * u_k^T
        for r in 0..m.ncols() {
            let vr = v[(r, k)] * inv;
            for c in 0..m.nrows() {
                out[(r, c)] += vr * u[(c, k)];
            }
        }
    }
    Ok(out)
}

/// Minimum-norm least squares `a x = b` through a truncated complex SVD.
pub fn complex_lstsq(a: &DMatrix<C64>, b: &DMatrix<C64>, rel_tol: f64) -> Result<DMatrix<C64>> {
    if a.nrows() != b.nrows() {
        return Err(IscError::LengthMismatch { expected: a.nrows(), got: b.nrows() });
    }
    let flat: Vec<f64> = a.iter().flat_map(|z| [z.re, z.im]).collect();
    check_finite_nonempty(a.shape(), flat.iter())?;
    let svd = to_faer(a)
        .thin_svd()
        .map_err(|e| IscError::DegenerateData(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let sigma_max = (0..s.dim()).map(|i| s[i].re).fold(0.0, f64::max);
    if sigma_max <= 0.0 {
        return Err(IscError::DegenerateData("all-zero matrix in least squares".into()));
    }
    let cutoff = rel_tol * sigma_max;
    let mut x = DMatrix::<C64>::zeros(a.ncols(), b.ncols());
    for k in (0..s.dim()).filter(|&k| s[k].re > cutoff) {
        let inv = 1.0 / s[k].re;
        for col in 0..b.ncols() {
            // coefficient u_k^H b_col / sigma_k
            let mut coef = C64::new(0.0, 0.0);
            for r in 0..a.nrows() {
                coef += u[(r, k)].conj() * b[(r, col)];
            }
            coef *= inv;
            for r in 0..a.ncols() {
                x[(r, col)] += v[(r, k)] * coef;
            }
        }
    }
    Ok(x)
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<C64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(IscError::LengthMismatch { expected: n, got: m.ncols() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(IscError::DegenerateData("non-finite entries in matrix".into()));
    }
    to_faer(m)
        .eigenvalues()
        .map_err(|e| IscError::DegenerateData(format!("eigenvalue iteration did not converge: {e:?}")))
}

/// Descending magnitude, ties broken by descending real then descending imaginary part.
pub fn spectral_order(a: &C64, b: &C64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then_with(|| b.re.total_cmp(&a.re))
        .then_with(|| b.im.total_cmp(&a.im))
}

/// 2-norm condition number of a complex matrix.
pub fn condition_number(m: &DMatrix<C64>) -> f64 {
    if m.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return f64::INFINITY;
    }
    let Ok(sv) = to_faer(m).singular_values() else {
        return f64::INFINITY;
    };
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Row-major, whitespace-separated text dump.
pub fn dump_matrix(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Parse the format written by [`dump_matrix`].
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| IscError::Parse(format!("{t}: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(IscError::Parse("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
