//! Koopman modes of a prediction-error sequence through the companion-matrix
//! variant of Arnoldi: least-squares recurrence coefficients, Ritz values as
//! the companion roots, and Ritz vectors from the Vandermonde relation
//! `Theta = V * T` with `T[i][c] = lambda_i^c`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IscError, Result};
use crate::linalg::{self, C64, PINV_REL_TOL};

/// Ritz values closer than this are merged before the Vandermonde solve.
pub const RITZ_MERGE_TOL: f64 = 1e-8;
/// Vandermonde matrices with a larger 2-norm condition number are rejected.
pub const VANDERMONDE_MAX_COND: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSequence {
    pub values: Vec<f64>,
    pub module_index: usize,
}

/// `measured - predicted`, elementwise.
pub fn error_sequence(measured: &[f64], predicted: &[f64], module_index: usize) -> Result<ErrorSequence> {
    if measured.len() != predicted.len() {
        return Err(IscError::LengthMismatch { expected: measured.len(), got: predicted.len() });
    }
    let values = measured.iter().zip(predicted).map(|(m, p)| m - p).collect();
    Ok(ErrorSequence { values, module_index })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrylovData {
    /// `d x k` matrix of delay windows of the error sequence.
    pub theta: DMatrix<f64>,
    /// The window that follows the last column of `theta`.
    pub final_snapshot: DVector<f64>,
}

/// Snapshot `c` is `(e_c, ..., e_{c+d-1})`; the final snapshot is window `k`.
pub fn embed_error(errors: &ErrorSequence, embed_dim_d: usize, num_snapshots_k: usize) -> Result<KrylovData> {
    if embed_dim_d == 0 || num_snapshots_k == 0 {
        return Err(IscError::InvalidConfig("embedding dimension and snapshot count must be positive".into()));
    }
    let e = &errors.values;
    let required = embed_dim_d + num_snapshots_k;
    if e.len() < required {
        return Err(IscError::InsufficientData(format!(
            "error sequence of length {} needs at least d + k = {required} samples",
            e.len()
        )));
    }
    let theta = DMatrix::from_fn(embed_dim_d, num_snapshots_k, |r, c| e[c + r]);
    let final_snapshot = DVector::from_fn(embed_dim_d, |r, _| e[num_snapshots_k + r]);
    Ok(KrylovData { theta, final_snapshot })
}

/// Least-squares recurrence coefficients `a` with `Theta a ~ y_k`, and the fit residual
/// `e = Theta a - y_k`, which is orthogonal to the columns of `Theta`.
pub fn companion_fit(data: &KrylovData) -> Result<(DVector<f64>, DVector<f64>)> {
    if data.theta.iter().all(|v| *v == 0.0) {
        return Err(IscError::DegenerateData("zero snapshot matrix".into()));
    }
    let pinv = linalg::pinv(&data.theta, PINV_REL_TOL)?;
    let a = pinv * &data.final_snapshot;
    let e = &data.theta * &a - &data.final_snapshot;
    Ok((a, e))
}

/// `C = [[0, a_0], [I_{k-1}, a_1..a_{k-1}]]`.
pub fn companion_matrix(coeffs: &DVector<f64>) -> DMatrix<f64> {
    let k = coeffs.len();
    let mut c = DMatrix::zeros(k, k);
    for r in 1..k {
        c[(r, r - 1)] = 1.0;
    }
    for r in 0..k {
        c[(r, k - 1)] = coeffs[r];
    }
    c
}

/// Roots of `z^k - a_{k-1} z^{k-1} - ... - a_0`, in spectral order.
pub fn ritz_values(coeffs: &DVector<f64>) -> Result<Vec<C64>> {
    if coeffs.is_empty() {
        return Err(IscError::InvalidConfig("companion coefficients must be non-empty".into()));
    }
    // Exact low-order zero coefficients are exact zero roots; deflating them
    // keeps the nilpotent part out of the eigensolver.
    let zeros = coeffs.iter().take_while(|a| **a == 0.0).count();
    let mut values = vec![C64::new(0.0, 0.0); zeros];
    if zeros < coeffs.len() {
        let reduced = DVector::from_iterator(coeffs.len() - zeros, coeffs.iter().skip(zeros).copied());
        values.extend(linalg::eigenvalues(&companion_matrix(&reduced))?);
    }
    values.sort_by(linalg::spectral_order);
    Ok(values)
}

/// Drop values within `tol` of an earlier (kept) value.
pub fn merge_close(values: &[C64], tol: f64) -> Vec<C64> {
    let mut kept: Vec<C64> = Vec::with_capacity(values.len());
    for v in values {
        if kept.iter().all(|k| (k - v).norm() >= tol) {
            kept.push(*v);
        }
    }
    kept
}

/// Keep one value per distinct magnitude.
pub fn dedup_by_magnitude(values: &[C64], tol: f64) -> Vec<C64> {
    let mut kept: Vec<C64> = Vec::with_capacity(values.len());
    for v in values {
        if kept.iter().all(|k| (k.norm() - v.norm()).abs() >= tol) {
            kept.push(*v);
        }
    }
    kept
}

/// `T[i][c] = lambda_i^c` for `c = 0..k`.
pub fn vandermonde(values: &[C64], k: usize) -> DMatrix<C64> {
    DMatrix::from_fn(values.len(), k, |i, c| values[i].powi(c as i32))
}

fn complex_theta(theta: &DMatrix<f64>) -> DMatrix<C64> {
    theta.map(|v| C64::new(v, 0.0))
}

/// Solve `V T = Theta` for the Ritz vectors `V` (`d x k'`, one column per merged Ritz value).
///
/// Exact duplicates are merged first, leaving a least-squares problem when the set shrinks.
pub fn ritz_vectors(data: &KrylovData, values: &[C64]) -> Result<DMatrix<C64>> {
    let k = data.theta.ncols();
    let merged = merge_close(values, RITZ_MERGE_TOL);
    if merged.is_empty() {
        return Err(IscError::InvalidConfig("no Ritz values supplied".into()));
    }
    let t = vandermonde(&merged, k);
    let cond = linalg::condition_number(&t);
    if !cond.is_finite() || cond > VANDERMONDE_MAX_COND {
        return Err(IscError::IllConditioned { cond });
    }
    let t_tr = t.transpose();
    let theta_tr = complex_theta(&data.theta).transpose();
    let v_tr = if merged.len() == k {
        t_tr.lu()
            .solve(&theta_tr)
            .ok_or(IscError::IllConditioned { cond: f64::INFINITY })?
    } else {
        least_squares(t_tr, &theta_tr)?
    };
    Ok(v_tr.transpose())
}

fn least_squares(a: DMatrix<C64>, b: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    linalg::complex_lstsq(&a, b, PINV_REL_TOL)
}

/// Ritz vectors for a magnitude-deduplicated Ritz set, solved in the
/// truncated least-squares sense with no conditioning gate.
pub fn ritz_vectors_fallback(data: &KrylovData, values: &[C64]) -> Result<(Vec<C64>, DMatrix<C64>)> {
    let reduced = dedup_by_magnitude(values, RITZ_MERGE_TOL);
    let t = vandermonde(&reduced, data.theta.ncols());
    let v_tr = least_squares(t.transpose(), &complex_theta(&data.theta).transpose())?;
    Ok((reduced, v_tr.transpose()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RitzDecomposition {
    pub companion_coeffs_a: DVector<f64>,
    pub ritz_values: Vec<C64>,
    /// `d x k'`; column `i` pairs with `ritz_values[i]`.
    pub ritz_vectors: DMatrix<C64>,
    pub fit_residual_e: DVector<f64>,
    /// True when the magnitude-deduplicated fallback produced the vectors.
    pub used_fallback: bool,
}

impl RitzDecomposition {
    /// `V T` for the decomposition's own Ritz values.
    pub fn reconstruct(&self, k: usize) -> DMatrix<C64> {
        &self.ritz_vectors * vandermonde(&self.ritz_values, k)
    }
}

/// Companion fit, Ritz values and Ritz vectors in one pass.
pub fn decompose(data: &KrylovData) -> Result<RitzDecomposition> {
    let (a, e) = companion_fit(data)?;
    let values = ritz_values(&a)?;
    match ritz_vectors(data, &values) {
        Ok(vectors) => Ok(RitzDecomposition {
            companion_coeffs_a: a,
            ritz_values: merge_close(&values, RITZ_MERGE_TOL),
            ritz_vectors: vectors,
            fit_residual_e: e,
            used_fallback: false,
        }),
        Err(IscError::IllConditioned { cond }) => {
            debug!("Vandermonde condition {cond:.3e}; using magnitude-deduplicated Ritz set");
            let (reduced, vectors) = ritz_vectors_fallback(data, &values)?;
            Ok(RitzDecomposition {
                companion_coeffs_a: a,
                ritz_values: reduced,
                ritz_vectors: vectors,
                fit_residual_e: e,
                used_fallback: true,
            })
        }
        Err(other) => Err(other),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSample {
    pub module_index: usize,
    pub statistics: Vec<f64>,
}

/// Entrywise magnitudes of every Ritz-vector entry, column by column.
pub fn mode_statistics(ritz_vectors: &DMatrix<C64>, _ritz_values: &[C64], module_index: usize) -> ModeSample {
    let statistics = ritz_vectors.iter().map(|z| z.norm()).filter(|v| v.is_finite()).collect();
    ModeSample { module_index, statistics }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeGeneratorConfig {
    pub embed_dim_d: usize,
    pub num_snapshots_k: usize,
}

impl Default for ModeGeneratorConfig {
    fn default() -> Self {
        ModeGeneratorConfig { embed_dim_d: 10, num_snapshots_k: 20 }
    }
}

/// Full KM generator for one module. Degenerate error data yields an empty sample.
pub fn generate_modes(
    errors: &ErrorSequence,
    config: &ModeGeneratorConfig,
) -> Result<(ModeSample, Option<RitzDecomposition>)> {
    let data = embed_error(errors, config.embed_dim_d, config.num_snapshots_k)?;
    match decompose(&data) {
        Ok(dec) => {
            let sample = mode_statistics(&dec.ritz_vectors, &dec.ritz_values, errors.module_index);
            Ok((sample, Some(dec)))
        }
        Err(e) if e.is_degenerate() => {
            debug!("module {}: degenerate error sequence ({e})", errors.module_index);
            Ok((ModeSample { module_index: errors.module_index, statistics: Vec::new() }, None))
        }
        Err(e) => Err(e),
    }
}

/// CSV rows `window,module,re_lambda,im_lambda,mode_mag`, one per Ritz vector entry.
pub fn mode_dump_rows(window: usize, module: usize, dec: &RitzDecomposition) -> Vec<String> {
    let mut rows = Vec::new();
    for (i, lambda) in dec.ritz_values.iter().enumerate() {
        for z in dec.ritz_vectors.column(i).iter() {
            rows.push(format!("{window},{module},{:.12e},{:.12e},{:.12e}", lambda.re, lambda.im, z.norm()));
        }
    }
    rows
}

pub const MODE_DUMP_HEADER: &str = "window,module,re_lambda,im_lambda,mode_mag";
