//! Hankel delay embedding of a scalar series and the least-squares linear
//! operator that advances the embedded state by one sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IscError, Result};
use crate::linalg::{self, PINV_REL_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HankelConfig {
    pub delay_tau: usize,
    pub learn_len_l: usize,
    pub predict_len_p: usize,
}

impl Default for HankelConfig {
    fn default() -> Self {
        HankelConfig { delay_tau: 20, learn_len_l: 1500, predict_len_p: 700 }
    }
}

impl HankelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delay_tau < 1 {
            return Err(IscError::InvalidConfig("delay_tau must be at least 1".into()));
        }
        if self.learn_len_l < self.delay_tau + 2 {
            return Err(IscError::InvalidConfig(format!(
                "learning window {} shorter than delay_tau + 2 = {}",
                self.learn_len_l,
                self.delay_tau + 2
            )));
        }
        if self.predict_len_p < 1 {
            return Err(IscError::InvalidConfig("prediction window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.learn_len_l + self.predict_len_p
    }
}

/// Shifted pair of Hankel matrices, each `(tau + 1) x (L - tau - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelWindows {
    pub upsilon_o: DMatrix<f64>,
    pub upsilon_u: DMatrix<f64>,
    /// Embedded state after the last sample, `(y_{L-tau-1}, ..., y_{L-1})`.
    pub last_embedded: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanLinearModel {
    pub kappa: DMatrix<f64>,
    pub last_embedded: DVector<f64>,
}

pub fn build_hankel(series: &[f64], tau: usize) -> Result<HankelWindows> {
    let len = series.len();
    if len < tau + 2 {
        return Err(IscError::WindowTooShort { len, required: tau + 2 });
    }
    let rows = tau + 1;
    let cols = len - tau - 1;
    let upsilon_o = DMatrix::from_fn(rows, cols, |r, c| series[c + r]);
    let upsilon_u = DMatrix::from_fn(rows, cols, |r, c| series[c + 1 + r]);
    let last_embedded = DVector::from_column_slice(&series[len - rows..]);
    Ok(HankelWindows { upsilon_o, upsilon_u, last_embedded })
}

/// `kappa = Upsilon_u * pinv(Upsilon_o)`.
pub fn fit(windows: &HankelWindows) -> Result<KoopmanLinearModel> {
    if windows.upsilon_o.iter().all(|v| *v == 0.0) {
        return Err(IscError::DegenerateData("all-zero embedding window".into()));
    }
    let pinv = linalg::pinv(&windows.upsilon_o, PINV_REL_TOL)?;
    let kappa = &windows.upsilon_u * pinv;
    if kappa.iter().any(|v| !v.is_finite()) {
        return Err(IscError::DegenerateData("non-finite Koopman operator".into()));
    }
    Ok(KoopmanLinearModel { kappa, last_embedded: windows.last_embedded.clone() })
}

impl KoopmanLinearModel {
    pub fn from_series(series: &[f64], tau: usize) -> Result<Self> {
        fit(&build_hankel(series, tau)?)
    }

    pub fn predict(&self, steps: usize) -> Vec<f64> {
        predict(self, steps)
    }

    pub fn spectrum(&self) -> Result<Vec<linalg::C64>> {
        let mut ev = linalg::eigenvalues(&self.kappa)?;
        ev.sort_by(linalg::spectral_order);
        Ok(ev)
    }

    /// `||Upsilon_u - kappa * Upsilon_o||_F`.
    pub fn fit_residual(&self, windows: &HankelWindows) -> f64 {
        linalg::frobenius(&(&windows.upsilon_u - &self.kappa * &windows.upsilon_o))
    }

    pub fn dump(&self) -> String {
        linalg::dump_matrix(&self.kappa)
    }
}

/// Iterate the operator from the final embedded state; the newest slot is the prediction.
pub fn predict(model: &KoopmanLinearModel, steps: usize) -> Vec<f64> {
    let mut state = model.last_embedded.clone();
    let last = state.len() - 1;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        state = &model.kappa * &state;
        out.push(state[last]);
    }
    out
}
