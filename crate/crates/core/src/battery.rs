//! Coupled cell-level equivalent circuit model of an `m`-parallel / `n`-series pack.
//!
//! Each cell is an OCV source behind an ohmic resistance and a single RC
//! polarization branch. Modules (strings of `n` cells) are connected in
//! parallel and share the pack terminal voltage. Positive current is
//! discharge.
//!
//! An internal short is an extra leakage current `V_cell / r_short` drawn
//! through the shorted cell. It flows inside the cell, so it changes the
//! cell's charge, polarization and measured terminal voltage but not the
//! branch currents that Kirchhoff's law distributes between modules.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IscError, Result};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Capacity in ampere-seconds.
    pub capacity_q: f64,
    /// Polarization capacitance in farads.
    pub polar_capacitance_c: f64,
    /// Ohmic resistance in ohms.
    pub ohmic_r: f64,
    /// Polarization resistance in ohms.
    pub polar_r_c: f64,
}

impl CellParams {
    pub fn new(capacity_q: f64, polar_capacitance_c: f64, ohmic_r: f64, polar_r_c: f64) -> Result<Self> {
        let p = CellParams { capacity_q, polar_capacitance_c, ohmic_r, polar_r_c };
        p.validate()?;
        Ok(p)
    }

    /// LiFePO4 cell: 5 Ah, 4.3 kF, 3.8 mOhm, 4 mOhm.
    pub fn lfp_reference() -> Self {
        CellParams {
            capacity_q: 5.0 * SECONDS_PER_HOUR,
            polar_capacitance_c: 4.3e3,
            ohmic_r: 3.8e-3,
            polar_r_c: 4.0e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.capacity_q, self.polar_capacitance_c, self.ohmic_r, self.polar_r_c];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(IscError::InvalidConfig(format!("cell parameters must be strictly positive: {self:?}")))
        }
    }

    /// RC time constant of the polarization branch.
    pub fn time_constant(&self) -> f64 {
        self.polar_r_c * self.polar_capacitance_c
    }

    fn scaled(&self, factors: [f64; 4]) -> Self {
        CellParams {
            capacity_q: self.capacity_q * factors[0],
            polar_capacitance_c: self.polar_capacitance_c * factors[1],
            ohmic_r: self.ohmic_r * factors[2],
            polar_r_c: self.polar_r_c * factors[3],
        }
    }
}

/// Piecewise-linear open-circuit voltage as a function of state of charge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct OcvCurve {
    breakpoints: Vec<(f64, f64)>,
}

impl OcvCurve {
    /// Breakpoints are `(soc, ocv)`; soc must be strictly increasing from 0 to 1
    /// and ocv non-decreasing.
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(IscError::InvalidConfig("OCV curve needs at least two breakpoints".into()));
        }
        if breakpoints.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
            return Err(IscError::InvalidConfig("OCV curve has non-finite breakpoints".into()));
        }
        let first = breakpoints[0].0;
        let last = breakpoints[breakpoints.len() - 1].0;
        if first != 0.0 || last != 1.0 {
            return Err(IscError::InvalidConfig(format!(
                "OCV curve must span soc 0..1, got {first}..{last}"
            )));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(IscError::InvalidConfig("OCV soc breakpoints must be strictly increasing".into()));
            }
            if w[1].1 < w[0].1 {
                return Err(IscError::InvalidConfig("OCV must be non-decreasing in soc".into()));
            }
        }
        Ok(OcvCurve { breakpoints })
    }

    /// LiFePO4-like table: steep knees at both ends and a flat plateau near 3.3 V.
    pub fn lfp_default() -> Self {
        OcvCurve::new(vec![
            (0.00, 2.50),
            (0.05, 3.00),
            (0.10, 3.18),
            (0.20, 3.25),
            (0.30, 3.28),
            (0.40, 3.295),
            (0.50, 3.305),
            (0.60, 3.315),
            (0.70, 3.325),
            (0.80, 3.335),
            (0.90, 3.36),
            (0.95, 3.42),
            (1.00, 3.60),
        ])
        .expect("shipped OCV table is valid")
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn lookup(&self, soc: f64) -> f64 {
        ocv_lookup(self, soc)
    }
}

impl TryFrom<Vec<(f64, f64)>> for OcvCurve {
    type Error = IscError;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        OcvCurve::new(v)
    }
}

impl From<OcvCurve> for Vec<(f64, f64)> {
    fn from(c: OcvCurve) -> Self {
        c.breakpoints
    }
}

/// Linear interpolation over the curve; soc is clamped to [0, 1] first.
pub fn ocv_lookup(curve: &OcvCurve, soc: f64) -> f64 {
    let bp = &curve.breakpoints;
    let s = soc.clamp(0.0, 1.0);
    let idx = bp.partition_point(|(x, _)| *x <= s);
    if idx == 0 {
        return bp[0].1;
    }
    if idx >= bp.len() {
        return bp[bp.len() - 1].1;
    }
    let (s0, v0) = bp[idx - 1];
    let (s1, v1) = bp[idx];
    v0 + (v1 - v0) * (s - s0) / (s1 - s0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub soc: f64,
    /// Polarization voltage in volts.
    pub v_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackConfig {
    pub modules_m: usize,
    pub series_n: usize,
    pub nominal_params: CellParams,
    /// Multiplicative half-width of the uniform per-cell parameter spread.
    pub param_uncertainty: f64,
    pub ocv: OcvCurve,
    /// Half-width of the uniform measurement noise, volts.
    pub noise_amplitude: f64,
    pub dt: f64,
    pub rng_seed: u64,
}

impl Default for PackConfig {
    /// 3S5P pack of reference LFP cells, 5% spread, 2 mV noise, 100 Hz.
    fn default() -> Self {
        PackConfig {
            modules_m: 5,
            series_n: 3,
            nominal_params: CellParams::lfp_reference(),
            param_uncertainty: 0.05,
            ocv: OcvCurve::lfp_default(),
            noise_amplitude: 2e-3,
            dt: 0.01,
            rng_seed: 1,
        }
    }
}

impl PackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modules_m < 2 {
            return Err(IscError::InvalidConfig("pack needs at least two parallel modules".into()));
        }
        if self.series_n < 1 {
            return Err(IscError::InvalidConfig("modules need at least one series cell".into()));
        }
        self.nominal_params.validate()?;
        if !(0.0..1.0).contains(&self.param_uncertainty) {
            return Err(IscError::InvalidConfig("param_uncertainty must lie in [0, 1)".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(IscError::InvalidConfig("dt must be positive".into()));
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(IscError::InvalidConfig("noise_amplitude must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.modules_m * self.series_n
    }
}

/// Internal short on one cell. Indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub module_index: usize,
    pub cell_index: usize,
    pub r_short: f64,
    pub onset_time: f64,
}

impl FaultSpec {
    pub fn validate(&self, config: &PackConfig) -> Result<()> {
        if self.module_index == 0 || self.module_index > config.modules_m {
            return Err(IscError::InvalidConfig(format!("fault module {} out of range", self.module_index)));
        }
        if self.cell_index == 0 || self.cell_index > config.series_n {
            return Err(IscError::InvalidConfig(format!("fault cell {} out of range", self.cell_index)));
        }
        if !(self.r_short.is_finite() && self.r_short > 0.0) {
            return Err(IscError::InvalidConfig("r_short must be positive".into()));
        }
        if !(self.onset_time.is_finite() && self.onset_time >= 0.0) {
            return Err(IscError::InvalidConfig("onset_time must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, time: f64) -> bool {
        self.onset_time <= time
    }
}

/// Full pack state. Cell arrays are stored module-major: entry `i * n + j`
/// is cell `j` of module `i` (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackState {
    pub modules_m: usize,
    pub series_n: usize,
    pub cells: Vec<CellState>,
    pub per_cell_params: Vec<CellParams>,
    pub time: f64,
    /// Pack current applied over the most recent step.
    pub pack_current: f64,
    /// Internal short current applied to each cell over the most recent step.
    pub short_currents: Vec<f64>,
}

impl PackState {
    pub fn cell(&self, module: usize, cell: usize) -> &CellState {
        &self.cells[module * self.series_n + cell]
    }

    pub fn params(&self, module: usize, cell: usize) -> &CellParams {
        &self.per_cell_params[module * self.series_n + cell]
    }

    /// Charge stored in each cell, `Q * soc`, module-major.
    pub fn stored_charge(&self) -> Vec<f64> {
        self.cells.iter().zip(&self.per_cell_params).map(|(c, p)| c.soc * p.capacity_q).collect()
    }

    /// Reorder modules: module `i` of the result is module `perm[i]` of `self`.
    pub fn permute_modules(&self, perm: &[usize]) -> PackState {
        let n = self.series_n;
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..n {
                out.cells[dst * n + j] = self.cells[src * n + j];
                out.per_cell_params[dst * n + j] = self.per_cell_params[src * n + j];
                out.short_currents[dst * n + j] = self.short_currents[src * n + j];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub time: f64,
    pub module_voltages: Vec<f64>,
    pub pack_current: f64,
}

/// Module open-circuit sums `E^i` and series resistances `R_s^i`.
fn module_sources(state: &PackState, ocv: &OcvCurve) -> (Vec<f64>, Vec<f64>) {
    let n = state.series_n;
    (0..state.modules_m)
        .map(|i| {
            let mut e = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                let c = state.cell(i, j);
                let p = state.params(i, j);
                e += ocv_lookup(ocv, c.soc) - c.v_c;
                r += p.ohmic_r;
            }
            (e, r)
        })
        .unzip()
}

/// Kirchhoff split of the pack current between parallel modules.
///
/// Returns the per-module branch currents and the shared terminal voltage.
pub fn solve_module_currents(state: &PackState, ocv: &OcvCurve, pack_current: f64) -> Result<(Vec<f64>, f64)> {
    let (e, r) = module_sources(state, ocv);
    if e.iter().any(|v| !v.is_finite()) {
        return Err(IscError::SimulationFault {
            time: state.time,
            reason: "non-finite module open-circuit voltage".into(),
        });
    }
    if r.iter().any(|v| !(*v > 0.0)) {
        return Err(IscError::SimulationFault {
            time: state.time,
            reason: "module series resistance must be positive".into(),
        });
    }
    let conductance: f64 = r.iter().map(|ri| 1.0 / ri).sum();
    let weighted: f64 = e.iter().zip(&r).map(|(ei, ri)| ei / ri).sum();
    let v_t = (weighted - pack_current) / conductance;
    let currents = e.iter().zip(&r).map(|(ei, ri)| (ei - v_t) / ri).collect();
    Ok((currents, v_t))
}

/// Cell terminal voltages for the given branch currents and the state's short currents.
fn cell_terminal_voltages(state: &PackState, ocv: &OcvCurve, module_currents: &[f64]) -> Vec<f64> {
    let n = state.series_n;
    let mut out = Vec::with_capacity(state.cells.len());
    for i in 0..state.modules_m {
        for j in 0..n {
            let idx = i * n + j;
            let c = &state.cells[idx];
            let p = &state.per_cell_params[idx];
            let current = module_currents[i] + state.short_currents[idx];
            out.push(ocv_lookup(ocv, c.soc) - c.v_c - current * p.ohmic_r);
        }
    }
    out
}

/// Advance the pack by one forward-Euler step of `config.dt`.
pub fn step(state: &PackState, config: &PackConfig, pack_current: f64, faults: &[FaultSpec]) -> Result<PackState> {
    let n = state.series_n;
    let dt = config.dt;

    // Short currents use the terminal voltage of the previous sample.
    let mut short = vec![0.0; state.cells.len()];
    let active: Vec<&FaultSpec> = faults.iter().filter(|f| f.is_active(state.time)).collect();
    if !active.is_empty() {
        let (prev_currents, _) = solve_module_currents(state, &config.ocv, state.pack_current)?;
        let v_prev = cell_terminal_voltages(state, &config.ocv, &prev_currents);
        for f in active {
            let idx = (f.module_index - 1) * n + (f.cell_index - 1);
            short[idx] += v_prev[idx] / f.r_short;
        }
    }

    let (module_currents, _) = solve_module_currents(state, &config.ocv, pack_current)?;

    let mut next = state.clone();
    for i in 0..state.modules_m {
        for j in 0..n {
            let idx = i * n + j;
            let p = &state.per_cell_params[idx];
            let c = &state.cells[idx];
            let i_eff = module_currents[i] + short[idx];
            let mut soc = c.soc - i_eff * dt / p.capacity_q;
            let v_c = c.v_c + dt * (i_eff / p.polar_capacitance_c - c.v_c / (p.polar_r_c * p.polar_capacitance_c));
            if !(soc.is_finite() && v_c.is_finite()) {
                return Err(IscError::SimulationFault {
                    time: state.time,
                    reason: format!("non-finite state in module {} cell {}", i + 1, j + 1),
                });
            }
            if !(0.0..=1.0).contains(&soc) {
                warn!("soc of module {} cell {} clamped from {soc:.6} at t = {:.2} s", i + 1, j + 1, state.time);
                soc = soc.clamp(0.0, 1.0);
            }
            next.cells[idx] = CellState { soc, v_c };
        }
    }
    next.time = state.time + dt;
    next.pack_current = pack_current;
    next.short_currents = short;
    Ok(next)
}

/// Noise-free module voltages `V^i = sum_j (OCV_ij - V_c,ij - I_ij R_ij)`.
pub fn module_voltages(state: &PackState, ocv: &OcvCurve) -> Result<Vec<f64>> {
    let (currents, _) = solve_module_currents(state, ocv, state.pack_current)?;
    let cells = cell_terminal_voltages(state, ocv, &currents);
    Ok(cells.chunks(state.series_n).map(|m| m.iter().sum()).collect())
}

/// Sample the module voltages with additive noise uniform on `±noise_amplitude`.
pub fn measure<R: Rng + ?Sized>(state: &PackState, config: &PackConfig, rng: &mut R) -> Result<Measurement> {
    let mut v = module_voltages(state, &config.ocv)?;
    let a = config.noise_amplitude;
    if a > 0.0 {
        for x in &mut v {
            *x += rng.random_range(-a..=a);
        }
    }
    Ok(Measurement { time: state.time, module_voltages: v, pack_current: state.pack_current })
}

/// Draw every cell's parameters uniformly within `±param_uncertainty` of nominal.
pub fn build_pack<R: Rng + ?Sized>(config: &PackConfig, initial_soc: f64, rng: &mut R) -> Result<PackState> {
    config.validate()?;
    if !(0.0..=1.0).contains(&initial_soc) {
        return Err(IscError::InvalidConfig(format!("initial soc {initial_soc} outside [0, 1]")));
    }
    let u = config.param_uncertainty;
    let count = config.cell_count();
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let mut factors = [1.0; 4];
        for f in &mut factors {
            *f = 1.0 + u * rng.random_range(-1.0..=1.0);
        }
        params.push(config.nominal_params.scaled(factors));
    }
    Ok(PackState {
        modules_m: config.modules_m,
        series_n: config.series_n,
        cells: vec![CellState { soc: initial_soc, v_c: 0.0 }; count],
        per_cell_params: params,
        time: 0.0,
        pack_current: 0.0,
        short_currents: vec![0.0; count],
    })
}
