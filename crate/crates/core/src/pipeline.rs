//! Sliding-window detection loop.
//!
//! Each window holds `L + P` samples per module. Per module: fit the Hankel
//! Koopman model on the first `L` samples, predict `P`, and decompose the
//! prediction error into Koopman modes. The mode statistics of all modules
//! feed the detector, which updates the residual once per window. The window
//! then slides forward by `P` samples.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::battery::Measurement;
use crate::detector::{self, Flag, ModeDistribution, ResidualState, SampleGrid};
use crate::error::{IscError, Result};
use crate::koopman::{self, HankelConfig};
use crate::modes::{self, ModeGeneratorConfig, ModeSample, RitzDecomposition};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Calibrate from the first fault-free windows.
    Auto,
    Fixed(f64),
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Auto => write!(f, "auto"),
            Threshold::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Threshold {
    type Err = IscError;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("auto") {
            return Ok(Threshold::Auto);
        }
        let v: f64 = t.parse().map_err(|_| IscError::Parse(format!("threshold '{s}' is neither 'auto' nor a number")))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(IscError::InvalidConfig("fixed threshold must be positive".into()));
        }
        Ok(Threshold::Fixed(v))
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Auto => s.serialize_str("auto"),
            Threshold::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold::Fixed(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub delay_tau: usize,
    pub learn_len_l: usize,
    pub predict_len_p: usize,
    pub embed_dim_d: usize,
    pub num_snapshots_k: usize,
    pub grid_n_z: usize,
    pub threshold: Threshold,
    pub calibration_windows: usize,
    pub safety_factor: f64,
    /// Stop processing at the first flag instead of at the end of the stream.
    pub stop_at_first_flag: bool,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            delay_tau: 20,
            learn_len_l: 1500,
            predict_len_p: 700,
            embed_dim_d: 680,
            num_snapshots_k: 20,
            grid_n_z: detector::DEFAULT_GRID_POINTS,
            threshold: Threshold::Auto,
            calibration_windows: 2,
            safety_factor: 5.0,
            stop_at_first_flag: false,
            rng_seed: 1,
        }
    }
}

impl PipelineConfig {
    pub fn hankel(&self) -> HankelConfig {
        HankelConfig { delay_tau: self.delay_tau, learn_len_l: self.learn_len_l, predict_len_p: self.predict_len_p }
    }

    pub fn mode_generator(&self) -> ModeGeneratorConfig {
        ModeGeneratorConfig { embed_dim_d: self.embed_dim_d, num_snapshots_k: self.num_snapshots_k }
    }

    pub fn window_len(&self) -> usize {
        self.learn_len_l + self.predict_len_p
    }

    pub fn validate(&self) -> Result<()> {
        self.hankel().validate()?;
        if self.embed_dim_d == 0 || self.num_snapshots_k == 0 {
            return Err(IscError::InvalidConfig("embed_dim_d and num_snapshots_k must be positive".into()));
        }
        if self.embed_dim_d + self.num_snapshots_k > self.predict_len_p {
            return Err(IscError::InvalidConfig(format!(
                "embed_dim_d + num_snapshots_k = {} exceeds the prediction window {}",
                self.embed_dim_d + self.num_snapshots_k,
                self.predict_len_p
            )));
        }
        if self.grid_n_z < 2 {
            return Err(IscError::InvalidConfig("grid_n_z must be at least 2".into()));
        }
        if self.threshold == Threshold::Auto && self.calibration_windows < 1 {
            return Err(IscError::InvalidConfig("auto threshold needs at least one calibration window".into()));
        }
        if !(self.safety_factor.is_finite() && self.safety_factor > 0.0) {
            return Err(IscError::InvalidConfig("safety_factor must be positive".into()));
        }
        Ok(())
    }

    /// Number of windows an `n`-sample stream yields.
    pub fn window_count(&self, n: usize) -> usize {
        if n < self.window_len() {
            0
        } else {
            (n - self.learn_len_l) / self.predict_len_p
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleDiagnostics {
    pub module_index: usize,
    /// Fit or decomposition failed on degenerate data; a uniform distribution stood in.
    pub degenerate: bool,
    pub used_fallback: bool,
    pub prediction_rmse: f64,
    pub mode_count: usize,
}

#[derive(Clone, Debug)]
pub struct WindowOutcome {
    pub xi: Vec<f64>,
    pub diagnostics: Vec<ModuleDiagnostics>,
    pub samples: Vec<ModeSample>,
    pub decompositions: Vec<Option<RitzDecomposition>>,
}

struct ModuleResult {
    sample: ModeSample,
    decomposition: Option<RitzDecomposition>,
    diagnostics: ModuleDiagnostics,
}

fn process_module(module_index: usize, series: &[f64], config: &PipelineConfig) -> Result<ModuleResult> {
    let l = config.learn_len_l;
    let p = config.predict_len_p;
    let degenerate = |rmse: f64| ModuleResult {
        sample: ModeSample { module_index, statistics: Vec::new() },
        decomposition: None,
        diagnostics: ModuleDiagnostics { module_index, degenerate: true, used_fallback: false, prediction_rmse: rmse, mode_count: 0 },
    };
    let windows = koopman::build_hankel(&series[..l], config.delay_tau)?;
    let model = match koopman::fit(&windows) {
        Ok(m) => m,
        Err(e) if e.is_degenerate() => {
            debug!("module {module_index}: {e}");
            return Ok(degenerate(f64::NAN));
        }
        Err(e) => return Err(e),
    };
    let predicted = model.predict(p);
    let errors = modes::error_sequence(&series[l..l + p], &predicted, module_index)?;
    let rmse = (errors.values.iter().map(|e| e * e).sum::<f64>() / p as f64).sqrt();
    let (sample, decomposition) = modes::generate_modes(&errors, &config.mode_generator())?;
    if decomposition.is_none() {
        return Ok(degenerate(rmse));
    }
    let used_fallback = decomposition.as_ref().is_some_and(|d| d.used_fallback);
    let mode_count = decomposition.as_ref().map_or(0, |d| d.ritz_values.len());
    Ok(ModuleResult {
        sample,
        decomposition,
        diagnostics: ModuleDiagnostics { module_index, degenerate: false, used_fallback, prediction_rmse: rmse, mode_count },
    })
}

/// Process one `L + P` window for every module and return the average distances.
pub fn run_window(buffer: &[Vec<f64>], config: &PipelineConfig) -> Result<WindowOutcome> {
    let m = buffer.len();
    if m < 2 {
        return Err(IscError::InvalidConfig("detection needs at least two modules".into()));
    }
    let need = config.window_len();
    for s in buffer {
        if s.len() < need {
            return Err(IscError::WindowTooShort { len: s.len(), required: need });
        }
    }
    let results: Vec<ModuleResult> = buffer
        .par_iter()
        .enumerate()
        .map(|(i, s)| process_module(i + 1, &s[..need], config))
        .collect::<Result<_>>()?;

    let samples: Vec<ModeSample> = results.iter().map(|r| r.sample.clone()).collect();
    let grid = SampleGrid::from_samples(&samples, config.grid_n_z)?;
    let distributions: Vec<ModeDistribution> =
        samples.par_iter().map(|s| detector::estimate_density(s, &grid)).collect();
    let xi = detector::average_distances(&distributions)?;

    let mut diagnostics = Vec::with_capacity(m);
    let mut decompositions = Vec::with_capacity(m);
    for r in results {
        diagnostics.push(r.diagnostics);
        decompositions.push(r.decomposition);
    }
    Ok(WindowOutcome { xi, diagnostics, samples, decompositions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window: usize,
    /// Index of the first sample of the learning window.
    pub start_index: usize,
    pub end_time: f64,
    pub xi: Vec<f64>,
    pub cumulative_xi: Vec<f64>,
    pub residual_r: Vec<f64>,
    pub diagnostics: Vec<ModuleDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub modules: usize,
    pub samples_processed: usize,
    pub threshold: Option<f64>,
    pub windows: Vec<WindowRecord>,
    pub flags: Vec<Flag>,
    pub stopped_early: bool,
    /// Mode dump rows (`window,module,re_lambda,im_lambda,mode_mag`), when requested.
    #[serde(skip)]
    pub mode_dump: Vec<String>,
}

impl DetectionReport {
    pub fn flagged_modules(&self) -> Vec<usize> {
        self.flags.iter().map(|f| f.module_index).collect()
    }

    pub fn first_flag(&self, module_index: usize) -> Option<&Flag> {
        self.flags.iter().find(|f| f.module_index == module_index)
    }
}

/// FNV-1a over the resolved configuration text.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Incremental detector fed one measurement at a time.
pub struct StreamingDetector {
    config: PipelineConfig,
    modules: usize,
    buffer: Vec<VecDeque<f64>>,
    last_time: f64,
    seen: usize,
    state: ResidualState,
    calibration_trace: Vec<Vec<f64>>,
    threshold: Option<f64>,
    windows: Vec<WindowRecord>,
    keep_modes: bool,
    mode_dump: Vec<String>,
    done: bool,
}

impl StreamingDetector {
    pub fn new(config: PipelineConfig, modules: usize) -> Result<Self> {
        config.validate()?;
        if modules < 2 {
            return Err(IscError::InvalidConfig("detection needs at least two modules".into()));
        }
        let threshold = match config.threshold {
            Threshold::Fixed(v) => Some(v),
            Threshold::Auto => None,
        };
        let cap = config.window_len();
        Ok(StreamingDetector {
            modules,
            buffer: vec![VecDeque::with_capacity(cap); modules],
            last_time: f64::NEG_INFINITY,
            seen: 0,
            state: ResidualState::new(modules, threshold.unwrap_or(f64::INFINITY)),
            calibration_trace: Vec::new(),
            threshold,
            windows: Vec::new(),
            keep_modes: false,
            mode_dump: Vec::new(),
            done: false,
            config,
        })
    }

    /// Retain per-window Ritz values and mode magnitudes for the debug dump.
    pub fn keep_modes(mut self, keep: bool) -> Self {
        self.keep_modes = keep;
        self
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn residual_state(&self) -> &ResidualState {
        &self.state
    }

    /// Feed one sample; returns the flags raised by any window it completes.
    pub fn push(&mut self, sample: &Measurement) -> Result<Vec<Flag>> {
        if self.done {
            return Ok(Vec::new());
        }
        if sample.module_voltages.len() != self.modules {
            return Err(IscError::LengthMismatch { expected: self.modules, got: sample.module_voltages.len() });
        }
        if sample.module_voltages.iter().any(|v| !v.is_finite()) {
            return Err(IscError::DegenerateData(format!("non-finite voltage at t = {}", sample.time)));
        }
        let need = self.config.window_len();
        for (buf, v) in self.buffer.iter_mut().zip(&sample.module_voltages) {
            if buf.len() == need {
                buf.pop_front();
            }
            buf.push_back(*v);
        }
        self.seen += 1;
        self.last_time = sample.time;
        if self.seen >= need && (self.seen - need).is_multiple_of(self.config.predict_len_p) {
            return self.close_window();
        }
        Ok(Vec::new())
    }

    fn close_window(&mut self) -> Result<Vec<Flag>> {
        let window = self.windows.len();
        let series: Vec<Vec<f64>> = self.buffer.iter().map(|b| b.iter().copied().collect()).collect();
        let outcome = run_window(&series, &self.config)?;
        if self.keep_modes {
            for (i, dec) in outcome.decompositions.iter().enumerate() {
                if let Some(d) = dec {
                    self.mode_dump.extend(modes::mode_dump_rows(window, i + 1, d));
                }
            }
        }
        detector::update_residual(&mut self.state, &outcome.xi)?;
        self.windows.push(WindowRecord {
            window,
            start_index: self.seen - self.config.window_len(),
            end_time: self.last_time,
            xi: self.state.xi_history.last().cloned().unwrap_or_default(),
            cumulative_xi: self.state.cumulative_xi.clone(),
            residual_r: self.state.residual_r.clone(),
            diagnostics: outcome.diagnostics,
        });

        if self.threshold.is_none() {
            self.calibration_trace.push(self.state.residual_r.clone());
            if self.calibration_trace.len() >= self.config.calibration_windows {
                let j = detector::calibrate_threshold(&self.calibration_trace, self.config.safety_factor)?;
                info!("calibrated threshold J = {j:.6e} from {} windows", self.calibration_trace.len());
                self.threshold = Some(j);
                self.state.threshold_j = j;
            }
            return Ok(Vec::new());
        }

        let fresh = detector::check_threshold(&mut self.state, window, self.last_time);
        for f in &fresh {
            info!("ISC flag: module {} at t = {:.2} s (r = {:.4e}, J = {:.4e})", f.module_index, f.time, f.r_value, f.threshold);
        }
        if !fresh.is_empty() && self.config.stop_at_first_flag {
            self.done = true;
        }
        Ok(fresh)
    }

    pub fn finish(self, config_text: &str) -> Result<DetectionReport> {
        if self.windows.is_empty() {
            return Err(IscError::InsufficientData(format!(
                "stream of {} samples is shorter than one window of {}",
                self.seen,
                self.config.window_len()
            )));
        }
        Ok(DetectionReport {
            config_hash: config_hash(config_text),
            modules: self.modules,
            samples_processed: self.seen,
            threshold: self.threshold,
            windows: self.windows,
            flags: self.state.flags,
            stopped_early: self.done,
            mode_dump: self.mode_dump,
            config: self.config,
        })
    }
}

/// Run the detector over a full telemetry stream.
pub fn run_detection<'a, I>(telemetry: I, config: &PipelineConfig) -> Result<DetectionReport>
where
    I: IntoIterator<Item = &'a Measurement>,
{
    run_detection_with(telemetry, config, false)
}

pub fn run_detection_with<'a, I>(telemetry: I, config: &PipelineConfig, keep_modes: bool) -> Result<DetectionReport>
where
    I: IntoIterator<Item = &'a Measurement>,
{
    let mut iter = telemetry.into_iter().peekable();
    let modules = iter
        .peek()
        .map(|m| m.module_voltages.len())
        .ok_or_else(|| IscError::InsufficientData("empty telemetry stream".into()))?;
    let mut det = StreamingDetector::new(config.clone(), modules)?.keep_modes(keep_modes);
    for m in iter {
        det.push(m)?;
        if det.is_done() {
            break;
        }
    }
    let text = toml::to_string(config).map_err(|e| IscError::Parse(e.to_string()))?;
    det.finish(&text)
}

/// Samples the reader may run ahead of the detector, in windows of `P`.
pub const INGEST_BUFFER_WINDOWS: usize = 4;

/// Run detection with ingestion on its own thread. The reader blocks once
/// it is [`INGEST_BUFFER_WINDOWS`] prediction windows ahead.
pub fn run_detection_buffered<I>(telemetry: I, config: &PipelineConfig, keep_modes: bool) -> Result<DetectionReport>
where
    I: Iterator<Item = Result<Measurement>> + Send,
{
    config.validate()?;
    let (tx, rx) = mpsc::sync_channel::<Result<Measurement>>(INGEST_BUFFER_WINDOWS * config.predict_len_p);
    thread::scope(|scope| {
        scope.spawn(move || {
            for item in telemetry {
                let stop = item.is_err();
                // A closed receiver means the detector stopped early.
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        });
        let first = rx.recv().map_err(|_| IscError::InsufficientData("empty telemetry stream".into()))??;
        let mut det = StreamingDetector::new(config.clone(), first.module_voltages.len())?.keep_modes(keep_modes);
        det.push(&first)?;
        while !det.is_done() {
            match rx.recv() {
                Ok(item) => {
                    det.push(&item?)?;
                }
                Err(_) => break,
            }
        }
        drop(rx);
        let text = toml::to_string(config).map_err(|e| IscError::Parse(e.to_string()))?;
        det.finish(&text)
    })
}
