//! Scenario files and the simulate-then-detect driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battery::{self, CellParams, FaultSpec, Measurement, OcvCurve, PackConfig, SECONDS_PER_HOUR};
use crate::error::{IscError, Result};
use crate::pipeline::{self, DetectionReport, PipelineConfig, Threshold};

pub const RESTING_TOML: &str = include_str!("../scenarios/resting.toml");
pub const CHARGING_TOML: &str = include_str!("../scenarios/charging.toml");

/// Pack current as a function of time. Positive is discharge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case")]
pub enum CurrentProfile {
    Rest,
    ConstantCurrent { amps: f64 },
}

impl CurrentProfile {
    pub fn current_at(&self, _time: f64) -> f64 {
        match self {
            CurrentProfile::Rest => 0.0,
            CurrentProfile::ConstantCurrent { amps } => *amps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSection {
    pub modules: usize,
    pub series: usize,
    pub capacity_ah: f64,
    pub capacitance_f: f64,
    pub ohmic_r: f64,
    pub polar_r: f64,
    pub param_uncertainty: f64,
    pub noise_amplitude: f64,
    pub sample_rate_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocv: Option<OcvCurve>,
}

impl Default for PackSection {
    fn default() -> Self {
        let p = CellParams::lfp_reference();
        PackSection {
            modules: 5,
            series: 3,
            capacity_ah: p.capacity_q / SECONDS_PER_HOUR,
            capacitance_f: p.polar_capacitance_c,
            ohmic_r: p.ohmic_r,
            polar_r: p.polar_r_c,
            param_uncertainty: 0.05,
            noise_amplitude: 2e-3,
            sample_rate_hz: 100.0,
            ocv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub module: usize,
    pub cell: usize,
    pub r_short: f64,
    pub onset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub initial_soc: f64,
    pub pack: PackSection,
    pub current: CurrentProfile,
    #[serde(default)]
    pub faults: Vec<FaultSection>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IscError::Parse(e.to_string()))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resting" => ScenarioConfig::from_toml(RESTING_TOML),
            "charging" => ScenarioConfig::from_toml(CHARGING_TOML),
            other => Err(IscError::UnknownScenario(other.to_string())),
        }
    }

    pub fn pack_config(&self) -> Result<PackConfig> {
        let p = &self.pack;
        if !(p.sample_rate_hz.is_finite() && p.sample_rate_hz > 0.0) {
            return Err(IscError::InvalidConfig("sample_rate_hz must be positive".into()));
        }
        let cfg = PackConfig {
            modules_m: p.modules,
            series_n: p.series,
            nominal_params: CellParams::new(p.capacity_ah * SECONDS_PER_HOUR, p.capacitance_f, p.ohmic_r, p.polar_r)?,
            param_uncertainty: p.param_uncertainty,
            ocv: p.ocv.clone().unwrap_or_else(OcvCurve::lfp_default),
            noise_amplitude: p.noise_amplitude,
            dt: 1.0 / p.sample_rate_hz,
            rng_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fault_specs(&self) -> Vec<FaultSpec> {
        self.faults
            .iter()
            .map(|f| FaultSpec { module_index: f.module, cell_index: f.cell, r_short: f.r_short, onset_time: f.onset })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let pack = self.pack_config()?;
        for f in self.fault_specs() {
            f.validate(&pack)?;
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(IscError::InvalidConfig("duration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return Err(IscError::InvalidConfig("initial_soc must lie in [0, 1]".into()));
        }
        self.pipeline.validate()
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.pack.sample_rate_hz).round() as usize
    }
}

/// Command-line style adjustments applied on top of a scenario file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioOverrides {
    pub seed: Option<u64>,
    pub threshold: Option<Threshold>,
    pub learn_len_l: Option<usize>,
    pub predict_len_p: Option<usize>,
    pub duration: Option<f64>,
    pub disable_faults: bool,
}

impl ScenarioOverrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.pipeline.rng_seed = cfg.seed;
        if let Some(t) = self.threshold {
            cfg.pipeline.threshold = t;
        }
        if let Some(l) = self.learn_len_l {
            cfg.pipeline.learn_len_l = l;
        }
        if let Some(p) = self.predict_len_p {
            cfg.pipeline.predict_len_p = p;
        }
        if let Some(d) = self.duration {
            cfg.duration = d;
        }
        if self.disable_faults {
            cfg.faults.clear();
        }
        cfg.validate()
    }
}

/// Simulate `samples` measurements starting at t = 0, one per `dt`.
pub fn simulate(
    config: &PackConfig,
    profile: &CurrentProfile,
    faults: &[FaultSpec],
    initial_soc: f64,
    samples: usize,
) -> Result<Vec<Measurement>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut state = battery::build_pack(config, initial_soc, &mut rng)?;
    state.pack_current = profile.current_at(0.0);
    let mut out = Vec::with_capacity(samples);
    for k in 0..samples {
        let mut m = battery::measure(&state, config, &mut rng)?;
        // Re-derive the timestamp from the sample index to avoid accumulated drift.
        m.time = k as f64 * config.dt;
        out.push(m);
        let current = profile.current_at(state.time);
        state = battery::step(&state, config, current, faults)?;
    }
    Ok(out)
}

pub fn simulate_scenario(cfg: &ScenarioConfig) -> Result<Vec<Measurement>> {
    simulate(&cfg.pack_config()?, &cfg.current, &cfg.fault_specs(), cfg.initial_soc, cfg.sample_count())
}

#[derive(Clone, Debug)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub telemetry: Vec<Measurement>,
    pub report: DetectionReport,
}

pub fn run_config(cfg: ScenarioConfig, keep_modes: bool) -> Result<ScenarioRun> {
    let telemetry = simulate_scenario(&cfg)?;
    let mut report = pipeline::run_detection_with(&telemetry, &cfg.pipeline, keep_modes)?;
    report.config_hash = pipeline::config_hash(&cfg.to_toml()?);
    Ok(ScenarioRun { config: cfg, telemetry, report })
}

/// Run one of the shipped scenarios end to end.
pub fn run_scenario(name: &str, overrides: &ScenarioOverrides) -> Result<ScenarioRun> {
    let mut cfg = ScenarioConfig::preset(name)?;
    overrides.apply(&mut cfg)?;
    run_config(cfg, false)
}
