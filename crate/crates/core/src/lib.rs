//! Internal short circuit detection for Li-ion battery packs from module
//! voltages alone.
//!
//! The pipeline fits a Hankel (delay-embedded) Koopman model per module over a
//! learning window, decomposes the prediction error over the following window
//! into Koopman modes with the companion-matrix Arnoldi variant, and compares
//! the modules' mode distributions through KL divergence. A cumulative
//! residual above a calibrated threshold flags the shorted module.
//!
//! [`battery`] simulates a coupled equivalent-circuit pack with injected
//! shorts to generate test telemetry.

pub mod battery;
pub mod detector;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod modes;
pub mod pipeline;
pub mod report;
pub mod scenario;

pub use battery::{CellParams, CellState, FaultSpec, Measurement, OcvCurve, PackConfig, PackState};
pub use detector::{Flag, ModeDistribution, ResidualState, SampleGrid};
pub use error::{IscError, Result};
pub use linalg::C64;
pub use koopman::{HankelConfig, HankelWindows, KoopmanLinearModel};
pub use modes::{ErrorSequence, KrylovData, ModeGeneratorConfig, ModeSample, RitzDecomposition};
pub use report::TelemetryReader;
pub use pipeline::{DetectionReport, PipelineConfig, StreamingDetector, Threshold, WindowRecord};
pub use scenario::{CurrentProfile, ScenarioConfig, ScenarioOverrides, ScenarioRun};
