//! Shared inputs for the pipeline benchmarks.

use isc_core::scenario::{simulate_scenario, ScenarioConfig};
use isc_core::PipelineConfig;

/// One detection window (`L + P` samples per module) cut from the shipped
/// resting scenario, starting at the window that contains the fault onset.
pub fn resting_window() -> (Vec<Vec<f64>>, PipelineConfig) {
    let cfg = ScenarioConfig::preset("resting").expect("shipped scenario parses");
    let telemetry = simulate_scenario(&cfg).expect("shipped scenario simulates");
    let pipeline = cfg.pipeline.clone();
    let start = 2 * pipeline.predict_len_p;
    let len = pipeline.window_len();
    let modules = telemetry[0].module_voltages.len();
    let buffer = (0..modules)
        .map(|i| telemetry[start..start + len].iter().map(|m| m.module_voltages[i]).collect())
        .collect();
    (buffer, pipeline)
}
