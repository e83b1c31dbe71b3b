use isc_core::pipeline::{run_detection, run_window};
use isc_core::report::{read_telemetry, residuals_csv, write_report_dir, write_telemetry};
use isc_core::scenario::{run_scenario, simulate_scenario};
use isc_core::{Measurement, PipelineConfig, ScenarioConfig, ScenarioOverrides};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> PipelineConfig {
    PipelineConfig { delay_tau: 6, learn_len_l: 300, predict_len_p: 150, embed_dim_d: 100, num_snapshots_k: 20, ..PipelineConfig::default() }
}

fn noisy(rng: &mut ChaCha8Rng, len: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..len).map(|k| f(k as f64) + rng.random_range(-1e-3..1e-3)).collect()
}

#[test]
fn distinct_module_has_largest_xi() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = cfg.window_len();
    let mut buffer: Vec<Vec<f64>> = (0..4).map(|_| noisy(&mut rng, n, |_| 3.3)).collect();
    // a step in the prediction window that the learning window never saw
    buffer.push(noisy(&mut rng, n, |k| 3.3 + if k >= 320.0 { 0.02 * (0.2 * k).sin() } else { 0.0 }));
    let out = run_window(&buffer, &cfg).unwrap();
    assert_eq!(out.xi.len(), 5);
    let max_healthy = out.xi[..4].iter().copied().fold(0.0, f64::max);
    assert!(out.xi[4] > max_healthy, "{:?}", out.xi);
}

#[test]
fn window_count_matches_stream_length() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [450usize, 599, 600, 1000, 1234] {
        let tel: Vec<Measurement> = (0..n)
            .map(|k| Measurement {
                time: k as f64 * 0.01,
                module_voltages: (0..3).map(|_| 3.3 + rng.random_range(-2e-3..2e-3)).collect(),
                pack_current: 0.0,
            })
            .collect();
        let report = run_detection(&tel, &cfg).unwrap();
        assert_eq!(report.windows.len(), (n - cfg.learn_len_l) / cfg.predict_len_p, "n = {n}");
        assert_eq!(report.windows.len(), cfg.window_count(n));
        for (w, rec) in report.windows.iter().enumerate() {
            assert_eq!(rec.start_index, w * cfg.predict_len_p);
        }
    }
}

#[test]
fn shipped_scenario_yields_fifteen_windows() {
    let run = run_scenario("resting", &ScenarioOverrides::default()).unwrap();
    assert_eq!(run.telemetry.len(), 12000);
    assert_eq!(run.report.windows.len(), 15);
    assert!((run.report.windows.last().unwrap().end_time - 119.99).abs() < 1e-9);
}

#[test]
fn scenario_reports_are_deterministic() {
    let a = run_scenario("charging", &ScenarioOverrides { seed: Some(4), ..Default::default() }).unwrap();
    let b = run_scenario("charging", &ScenarioOverrides { seed: Some(4), ..Default::default() }).unwrap();
    assert_eq!(residuals_csv(&a.report), residuals_csv(&b.report));
    assert_eq!(a.report, b.report);
    let c = run_scenario("charging", &ScenarioOverrides { seed: Some(5), ..Default::default() }).unwrap();
    assert_ne!(a.report.config_hash, c.report.config_hash);
}

#[test]
fn resting_without_fault_default_seed_has_no_flags() {
    let run = run_scenario("resting", &ScenarioOverrides { disable_faults: true, ..Default::default() }).unwrap();
    assert!(run.report.flags.is_empty(), "{:?}", run.report.flags);
}

#[test]
fn telemetry_round_trips_through_csv() {
    let mut cfg = ScenarioConfig::preset("charging").unwrap();
    cfg.duration = 2.0;
    let tel = simulate_scenario(&cfg).unwrap();
    let mut buf = Vec::new();
    write_telemetry(&mut buf, &tel).unwrap();
    let back = read_telemetry(buf.as_slice()).unwrap();
    assert_eq!(back.len(), tel.len());
    for (a, b) in tel.iter().zip(&back) {
        assert!((a.time - b.time).abs() < 1e-6);
        assert!((a.pack_current - b.pack_current).abs() < 1e-6);
        for (x, y) in a.module_voltages.iter().zip(&b.module_voltages) {
            assert!((x - y).abs() <= 5e-10);
        }
    }
    assert!(tel.iter().all(|m| m.pack_current == -25.0));
}

#[test]
fn report_directory_has_every_panel() {
    let run = run_scenario("resting", &ScenarioOverrides { seed: Some(2), ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report_dir(dir.path(), &run.report, &run.config.to_toml().unwrap(), Some(&run.telemetry), Some("resting")).unwrap();
    for f in ["residuals.csv", "events.jsonl", "config_resolved.txt", "figdata_voltages.csv", "figdata_current.csv", "figdata_xi.csv", "figdata_residual.csv"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let residual = std::fs::read_to_string(dir.path().join("figdata_residual.csv")).unwrap();
    assert_eq!(residual.lines().count(), 12001);
    assert!(residual.starts_with("time,r1,r2,r3,r4,r5,J\n"));
    // staircase: zero until the first window closes at 21.99 s
    let row = residual.lines().nth(2000).unwrap();
    assert!(row.starts_with("19.990000,0.000000000000e0"), "{row}");
    let cfg = std::fs::read_to_string(dir.path().join("config_resolved.txt")).unwrap();
    assert!(cfg.contains(&format!("config_hash = {}", run.report.config_hash)));
}
