use std::fs::{self, File};
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use isc_core::pipeline::{self, DetectionReport};
use isc_core::report::{self, TelemetryReader};
use isc_core::scenario::{self, ScenarioConfig};
use isc_core::{IscError, PipelineConfig, ScenarioOverrides, Threshold};

#[derive(Parser)]
#[command(name = "isc", version, about = "Battery pack simulation and internal short circuit detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its telemetry CSV.
    Simulate {
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long)]
        seed: Option<u64>,
        /// Remove every injected fault.
        #[arg(long)]
        no_faults: bool,
        /// Output CSV file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run detection on a telemetry CSV and write a report directory.
    Detect {
        /// Telemetry CSV (`time,I,V1,...,Vm`); `-` reads stdin.
        input: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Also write modes.csv with every window's Ritz values and mode magnitudes.
        #[arg(long)]
        dump_modes: bool,
    },
    /// Simulate a shipped scenario and run detection on it.
    Scenario {
        name: ScenarioName,
        /// Scenario TOML used in place of the shipped preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threshold: Option<Threshold>,
        #[arg(long)]
        learn: Option<usize>,
        #[arg(long)]
        predict: Option<usize>,
        #[arg(long)]
        no_faults: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_modes: bool,
    },
    /// Print the auto threshold calibrated over every window of a fault-free CSV.
    Calibrate {
        input: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    Resting,
    Charging,
}

impl ScenarioName {
    fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Resting => "resting",
            ScenarioName::Charging => "charging",
        }
    }
}

#[derive(Args)]
struct ScenarioSource {
    /// Scenario TOML file.
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Shipped scenario, used when no --config is given.
    #[arg(long, value_enum, default_value = "resting")]
    scenario: ScenarioName,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline TOML: either a scenario file (its [pipeline] table is used) or bare pipeline keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<Threshold>,
    #[arg(long)]
    learn: Option<usize>,
    #[arg(long)]
    predict: Option<usize>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig, IscError> {
        let mut cfg = match &self.config {
            Some(path) => pipeline_from_toml(&fs::read_to_string(path)?)?,
            None => PipelineConfig::default(),
        };
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(l) = self.learn {
            cfg.learn_len_l = l;
        }
        if let Some(p) = self.predict {
            cfg.predict_len_p = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pipeline_from_toml(text: &str) -> Result<PipelineConfig, IscError> {
    let table: toml::Table = toml::from_str(text)?;
    let cfg = match table.get("pipeline") {
        Some(section) => section.clone().try_into()?,
        None => toml::Value::Table(table).try_into()?,
    };
    Ok(cfg)
}

fn load_scenario(config: Option<&Path>, name: ScenarioName) -> Result<ScenarioConfig, IscError> {
    match config {
        Some(path) => ScenarioConfig::from_toml(&fs::read_to_string(path)?),
        None => ScenarioConfig::preset(name.as_str()),
    }
}

fn open_input(path: &Path) -> Result<Box<dyn Read + Send>, IscError> {
    if path.as_os_str() == "-" {
        Ok(Box::new(io::stdin()))
    } else {
        Ok(Box::new(BufReader::new(File::open(path)?)))
    }
}

fn summarize(report: &DetectionReport) {
    match report.threshold {
        Some(j) => println!("threshold J = {j:.6e}"),
        None => println!("threshold J = none (stream ended during calibration)"),
    }
    println!("windows processed: {}", report.windows.len());
    if report.flags.is_empty() {
        println!("no ISC flags");
    }
    for f in &report.flags {
        println!("ISC flag: module {} at t = {:.2} s (r = {:.6e})", f.module_index, f.time, f.r_value);
    }
}

fn run(cli: Cli) -> Result<(), IscError> {
    match cli.command {
        Command::Simulate { source, seed, no_faults, out } => {
            let mut cfg = load_scenario(source.config.as_deref(), source.scenario)?;
            ScenarioOverrides { seed, disable_faults: no_faults, ..Default::default() }.apply(&mut cfg)?;
            let telemetry = scenario::simulate_scenario(&cfg)?;
            match out {
                Some(path) => {
                    report::write_telemetry_file(&path, &telemetry)?;
                    info!("wrote {} samples to {}", telemetry.len(), path.display());
                }
                None => report::write_telemetry(io::stdout().lock(), &telemetry)?,
            }
        }
        Command::Detect { input, pipeline: args, out, dump_modes } => {
            let cfg = args.resolve()?;
            let reader = TelemetryReader::new(open_input(&input)?)?;
            let report = pipeline::run_detection_buffered(reader, &cfg, dump_modes)?;
            let resolved = toml::to_string(&cfg).map_err(|e| IscError::Parse(e.to_string()))?;
            report::write_report_dir(&out, &report, &resolved, None, None)?;
            summarize(&report);
            println!("report written to {}", out.display());
        }
        Command::Scenario { name, config, seed, threshold, learn, predict, no_faults, out, dump_modes } => {
            let mut cfg = load_scenario(config.as_deref(), name)?;
            let overrides = ScenarioOverrides {
                seed,
                threshold,
                learn_len_l: learn,
                predict_len_p: predict,
                duration: None,
                disable_faults: no_faults,
            };
            overrides.apply(&mut cfg)?;
            let run = scenario::run_config(cfg, dump_modes)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("report_{}", name.as_str())));
            let resolved = run.config.to_toml()?;
            report::write_report_dir(&out, &run.report, &resolved, Some(&run.telemetry), Some(name.as_str()))?;
            summarize(&run.report);
            println!("report written to {}", out.display());
        }
        Command::Calibrate { input, pipeline: args } => {
            let mut cfg = args.resolve()?;
            let telemetry = report::read_telemetry(open_input(&input)?)?;
            let windows = cfg.window_count(telemetry.len());
            if windows == 0 {
                return Err(IscError::InsufficientData(format!(
                    "{} samples is shorter than one window of {}",
                    telemetry.len(),
                    cfg.window_len()
                )));
            }
            cfg.threshold = Threshold::Auto;
            cfg.calibration_windows = windows;
            let report = pipeline::run_detection(&telemetry, &cfg)?;
            let j = report
                .threshold
                .ok_or_else(|| IscError::InsufficientData("no calibration window completed".into()))?;
            println!("{j:.12e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_degenerate() { 3 } else { 2 })
        }
    }
}
