//! Telemetry CSV and report directory I/O.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::battery::Measurement;
use crate::error::{IscError, Result};
use crate::pipeline::DetectionReport;

/// `time,I,V1,...,Vm`; time with 6 decimals, voltages with 9.
pub fn write_telemetry<W: Write>(out: W, telemetry: &[Measurement]) -> Result<()> {
    let m = telemetry.first().map_or(0, |s| s.module_voltages.len());
    let mut w = BufWriter::new(out);
    let header: Vec<String> = ["time".to_string(), "I".to_string()]
        .into_iter()
        .chain((1..=m).map(|i| format!("V{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for s in telemetry {
        if s.module_voltages.len() != m {
            return Err(IscError::LengthMismatch { expected: m, got: s.module_voltages.len() });
        }
        write!(w, "{:.6},{:.6}", s.time, s.pack_current)?;
        for v in &s.module_voltages {
            write!(w, ",{v:.9}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_telemetry_file(path: &Path, telemetry: &[Measurement]) -> Result<()> {
    write_telemetry(File::create(path)?, telemetry)
}

/// Row-by-row telemetry parser; the header is validated up front.
pub struct TelemetryReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    row: usize,
}

impl<R: Read> TelemetryReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.len() < 4 || &headers[0] != "time" || &headers[1] != "I" {
            return Err(IscError::Parse("telemetry header must be time,I,V1,...,Vm with m >= 2".into()));
        }
        for (i, h) in headers.iter().skip(2).enumerate() {
            if h != format!("V{}", i + 1) {
                return Err(IscError::Parse(format!("unexpected telemetry column '{h}'")));
            }
        }
        Ok(TelemetryReader { records: rdr.into_records(), row: 1 })
    }
}

impl<R: Read> Iterator for TelemetryReader<R> {
    type Item = Result<Measurement>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        self.row += 1;
        let row = self.row;
        Some(rec.map_err(IscError::from).and_then(|rec| {
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| IscError::Parse(format!("row {row}, column {}: {e}", i + 1)))
            };
            Ok(Measurement {
                time: parse(0)?,
                pack_current: parse(1)?,
                module_voltages: (2..rec.len()).map(parse).collect::<Result<_>>()?,
            })
        }))
    }
}

pub fn read_telemetry<R: Read>(input: R) -> Result<Vec<Measurement>> {
    TelemetryReader::new(input)?.collect()
}

pub fn read_telemetry_file(path: &Path) -> Result<Vec<Measurement>> {
    read_telemetry(File::open(path)?)
}

#[derive(Serialize)]
struct Event<'a> {
    time: f64,
    module: usize,
    r_value: f64,
    threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<&'a str>,
}

/// `window,end_time,module,xi,Xi,r,flagged`, one row per module per window.
pub fn residuals_csv(report: &DetectionReport) -> String {
    let mut s = String::from("window,end_time,module,xi,Xi,r,flagged\n");
    for w in &report.windows {
        for i in 0..report.modules {
            let module = i + 1;
            let flagged = report.flags.iter().any(|f| f.module_index == module && f.window <= w.window);
            s.push_str(&format!(
                "{},{:.6},{},{:.12e},{:.12e},{:.12e},{}\n",
                w.window, w.end_time, module, w.xi[i], w.cumulative_xi[i], w.residual_r[i], u8::from(flagged)
            ));
        }
    }
    s
}

/// One JSON record per first threshold crossing.
pub fn events_jsonl(report: &DetectionReport, scenario: Option<&str>) -> Result<String> {
    let mut s = String::new();
    for f in &report.flags {
        let e = Event { time: f.time, module: f.module_index, r_value: f.r_value, threshold: f.threshold, scenario };
        s.push_str(&serde_json::to_string(&e).map_err(|e| IscError::Parse(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// Per-sample staircase of a per-window quantity: the value of the latest
/// completed window, zero before the first.
fn staircase<'a>(report: &'a DetectionReport, times: &[f64], pick: impl Fn(&'a crate::pipeline::WindowRecord) -> &'a [f64]) -> Vec<Vec<f64>> {
    let zero = vec![0.0; report.modules];
    let mut idx = 0;
    let mut out = Vec::with_capacity(times.len());
    let mut current: &[f64] = &zero;
    for &t in times {
        while idx < report.windows.len() && report.windows[idx].end_time <= t + 1e-9 {
            current = pick(&report.windows[idx]);
            idx += 1;
        }
        out.push(current.to_vec());
    }
    out
}

fn module_header(prefix: &str, m: usize) -> String {
    (1..=m).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

/// Write `residuals.csv`, `events.jsonl`, `config_resolved.txt` and, with
/// telemetry, the `figdata_*.csv` panels.
pub fn write_report_dir(
    dir: &Path,
    report: &DetectionReport,
    resolved_config: &str,
    telemetry: Option<&[Measurement]>,
    scenario: Option<&str>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("residuals.csv"), residuals_csv(report))?;
    fs::write(dir.join("events.jsonl"), events_jsonl(report, scenario)?)?;
    let mut cfg = String::new();
    cfg.push_str(&format!("# config_hash = {}\n", report.config_hash));
    match report.threshold {
        Some(j) => cfg.push_str(&format!("# threshold_resolved = {j:.12e}\n")),
        None => cfg.push_str("# threshold_resolved = none\n"),
    }
    cfg.push_str(resolved_config);
    fs::write(dir.join("config_resolved.txt"), cfg)?;
    if !report.mode_dump.is_empty() {
        let mut s = String::from(crate::modes::MODE_DUMP_HEADER);
        s.push('\n');
        for r in &report.mode_dump {
            s.push_str(r);
            s.push('\n');
        }
        fs::write(dir.join("modes.csv"), s)?;
    }
    if let Some(tel) = telemetry {
        write_figdata(dir, report, tel)?;
    }
    Ok(())
}

fn write_figdata(dir: &Path, report: &DetectionReport, telemetry: &[Measurement]) -> Result<()> {
    let m = report.modules;
    let times: Vec<f64> = telemetry.iter().map(|s| s.time).collect();

    let mut v = BufWriter::new(File::create(dir.join("figdata_voltages.csv"))?);
    writeln!(v, "time,{}", module_header("V", m))?;
    for s in telemetry {
        let row: Vec<String> = s.module_voltages.iter().map(|x| format!("{x:.9}")).collect();
        writeln!(v, "{:.6},{}", s.time, row.join(","))?;
    }
    v.flush()?;

    // Charging is negative internally; the panel shows the magnitude.
    let mut c = BufWriter::new(File::create(dir.join("figdata_current.csv"))?);
    writeln!(c, "time,I,I_magnitude")?;
    for s in telemetry {
        writeln!(c, "{:.6},{:.6},{:.6}", s.time, s.pack_current, s.pack_current.abs())?;
    }
    c.flush()?;

    let xi = staircase(report, &times, |w| &w.xi);
    let r = staircase(report, &times, |w| &w.residual_r);
    let j = report.threshold.map_or(String::new(), |j| format!("{j:.12e}"));

    let mut fx = BufWriter::new(File::create(dir.join("figdata_xi.csv"))?);
    writeln!(fx, "time,{}", module_header("xi", m))?;
    for (t, row) in times.iter().zip(&xi) {
        let vals: Vec<String> = row.iter().map(|x| format!("{x:.12e}")).collect();
        writeln!(fx, "{t:.6},{}", vals.join(","))?;
    }
    fx.flush()?;

    let mut fr = BufWriter::new(File::create(dir.join("figdata_residual.csv"))?);
    writeln!(fr, "time,{},J", module_header("r", m))?;
    for (t, row) in times.iter().zip(&r) {
        let vals: Vec<String> = row.iter().map(|x| format!("{x:.12e}")).collect();
        writeln!(fr, "{t:.6},{},{j}", vals.join(","))?;
    }
    fr.flush()?;
    Ok(())
}
