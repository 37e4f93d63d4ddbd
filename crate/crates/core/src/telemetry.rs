//! Power and clock telemetry from `nvidia-smi dmon`.
//!
//! The sampler is run as `nvidia-smi dmon -i <idx> -s pc -d <period>`. Its
//! rows carry no timestamps, so samples are stamped with their receipt time
//! relative to sampler start (or `row * period` when parsing a saved log).

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{sim_sustained_tflops, DeviceHandle, NvidiaSmi};
use crate::process::{ChildProcess, ManagedProcess, ThreadProcess, TimedLine};

pub const DEFAULT_SAMPLE_PERIOD_S: f64 = 1.0;
pub const DEFAULT_POWER_TOLERANCE: f64 = 0.05;
pub const DEFAULT_CLOCK_TOLERANCE: f64 = 0.02;

const TRACE_MAGIC: &str = "# gpu-tier-bench trace v1";
const TRACE_COLUMNS: [&str; 4] = ["t_s", "power_w", "sm_clock_mhz", "mem_clock_mhz"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("telemetry stream contained no parseable data rows ({skipped} skipped)")]
    EmptyTrace { skipped: usize },
    #[error("dmon header is missing required columns: {}", .missing.join(", "))]
    Schema { missing: Vec<String> },
    #[error("no usable power samples in window [{t0}, {t1}] s")]
    NoUsableSamples { t0: f64, t1: f64 },
    #[error("sample period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("trace file: {0}")]
    TraceFormat(String),
    #[error("failed to start telemetry sampler `{command}`: {detail}")]
    SamplerLaunch { command: String, detail: String },
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TelemetryError {
    fn from(e: std::io::Error) -> Self {
        TelemetryError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since trace start.
    pub t_s: f64,
    pub power_w: Option<f64>,
    pub sm_clock_mhz: Option<f64>,
    pub mem_clock_mhz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub samples: Vec<PowerSample>,
    pub sample_period_s: f64,
}

impl PowerTrace {
    /// `[first t, last t + period]`, or `None` when empty.
    pub fn span(&self) -> Option<(f64, f64)> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        Some((first.t_s, last.t_s + self.sample_period_s))
    }

    /// Keeps samples whose interval overlaps `[start, end)` and shifts time so
    /// that `start` becomes zero. A sample straddling `start` is moved onto it,
    /// which clips its weight to the overlap.
    pub fn trimmed(&self, start: f64, end: f64) -> PowerTrace {
        let mut out = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let next = self.samples.get(i + 1).map_or(s.t_s + self.sample_period_s, |n| n.t_s);
            if next <= start || s.t_s >= end {
                continue;
            }
            out.push(PowerSample {
                t_s: (s.t_s - start).max(0.0),
                ..*s
            });
        }
        PowerTrace {
            samples: out,
            sample_period_s: self.sample_period_s,
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), TelemetryError> {
        writeln!(out, "{TRACE_MAGIC} period={}", self.sample_period_s)?;
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| TelemetryError::Io(e.to_string());
        w.write_record(TRACE_COLUMNS).map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.samples {
            w.write_record([
                s.t_s.to_string(),
                opt(s.power_w),
                opt(s.sm_clock_mhz),
                opt(s.mem_clock_mhz),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut input: impl BufRead) -> Result<PowerTrace, TelemetryError> {
        let bad = |m: String| TelemetryError::TraceFormat(m);
        let mut first = String::new();
        input.read_line(&mut first)?;
        let period = first
            .trim_end()
            .strip_prefix(TRACE_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("period="))
            .and_then(|p| p.parse::<f64>().ok())
            .ok_or_else(|| bad(format!("bad header line `{}`", first.trim_end())))?;
        if !(period > 0.0) {
            return Err(TelemetryError::BadPeriod(period));
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != TRACE_COLUMNS {
            return Err(bad(format!("unexpected columns {headers:?}")));
        }
        let mut samples = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let field = |j: usize| -> Result<Option<f64>, TelemetryError> {
                let v = row.get(j).unwrap_or("");
                if v.is_empty() {
                    Ok(None)
                } else {
                    v.parse()
                        .map(Some)
                        .map_err(|_| bad(format!("row {}: bad value `{v}`", i + 1)))
                }
            };
            let t_s = field(0)?.ok_or_else(|| bad(format!("row {}: missing t_s", i + 1)))?;
            samples.push(PowerSample {
                t_s,
                power_w: field(1)?,
                sm_clock_mhz: field(2)?,
                mem_clock_mhz: field(3)?,
            });
        }
        Ok(PowerTrace {
            samples,
            sample_period_s: period,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseStats {
    pub data_rows: usize,
    pub skipped_rows: usize,
}

#[derive(Debug, Clone, Copy)]
struct Columns {
    count: usize,
    power: usize,
    sm_clock: usize,
    mem_clock: usize,
}

/// Incremental `dmon -s pc` parser.
///
/// Header lines start with `#`; the one beginning with `gpu` names the
/// columns. Data rows must have one field per column; `-` means missing. Rows
/// that do not fit are skipped and counted.
#[derive(Debug)]
pub struct DmonParser {
    period_s: f64,
    columns: Option<Columns>,
    samples: Vec<PowerSample>,
    stats: ParseStats,
}

impl DmonParser {
    pub fn new(period_s: f64) -> Result<Self, TelemetryError> {
        if !(period_s > 0.0) {
            return Err(TelemetryError::BadPeriod(period_s));
        }
        Ok(Self {
            period_s,
            columns: None,
            samples: Vec::new(),
            stats: ParseStats::default(),
        })
    }

    /// Feeds one line. `t_s` is the receipt time; when `None` the row index
    /// times the period is used.
    pub fn push_line(&mut self, line: &str, t_s: Option<f64>) -> Result<(), TelemetryError> {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Ok(());
        }
        if let Some(header) = trimmed.strip_prefix('#') {
            let names: Vec<&str> = header.split_whitespace().collect();
            if names.first().is_some_and(|n| n.eq_ignore_ascii_case("gpu")) {
                self.columns = Some(locate_columns(&names)?);
            }
            return Ok(());
        }
        self.stats.data_rows += 1;
        match self.columns.and_then(|c| parse_row(trimmed, c)) {
            Some((power_w, sm_clock_mhz, mem_clock_mhz)) => {
                let mut t = t_s.unwrap_or(self.samples.len() as f64 * self.period_s);
                if let Some(prev) = self.samples.last() {
                    if t <= prev.t_s {
                        t = prev.t_s + 1e-6;
                    }
                }
                self.samples.push(PowerSample {
                    t_s: t,
                    power_w,
                    sm_clock_mhz,
                    mem_clock_mhz,
                });
            }
            None => self.stats.skipped_rows += 1,
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn finish(self) -> Result<(PowerTrace, ParseStats), TelemetryError> {
        if self.samples.is_empty() {
            return Err(TelemetryError::EmptyTrace {
                skipped: self.stats.skipped_rows,
            });
        }
        Ok((
            PowerTrace {
                samples: self.samples,
                sample_period_s: self.period_s,
            },
            self.stats,
        ))
    }
}

fn locate_columns(names: &[&str]) -> Result<Columns, TelemetryError> {
    let find = |n: &str| names.iter().position(|c| c.eq_ignore_ascii_case(n));
    let power = find("pwr");
    // `pclk` is the SM clock under `-s c`; `sm` is only a fallback.
    let sm_clock = find("pclk").or_else(|| find("sm"));
    let mem_clock = find("mclk");
    let mut missing = Vec::new();
    if power.is_none() {
        missing.push("pwr".to_string());
    }
    if sm_clock.is_none() {
        missing.push("pclk".to_string());
    }
    if mem_clock.is_none() {
        missing.push("mclk".to_string());
    }
    match (power, sm_clock, mem_clock) {
        (Some(power), Some(sm_clock), Some(mem_clock)) => Ok(Columns {
            count: names.len(),
            power,
            sm_clock,
            mem_clock,
        }),
        _ => Err(TelemetryError::Schema { missing }),
    }
}

type RowValues = (Option<f64>, Option<f64>, Option<f64>);

fn parse_row(line: &str, columns: Columns) -> Option<RowValues> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != columns.count {
        return None;
    }
    let value = |i: usize| -> Option<Option<f64>> {
        match fields[i] {
            "-" | "N/A" => Some(None),
            f => f.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
        }
    };
    Some((
        value(columns.power)?,
        value(columns.sm_clock)?,
        value(columns.mem_clock)?,
    ))
}

/// Parses a complete saved dmon log, stamping rows at `index * period`.
pub fn parse_dmon_stream(
    input: impl BufRead,
    sample_period_s: f64,
) -> Result<(PowerTrace, ParseStats), TelemetryError> {
    let mut parser = DmonParser::new(sample_period_s)?;
    for line in input.lines() {
        parser.push_line(&line?, None)?;
    }
    parser.finish()
}

/// Time-weighted mean power over `[t0, t1]`.
///
/// Each sample holds until the next one (the last for one period); its weight
/// is that interval clipped to the window. Samples without a power reading
/// contribute neither value nor weight.
pub fn average_power(trace: &PowerTrace, t0: f64, t1: f64) -> Result<f64, TelemetryError> {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (i, s) in trace.samples.iter().enumerate() {
        let Some(p) = s.power_w else { continue };
        let end = trace
            .samples
            .get(i + 1)
            .map_or(s.t_s + trace.sample_period_s, |n| n.t_s);
        let overlap = end.min(t1) - s.t_s.max(t0);
        if overlap > 0.0 {
            weighted += p * overlap;
            total += overlap;
        }
    }
    if total <= 0.0 {
        return Err(TelemetryError::NoUsableSamples { t0, t1 });
    }
    Ok(weighted / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvelopeTolerances {
    /// Fractional overshoot allowed above the power cap.
    pub power: f64,
    /// Fractional overshoot allowed above each clock cap.
    pub clock: f64,
}

impl Default for EnvelopeTolerances {
    fn default() -> Self {
        Self {
            power: DEFAULT_POWER_TOLERANCE,
            clock: DEFAULT_CLOCK_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Power,
    CoreClock,
    MemClock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeViolation {
    pub sample_index: usize,
    pub kind: ViolationKind,
    pub observed: f64,
    /// The cap that was exceeded (before tolerance).
    pub limit: f64,
}

pub fn validate_envelope(
    trace: &PowerTrace,
    config: &crate::model::ThrottleConfig,
    tolerances: &EnvelopeTolerances,
) -> Vec<EnvelopeViolation> {
    let mut out = Vec::new();
    for (i, s) in trace.samples.iter().enumerate() {
        let checks = [
            (ViolationKind::Power, s.power_w, config.power_cap_w, tolerances.power),
            (
                ViolationKind::CoreClock,
                s.sm_clock_mhz,
                config.core_clock_cap_mhz as f64,
                tolerances.clock,
            ),
            (
                ViolationKind::MemClock,
                s.mem_clock_mhz,
                config.mem_clock_cap_mhz as f64,
                tolerances.clock,
            ),
        ];
        for (kind, observed, limit, tol) in checks {
            if let Some(v) = observed {
                if v > limit * (1.0 + tol) {
                    out.push(EnvelopeViolation {
                        sample_index: i,
                        kind,
                        observed: v,
                        limit,
                    });
                }
            }
        }
    }
    out
}

/// Starts a telemetry sampler for the duration of one run.
pub trait SamplerLauncher {
    fn sample_period_s(&self) -> f64;
    fn start(&self, device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, TelemetryError>;
}

/// `nvidia-smi dmon -i <idx> -s pc -d <period>`.
#[derive(Debug, Clone)]
pub struct DmonSampler {
    pub tool: NvidiaSmi,
    /// dmon accepts whole seconds only.
    pub period_s: u32,
}

impl DmonSampler {
    pub fn argv(&self) -> Vec<String> {
        let mut argv = vec![self.tool.binary.display().to_string(), "dmon".to_string()];
        argv.extend(self.tool.args(&["-s", "pc", "-d", &self.period_s.max(1).to_string()]));
        argv
    }
}

impl SamplerLauncher for DmonSampler {
    fn sample_period_s(&self) -> f64 {
        self.period_s.max(1) as f64
    }

    fn start(&self, _device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, TelemetryError> {
        let argv = self.argv();
        let child = ChildProcess::spawn(&argv).map_err(|e| TelemetryError::SamplerLaunch {
            command: argv.join(" "),
            detail: e.to_string(),
        })?;
        Ok(Box::new(child))
    }
}

/// Emits dmon-formatted rows derived from the simulated device's model at
/// its currently applied caps, assuming the GPU is fully loaded.
#[derive(Debug, Clone)]
pub struct SimulatedSampler {
    pub period_s: f64,
    pub seed: u64,
}

impl SamplerLauncher for SimulatedSampler {
    fn sample_period_s(&self) -> f64 {
        self.period_s
    }

    fn start(&self, device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, TelemetryError> {
        if !(self.period_s > 0.0) {
            return Err(TelemetryError::BadPeriod(self.period_s));
        }
        let model = device
            .sim_model()
            .cloned()
            .ok_or_else(|| TelemetryError::SamplerLaunch {
                command: "simulated sampler".into(),
                detail: "device is not simulated".into(),
            })?;
        let config = device.effective_config();
        let period = std::time::Duration::from_secs_f64(self.period_s);
        let seed = self.seed;
        Ok(Box::new(ThreadProcess::spawn(move |sink| {
            sink.emit("# gpu    pwr  gtemp  mtemp   mclk   pclk");
            sink.emit("# Idx      W      C      C    MHz    MHz");
            let start = sink.started_at();
            let mut n = 0u64;
            loop {
                let tflops = sim_sustained_tflops(&model, &config, seed.wrapping_add(n));
                let noise = model.noise_factor(seed.wrapping_add(n) ^ 0x9e37_79b9);
                let power = (model.power_draw_w(&config, tflops) * noise).min(config.power_cap_w);
                let row = format!(
                    "    0 {:>6.0} {:>6} {:>6} {:>6} {:>6}",
                    power, 45, "-", config.mem_clock_cap_mhz, config.core_clock_cap_mhz
                );
                if !sink.emit(row) {
                    return 0;
                }
                n += 1;
                if !sink.sleep_until(start + period.mul_f64(n as f64)) {
                    return 0;
                }
            }
        })))
    }
}

/// Collects sampler lines into a trace, stamping each with its receipt time
/// relative to `origin`.
pub fn trace_from_lines(
    lines: impl IntoIterator<Item = TimedLine>,
    origin: Instant,
    period_s: f64,
) -> Result<(PowerTrace, ParseStats), TelemetryError> {
    let mut parser = DmonParser::new(period_s)?;
    for l in lines {
        let t = l.at.saturating_duration_since(origin).as_secs_f64();
        parser.push_line(&l.line, Some(t))?;
    }
    parser.finish()
}
