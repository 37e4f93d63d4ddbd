//! Sustained-throughput measurement and core-clock calibration.
//!
//! Throughput is measured by timing a large FP32 GEMM. The real probe is an
//! external program speaking a one-line stdout contract:
//!
//! ```text
//! <probe-binary> <m> <n> <k> <iterations> <warmup>
//! GEMM_RESULT flops=<integer> elapsed_s=<decimal>
//! ```
//!
//! Calibration bisects the host's discrete core-clock ladder, holding the
//! tier's power and memory caps fixed, until the measured throughput is within
//! tolerance of the tier's sustained target.

use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{sim_sustained_tflops, DeviceError, DeviceHandle};
use crate::model::{ThrottleConfig, TierPlan};

pub const DEFAULT_TOLERANCE_PCT: f64 = 3.0;
pub const DEFAULT_MAX_PROBES: u32 = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("invalid probe parameters: {0}")]
    InvalidParams(String),
    #[error("flop count 2*{m}*{n}*{k}*{iterations} overflows 64 bits")]
    Overflow { m: u64, n: u64, k: u64, iterations: u64 },
    #[error("failed to launch probe `{command}`: {detail}")]
    Launch { command: String, detail: String },
    #[error("probe `{command}` failed with {status}: {stderr}")]
    ProbeFailed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("malformed probe output: {0}")]
    Malformed(String),
    #[error("probe reported non-positive elapsed time {0} s")]
    NonPositiveElapsed(f64),
    #[error("simulated probe needs a simulated device")]
    NotSimulated,
    #[error("{0}")]
    Precondition(String),
    #[error(
        "calibration of `{}` did not converge: best core cap {} MHz measured {:.3} TFLOPS ({:+.2}% from target {:.3}) after {} probes",
        .0.tier_name, .0.final_config.core_clock_cap_mhz, .0.measured_tflops, .0.deviation_pct, .0.target_tflops, .0.probes_used
    )]
    NonConvergence(Box<CalibrationReport>),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// GEMM probe dimensions and iteration counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub iterations: u64,
    #[serde(default)]
    pub warmup_iterations: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        Self {
            m: 8192,
            n: 8192,
            k: 8192,
            iterations: 100,
            warmup_iterations: 10,
        }
    }
}

impl ProbeParams {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.m == 0 || self.n == 0 || self.k == 0 || self.iterations == 0 {
            return Err(CalibrationError::InvalidParams(format!(
                "m, n, k and iterations must be >= 1 (got {}x{}x{}, {} iterations)",
                self.m, self.n, self.k, self.iterations
            )));
        }
        Ok(())
    }
}

/// Floating-point operations in the timed region: `2*m*n*k*iterations`.
pub fn probe_flops(params: &ProbeParams) -> Result<u64, CalibrationError> {
    params.validate()?;
    let overflow = || CalibrationError::Overflow {
        m: params.m,
        n: params.n,
        k: params.k,
        iterations: params.iterations,
    };
    2u64.checked_mul(params.m)
        .and_then(|v| v.checked_mul(params.n))
        .and_then(|v| v.checked_mul(params.k))
        .and_then(|v| v.checked_mul(params.iterations))
        .ok_or_else(overflow)
}

/// One probe result as reported by a runner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSample {
    pub flops: u64,
    pub elapsed_s: f64,
}

impl ProbeSample {
    pub fn tflops(&self) -> Result<f64, CalibrationError> {
        if !(self.elapsed_s > 0.0) {
            return Err(CalibrationError::NonPositiveElapsed(self.elapsed_s));
        }
        Ok(self.flops as f64 / self.elapsed_s / 1e12)
    }
}

/// Parses the probe contract. Standard output must hold exactly one line
/// `GEMM_RESULT flops=<integer> elapsed_s=<decimal>`.
pub fn parse_probe_output(stdout: &str) -> Result<ProbeSample, CalibrationError> {
    let lines: Vec<&str> = stdout.lines().filter(|l| !l.trim().is_empty()).collect();
    let [line] = lines.as_slice() else {
        return Err(CalibrationError::Malformed(format!(
            "expected exactly one line, got {}",
            lines.len()
        )));
    };
    let malformed = || CalibrationError::Malformed(format!("`{}`", line.trim()));
    let mut fields = line.split_whitespace();
    if fields.next() != Some("GEMM_RESULT") {
        return Err(malformed());
    }
    let flops = fields
        .next()
        .and_then(|f| f.strip_prefix("flops="))
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(malformed)?;
    let elapsed_s = fields
        .next()
        .and_then(|f| f.strip_prefix("elapsed_s="))
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(malformed)?;
    if fields.next().is_some() {
        return Err(malformed());
    }
    Ok(ProbeSample { flops, elapsed_s })
}

/// Something that can execute the GEMM probe against a device.
pub trait ProbeRunner {
    fn run(&mut self, device: &DeviceHandle, params: &ProbeParams) -> Result<ProbeSample, CalibrationError>;
}

/// Runs the external GEMM probe program.
#[derive(Debug, Clone)]
pub struct SubprocessProbe {
    pub binary: PathBuf,
}

impl SubprocessProbe {
    pub fn new(binary: impl Into<PathBuf>) -> Self {
        Self { binary: binary.into() }
    }
}

impl ProbeRunner for SubprocessProbe {
    fn run(&mut self, _device: &DeviceHandle, params: &ProbeParams) -> Result<ProbeSample, CalibrationError> {
        params.validate()?;
        let args = [
            params.m,
            params.n,
            params.k,
            params.iterations,
            params.warmup_iterations,
        ]
        .map(|v| v.to_string());
        let command = format!("{} {}", self.binary.display(), args.join(" "));
        let output = Command::new(&self.binary)
            .args(&args)
            .output()
            .map_err(|e| CalibrationError::Launch {
                command: command.clone(),
                detail: e.to_string(),
            })?;
        if !output.status.success() {
            return Err(CalibrationError::ProbeFailed {
                command,
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        parse_probe_output(&String::from_utf8_lossy(&output.stdout))
    }
}

/// Derives probe timings from the simulated device's model. Each run draws a
/// fresh noise seed.
#[derive(Debug, Clone, Default)]
pub struct SimulatedProbe {
    pub seed: u64,
}

impl SimulatedProbe {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl ProbeRunner for SimulatedProbe {
    fn run(&mut self, device: &DeviceHandle, params: &ProbeParams) -> Result<ProbeSample, CalibrationError> {
        let model = device.sim_model().ok_or(CalibrationError::NotSimulated)?;
        let flops = probe_flops(params)?;
        let tflops = sim_sustained_tflops(model, &device.effective_config(), self.seed);
        self.seed = self.seed.wrapping_add(1);
        Ok(ProbeSample {
            flops,
            elapsed_s: flops as f64 / (tflops * 1e12),
        })
    }
}

pub fn measure_sustained_tflops(
    runner: &mut dyn ProbeRunner,
    device: &DeviceHandle,
    params: &ProbeParams,
) -> Result<f64, CalibrationError> {
    let expected = probe_flops(params)?;
    let sample = runner.run(device, params)?;
    if sample.flops != expected {
        log::warn!(
            "probe reported {} flops, expected {} for {:?}",
            sample.flops,
            expected,
            params
        );
    }
    sample.tflops()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub core_clock_cap_mhz: u32,
    pub measured_tflops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub tier_name: String,
    pub target_tflops: f64,
    pub final_config: ThrottleConfig,
    pub measured_tflops: f64,
    pub deviation_pct: f64,
    pub probes_used: u32,
    #[serde(default)]
    pub probes: Vec<ProbePoint>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CalibrationReport {
    pub fn within(&self, tolerance_pct: f64) -> bool {
        self.deviation_pct.abs() <= tolerance_pct
    }
}

pub fn deviation_pct(measured: f64, target: f64) -> f64 {
    100.0 * (measured - target) / target
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub tolerance_pct: f64,
    pub max_probes: u32,
    /// Allowed throughput inversion between probes before a monotonicity
    /// warning is recorded, in percent.
    pub noise_bound_pct: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            tolerance_pct: DEFAULT_TOLERANCE_PCT,
            max_probes: DEFAULT_MAX_PROBES,
            noise_bound_pct: 2.0,
        }
    }
}

struct Search<'a> {
    device: &'a mut DeviceHandle,
    runner: &'a mut dyn ProbeRunner,
    params: &'a ProbeParams,
    base: ThrottleConfig,
    target: f64,
    noise_bound_pct: f64,
    probes: Vec<ProbePoint>,
    warnings: Vec<String>,
}

impl Search<'_> {
    fn probe(&mut self, core: u32) -> Result<f64, CalibrationError> {
        let config = ThrottleConfig {
            core_clock_cap_mhz: core,
            ..self.base
        };
        self.device.apply_throttle(config)?;
        let tflops = measure_sustained_tflops(self.runner, self.device, self.params)?;
        let slack = self.noise_bound_pct / 100.0;
        for prior in &self.probes {
            let inverted = (prior.core_clock_cap_mhz < core && prior.measured_tflops > tflops * (1.0 + slack))
                || (prior.core_clock_cap_mhz > core && prior.measured_tflops * (1.0 + slack) < tflops);
            if inverted {
                let msg = format!(
                    "non-monotone throughput: {} MHz -> {:.3} TFLOPS vs {} MHz -> {:.3} TFLOPS",
                    prior.core_clock_cap_mhz, prior.measured_tflops, core, tflops
                );
                log::warn!("{msg}");
                self.warnings.push(msg);
            }
        }
        self.probes.push(ProbePoint {
            core_clock_cap_mhz: core,
            measured_tflops: tflops,
        });
        Ok(tflops)
    }

    fn best(&self) -> ProbePoint {
        *self
            .probes
            .iter()
            .min_by(|a, b| {
                let da = (a.measured_tflops - self.target).abs();
                let db = (b.measured_tflops - self.target).abs();
                da.total_cmp(&db)
            })
            .expect("at least one probe")
    }
}

/// Searches the core-clock ladder for a cap whose measured throughput matches
/// the tier's sustained target.
///
/// The first probe runs at the highest ladder clock. If that is already within
/// tolerance it is kept; if it falls short the target is unreachable.
/// Otherwise the ladder is bisected, stopping at the first probe within
/// tolerance. Every probe re-applies the full config. On return the device
/// holds the best config found, whether or not the search converged.
pub fn calibrate_core_clock(
    device: &mut DeviceHandle,
    runner: &mut dyn ProbeRunner,
    tier: &TierPlan,
    params: &ProbeParams,
    options: &CalibrationOptions,
) -> Result<CalibrationReport, CalibrationError> {
    params.validate()?;
    let target = tier.estimated_sustained_tflops;
    if !(target > 0.0) {
        return Err(CalibrationError::Precondition(format!(
            "tier `{}` has non-positive target {target}",
            tier.target.name
        )));
    }
    let ladder = device.host().core_clock_ladder();
    if ladder.is_empty() {
        return Err(CalibrationError::Precondition(
            "host has an empty core-clock ladder".into(),
        ));
    }
    let tol = options.tolerance_pct;
    let within = |t: f64| deviation_pct(t, target).abs() <= tol;

    let mut search = Search {
        device,
        runner,
        params,
        base: tier.throttle,
        target,
        noise_bound_pct: options.noise_bound_pct,
        probes: Vec::new(),
        warnings: Vec::new(),
    };

    let top = ladder.len() - 1;
    let top_tflops = search.probe(ladder[top])?;
    let mut converged = within(top_tflops);

    if !converged && top_tflops > target {
        let (mut lo, mut hi) = (0usize, top);
        while lo < hi && (search.probes.len() as u32) < options.max_probes {
            let mid = lo + (hi - lo) / 2;
            let t = search.probe(ladder[mid])?;
            if within(t) {
                converged = true;
                break;
            }
            if t < target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
    }

    let best = search.best();
    let final_config = ThrottleConfig {
        core_clock_cap_mhz: best.core_clock_cap_mhz,
        ..search.base
    };
    if search.device.applied() != Some(&final_config) {
        search.device.apply_throttle(final_config)?;
    }
    let report = CalibrationReport {
        tier_name: tier.target.name.clone(),
        target_tflops: target,
        final_config,
        measured_tflops: best.measured_tflops,
        deviation_pct: deviation_pct(best.measured_tflops, target),
        probes_used: search.probes.len() as u32,
        probes: search.probes,
        warnings: search.warnings,
    };
    if converged {
        Ok(report)
    } else {
        Err(CalibrationError::NonConvergence(Box::new(report)))
    }
}

/// Re-measures a calibrated tier once and refreshes its measurement.
pub fn verify_tier(
    device: &DeviceHandle,
    runner: &mut dyn ProbeRunner,
    report: &CalibrationReport,
    params: &ProbeParams,
) -> Result<CalibrationReport, CalibrationError> {
    if device.applied() != Some(&report.final_config) {
        return Err(CalibrationError::Precondition(format!(
            "device does not hold the calibrated config ({}) for `{}`",
            report.final_config, report.tier_name
        )));
    }
    let measured = measure_sustained_tflops(runner, device, params)?;
    Ok(CalibrationReport {
        measured_tflops: measured,
        deviation_pct: deviation_pct(measured, report.target_tflops),
        ..report.clone()
    })
}
