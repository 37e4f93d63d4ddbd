//! GPU control plane: apply and reset throttle caps, query supported clocks.
//!
//! Two backends sit behind [`DeviceHandle`]. The real one shells out to
//! `nvidia-smi`; the simulated one records the caps and answers throughput
//! queries from an analytic roofline-style model ([`SimModel`]).

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HostProfile, ModelError, ThrottleConfig};

/// Environment variable overriding the control-tool binary path.
pub const CONTROL_TOOL_ENV: &str = "GPU_TIER_BENCH_NVIDIA_SMI";

pub(crate) const SIM_FIT: &str = include_str!("../data/sim_fit.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("invalid throttle config: {0}")]
    InvalidConfig(#[from] ModelError),
    #[error("control tool not available: could not run `{command}` ({detail}); install the NVIDIA driver utilities or point {CONTROL_TOOL_ENV} at nvidia-smi{}", partial(.completed))]
    ToolMissing {
        command: String,
        detail: String,
        completed: Vec<String>,
    },
    #[error("insufficient privileges for `{command}`: {detail}; rerun as root{}", partial(.completed))]
    Privilege {
        command: String,
        detail: String,
        completed: Vec<String>,
    },
    #[error("`{command}` failed with {status}: {detail}{}", partial(.completed))]
    CommandFailed {
        command: String,
        status: String,
        detail: String,
        completed: Vec<String>,
    },
    #[error("cannot parse output of `{command}`, line {line_no}: `{line}`")]
    Parse {
        command: String,
        line_no: usize,
        line: String,
    },
}

impl DeviceError {
    /// Commands that succeeded before this failure.
    pub fn completed(&self) -> &[String] {
        match self {
            DeviceError::ToolMissing { completed, .. }
            | DeviceError::Privilege { completed, .. }
            | DeviceError::CommandFailed { completed, .. } => completed,
            _ => &[],
        }
    }

    fn with_completed(mut self, done: &[String]) -> Self {
        if let DeviceError::ToolMissing { completed, .. }
        | DeviceError::Privilege { completed, .. }
        | DeviceError::CommandFailed { completed, .. } = &mut self
        {
            *completed = done.to_vec();
        }
        self
    }
}

fn partial(completed: &[String]) -> String {
    if completed.is_empty() {
        String::new()
    } else {
        format!("; device left partially throttled after: {}", completed.join(", "))
    }
}

/// Analytic stand-in for a throttled card.
///
/// Sustained throughput is the minimum of a core-clock term, a memory
/// bandwidth term, and a power term:
///
/// ```text
/// min(peak * core/nominal_core, bw_coefficient * mem, peak * (power/power_ref)^power_exponent)
/// ```
///
/// `power_ref_w` is the board power at which the power term alone would allow
/// `peak_tflops`; when it exceeds the host's power limit the unthrottled card
/// is power-bound, which is how the fitted model reproduces the host's
/// measured full-clock throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModel {
    pub peak_tflops: f64,
    pub nominal_core_mhz: u32,
    pub nominal_mem_clock_mhz: u32,
    pub bw_coefficient: f64,
    pub power_ref_w: f64,
    pub power_exponent: f64,
    pub idle_power_w: f64,
    pub noise_fraction: f64,
}

#[derive(Deserialize)]
struct SimFitFile {
    device: SimModel,
}

impl SimModel {
    /// Constants fitted to the four measured RTX 4090 emulation points.
    pub fn fitted() -> Self {
        let fit: SimFitFile = toml::from_str(SIM_FIT).expect("sim_fit.toml is valid");
        fit.device
    }

    pub fn with_noise(mut self, noise_fraction: f64) -> Self {
        self.noise_fraction = noise_fraction;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (what, v) in [
            ("peak_tflops", self.peak_tflops),
            ("bw_coefficient", self.bw_coefficient),
            ("power_ref_w", self.power_ref_w),
            ("power_exponent", self.power_exponent),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{what} must be positive, got {v}"));
            }
        }
        if self.nominal_core_mhz == 0 || self.nominal_mem_clock_mhz == 0 {
            return Err("nominal clocks must be positive".into());
        }
        if !(self.idle_power_w >= 0.0) {
            return Err("idle_power_w must be non-negative".into());
        }
        if !(0.0..=0.05).contains(&self.noise_fraction) {
            return Err(format!(
                "noise_fraction must lie in [0, 0.05], got {}",
                self.noise_fraction
            ));
        }
        Ok(())
    }

    /// Noise-free throughput at `config`.
    pub fn ideal_tflops(&self, config: &ThrottleConfig) -> f64 {
        let core = self.peak_tflops * config.core_clock_cap_mhz as f64 / self.nominal_core_mhz as f64;
        let bandwidth = self.bw_coefficient * config.mem_clock_cap_mhz as f64;
        let power = self.peak_tflops * (config.power_cap_w / self.power_ref_w).powf(self.power_exponent);
        core.min(bandwidth).min(power)
    }

    /// Board power drawn while sustaining `tflops`, capped at the power limit.
    pub fn power_draw_w(&self, config: &ThrottleConfig, tflops: f64) -> f64 {
        let load = (tflops / self.peak_tflops).max(0.0);
        let dynamic = (self.power_ref_w - self.idle_power_w).max(0.0) * load.powf(1.0 / self.power_exponent);
        (self.idle_power_w + dynamic).min(config.power_cap_w)
    }

    /// Deterministic multiplicative noise factor in `[1 - noise, 1 + noise]`.
    pub fn noise_factor(&self, seed: u64) -> f64 {
        if self.noise_fraction == 0.0 {
            return 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        1.0 + self.noise_fraction * rng.random_range(-1.0..=1.0)
    }
}

pub fn sim_sustained_tflops(model: &SimModel, config: &ThrottleConfig, seed: u64) -> f64 {
    model.ideal_tflops(config) * model.noise_factor(seed)
}

/// `nvidia-smi` invoked against one device index.
#[derive(Debug, Clone, PartialEq)]
pub struct NvidiaSmi {
    pub binary: PathBuf,
    pub index: u32,
}

impl NvidiaSmi {
    pub fn new(binary: impl Into<PathBuf>, index: u32) -> Self {
        Self {
            binary: binary.into(),
            index,
        }
    }

    /// Binary from [`CONTROL_TOOL_ENV`], else `nvidia-smi` on `PATH`.
    pub fn from_env(index: u32) -> Self {
        let binary = std::env::var_os(CONTROL_TOOL_ENV).unwrap_or_else(|| OsString::from("nvidia-smi"));
        Self::new(binary, index)
    }

    pub fn args(&self, rest: &[&str]) -> Vec<String> {
        let mut args = vec!["-i".to_string(), self.index.to_string()];
        args.extend(rest.iter().map(|s| s.to_string()));
        args
    }

    pub fn command_line(&self, rest: &[&str]) -> String {
        let mut parts = vec![self.binary.display().to_string()];
        parts.extend(self.args(rest));
        parts.join(" ")
    }

    /// Runs one control command and returns its standard output.
    pub fn run(&self, rest: &[&str]) -> Result<String, DeviceError> {
        let command = self.command_line(rest);
        let output = Command::new(&self.binary)
            .args(self.args(rest))
            .output()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::PermissionDenied => DeviceError::Privilege {
                    command: command.clone(),
                    detail: e.to_string(),
                    completed: vec![],
                },
                _ => DeviceError::ToolMissing {
                    command: command.clone(),
                    detail: e.to_string(),
                    completed: vec![],
                },
            })?;
        let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
        if output.status.success() {
            return Ok(stdout);
        }
        let stderr = String::from_utf8_lossy(&output.stderr);
        let detail = format!("{} {}", stderr.trim(), stdout.trim()).trim().to_string();
        let lowered = detail.to_ascii_lowercase();
        if lowered.contains("permission") || lowered.contains("root") || lowered.contains("not allowed") {
            Err(DeviceError::Privilege {
                command,
                detail,
                completed: vec![],
            })
        } else {
            Err(DeviceError::CommandFailed {
                command,
                status: output.status.to_string(),
                detail,
                completed: vec![],
            })
        }
    }

    fn run_sequence(&self, steps: &[Vec<String>]) -> Result<(), DeviceError> {
        let mut done = Vec::new();
        for step in steps {
            let args: Vec<&str> = step.iter().map(String::as_str).collect();
            self.run(&args).map_err(|e| e.with_completed(&done))?;
            done.push(self.command_line(&args));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceKind {
    Real(NvidiaSmi),
    Simulated(SimModel),
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceKind::Real(tool) => write!(f, "real (gpu {})", tool.index),
            DeviceKind::Simulated(_) => f.write_str("simulated"),
        }
    }
}

/// Supported memory clocks (ascending) and core-clock cap granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportedClocks {
    pub mem_clocks_mhz: Vec<u32>,
    pub core_clock_step_mhz: u32,
}

/// A device owned by one control context.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceHandle {
    kind: DeviceKind,
    host: HostProfile,
    applied: Option<ThrottleConfig>,
}

impl DeviceHandle {
    pub fn simulated(host: HostProfile, model: SimModel) -> Self {
        Self {
            kind: DeviceKind::Simulated(model),
            host,
            applied: None,
        }
    }

    pub fn real(host: HostProfile, tool: NvidiaSmi) -> Self {
        Self {
            kind: DeviceKind::Real(tool),
            host,
            applied: None,
        }
    }

    pub fn kind(&self) -> &DeviceKind {
        &self.kind
    }

    pub fn host(&self) -> &HostProfile {
        &self.host
    }

    pub fn applied(&self) -> Option<&ThrottleConfig> {
        self.applied.as_ref()
    }

    pub fn sim_model(&self) -> Option<&SimModel> {
        match &self.kind {
            DeviceKind::Simulated(model) => Some(model),
            DeviceKind::Real(_) => None,
        }
    }

    /// The caps currently in force: the applied config, else the host nominal.
    pub fn effective_config(&self) -> ThrottleConfig {
        self.applied.unwrap_or_else(|| self.host.nominal_config())
    }

    /// Applies power, core-clock, and memory-clock caps in that order.
    ///
    /// The config is validated before any command runs. On the real backend
    /// the first failing command aborts the sequence; the error lists the
    /// commands that had already succeeded.
    pub fn apply_throttle(&mut self, config: ThrottleConfig) -> Result<(), DeviceError> {
        config.validate(&self.host)?;
        if let DeviceKind::Real(tool) = &self.kind {
            tool.run_sequence(&[
                vec!["-pl".into(), format_watts(config.power_cap_w)],
                vec!["-lgc".into(), config.core_clock_cap_mhz.to_string()],
                vec!["-lmc".into(), config.mem_clock_cap_mhz.to_string()],
            ])?;
        }
        self.applied = Some(config);
        Ok(())
    }

    pub fn reset_throttle(&mut self) -> Result<(), DeviceError> {
        if let DeviceKind::Real(tool) = &self.kind {
            tool.run_sequence(&[
                vec!["-rgc".into()],
                vec!["-rmc".into()],
                vec!["-pl".into(), format_watts(self.host.max_power_cap_w)],
            ])?;
        }
        self.applied = None;
        Ok(())
    }

    pub fn query_supported_clocks(&self) -> Result<SupportedClocks, DeviceError> {
        match &self.kind {
            DeviceKind::Simulated(_) => Ok(SupportedClocks {
                mem_clocks_mhz: self.host.supported_mem_clocks_mhz.clone(),
                core_clock_step_mhz: self.host.supported_core_clock_step_mhz,
            }),
            DeviceKind::Real(tool) => {
                let args = ["-q", "-d", "SUPPORTED_CLOCKS"];
                let text = tool.run(&args)?;
                parse_supported_clocks(
                    &text,
                    &tool.command_line(&args),
                    self.host.supported_core_clock_step_mhz,
                )
            }
        }
    }
}

fn format_watts(w: f64) -> String {
    if w.fract() == 0.0 {
        format!("{}", w as i64)
    } else {
        format!("{w:.2}")
    }
}

/// Parses `nvidia-smi -q -d SUPPORTED_CLOCKS` output.
///
/// `Memory : N MHz` lines give the memory clock set; the core-clock step is
/// the GCD of gaps between `Graphics : N MHz` entries, falling back to
/// `default_step` when fewer than two graphics clocks are listed.
pub fn parse_supported_clocks(text: &str, command: &str, default_step: u32) -> Result<SupportedClocks, DeviceError> {
    let parse_err = |line_no: usize, line: &str| DeviceError::Parse {
        command: command.to_string(),
        line_no,
        line: line.trim().to_string(),
    };
    let mut mem = Vec::new();
    let mut graphics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let target = match key {
            "Memory" => &mut mem,
            "Graphics" => &mut graphics,
            _ => continue,
        };
        let mhz = value
            .trim()
            .strip_suffix("MHz")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| parse_err(i + 1, line))?;
        target.push(mhz);
    }
    if mem.is_empty() {
        let (line_no, line) = text
            .lines()
            .enumerate()
            .find(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l))
            .unwrap_or((0, ""));
        return Err(parse_err(line_no, line));
    }
    mem.sort_unstable();
    mem.dedup();
    graphics.sort_unstable();
    graphics.dedup();
    let step = graphics.windows(2).map(|w| w[1] - w[0]).fold(0, gcd);
    Ok(SupportedClocks {
        mem_clocks_mhz: mem,
        core_clock_step_mhz: if step == 0 { default_step } else { step },
    })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
