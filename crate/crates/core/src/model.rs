//! Reference GPU database and emulation tier derivation.
//!
//! A tier is derived from a reference card's vendor numbers: its sustained
//! throughput target is two thirds of the theoretical FP32 peak, its memory
//! clock is scaled from the host's by bandwidth ratio and then snapped onto the
//! host's supported clock set, and its power cap is the reference board power
//! clamped into the host's settable range. The core-clock cap starts at the
//! host nominal and is refined later by calibration.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of theoretical FP32 peak assumed sustainable under real workloads.
pub const SUSTAINED_FRACTION: f64 = 2.0 / 3.0;

/// Default tolerance for snapping a memory clock down to a supported value.
pub const DEFAULT_SNAP_THRESHOLD_PCT: f64 = 5.0;

/// The reference database shipped with the crate.
pub const BUILTIN_DATABASE: &str = include_str!("../data/gpus.toml");

const DATABASE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what} must be non-negative, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("{what} must be strictly positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("supported clock set is empty")]
    EmptyClockSet,
    #[error("invalid GPU spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("invalid host profile `{name}`: {reason}")]
    InvalidHost { name: String, reason: String },
    #[error("power cap {requested} W outside settable range [{min}, {max}] W")]
    PowerCapOutOfRange { requested: f64, min: f64, max: f64 },
    #[error("memory clock {requested} MHz is not supported; nearest supported: {}", join_mhz(.nearest))]
    UnsupportedMemClock { requested: u32, nearest: Vec<u32> },
    #[error("core clock {requested} MHz is not a positive multiple of {step} MHz; nearest settable: {}", join_mhz(.nearest))]
    UnsupportedCoreClock {
        requested: u32,
        step: u32,
        nearest: Vec<u32>,
    },
    #[error("unknown GPU `{0}` in spec database")]
    UnknownGpu(String),
    #[error("no host profile for `{0}` in spec database")]
    UnknownHost(String),
    #[error("duplicate GPU name `{0}` in spec database")]
    DuplicateGpu(String),
    #[error("spec database version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("failed to read spec database {path}: {message}")]
    Io { path: String, message: String },
    #[error("failed to parse spec database: {0}")]
    Parse(String),
}

fn join_mhz(values: &[u32]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")
}

/// Nominal vendor characteristics of a reference GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub theoretical_fp32_tflops: f64,
    pub nominal_power_w: f64,
    pub nominal_core_clock_mhz: u32,
    pub nominal_mem_bandwidth_gbs: f64,
    /// Only meaningful for cards used as emulation hosts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_mem_clock_mhz: Option<u32>,
    /// Emulated power cap to use instead of the clamped nominal power.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_override_w: Option<f64>,
}

impl GpuSpec {
    pub fn display_name(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::InvalidSpec {
            name: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(invalid("name is empty".into()));
        }
        for (what, value) in [
            ("theoretical_fp32_tflops", self.theoretical_fp32_tflops),
            ("nominal_power_w", self.nominal_power_w),
            ("nominal_mem_bandwidth_gbs", self.nominal_mem_bandwidth_gbs),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(format!("{what} must be positive, got {value}")));
            }
        }
        if self.nominal_core_clock_mhz == 0 {
            return Err(invalid("nominal_core_clock_mhz must be positive".into()));
        }
        if self.nominal_mem_clock_mhz == Some(0) {
            return Err(invalid("nominal_mem_clock_mhz must be positive".into()));
        }
        if let Some(p) = self.power_override_w {
            if !(p.is_finite() && p > 0.0) {
                return Err(invalid(format!("power_override_w must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

fn default_snap_threshold() -> f64 {
    DEFAULT_SNAP_THRESHOLD_PCT
}

/// The card doing the emulating, plus the control ranges its driver accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostProfile {
    pub spec: GpuSpec,
    pub supported_mem_clocks_mhz: Vec<u32>,
    pub supported_core_clock_step_mhz: u32,
    pub min_power_cap_w: f64,
    pub max_power_cap_w: f64,
    #[serde(default = "default_snap_threshold")]
    pub snap_threshold_pct: f64,
}

impl HostProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::InvalidHost {
            name: self.spec.name.clone(),
            reason,
        };
        self.spec.validate()?;
        let nominal_mem = self
            .spec
            .nominal_mem_clock_mhz
            .ok_or_else(|| invalid("host spec needs nominal_mem_clock_mhz".into()))?;
        if self.supported_mem_clocks_mhz.is_empty() {
            return Err(invalid("supported_mem_clocks_mhz is empty".into()));
        }
        if !self.supported_mem_clocks_mhz.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("supported_mem_clocks_mhz must be strictly ascending".into()));
        }
        if !self.supported_mem_clocks_mhz.contains(&nominal_mem) {
            return Err(invalid(format!(
                "supported_mem_clocks_mhz must contain the nominal {nominal_mem} MHz"
            )));
        }
        if self.supported_core_clock_step_mhz == 0 {
            return Err(invalid("supported_core_clock_step_mhz must be positive".into()));
        }
        if self.spec.nominal_core_clock_mhz < self.supported_core_clock_step_mhz {
            return Err(invalid("nominal core clock is below one clock step".into()));
        }
        if !(self.min_power_cap_w > 0.0 && self.min_power_cap_w <= self.max_power_cap_w) {
            return Err(invalid(format!(
                "power cap range [{}, {}] is invalid",
                self.min_power_cap_w, self.max_power_cap_w
            )));
        }
        if !(self.snap_threshold_pct >= 0.0) {
            return Err(invalid("snap_threshold_pct must be non-negative".into()));
        }
        Ok(())
    }

    pub fn nominal_mem_clock_mhz(&self) -> u32 {
        self.spec
            .nominal_mem_clock_mhz
            .unwrap_or_else(|| *self.supported_mem_clocks_mhz.last().unwrap_or(&0))
    }

    /// Highest settable core-clock cap not above the nominal clock.
    pub fn max_core_cap_mhz(&self) -> u32 {
        let step = self.supported_core_clock_step_mhz.max(1);
        (self.spec.nominal_core_clock_mhz / step) * step
    }

    /// Settable core-clock caps, ascending: `step, 2*step, ..., max_core_cap_mhz`.
    pub fn core_clock_ladder(&self) -> Vec<u32> {
        let step = self.supported_core_clock_step_mhz.max(1);
        (1..=self.max_core_cap_mhz() / step).map(|k| k * step).collect()
    }

    pub fn clamp_power(&self, watts: f64) -> f64 {
        watts.clamp(self.min_power_cap_w, self.max_power_cap_w)
    }

    /// The unthrottled operating point of the host.
    pub fn nominal_config(&self) -> ThrottleConfig {
        ThrottleConfig {
            power_cap_w: self.clamp_power(self.spec.nominal_power_w),
            core_clock_cap_mhz: self.max_core_cap_mhz(),
            mem_clock_cap_mhz: self.nominal_mem_clock_mhz(),
        }
    }
}

/// Power, core-clock, and memory-clock caps applied to a device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleConfig {
    pub power_cap_w: f64,
    pub core_clock_cap_mhz: u32,
    pub mem_clock_cap_mhz: u32,
}

impl ThrottleConfig {
    pub fn validate(&self, host: &HostProfile) -> Result<(), ModelError> {
        if !(self.power_cap_w >= host.min_power_cap_w && self.power_cap_w <= host.max_power_cap_w) {
            return Err(ModelError::PowerCapOutOfRange {
                requested: self.power_cap_w,
                min: host.min_power_cap_w,
                max: host.max_power_cap_w,
            });
        }
        if !host.supported_mem_clocks_mhz.contains(&self.mem_clock_cap_mhz) {
            return Err(ModelError::UnsupportedMemClock {
                requested: self.mem_clock_cap_mhz,
                nearest: nearest_values(&host.supported_mem_clocks_mhz, self.mem_clock_cap_mhz),
            });
        }
        let step = host.supported_core_clock_step_mhz;
        if self.core_clock_cap_mhz == 0 || step == 0 || !self.core_clock_cap_mhz.is_multiple_of(step) {
            let below = (self.core_clock_cap_mhz / step.max(1)) * step;
            let mut nearest: Vec<u32> = [below, below + step].into_iter().filter(|&v| v > 0).collect();
            nearest.dedup();
            return Err(ModelError::UnsupportedCoreClock {
                requested: self.core_clock_cap_mhz,
                step,
                nearest,
            });
        }
        Ok(())
    }
}

impl fmt::Display for ThrottleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} W / core {} MHz / mem {} MHz",
            self.power_cap_w, self.core_clock_cap_mhz, self.mem_clock_cap_mhz
        )
    }
}

/// Up to two supported values bracketing `requested`.
fn nearest_values(sorted: &[u32], requested: u32) -> Vec<u32> {
    let below = sorted.iter().rev().find(|&&v| v <= requested).copied();
    let above = sorted.iter().find(|&&v| v >= requested).copied();
    let mut out: Vec<u32> = below.into_iter().chain(above).collect();
    out.dedup();
    out
}

/// A derived emulation target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierPlan {
    pub target: GpuSpec,
    pub estimated_sustained_tflops: f64,
    pub required_mem_clock_mhz: u32,
    pub throttle: ThrottleConfig,
    pub mem_clock_deviation_pct: f64,
}

pub fn estimate_sustained_tflops(theoretical: f64) -> Result<f64, ModelError> {
    if !(theoretical >= 0.0) {
        return Err(ModelError::Negative {
            what: "theoretical TFLOPS",
            value: theoretical,
        });
    }
    Ok(theoretical * SUSTAINED_FRACTION)
}

/// Memory clock that would give the host `target_bw_gbs` of bandwidth,
/// assuming bandwidth scales linearly with memory clock. Rounded down.
pub fn required_mem_clock(target_bw_gbs: f64, ref_bw_gbs: f64, ref_mem_clock_mhz: u32) -> Result<u32, ModelError> {
    for (what, value) in [
        ("target bandwidth", target_bw_gbs),
        ("reference bandwidth", ref_bw_gbs),
        ("reference memory clock", ref_mem_clock_mhz as f64),
    ] {
        if !(value > 0.0) {
            return Err(ModelError::NonPositive { what, value });
        }
    }
    // Ratio first: exact when target == reference, and monotone in target.
    Ok((ref_mem_clock_mhz as f64 * (target_bw_gbs / ref_bw_gbs)).floor() as u32)
}

/// Picks the supported memory clock used to emulate `required` and returns it
/// with its signed deviation from `required` in percent.
///
/// The largest supported value at or below `required` is taken when it lies
/// within `threshold_pct` of it; otherwise the smallest value above, falling
/// back to the maximum when nothing is above.
pub fn snap_mem_clock(required: u32, supported: &[u32], threshold_pct: f64) -> Result<(u32, f64), ModelError> {
    if supported.is_empty() {
        return Err(ModelError::EmptyClockSet);
    }
    let below = supported.iter().copied().filter(|&v| v <= required).max();
    let above = supported.iter().copied().filter(|&v| v >= required).min();
    let max = supported.iter().copied().max().unwrap_or(required);

    let within = |v: u32| (required as f64 - v as f64) <= required as f64 * threshold_pct / 100.0;
    let chosen = match (below, above) {
        (Some(b), _) if within(b) => b,
        (_, Some(a)) => a,
        _ => max,
    };
    Ok((chosen, deviation_pct(chosen, required)))
}

fn deviation_pct(chosen: u32, required: u32) -> f64 {
    if required == 0 {
        return 0.0;
    }
    100.0 * (chosen as f64 - required as f64) / required as f64
}

pub fn derive_tier(
    target: &GpuSpec,
    host: &HostProfile,
    power_override_w: Option<f64>,
) -> Result<TierPlan, ModelError> {
    target.validate()?;
    host.validate()?;

    let estimated = estimate_sustained_tflops(target.theoretical_fp32_tflops)?;
    let required = required_mem_clock(
        target.nominal_mem_bandwidth_gbs,
        host.spec.nominal_mem_bandwidth_gbs,
        host.nominal_mem_clock_mhz(),
    )?;
    let (mem_clock, deviation) = snap_mem_clock(required, &host.supported_mem_clocks_mhz, host.snap_threshold_pct)?;
    let power = host.clamp_power(power_override_w.unwrap_or(target.nominal_power_w));

    Ok(TierPlan {
        target: target.clone(),
        estimated_sustained_tflops: estimated,
        required_mem_clock_mhz: required,
        throttle: ThrottleConfig {
            power_cap_w: power,
            core_clock_cap_mhz: host.max_core_cap_mhz(),
            mem_clock_cap_mhz: mem_clock,
        },
        mem_clock_deviation_pct: deviation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HostEntry {
    gpu: String,
    supported_mem_clocks_mhz: Vec<u32>,
    core_clock_step_mhz: u32,
    min_power_cap_w: f64,
    max_power_cap_w: f64,
    #[serde(default = "default_snap_threshold")]
    snap_threshold_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatabaseFile {
    version: u32,
    #[serde(default)]
    gpu: Vec<GpuSpec>,
    #[serde(default)]
    host: Vec<HostEntry>,
}

/// Reference GPUs and the host profiles that can emulate them.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecDatabase {
    gpus: Vec<GpuSpec>,
    hosts: Vec<HostProfile>,
}

impl SpecDatabase {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_DATABASE).expect("builtin spec database is valid")
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: DatabaseFile = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        if file.version != DATABASE_VERSION {
            return Err(ModelError::Version {
                found: file.version,
                expected: DATABASE_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for gpu in &file.gpu {
            gpu.validate()?;
            if !seen.insert(gpu.name.clone()) {
                return Err(ModelError::DuplicateGpu(gpu.name.clone()));
            }
        }
        let mut hosts = Vec::with_capacity(file.host.len());
        for entry in file.host {
            let spec = file
                .gpu
                .iter()
                .find(|g| g.name == entry.gpu)
                .cloned()
                .ok_or_else(|| ModelError::UnknownGpu(entry.gpu.clone()))?;
            let host = HostProfile {
                spec,
                supported_mem_clocks_mhz: entry.supported_mem_clocks_mhz,
                supported_core_clock_step_mhz: entry.core_clock_step_mhz,
                min_power_cap_w: entry.min_power_cap_w,
                max_power_cap_w: entry.max_power_cap_w,
                snap_threshold_pct: entry.snap_threshold_pct,
            };
            host.validate()?;
            hosts.push(host);
        }
        Ok(Self { gpus: file.gpu, hosts })
    }

    pub fn gpus(&self) -> &[GpuSpec] {
        &self.gpus
    }

    pub fn gpu(&self, name: &str) -> Result<&GpuSpec, ModelError> {
        self.gpus
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| ModelError::UnknownGpu(name.to_string()))
    }

    pub fn host(&self, name: &str) -> Result<&HostProfile, ModelError> {
        self.hosts
            .iter()
            .find(|h| h.spec.name == name)
            .ok_or_else(|| ModelError::UnknownHost(name.to_string()))
    }

    /// The first host profile, if any.
    pub fn default_host(&self) -> Option<&HostProfile> {
        self.hosts.first()
    }

    /// Derives the plan for `name`, honouring its per-tier power override.
    pub fn plan(&self, name: &str, host: &HostProfile) -> Result<TierPlan, ModelError> {
        let spec = self.gpu(name)?;
        derive_tier(spec, host, spec.power_override_w)
    }
}
