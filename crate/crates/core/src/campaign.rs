//! Campaign manifests and end-to-end execution.
//!
//! A campaign is the grid tiers × workloads × repeats. Runs are executed
//! tier-major so each tier is calibrated once; every record is appended to the
//! result store as soon as it exists, and keys already present are skipped,
//! which makes an interrupted campaign resumable by simply running it again.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    calibrate_core_clock, verify_tier, CalibrationError, CalibrationOptions, ProbeParams, ProbeRunner,
};
use crate::device::{DeviceError, DeviceHandle};
use crate::metrics::{fps_stats, EnergyMetrics, RunKey, RunRecord, DEFAULT_BUCKET_S};
use crate::model::{ModelError, SpecDatabase};
use crate::store::{unix_ms_now, CalibrationEntry, Event, EventKind, ResultStore, StoreError, StoreWriter};
use crate::telemetry::{
    average_power, validate_envelope, EnvelopeTolerances, SamplerLauncher, DEFAULT_SAMPLE_PERIOD_S,
};
use crate::workload::{run_workload, Resolution, RunOptions, WorkloadLauncher, WorkloadSpec};

pub const DEFAULT_REPEATS: u32 = 3;
pub const LOCK_FILE: &str = ".gpu-tier-bench.lock";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("output directory {path} is locked by another campaign (pid {pid})")]
    Locked { path: String, pid: String },
    #[error("device control failed, campaign aborted: {0}")]
    Device(#[from] DeviceError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn default_repeats() -> u32 {
    DEFAULT_REPEATS
}

fn default_bucket() -> f64 {
    DEFAULT_BUCKET_S
}

fn default_period() -> f64 {
    DEFAULT_SAMPLE_PERIOD_S
}

/// One scene configuration in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub splat_count: u64,
    /// Defaults to `animated_splats > 0`.
    #[serde(default)]
    pub animated: Option<bool>,
    #[serde(default)]
    pub animated_splats: u64,
    /// Overrides the manifest-level command.
    #[serde(default)]
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignManifest {
    pub campaign_id: String,
    /// Spec database file; the built-in one when absent.
    #[serde(default)]
    pub spec_db: Option<PathBuf>,
    pub host: String,
    pub tiers: Vec<String>,
    pub workloads: Vec<WorkloadEntry>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    pub duration_s: f64,
    pub output_dir: PathBuf,
    #[serde(default = "default_bucket")]
    pub bucket_s: f64,
    #[serde(default = "default_period")]
    pub sample_period_s: f64,
    /// Workload command template, see [`WorkloadSpec::command`].
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub resolution: Resolution,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub probe: ProbeParams,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub envelope: EnvelopeTolerances,
}

impl CampaignManifest {
    pub fn from_toml_str(text: &str) -> Result<Self, CampaignError> {
        let m: CampaignManifest = toml::from_str(text).map_err(|e| CampaignError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Loads a manifest; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text = std::fs::read_to_string(path).map_err(|e| CampaignError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut m = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if m.output_dir.is_relative() {
            m.output_dir = base.join(&m.output_dir);
        }
        if let Some(db) = m.spec_db.as_mut() {
            if db.is_relative() {
                *db = base.join(&*db);
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::Manifest(m));
        if self.campaign_id.trim().is_empty() {
            return bad("campaign_id must not be empty".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.tiers.is_empty() || self.workloads.is_empty() {
            return bad("tiers and workloads must not be empty".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        for (what, v) in [("bucket_s", self.bucket_s), ("sample_period_s", self.sample_period_s)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{what} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn spec_database(&self) -> Result<SpecDatabase, CampaignError> {
        Ok(match &self.spec_db {
            Some(path) => SpecDatabase::load(path)?,
            None => SpecDatabase::builtin(),
        })
    }

    pub fn workload_spec(&self, entry: &WorkloadEntry) -> WorkloadSpec {
        WorkloadSpec {
            command: entry.command.clone().unwrap_or_else(|| self.command.clone()),
            splat_count: entry.splat_count,
            animated: entry.animated.unwrap_or(entry.animated_splats > 0),
            animated_splats: entry.animated_splats,
            resolution: self.resolution,
            duration_s: self.duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub tier_name: String,
    pub workload: WorkloadSpec,
    pub repeat_index: u32,
}

impl PlannedRun {
    pub fn key(&self) -> RunKey {
        RunKey {
            tier_name: self.tier_name.clone(),
            splat_count: self.workload.splat_count,
            animated: self.workload.animated,
            repeat_index: self.repeat_index,
        }
    }
}

/// Tier-major cartesian product of tiers × workloads × repeats.
pub fn expand_grid(manifest: &CampaignManifest, db: &SpecDatabase) -> Result<Vec<PlannedRun>, CampaignError> {
    manifest.validate()?;
    let mut tiers = HashSet::new();
    for tier in &manifest.tiers {
        db.gpu(tier)?;
        if !tiers.insert(tier) {
            return Err(CampaignError::Manifest(format!("tier `{tier}` listed twice")));
        }
    }
    let mut keys = HashSet::new();
    let mut specs = Vec::new();
    for entry in &manifest.workloads {
        let spec = manifest.workload_spec(entry);
        spec.validate().map_err(|e| CampaignError::Manifest(e.to_string()))?;
        if !keys.insert((spec.splat_count, spec.animated)) {
            return Err(CampaignError::Manifest(format!(
                "duplicate workload (splat_count {}, animated {})",
                spec.splat_count, spec.animated
            )));
        }
        specs.push(spec);
    }
    let mut out = Vec::with_capacity(manifest.tiers.len() * specs.len() * manifest.repeats as usize);
    for tier in &manifest.tiers {
        for spec in &specs {
            for repeat_index in 0..manifest.repeats {
                out.push(PlannedRun {
                    tier_name: tier.clone(),
                    workload: spec.clone(),
                    repeat_index,
                });
            }
        }
    }
    Ok(out)
}

/// Exclusive claim on an output directory, released on drop. A lock left by
/// a process that no longer exists is taken over.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CampaignError> {
        let path = dir.join(LOCK_FILE);
        let io = |e: std::io::Error| CampaignError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(io)?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path).unwrap_or_default();
                    let pid = holder.trim().to_string();
                    if pid.parse::<i32>().is_ok_and(process_alive) {
                        return Err(CampaignError::Locked {
                            path: dir.display().to_string(),
                            pid,
                        });
                    }
                    warn!("removing stale lock {} (pid {pid})", path.display());
                    std::fs::remove_file(&path).map_err(io)?;
                }
                Err(e) => return Err(io(e)),
            }
        }
        Err(CampaignError::Locked {
            path: dir.display().to_string(),
            pid: "unknown".into(),
        })
    }
}

fn process_alive(pid: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    // Signal 0 only checks existence; EPERM still means the process exists.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Everything that touches the (real or simulated) machine.
pub struct Backend<'a> {
    pub device: &'a mut DeviceHandle,
    pub probe: &'a mut dyn ProbeRunner,
    pub sampler: &'a dyn SamplerLauncher,
    pub workload: &'a dyn WorkloadLauncher,
    pub run_options: RunOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Progress {
    TierStarted {
        tier: String,
        pending_runs: usize,
    },
    TierCalibrated {
        tier: String,
        core_clock_cap_mhz: u32,
        deviation_pct: f64,
    },
    TierFailed {
        tier: String,
        reason: String,
    },
    RunFinished {
        key: RunKey,
        mean_fps: f64,
        p_avg_w: f64,
    },
    RunFailed {
        key: RunKey,
        reason: String,
    },
}

#[derive(Debug)]
pub struct CampaignOutcome {
    pub store: ResultStore,
    pub launched: usize,
    pub skipped: usize,
    pub failed_runs: usize,
    pub failed_tiers: Vec<String>,
    pub warnings: Vec<String>,
}

fn trace_stem(key: &RunKey) -> String {
    format!(
        "{}_{}_{}_r{}",
        key.tier_name,
        key.splat_count,
        if key.animated { "anim" } else { "static" },
        key.repeat_index
    )
}

/// Runs every planned run not yet in the store under `manifest.output_dir`.
///
/// The device is reset when the campaign ends, including when it aborts.
pub fn execute_campaign(
    manifest: &CampaignManifest,
    backend: &mut Backend<'_>,
    progress: &mut dyn FnMut(&Progress),
) -> Result<CampaignOutcome, CampaignError> {
    let db = manifest.spec_database()?;
    let plan = expand_grid(manifest, &db)?;
    std::fs::create_dir_all(&manifest.output_dir).map_err(|e| CampaignError::Io {
        path: manifest.output_dir.display().to_string(),
        message: e.to_string(),
    })?;
    let _lock = OutputLock::acquire(&manifest.output_dir)?;
    let (mut writer, load_warnings) = StoreWriter::open(&manifest.output_dir, &manifest.campaign_id)?;
    let mut outcome = CampaignOutcome {
        store: ResultStore::default(),
        launched: 0,
        skipped: 0,
        failed_runs: 0,
        failed_tiers: vec![],
        warnings: load_warnings.iter().map(|w| w.to_string()).collect(),
    };

    let result = run_plan(manifest, &db, &plan, backend, &mut writer, &mut outcome, progress);
    let reset = backend.device.reset_throttle();
    match (&result, &reset) {
        (Ok(()), Ok(())) => {
            writer.add_event(Event::new(
                EventKind::CampaignFinished,
                format!("{} runs launched", outcome.launched),
            ))?;
        }
        (Err(e), _) => {
            let _ = writer.add_event(Event::new(EventKind::CampaignAborted, e.to_string()));
        }
        (Ok(()), Err(_)) => {}
    }
    if let Err(e) = &reset {
        let _ = writer.add_event(Event::new(EventKind::DeviceReset, format!("reset failed: {e}")));
    }
    result?;
    reset?;
    outcome.store = writer.into_store();
    Ok(outcome)
}

fn run_plan(
    manifest: &CampaignManifest,
    db: &SpecDatabase,
    plan: &[PlannedRun],
    backend: &mut Backend<'_>,
    writer: &mut StoreWriter,
    outcome: &mut CampaignOutcome,
    progress: &mut dyn FnMut(&Progress),
) -> Result<(), CampaignError> {
    let host = db.host(&manifest.host)?.clone();
    if backend.device.host().spec.name != host.spec.name {
        return Err(CampaignError::Manifest(format!(
            "manifest host `{}` does not match the device host `{}`",
            host.spec.name,
            backend.device.host().spec.name
        )));
    }
    let done = writer.store().keys();
    if writer.store().records().next().is_some() {
        writer.add_event(Event::new(
            EventKind::CampaignStarted,
            format!("resuming with {} completed runs", done.len()),
        ))?;
    } else {
        writer.add_event(Event::new(
            EventKind::CampaignStarted,
            format!("{} planned runs", plan.len()),
        ))?;
    }

    for tier in &manifest.tiers {
        let runs: Vec<&PlannedRun> = plan.iter().filter(|r| &r.tier_name == tier).collect();
        let pending: Vec<&PlannedRun> = runs.iter().copied().filter(|r| !done.contains(&r.key())).collect();
        outcome.skipped += runs.len() - pending.len();
        if pending.is_empty() {
            continue;
        }
        progress(&Progress::TierStarted {
            tier: tier.clone(),
            pending_runs: pending.len(),
        });
        let Some(entry) = calibrate_tier(manifest, db, tier, backend, writer)? else {
            let reason = writer
                .store()
                .calibration(tier)
                .and_then(|c| c.error.clone())
                .unwrap_or_default();
            outcome.failed_tiers.push(tier.clone());
            progress(&Progress::TierFailed {
                tier: tier.clone(),
                reason,
            });
            continue;
        };
        if let Some(report) = &entry.report {
            progress(&Progress::TierCalibrated {
                tier: tier.clone(),
                core_clock_cap_mhz: report.final_config.core_clock_cap_mhz,
                deviation_pct: report.deviation_pct,
            });
        }
        for run in pending {
            outcome.launched += 1;
            match execute_run(manifest, run, backend) {
                Ok(record) => {
                    progress(&Progress::RunFinished {
                        key: record.key(),
                        mean_fps: record.fps.mean_fps,
                        p_avg_w: record.energy.p_avg_w,
                    });
                    if record.violations > 0 {
                        warn!("{}: {} envelope violations", record.key(), record.violations);
                    }
                    writer.add_record(record)?;
                }
                Err(reason) => {
                    outcome.failed_runs += 1;
                    warn!("run {} failed: {reason}", run.key());
                    writer.add_event(Event::new(EventKind::RunFailed, reason.clone()).key(run.key()))?;
                    progress(&Progress::RunFailed { key: run.key(), reason });
                }
            }
        }
    }
    Ok(())
}

/// Derives, calibrates and verifies one tier. `Ok(None)` when the tier could
/// not be calibrated; device-control failures abort the campaign instead.
fn calibrate_tier(
    manifest: &CampaignManifest,
    db: &SpecDatabase,
    tier: &str,
    backend: &mut Backend<'_>,
    writer: &mut StoreWriter,
) -> Result<Option<CalibrationEntry>, CampaignError> {
    let plan = db.plan(tier, backend.device.host())?;
    info!(
        "tier {tier}: target {:.2} TFLOPS, start config {}",
        plan.estimated_sustained_tflops, plan.throttle
    );
    let mut entry = CalibrationEntry {
        tier_name: tier.to_string(),
        ok: false,
        report: None,
        verified: None,
        error: None,
        at_unix_ms: unix_ms_now(),
    };
    let calibrated = calibrate_core_clock(
        backend.device,
        backend.probe,
        &plan,
        &manifest.probe,
        &manifest.calibration,
    );
    match calibrated {
        Ok(report) => match verify_tier(backend.device, backend.probe, &report, &manifest.probe) {
            Ok(verified) => {
                if !verified.within(manifest.calibration.tolerance_pct) {
                    writer.add_event(
                        Event::new(
                            EventKind::Warning,
                            format!(
                                "verification measured {:.3} TFLOPS ({:+.2}%)",
                                verified.measured_tflops, verified.deviation_pct
                            ),
                        )
                        .tier(tier),
                    )?;
                }
                entry.ok = true;
                entry.report = Some(report);
                entry.verified = Some(verified);
            }
            Err(CalibrationError::Device(e)) => return Err(e.into()),
            Err(e) => {
                entry.report = Some(report);
                entry.error = Some(format!("verification failed: {e}"));
            }
        },
        Err(CalibrationError::Device(e)) => return Err(e.into()),
        Err(CalibrationError::NonConvergence(report)) => {
            entry.error = Some(CalibrationError::NonConvergence(report.clone()).to_string());
            entry.report = Some(*report);
        }
        Err(e) => entry.error = Some(e.to_string()),
    }
    let ok = entry.ok;
    if let Some(error) = &entry.error {
        warn!("tier {tier} failed: {error}");
        writer.add_event(Event::new(EventKind::TierFailed, error.clone()).tier(tier))?;
    }
    writer.add_calibration(entry.clone())?;
    Ok(ok.then_some(entry))
}

/// One run under the currently applied caps. Errors are returned as text:
/// they fail the run, not the campaign.
fn execute_run(manifest: &CampaignManifest, run: &PlannedRun, backend: &mut Backend<'_>) -> Result<RunRecord, String> {
    let key = run.key();
    info!("run {key}");
    let started_unix_ms = unix_ms_now();
    let capture = run_workload(
        &run.workload,
        backend.device,
        backend.sampler,
        backend.workload,
        &backend.run_options,
    )
    .map_err(|e| e.to_string())?;
    let finished_unix_ms = unix_ms_now();

    let traces = manifest.output_dir.join(TRACE_DIR);
    let stem = trace_stem(&key);
    let saved = std::fs::create_dir_all(&traces)
        .and_then(|_| std::fs::write(traces.join(format!("{stem}.frames.log")), capture.frames.serialize()))
        .map_err(|e| e.to_string())
        .and_then(|_| {
            let f = std::fs::File::create(traces.join(format!("{stem}.power.csv"))).map_err(|e| e.to_string())?;
            capture
                .power
                .write_to(std::io::BufWriter::new(f))
                .map_err(|e| e.to_string())
        });
    if let Err(e) = saved {
        warn!("could not save traces for {key}: {e}");
    }

    let fps = fps_stats(&capture.frames, manifest.bucket_s).map_err(|e| e.to_string())?;
    let p_avg = average_power(&capture.power, 0.0, capture.window_s).map_err(|e| e.to_string())?;
    let energy = EnergyMetrics::new(p_avg, fps.mean_fps).map_err(|e| e.to_string())?;
    let violations = validate_envelope(&capture.power, &backend.device.effective_config(), &manifest.envelope).len();
    Ok(RunRecord {
        tier_name: run.tier_name.clone(),
        splat_count: run.workload.splat_count,
        animated: run.workload.animated,
        animated_splats: run.workload.animated_splats,
        repeat_index: run.repeat_index,
        duration_s: capture.window_s,
        fps,
        energy,
        violations,
        started_unix_ms,
        finished_unix_ms,
        peak_memory_mb: None,
    })
}
