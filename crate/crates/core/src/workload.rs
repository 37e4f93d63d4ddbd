//! Timed renderer runs and the frame-log protocol.
//!
//! A workload reports each finished frame on stdout as
//!
//! ```text
//! F <frame_index> <t_start_s> <frame_time_ms>
//! ```
//!
//! where `t_start_s` is measured from the workload's own start. Any other
//! line is ignored.

use std::fmt::Write as _;
use std::io::BufRead;
use std::time::{Duration, Instant};

use crossbeam_channel::{never, select};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{sim_sustained_tflops, DeviceHandle, SIM_FIT};
use crate::process::{ChildProcess, ExitState, ManagedProcess, ThreadProcess};
use crate::telemetry::{trace_from_lines, ParseStats, PowerTrace, SamplerLauncher, TelemetryError};

pub const DEFAULT_GRACE: Duration = Duration::from_secs(5);
pub const DEFAULT_STALL_TIMEOUT: Duration = Duration::from_secs(10);
/// A workload that exits before this fraction of the run is a failure.
pub const PREMATURE_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("frame log contained no frames ({ignored} other lines)")]
    NoFrames { ignored: usize },
    #[error("frame log line {line_no}: frame index {index} does not follow {previous}")]
    NonMonotone { line_no: usize, previous: u64, index: u64 },
    #[error("failed to start workload `{command}`: {detail}")]
    Launch { command: String, detail: String },
    #[error("workload exited after {after_s:.2} s of a {duration_s} s run ({status})")]
    PrematureExit {
        status: ExitState,
        after_s: f64,
        duration_s: f64,
    },
    #[error("workload produced no frames within {0:.1} s")]
    Stall(f64),
    #[error("run windows of workload and telemetry do not overlap")]
    NoOverlap,
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            width: 1920,
            height: 1080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Program and arguments. `{splats}`, `{animated}`, `{width}` and
    /// `{height}` are substituted in every element. Empty for the synthetic
    /// workload.
    #[serde(default)]
    pub command: Vec<String>,
    pub splat_count: u64,
    #[serde(default)]
    pub animated: bool,
    #[serde(default)]
    pub animated_splats: u64,
    #[serde(default)]
    pub resolution: Resolution,
    pub duration_s: f64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if self.splat_count == 0 {
            return bad("splat_count must be positive".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if self.animated != (self.animated_splats > 0) {
            return bad(format!(
                "animated = {} but animated_splats = {}",
                self.animated, self.animated_splats
            ));
        }
        if self.resolution.width == 0 || self.resolution.height == 0 {
            return bad("resolution must be non-zero".into());
        }
        Ok(())
    }

    /// Splats drawn per frame, static plus animated.
    pub fn total_splats(&self) -> u64 {
        self.splat_count + self.animated_splats
    }

    pub fn render_command(&self) -> Vec<String> {
        self.command
            .iter()
            .map(|arg| {
                arg.replace("{splats}", &self.splat_count.to_string())
                    .replace("{animated}", if self.animated { "1" } else { "0" })
                    .replace("{width}", &self.resolution.width.to_string())
                    .replace("{height}", &self.resolution.height.to_string())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: u64,
    pub t_start_s: f64,
    pub frame_time_ms: f64,
}

impl Frame {
    pub fn end_s(&self) -> f64 {
        self.t_start_s + self.frame_time_ms / 1000.0
    }

    pub fn to_line(&self) -> String {
        format!("F {} {} {}", self.index, self.t_start_s, self.frame_time_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frames: Vec<Frame>,
}

impl FrameTrace {
    /// `[first start, last end]`.
    pub fn span(&self) -> Option<(f64, f64)> {
        let first = self.frames.first()?;
        let last = self.frames.last()?;
        Some((first.t_start_s, last.end_s()))
    }

    pub fn mean_frame_time_ms(&self) -> Option<f64> {
        if self.frames.is_empty() {
            return None;
        }
        Some(self.frames.iter().map(|f| f.frame_time_ms).sum::<f64>() / self.frames.len() as f64)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            let _ = writeln!(out, "{}", f.to_line());
        }
        out
    }
}

/// Parses one protocol line. `None` for anything that is not a well-formed
/// `F` line.
pub fn parse_frame_line(line: &str) -> Option<Frame> {
    let mut parts = line.split_ascii_whitespace();
    if parts.next()? != "F" {
        return None;
    }
    let index = parts.next()?.parse().ok()?;
    let t_start_s: f64 = parts.next()?.parse().ok()?;
    let frame_time_ms: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !t_start_s.is_finite() || !(frame_time_ms.is_finite() && frame_time_ms > 0.0) {
        return None;
    }
    Some(Frame {
        index,
        t_start_s,
        frame_time_ms,
    })
}

#[derive(Debug, Default)]
pub struct FrameLogParser {
    frames: Vec<Frame>,
    ignored: usize,
    lines: usize,
}

impl FrameLogParser {
    pub fn push_line(&mut self, line: &str) -> Result<Option<Frame>, WorkloadError> {
        self.lines += 1;
        let Some(frame) = parse_frame_line(line) else {
            self.ignored += 1;
            return Ok(None);
        };
        if let Some(prev) = self.frames.last() {
            if frame.index <= prev.index {
                return Err(WorkloadError::NonMonotone {
                    line_no: self.lines,
                    previous: prev.index,
                    index: frame.index,
                });
            }
        }
        self.frames.push(frame);
        Ok(Some(frame))
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn ignored(&self) -> usize {
        self.ignored
    }

    pub fn finish(self) -> Result<(FrameTrace, usize), WorkloadError> {
        if self.frames.is_empty() {
            return Err(WorkloadError::NoFrames { ignored: self.ignored });
        }
        Ok((FrameTrace { frames: self.frames }, self.ignored))
    }
}

/// Returns the trace and the number of ignored lines.
pub fn parse_frame_log(input: impl BufRead) -> Result<(FrameTrace, usize), WorkloadError> {
    let mut parser = FrameLogParser::default();
    for line in input.lines() {
        parser.push_line(&line?)?;
    }
    parser.finish()
}

/// Cost model for the synthetic splat renderer:
///
/// ```text
/// frame_ms = fixed_overhead_ms
///          + base_cost_ms * (splats + animation_penalty * animated_splats) / (tflops * 1e6)
/// ```
///
/// scaled by `1 + eps`, `eps` uniform in `±noise_fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorkload {
    pub fixed_overhead_ms: f64,
    pub base_cost_ms: f64,
    pub animation_penalty: f64,
    pub noise_fraction: f64,
}

#[derive(Deserialize)]
struct WorkloadFitFile {
    workload: SyntheticWorkload,
}

impl SyntheticWorkload {
    pub fn fitted() -> Self {
        let fit: WorkloadFitFile = toml::from_str(SIM_FIT).expect("sim_fit.toml is valid");
        fit.workload
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let ok = self.fixed_overhead_ms >= 0.0
            && self.base_cost_ms > 0.0
            && self.animation_penalty >= 0.0
            && (0.0..1.0).contains(&self.noise_fraction);
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::InvalidSpec(format!(
                "bad synthetic workload constants {self:?}"
            )))
        }
    }

    pub fn mean_frame_time_ms(&self, spec: &WorkloadSpec, tflops: f64) -> f64 {
        let work = spec.splat_count as f64 + self.animation_penalty * spec.animated_splats as f64;
        self.fixed_overhead_ms + self.base_cost_ms * work / (tflops * 1e6)
    }

    /// Endless frame sequence starting at t = 0, deterministic in `seed`.
    pub fn frames(&self, spec: &WorkloadSpec, tflops: f64, seed: u64) -> impl Iterator<Item = Frame> {
        let mean = self.mean_frame_time_ms(spec, tflops);
        let noise = self.noise_fraction;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        (0u64..).map(move |index| {
            let eps = if noise > 0.0 {
                rng.random_range(-noise..=noise)
            } else {
                0.0
            };
            let frame = Frame {
                index,
                t_start_s: t,
                frame_time_ms: mean * (1.0 + eps),
            };
            t += frame.frame_time_ms / 1000.0;
            frame
        })
    }
}

/// Starts the workload process for one run.
pub trait WorkloadLauncher {
    fn start(&self, spec: &WorkloadSpec, device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, WorkloadError>;
}

/// Runs `spec.command` as a subprocess.
#[derive(Debug, Clone, Copy, Default)]
pub struct CommandLauncher;

impl WorkloadLauncher for CommandLauncher {
    fn start(&self, spec: &WorkloadSpec, _device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, WorkloadError> {
        let argv = spec.render_command();
        if argv.is_empty() {
            return Err(WorkloadError::InvalidSpec("workload command is empty".into()));
        }
        let child = ChildProcess::spawn(&argv).map_err(|e| WorkloadError::Launch {
            command: argv.join(" "),
            detail: e.to_string(),
        })?;
        Ok(Box::new(child))
    }
}

/// Paces [`SyntheticWorkload`] frames in real time on a thread, at the
/// simulated device's current throughput.
#[derive(Debug, Clone)]
pub struct SyntheticLauncher {
    pub model: SyntheticWorkload,
    pub seed: u64,
}

impl WorkloadLauncher for SyntheticLauncher {
    fn start(&self, spec: &WorkloadSpec, device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, WorkloadError> {
        self.model.validate()?;
        let sim = device.sim_model().ok_or_else(|| WorkloadError::Launch {
            command: "synthetic workload".into(),
            detail: "device is not simulated".into(),
        })?;
        let tflops = sim_sustained_tflops(sim, &device.effective_config(), self.seed);
        let frames = self.model.frames(spec, tflops, self.seed);
        Ok(Box::new(ThreadProcess::spawn(move |sink| {
            let start = sink.started_at();
            for f in frames {
                if !sink.sleep_until(start + Duration::from_secs_f64(f.end_s())) {
                    return 0;
                }
                if !sink.emit(f.to_line()) {
                    return 0;
                }
            }
            0
        })))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub grace: Duration,
    pub stall_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            grace: DEFAULT_GRACE,
            stall_timeout: DEFAULT_STALL_TIMEOUT,
        }
    }
}

/// Both traces of one run, rebased so that the common window starts at 0.
#[derive(Debug, Clone)]
pub struct RunCapture {
    pub frames: FrameTrace,
    pub power: PowerTrace,
    pub window_s: f64,
    pub ignored_lines: usize,
    pub telemetry: ParseStats,
    pub workload_exit: ExitState,
}

struct Running {
    sampler: Box<dyn ManagedProcess>,
    workload: Option<Box<dyn ManagedProcess>>,
    grace: Duration,
}

impl Running {
    fn stop(&mut self) -> Result<Option<ExitState>, WorkloadError> {
        let exit = match self.workload.as_mut() {
            Some(w) => Some(w.terminate(self.grace)?),
            None => None,
        };
        self.sampler.terminate(self.grace)?;
        Ok(exit)
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(w) = self.workload.as_mut() {
            let _ = w.terminate(Duration::ZERO);
        }
        let _ = self.sampler.terminate(Duration::ZERO);
    }
}

/// One fixed-duration run: sampler first, then the workload; both streams
/// are consumed until `spec.duration_s` has elapsed since workload start.
pub fn run_workload(
    spec: &WorkloadSpec,
    device: &DeviceHandle,
    sampler: &dyn SamplerLauncher,
    launcher: &dyn WorkloadLauncher,
    options: &RunOptions,
) -> Result<RunCapture, WorkloadError> {
    spec.validate()?;
    let period = sampler.sample_period_s();
    let mut running = Running {
        sampler: sampler.start(device)?,
        workload: None,
        grace: options.grace,
    };
    let origin = running.sampler.started_at();
    let sampler_rx = running.sampler.take_lines().unwrap_or_else(never);
    running.workload = Some(launcher.start(spec, device)?);
    let workload = running.workload.as_mut().expect("just set");
    let started = workload.started_at();
    let workload_rx = workload.take_lines().unwrap_or_else(never);

    let duration = Duration::from_secs_f64(spec.duration_s);
    let deadline = started + duration;
    let mut telemetry_lines = Vec::new();
    let mut parser = FrameLogParser::default();
    let mut s_rx = sampler_rx.clone();
    let mut w_rx = workload_rx.clone();

    loop {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        if parser.frame_count() == 0 && now >= started + options.stall_timeout {
            return Err(WorkloadError::Stall(options.stall_timeout.as_secs_f64()));
        }
        let wake = deadline.min(now + Duration::from_millis(50));
        select! {
            recv(s_rx) -> msg => match msg {
                Ok(l) => telemetry_lines.push(l),
                Err(_) => s_rx = never(),
            },
            recv(w_rx) -> msg => match msg {
                Ok(l) => { parser.push_line(&l.line)?; }
                Err(_) => w_rx = never(),
            },
            default(wake.saturating_duration_since(now)) => {}
        }
        let workload = running.workload.as_mut().expect("set above");
        if let Some(status) = workload.try_wait()? {
            let after = started.elapsed().as_secs_f64();
            if after < PREMATURE_FRACTION * spec.duration_s {
                return Err(WorkloadError::PrematureExit {
                    status,
                    after_s: after,
                    duration_s: spec.duration_s,
                });
            }
            break;
        }
    }

    let exit = running.stop()?.unwrap_or(ExitState::Code(0));
    // Lines already queued before termination are part of the run; the
    // window trim below discards anything past the deadline.
    for l in workload_rx.try_iter() {
        if l.at <= deadline {
            parser.push_line(&l.line)?;
        }
    }
    telemetry_lines.extend(sampler_rx.try_iter());

    let (mut frames, ignored) = parser.finish()?;
    let (power, stats) = trace_from_lines(telemetry_lines, origin, period)?;

    let offset = started.saturating_duration_since(origin).as_secs_f64();
    for f in &mut frames.frames {
        f.t_start_s += offset;
    }
    let deadline_s = offset + spec.duration_s;
    let (f0, f1) = frames.span().ok_or(WorkloadError::NoFrames { ignored })?;
    let (p0, p1) = power.span().ok_or(TelemetryError::EmptyTrace {
        skipped: stats.skipped_rows,
    })?;
    let start = f0.max(p0).max(offset);
    let end = f1.min(p1).min(deadline_s);
    if end <= start {
        return Err(WorkloadError::NoOverlap);
    }
    frames.frames.retain(|f| f.t_start_s >= start && f.t_start_s < end);
    for f in &mut frames.frames {
        f.t_start_s -= start;
    }
    if frames.frames.is_empty() {
        return Err(WorkloadError::NoFrames { ignored });
    }
    Ok(RunCapture {
        frames,
        power: power.trimmed(start, end),
        window_s: end - start,
        ignored_lines: ignored,
        telemetry: stats,
        workload_exit: exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(splats: u64, animated: u64) -> WorkloadSpec {
        WorkloadSpec {
            command: vec![],
            splat_count: splats,
            animated: animated > 0,
            animated_splats: animated,
            resolution: Resolution::default(),
            duration_s: 2.0,
        }
    }

    #[test]
    fn parses_frames_and_ignores_chatter() {
        let log = "loading scene\nF 0 0.000 10.0\nwarning: x\nF 1 0.010 10.0\n";
        let (t, ignored) = parse_frame_log(log.as_bytes()).unwrap();
        assert_eq!(t.frames.len(), 2);
        assert_eq!(ignored, 2);
        assert_eq!(t.frames[1].t_start_s, 0.01);
    }

    #[test]
    fn rejects_out_of_order_and_empty_logs() {
        assert!(matches!(
            parse_frame_log("F 1 0 10\nF 0 0.01 10\n".as_bytes()),
            Err(WorkloadError::NonMonotone { line_no: 2, .. })
        ));
        assert!(matches!(
            parse_frame_log("hello\n".as_bytes()),
            Err(WorkloadError::NoFrames { ignored: 1 })
        ));
    }

    #[test]
    fn malformed_frame_lines_are_not_frames() {
        for line in [
            "F 0 0.0",
            "F 0 0.0 0",
            "F -1 0 1",
            "F 0 x 1",
            "F 0 0 1 extra",
            "f 0 0 1",
        ] {
            assert_eq!(parse_frame_line(line), None, "{line}");
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spec(580_604, 0).validate().is_ok());
        assert!(spec(0, 0).validate().is_err());
        let mut s = spec(1, 0);
        s.animated = true;
        assert!(s.validate().is_err());
        s.duration_s = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn command_placeholders() {
        let mut s = spec(580_604, 38_844);
        s.command = vec![
            "viewer".into(),
            "--splats={splats}".into(),
            "{animated}".into(),
            "{width}x{height}".into(),
        ];
        assert_eq!(s.render_command(), vec!["viewer", "--splats=580604", "1", "1920x1080"]);
    }

    #[test]
    fn synthetic_cost_is_linear_without_overhead() {
        let m = SyntheticWorkload {
            fixed_overhead_ms: 0.0,
            ..SyntheticWorkload::fitted()
        };
        let one = m.mean_frame_time_ms(&spec(1_000_000, 0), 20.0);
        let two = m.mean_frame_time_ms(&spec(2_000_000, 0), 20.0);
        assert!((two / one - 2.0).abs() < 1e-12);
        let static_ = SyntheticWorkload::fitted().mean_frame_time_ms(&spec(1_000_000, 0), 20.0);
        let mut animated_off = spec(1_000_000, 0);
        animated_off.animated_splats = 0;
        assert_eq!(
            SyntheticWorkload::fitted().mean_frame_time_ms(&animated_off, 20.0),
            static_
        );
    }

    #[test]
    fn fitted_constants_track_reference_column() {
        // RTX 4090 static column, 53.58 TFLOPS.
        let m = SyntheticWorkload::fitted();
        let cases = [(580_604, 58.8), (1_834_311, 51.3), (2_795_038, 47.9), (3_448_340, 44.8)];
        for (splats, fps) in cases {
            let got = 1000.0 / m.mean_frame_time_ms(&spec(splats, 0), 53.58);
            assert!((got / fps - 1.0).abs() < 0.15, "{splats}: {got} vs {fps}");
        }
    }

    #[test]
    fn synthetic_frames_are_contiguous() {
        let m = SyntheticWorkload {
            noise_fraction: 0.02,
            ..SyntheticWorkload::fitted()
        };
        let frames: Vec<Frame> = m.frames(&spec(580_604, 0), 26.0, 3).take(50).collect();
        for w in frames.windows(2) {
            assert_eq!(w[1].index, w[0].index + 1);
            assert!((w[1].t_start_s - w[0].end_s()).abs() < 1e-12);
        }
        let again: Vec<Frame> = m.frames(&spec(580_604, 0), 26.0, 3).take(50).collect();
        assert_eq!(frames, again);
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            raw in proptest::collection::vec((1u64..1000, -1e3f64..1e6, 1e-6f64..1e4), 1..200)
        ) {
            let mut index = 0;
            let frames: Vec<Frame> = raw
                .into_iter()
                .map(|(step, t_start_s, frame_time_ms)| {
                    index += step;
                    Frame { index, t_start_s, frame_time_ms }
                })
                .collect();
            let trace = FrameTrace { frames };
            let (back, ignored) = parse_frame_log(trace.serialize().as_bytes()).unwrap();
            prop_assert_eq!(ignored, 0);
            prop_assert_eq!(back, trace);
        }

        #[test]
        fn synthetic_mean_monotone(
            splats in 1u64..10_000_000, extra in 1u64..1_000_000,
            tflops in 0.5f64..80.0, factor in 1.001f64..4.0,
        ) {
            let m = SyntheticWorkload::fitted();
            let s = spec(splats, 0);
            prop_assert!(m.mean_frame_time_ms(&s, tflops * factor) < m.mean_frame_time_ms(&s, tflops));
            prop_assert!(m.mean_frame_time_ms(&spec(splats + extra, 0), tflops) > m.mean_frame_time_ms(&s, tflops));
        }
    }
}
