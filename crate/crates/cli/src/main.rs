use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use gpu_tier_bench::calibrate::{
    calibrate_core_clock, measure_sustained_tflops, CalibrationError, CalibrationOptions, ProbeParams, ProbeRunner,
    SimulatedProbe, SubprocessProbe,
};
use gpu_tier_bench::campaign::{execute_campaign, Backend, CampaignError, CampaignManifest, Progress, WorkloadEntry};
use gpu_tier_bench::device::{DeviceError, DeviceHandle, NvidiaSmi, SimModel};
use gpu_tier_bench::model::{SpecDatabase, ThrottleConfig};
use gpu_tier_bench::process::ManagedProcess;
use gpu_tier_bench::report::{render_report, ReportFormat};
use gpu_tier_bench::store::{EventKind, ResultStore};
use gpu_tier_bench::telemetry::{
    average_power, parse_dmon_stream, DmonSampler, EnvelopeTolerances, SamplerLauncher, SimulatedSampler,
    DEFAULT_SAMPLE_PERIOD_S,
};
use gpu_tier_bench::workload::{
    CommandLauncher, Resolution, RunOptions, SyntheticLauncher, SyntheticWorkload, WorkloadError, WorkloadLauncher,
    WorkloadSpec,
};

const PROBE_ENV: &str = "GPU_TIER_BENCH_PROBE";

#[derive(Parser, Debug)]
#[command(
    name = "gpu-tier-bench",
    version,
    about = "Emulate weaker GPUs on a throttled host and benchmark them"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// GPU database (TOML); the built-in one when omitted.
    #[arg(long, global = true)]
    spec_db: Option<PathBuf>,
    /// Host GPU the tiers are emulated on.
    #[arg(long, global = true)]
    host: Option<String>,
    /// `real` drives nvidia-smi, found on PATH or at $GPU_TIER_BENCH_NVIDIA_SMI.
    #[arg(long, global = true, value_enum, default_value_t = DeviceKind::Sim)]
    device: DeviceKind,
    /// Required before any control command is sent to a real GPU.
    #[arg(long, global = true)]
    i_have_root: bool,
    #[arg(long, global = true, default_value_t = 0)]
    gpu_index: u32,
    /// Relative noise of the simulated device and workload.
    #[arg(long, global = true, default_value_t = 0.0)]
    sim_noise: f64,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DeviceKind {
    Sim,
    Real,
}

#[derive(Args, Debug, Clone)]
struct ProbeArgs {
    /// GEMM probe executable (real device).
    #[arg(long, env = PROBE_ENV)]
    probe: Option<PathBuf>,
    /// Square GEMM size m = n = k.
    #[arg(long)]
    probe_size: Option<u64>,
    #[arg(long)]
    probe_iterations: Option<u64>,
}

impl ProbeArgs {
    fn params(&self) -> ProbeParams {
        let mut p = ProbeParams::default();
        if let Some(s) = self.probe_size {
            p.m = s;
            p.n = s;
            p.k = s;
        }
        if let Some(i) = self.probe_iterations {
            p.iterations = i;
        }
        p
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the tier derivation for every GPU in the database.
    Tiers {
        #[arg(long, value_enum, default_value_t = TiersFormat::Table)]
        format: TiersFormat,
    },
    /// Search the core-clock cap that makes the host match a tier. Prints the report as JSON.
    Calibrate {
        #[arg(long)]
        tier: String,
        #[arg(long, default_value_t = gpu_tier_bench::calibrate::DEFAULT_TOLERANCE_PCT)]
        tolerance_pct: f64,
        #[arg(long, default_value_t = gpu_tier_bench::calibrate::DEFAULT_MAX_PROBES)]
        max_probes: u32,
        /// Reset the real device afterwards instead of leaving the caps applied.
        #[arg(long)]
        reset: bool,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Apply a tier's derived caps, or explicit caps. Prints the applied config as JSON.
    Apply {
        #[arg(long, required_unless_present_all = ["power_cap_w", "core_clock_mhz", "mem_clock_mhz"])]
        tier: Option<String>,
        #[arg(long)]
        power_cap_w: Option<f64>,
        #[arg(long)]
        core_clock_mhz: Option<u32>,
        #[arg(long)]
        mem_clock_mhz: Option<u32>,
    },
    /// Restore default clocks and the maximum power limit.
    Reset,
    /// Measure sustained TFLOPS with the GEMM probe.
    Measure {
        /// Apply this tier's derived caps for the measurement, then reset.
        #[arg(long)]
        tier: Option<String>,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Calibrate a tier and run one workload under it. Prints the run record as JSON.
    Run {
        #[arg(long)]
        tier: String,
        #[arg(long)]
        splats: u64,
        #[arg(long, default_value_t = 0)]
        animated_splats: u64,
        #[arg(long, default_value_t = 120.0)]
        duration_s: f64,
        #[arg(long, default_value_t = gpu_tier_bench::metrics::DEFAULT_BUCKET_S)]
        bucket_s: f64,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_PERIOD_S)]
        sample_period_s: f64,
        /// Results directory (results, traces).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        probe: ProbeArgs,
        /// Workload command; `{splats}`, `{animated}`, `{width}` and `{height}` are substituted.
        #[arg(last = true)]
        command: Vec<String>,
    },
    /// Execute (or resume) a campaign manifest.
    Campaign {
        manifest: PathBuf,
        /// Overrides the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Render a results directory as a table, CSV or SVG charts.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Where to write; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a saved `nvidia-smi dmon` log and summarise it.
    ParseDmon {
        /// Log file, or `-` for stdin.
        file: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLE_PERIOD_S)]
        period_s: f64,
        #[arg(long)]
        from_s: Option<f64>,
        #[arg(long)]
        to_s: Option<f64>,
        /// Print the parsed trace as CSV instead of the summary.
        #[arg(long)]
        csv: bool,
    },
    #[command(hide = true)]
    SynthWorkload {
        #[arg(long)]
        tflops: f64,
        #[arg(long)]
        splats: u64,
        #[arg(long, default_value_t = 0)]
        animated_splats: u64,
        #[arg(long)]
        duration_s: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TiersFormat {
    Table,
    Json,
}

/// Bad invocation that clap cannot catch; exits with 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<DeviceError>()
            || matches!(
                cause.downcast_ref::<CalibrationError>(),
                Some(CalibrationError::Device(_))
            )
            || matches!(cause.downcast_ref::<CampaignError>(), Some(CampaignError::Device(_)))
        {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct App {
    global: Global,
    db: SpecDatabase,
}

impl App {
    fn new(global: Global) -> Result<Self> {
        let db = match &global.spec_db {
            Some(p) => SpecDatabase::load(p)?,
            None => SpecDatabase::builtin(),
        };
        Ok(Self { global, db })
    }

    fn host_name(&self) -> Result<String> {
        match &self.global.host {
            Some(h) => Ok(h.clone()),
            None => Ok(self
                .db
                .default_host()
                .ok_or_else(|| anyhow!("the GPU database defines no host"))?
                .spec
                .name
                .clone()),
        }
    }

    /// `mutates` commands refuse a real device without `--i-have-root`.
    fn device(&self, mutates: bool) -> Result<DeviceHandle> {
        let host = self.db.host(&self.host_name()?)?.clone();
        match self.global.device {
            DeviceKind::Sim => Ok(DeviceHandle::simulated(
                host,
                SimModel::fitted().with_noise(self.global.sim_noise),
            )),
            DeviceKind::Real => {
                if mutates && !self.global.i_have_root {
                    return Err(usage(
                        "this command changes GPU power and clock limits for the whole machine; pass --i-have-root to confirm",
                    ));
                }
                Ok(DeviceHandle::real(host, NvidiaSmi::from_env(self.global.gpu_index)))
            }
        }
    }

    fn probe(&self, args: &ProbeArgs, seed: u64) -> Result<Box<dyn ProbeRunner>> {
        match (self.global.device, &args.probe) {
            (DeviceKind::Sim, _) => Ok(Box::new(SimulatedProbe::new(seed))),
            (DeviceKind::Real, Some(p)) => Ok(Box::new(SubprocessProbe::new(p))),
            (DeviceKind::Real, None) => Err(usage(format!(
                "a real device needs the GEMM probe: pass --probe or set {PROBE_ENV}"
            ))),
        }
    }

    fn sampler(&self, period_s: f64, seed: u64) -> Box<dyn SamplerLauncher> {
        match self.global.device {
            DeviceKind::Sim => Box::new(SimulatedSampler { period_s, seed }),
            DeviceKind::Real => Box::new(DmonSampler {
                tool: NvidiaSmi::from_env(self.global.gpu_index),
                period_s: period_s.ceil().max(1.0) as u32,
            }),
        }
    }

    fn workload(&self, seed: u64) -> Launcher {
        Launcher {
            synthetic: (self.global.device == DeviceKind::Sim).then(|| SyntheticLauncher {
                model: SyntheticWorkload {
                    noise_fraction: self.global.sim_noise,
                    ..SyntheticWorkload::fitted()
                },
                seed,
            }),
        }
    }

    fn labels(&self) -> HashMap<String, String> {
        self.db
            .gpus()
            .iter()
            .map(|g| (g.name.clone(), g.display_name().to_string()))
            .collect()
    }
}

/// Runs the workload command when there is one; otherwise the synthetic
/// workload, which only exists on the simulated device.
struct Launcher {
    synthetic: Option<SyntheticLauncher>,
}

impl WorkloadLauncher for Launcher {
    fn start(&self, spec: &WorkloadSpec, device: &DeviceHandle) -> Result<Box<dyn ManagedProcess>, WorkloadError> {
        match (&self.synthetic, spec.command.is_empty()) {
            (_, false) => CommandLauncher.start(spec, device),
            (Some(s), true) => s.start(spec, device),
            (None, true) => Err(WorkloadError::InvalidSpec(
                "a real device needs a workload command".into(),
            )),
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let ctx = App::new(cli.global)?;
    match cli.command {
        Command::Tiers { format } => tiers(&ctx, format),
        Command::Calibrate {
            tier,
            tolerance_pct,
            max_probes,
            reset,
            probe,
        } => {
            let mut device = ctx.device(true)?;
            let mut runner = ctx.probe(&probe, 0)?;
            let plan = ctx.db.plan(&tier, device.host())?;
            let options = CalibrationOptions {
                tolerance_pct,
                max_probes,
                ..CalibrationOptions::default()
            };
            let result = calibrate_core_clock(&mut device, runner.as_mut(), &plan, &probe.params(), &options);
            if reset || ctx.global.device == DeviceKind::Sim {
                device.reset_throttle()?;
            }
            match result {
                Ok(report) => {
                    print_json(&report)?;
                    Ok(0)
                }
                Err(CalibrationError::NonConvergence(report)) => {
                    print_json(&report)?;
                    Err(CalibrationError::NonConvergence(report).into())
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Apply {
            tier,
            power_cap_w,
            core_clock_mhz,
            mem_clock_mhz,
        } => {
            let mut device = ctx.device(true)?;
            let base = match &tier {
                Some(t) => ctx.db.plan(t, device.host())?.throttle,
                None => device.host().nominal_config(),
            };
            let config = ThrottleConfig {
                power_cap_w: power_cap_w.unwrap_or(base.power_cap_w),
                core_clock_cap_mhz: core_clock_mhz.unwrap_or(base.core_clock_cap_mhz),
                mem_clock_cap_mhz: mem_clock_mhz.unwrap_or(base.mem_clock_cap_mhz),
            };
            device.apply_throttle(config)?;
            info!("applied {config}");
            print_json(&config)?;
            Ok(0)
        }
        Command::Reset => {
            let mut device = ctx.device(true)?;
            device.reset_throttle()?;
            info!("device reset");
            Ok(0)
        }
        Command::Measure { tier, probe } => {
            let mut device = ctx.device(tier.is_some())?;
            let mut runner = ctx.probe(&probe, 0)?;
            if let Some(t) = &tier {
                let plan = ctx.db.plan(t, device.host())?;
                device.apply_throttle(plan.throttle)?;
            }
            let config = device.effective_config();
            let measured = measure_sustained_tflops(runner.as_mut(), &device, &probe.params());
            if tier.is_some() {
                device.reset_throttle()?;
            }
            print_json(&serde_json::json!({
                "tflops": measured?,
                "config": config,
            }))?;
            Ok(0)
        }
        Command::Run {
            tier,
            splats,
            animated_splats,
            duration_s,
            bucket_s,
            sample_period_s,
            out,
            seed,
            probe,
            command,
        } => {
            let manifest = CampaignManifest {
                campaign_id: "single-run".into(),
                spec_db: ctx.global.spec_db.clone(),
                host: ctx.host_name()?,
                tiers: vec![tier],
                workloads: vec![WorkloadEntry {
                    splat_count: splats,
                    animated: None,
                    animated_splats,
                    command: None,
                }],
                repeats: 1,
                duration_s,
                output_dir: out,
                bucket_s,
                sample_period_s,
                command,
                resolution: Resolution::default(),
                seed,
                probe: probe.params(),
                calibration: CalibrationOptions::default(),
                envelope: EnvelopeTolerances::default(),
            };
            manifest.validate().map_err(|e| usage(e.to_string()))?;
            let outcome = campaign(&ctx, &manifest, &probe)?;
            let Some(record) = outcome.store.records().last() else {
                let reason = outcome
                    .store
                    .events()
                    .filter(|e| matches!(e.kind, EventKind::RunFailed | EventKind::TierFailed))
                    .last()
                    .map(|e| e.message.clone())
                    .unwrap_or_else(|| "no run record was produced".into());
                bail!(reason);
            };
            print_json(record)?;
            Ok(0)
        }
        Command::Campaign { manifest, out, probe } => {
            let mut manifest = CampaignManifest::load(&manifest)?;
            if let Some(out) = out {
                manifest.output_dir = out;
            }
            let outcome = campaign(&ctx, &manifest, &probe)?;
            print_json(&serde_json::json!({
                "output_dir": manifest.output_dir,
                "launched": outcome.launched,
                "skipped": outcome.skipped,
                "failed_runs": outcome.failed_runs,
                "failed_tiers": outcome.failed_tiers,
                "records": outcome.store.records().count(),
            }))?;
            if outcome.failed_runs > 0 || !outcome.failed_tiers.is_empty() {
                eprintln!("campaign finished with failures; rerun to retry the failed runs");
                return Ok(1);
            }
            Ok(0)
        }
        Command::Report { input, format, out } => {
            let (store, warnings) = ResultStore::load(&input)?;
            for w in &warnings {
                warn!("{w}");
            }
            let files = render_report(&store, format, out.as_deref().unwrap_or(&input), &ctx.labels())?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::ParseDmon {
            file,
            period_s,
            from_s,
            to_s,
            csv,
        } => parse_dmon(&file, period_s, from_s, to_s, csv),
        Command::SynthWorkload {
            tflops,
            splats,
            animated_splats,
            duration_s,
            seed,
        } => synth_workload(tflops, splats, animated_splats, duration_s, seed),
    }
}

fn tiers(ctx: &App, format: TiersFormat) -> Result<u8> {
    let host = ctx.db.host(&ctx.host_name()?)?;
    let plans = ctx
        .db
        .gpus()
        .iter()
        .map(|g| ctx.db.plan(&g.name, host))
        .collect::<Result<Vec<_>, _>>()?;
    match format {
        TiersFormat::Json => print_json(&plans)?,
        TiersFormat::Table => {
            let mut out = io::stdout().lock();
            writeln!(
                out,
                "| GPU | Theoretical TFLOPS | Est. sustained TFLOPS | Power cap (W) | Required mem clock (MHz) | Emulated mem clock (MHz) | Deviation |"
            )?;
            writeln!(out, "|---|---:|---:|---:|---:|---:|---:|")?;
            for p in &plans {
                writeln!(
                    out,
                    "| {} | {:.2} | {:.2} | {:.0} | {} | {} | {:+.1}% |",
                    p.target.display_name(),
                    p.target.theoretical_fp32_tflops,
                    p.estimated_sustained_tflops,
                    p.throttle.power_cap_w,
                    p.required_mem_clock_mhz,
                    p.throttle.mem_clock_cap_mhz,
                    p.mem_clock_deviation_pct
                )?;
            }
        }
    }
    Ok(0)
}

fn campaign(
    ctx: &App,
    manifest: &CampaignManifest,
    probe: &ProbeArgs,
) -> Result<gpu_tier_bench::campaign::CampaignOutcome> {
    if manifest.host != ctx.host_name()? && ctx.global.host.is_some() {
        return Err(usage(format!(
            "--host {} conflicts with the manifest host {}",
            ctx.host_name()?,
            manifest.host
        )));
    }
    let db = manifest.spec_database()?;
    let host = db.host(&manifest.host)?.clone();
    let mut device = match ctx.global.device {
        DeviceKind::Sim => DeviceHandle::simulated(host, SimModel::fitted().with_noise(ctx.global.sim_noise)),
        DeviceKind::Real => {
            if !ctx.global.i_have_root {
                return Err(usage(
                    "a campaign changes GPU power and clock limits for the whole machine; pass --i-have-root to confirm",
                ));
            }
            DeviceHandle::real(host, NvidiaSmi::from_env(ctx.global.gpu_index))
        }
    };
    if ctx.global.device == DeviceKind::Real && manifest.command.is_empty() {
        let per_entry = manifest.workloads.iter().all(|w| w.command.is_some());
        if !per_entry {
            return Err(usage("a real device needs a workload command in the manifest"));
        }
    }
    let mut runner = ctx.probe(probe, manifest.seed)?;
    let sampler = ctx.sampler(manifest.sample_period_s, manifest.seed);
    let launcher = ctx.workload(manifest.seed);
    let mut backend = Backend {
        device: &mut device,
        probe: runner.as_mut(),
        sampler: sampler.as_ref(),
        workload: &launcher,
        run_options: RunOptions::default(),
    };
    let started = Instant::now();
    let outcome = execute_campaign(manifest, &mut backend, &mut |p| match p {
        Progress::TierStarted { tier, pending_runs } => eprintln!("[{tier}] {pending_runs} runs pending"),
        Progress::TierCalibrated {
            tier,
            core_clock_cap_mhz,
            deviation_pct,
        } => eprintln!("[{tier}] calibrated: core {core_clock_cap_mhz} MHz ({deviation_pct:+.2}%)"),
        Progress::TierFailed { tier, reason } => eprintln!("[{tier}] skipped: {reason}"),
        Progress::RunFinished { key, mean_fps, p_avg_w } => {
            eprintln!("{key}: {mean_fps:.1} fps at {p_avg_w:.1} W")
        }
        Progress::RunFailed { key, reason } => eprintln!("{key}: failed: {reason}"),
    })?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    info!(
        "campaign done in {:.1} s: {} launched, {} skipped",
        started.elapsed().as_secs_f64(),
        outcome.launched,
        outcome.skipped
    );
    Ok(outcome)
}

fn parse_dmon(file: &Path, period_s: f64, from_s: Option<f64>, to_s: Option<f64>, csv: bool) -> Result<u8> {
    let input: Box<dyn BufRead> = if file == Path::new("-") {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(
            File::open(file).with_context(|| format!("cannot open {}", file.display()))?,
        ))
    };
    let (trace, stats) = parse_dmon_stream(input, period_s)?;
    if stats.skipped_rows > 0 {
        warn!("{} malformed rows skipped", stats.skipped_rows);
    }
    if csv {
        trace.write_to(io::stdout().lock())?;
        return Ok(0);
    }
    let (t0, t1) = trace.span().unwrap_or((0.0, 0.0));
    let from = from_s.unwrap_or(t0);
    let to = to_s.unwrap_or(t1);
    print_json(&serde_json::json!({
        "samples": trace.samples.len(),
        "skipped_rows": stats.skipped_rows,
        "missing_power": trace.samples.iter().filter(|s| s.power_w.is_none()).count(),
        "from_s": from,
        "to_s": to,
        "avg_power_w": average_power(&trace, from, to)?,
    }))?;
    Ok(0)
}

/// Frame-log emitter paced in real time, for driving `run` and `campaign`
/// through the command-workload path without a renderer.
fn synth_workload(tflops: f64, splats: u64, animated_splats: u64, duration_s: f64, seed: u64) -> Result<u8> {
    let spec = WorkloadSpec {
        command: vec![],
        splat_count: splats,
        animated: animated_splats > 0,
        animated_splats,
        resolution: Resolution::default(),
        duration_s,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if !(tflops > 0.0) {
        return Err(usage("--tflops must be positive"));
    }
    let start = Instant::now();
    let mut out = io::stdout().lock();
    for frame in SyntheticWorkload::fitted().frames(&spec, tflops, seed) {
        if frame.end_s() > duration_s {
            break;
        }
        let due = Duration::from_secs_f64(frame.end_s());
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        if writeln!(out, "{}", frame.to_line()).and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    Ok(0)
}
