//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use gpu_tier_bench::calibrate::{calibrate_core_clock, CalibrationOptions, ProbeParams, SimulatedProbe};
use gpu_tier_bench::campaign::{execute_campaign, Backend, CampaignManifest, WorkloadEntry};
use gpu_tier_bench::device::{DeviceHandle, SimModel};
use gpu_tier_bench::metrics::{fps_stats, EnergyMetrics, FpsStats, MetricsError};
use gpu_tier_bench::model::SpecDatabase;
use gpu_tier_bench::report::{aggregate_rows, render_report, ReportFormat, ReportRow, REPORT_MD};
use gpu_tier_bench::store::{ResultStore, RESULTS_FILE};
use gpu_tier_bench::telemetry::{average_power, parse_dmon_stream, EnvelopeTolerances, SimulatedSampler};
use gpu_tier_bench::workload::{Frame, FrameTrace, Resolution, RunOptions, SyntheticLauncher, SyntheticWorkload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIERS: [&str; 4] = ["rtx4090", "rtx4070ti", "rtx3070", "rtx3050"];
const SPLATS: [u64; 4] = [580_604, 1_834_311, 2_795_038, 3_448_340];
const ANIMATED_SPLATS: u64 = 38_844;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

type Verdict = Result<String, String>;
type Check<'a> = Box<dyn FnOnce() -> Verdict + 'a>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || {
        format!(
            "took {:.2} s, budget {:.0} s",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        )
    })
}

fn tier_derivation() -> Verdict {
    let start = Instant::now();
    let sustained = [55.05, 26.73, 13.54, 6.07];
    let required = [10501, 5250, 4667, 2333];
    let snapped = [10501, 5001, 5001, 5001];
    let deviation = [0.0, -4.7, 7.2, 114.0];
    let db = SpecDatabase::builtin();
    let host = db.host("rtx4090").map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    let mut computed = Vec::new();
    for (i, tier) in TIERS.iter().enumerate() {
        let plan = db.plan(tier, host).map_err(|e| e.to_string())?;
        computed.push(format!("{tier} {:+.2}%", plan.mem_clock_deviation_pct));
        if (plan.estimated_sustained_tflops - sustained[i]).abs() > 0.005 {
            failures.push(format!(
                "{tier} sustained {:.4} vs {}",
                plan.estimated_sustained_tflops, sustained[i]
            ));
        }
        if plan.required_mem_clock_mhz != required[i] {
            failures.push(format!(
                "{tier} required {} vs {}",
                plan.required_mem_clock_mhz, required[i]
            ));
        }
        if plan.throttle.mem_clock_cap_mhz != snapped[i] {
            failures.push(format!(
                "{tier} snapped {} vs {}",
                plan.throttle.mem_clock_cap_mhz, snapped[i]
            ));
        }
        if (plan.mem_clock_deviation_pct - deviation[i]).abs() > 0.1 {
            failures.push(format!(
                "{tier} deviation {:+.2}% not within 0.1 points of {:+}%",
                plan.mem_clock_deviation_pct, deviation[i]
            ));
        }
    }
    within_budget(start.elapsed(), Duration::from_secs(1))?;
    if failures.is_empty() {
        Ok(format!("4 tiers; deviations {}", computed.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

fn calibration() -> Verdict {
    let start = Instant::now();
    let db = SpecDatabase::builtin();
    let host = db.host("rtx4090").map_err(|e| e.to_string())?.clone();
    let mut summary = Vec::new();
    for tier in TIERS {
        let mut device = DeviceHandle::simulated(host.clone(), SimModel::fitted());
        let plan = db.plan(tier, &host).map_err(|e| e.to_string())?;
        let report = calibrate_core_clock(
            &mut device,
            &mut SimulatedProbe::new(0),
            &plan,
            &ProbeParams::default(),
            &CalibrationOptions::default(),
        )
        .map_err(|e| format!("{tier}: {e}"))?;
        ensure(report.deviation_pct.abs() <= 3.0, || {
            format!("{tier}: deviation {:+.2}%", report.deviation_pct)
        })?;
        ensure(report.probes_used <= 12, || {
            format!("{tier}: {} probes", report.probes_used)
        })?;
        summary.push(format!(
            "{tier} {} MHz {:+.2}% in {} probes",
            report.final_config.core_clock_cap_mhz, report.deviation_pct, report.probes_used
        ));
    }
    within_budget(start.elapsed(), Duration::from_secs(5))?;
    Ok(summary.join(", "))
}

fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_product = 0.0f64;
    let mut worst_power = 0.0f64;
    for _ in 0..10_000 {
        let p = rng.random_range(1.0..1000.0);
        let fps = rng.random_range(0.1..2000.0);
        let m = EnergyMetrics::new(p, fps).map_err(|e| e.to_string())?;
        worst_product = worst_product.max((m.energy_per_frame_j * m.perf_per_watt - 1.0).abs());
        worst_power = worst_power.max((m.energy_per_frame_j * fps - p).abs());
    }
    ensure(worst_product <= 1e-12, || format!("E*PPW off by {worst_product:e}"))?;
    ensure(worst_power <= 1e-9, || format!("E*FPS off P by {worst_power:e}"))?;
    Ok(format!(
        "10000 pairs, max |E*PPW-1| = {worst_product:.1e}, max |E*FPS-P| = {worst_power:.1e}"
    ))
}

fn random_trace(rng: &mut ChaCha8Rng) -> FrameTrace {
    let n = rng.random_range(1..=20_000);
    let mut t = rng.random_range(-5.0..50.0);
    let typical = rng.random_range(1.0..120.0);
    let mut frames = Vec::with_capacity(n);
    for index in 0..n as u64 {
        let frame_time_ms = typical * rng.random_range(0.5..1.5);
        frames.push(Frame {
            index,
            t_start_s: t,
            frame_time_ms,
        });
        t += frame_time_ms / 1000.0;
        if rng.random_bool(0.01) {
            t += rng.random_range(0.0..2.0);
        }
    }
    FrameTrace { frames }
}

/// Counts each bucket from scratch with a binary search over start times.
fn oracle(trace: &FrameTrace, bucket_s: f64) -> Option<FpsStats> {
    let starts: Vec<f64> = trace.frames.iter().map(|f| f.t_start_s).collect();
    let origin = *starts.first()?;
    let end = trace.frames.last()?.end_s();
    let mut n = 0usize;
    while origin + (n + 1) as f64 * bucket_s <= end {
        n += 1;
    }
    if n < 2 {
        return None;
    }
    let rates: Vec<f64> = (0..n)
        .map(|k| {
            let lo = starts.partition_point(|&t| t < origin + k as f64 * bucket_s);
            let hi = starts.partition_point(|&t| t < origin + (k + 1) as f64 * bucket_s);
            (hi - lo) as f64 / bucket_s
        })
        .collect();
    let mean = rates.iter().sum::<f64>() / n as f64;
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    Some(FpsStats {
        mean_fps: mean,
        sd_fps: var.sqrt(),
        bucket_count: n,
        total_frames: rates.iter().map(|r| (r * bucket_s).round() as usize).sum(),
    })
}

fn fps_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut frames = 0usize;
    let mut too_short = 0usize;
    for i in 0..1000 {
        let trace = random_trace(&mut rng);
        let bucket_s = match i % 4 {
            0 => 1.0,
            1 => 0.5,
            2 => 0.25,
            _ => rng.random_range(0.01..3.0),
        };
        frames += trace.frames.len();
        match (fps_stats(&trace, bucket_s), oracle(&trace, bucket_s)) {
            (Ok(got), Some(want)) => ensure(got == want, || format!("trace {i}: {got:?} vs oracle {want:?}"))?,
            (Err(MetricsError::InsufficientData(_)), None) => too_short += 1,
            (got, want) => return Err(format!("trace {i}: {got:?} vs oracle {want:?}")),
        }
    }
    within_budget(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "1000 traces, {frames} frames, {too_short} with fewer than 2 buckets"
    ))
}

fn dmon_fixture() -> Verdict {
    let load = |name: &str| {
        parse_dmon_stream(BufReader::new(File::open(format!("{FIXTURES}/{name}")).unwrap()), 1.0)
            .map_err(|e| e.to_string())
    };
    let (clean, stats) = load("dmon_rtx4070ti_120.txt")?;
    ensure(clean.samples.len() == 120 && stats.skipped_rows == 0, || {
        format!("clean: {} samples, {} skipped", clean.samples.len(), stats.skipped_rows)
    })?;
    let (corrupt, stats) = load("dmon_rtx4070ti_120_corrupt.txt")?;
    ensure(corrupt.samples.len() == 120 && stats.skipped_rows == 1, || {
        format!(
            "corrupt: {} samples, {} skipped",
            corrupt.samples.len(),
            stats.skipped_rows
        )
    })?;
    for (t0, t1, want) in [(0.0, 120.0, 15472.0 / 59.0), (10.5, 60.25, 3550.0 / 13.0)] {
        for trace in [&clean, &corrupt] {
            let got = average_power(trace, t0, t1).map_err(|e| e.to_string())?;
            ensure((got - want).abs() <= 1e-9, || format!("[{t0}, {t1}]: {got} vs {want}"))?;
        }
    }
    Ok("120 samples, corrupted row skipped, averages match to 1e-9".into())
}

fn campaign_manifest(dir: &Path) -> CampaignManifest {
    let mut workloads = Vec::new();
    for animated_splats in [0, ANIMATED_SPLATS] {
        for splat_count in SPLATS {
            workloads.push(WorkloadEntry {
                splat_count,
                animated: None,
                animated_splats,
                command: None,
            });
        }
    }
    CampaignManifest {
        campaign_id: "acceptance".into(),
        spec_db: None,
        host: "rtx4090".into(),
        tiers: TIERS.iter().map(|t| t.to_string()).collect(),
        workloads,
        repeats: 2,
        duration_s: 2.0,
        output_dir: dir.to_path_buf(),
        bucket_s: 0.5,
        sample_period_s: 0.25,
        command: vec![],
        resolution: Resolution::default(),
        seed: 0,
        probe: ProbeParams::default(),
        calibration: CalibrationOptions::default(),
        envelope: EnvelopeTolerances::default(),
    }
}

fn run_campaign(manifest: &CampaignManifest) -> Result<gpu_tier_bench::campaign::CampaignOutcome, String> {
    let db = SpecDatabase::builtin();
    let mut device = DeviceHandle::simulated(db.host("rtx4090").unwrap().clone(), SimModel::fitted());
    let mut probe = SimulatedProbe::new(0);
    let sampler = SimulatedSampler {
        period_s: manifest.sample_period_s,
        seed: 0,
    };
    let workload = SyntheticLauncher {
        model: SyntheticWorkload::fitted(),
        seed: 0,
    };
    let mut backend = Backend {
        device: &mut device,
        probe: &mut probe,
        sampler: &sampler,
        workload: &workload,
        run_options: RunOptions::default(),
    };
    execute_campaign(manifest, &mut backend, &mut |_| {}).map_err(|e| e.to_string())
}

fn fps_of(rows: &[ReportRow], tier: &str, splats: u64, animated: bool) -> Result<f64, String> {
    rows.iter()
        .find(|r| r.record.tier_name == tier && r.record.splat_count == splats && r.record.animated == animated)
        .map(|r| r.record.fps.mean_fps)
        .ok_or_else(|| format!("no row for {tier}/{splats}/{animated}"))
}

fn end_to_end(dir: &Path) -> Verdict {
    let start = Instant::now();
    let manifest = campaign_manifest(dir);
    let outcome = run_campaign(&manifest)?;
    let elapsed = start.elapsed();
    ensure(outcome.failed_runs == 0 && outcome.failed_tiers.is_empty(), || {
        format!(
            "{} failed runs, failed tiers {:?}",
            outcome.failed_runs, outcome.failed_tiers
        )
    })?;
    let records = outcome.store.records().count();
    ensure(records == 64, || format!("{records} records"))?;
    let rows = aggregate_rows(&outcome.store, &HashMap::new()).map_err(|e| e.to_string())?;
    ensure(rows.len() == 32 && rows.iter().all(|r| r.repeats == 2), || {
        format!("{} rows", rows.len())
    })?;
    render_report(&outcome.store, ReportFormat::Table, dir, &HashMap::new()).map_err(|e| e.to_string())?;
    let table = std::fs::read_to_string(dir.join(REPORT_MD)).map_err(|e| e.to_string())?;
    ensure(
        table.lines().count() == 34 && table.contains("3.49 M") && table.contains("0.62 M"),
        || "report is not the expected 32-row table".into(),
    )?;

    let mut violations = Vec::new();
    for animated in [false, true] {
        for splats in SPLATS {
            for pair in TIERS.windows(2) {
                let (hi, lo) = (
                    fps_of(&rows, pair[0], splats, animated)?,
                    fps_of(&rows, pair[1], splats, animated)?,
                );
                if lo > hi {
                    violations.push(format!(
                        "{} {splats} {animated}: {lo:.2} > {} {hi:.2}",
                        pair[1], pair[0]
                    ));
                }
            }
        }
        for tier in TIERS {
            for pair in SPLATS.windows(2) {
                let (few, many) = (
                    fps_of(&rows, tier, pair[0], animated)?,
                    fps_of(&rows, tier, pair[1], animated)?,
                );
                if many > few {
                    violations.push(format!(
                        "{tier} {animated}: {} splats {many:.2} > {} splats {few:.2}",
                        pair[1], pair[0]
                    ));
                }
            }
        }
    }
    for tier in TIERS {
        for splats in SPLATS {
            let (stat, anim) = (fps_of(&rows, tier, splats, false)?, fps_of(&rows, tier, splats, true)?);
            if anim >= stat {
                violations.push(format!("{tier} {splats}: animated {anim:.2} >= static {stat:.2}"));
            }
        }
    }
    ensure(violations.is_empty(), || violations.join("; "))?;
    within_budget(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "64 records -> 32 rows in {:.0} s; both monotonicity properties and animation overhead hold",
        elapsed.as_secs_f64()
    ))
}

fn round_trip(dir: &Path) -> Verdict {
    let original = std::fs::read(dir.join(RESULTS_FILE)).map_err(|e| e.to_string())?;
    let (store, warnings) = ResultStore::load(dir).map_err(|e| e.to_string())?;
    ensure(warnings.is_empty(), || format!("load warnings: {warnings:?}"))?;
    let copy = tempfile::tempdir().map_err(|e| e.to_string())?;
    store.persist(copy.path()).map_err(|e| e.to_string())?;
    let rewritten = std::fs::read(copy.path().join(RESULTS_FILE)).map_err(|e| e.to_string())?;
    ensure(rewritten == original, || {
        "persisted bytes differ from the loaded file".into()
    })?;
    let (again, _) = ResultStore::load(copy.path()).map_err(|e| e.to_string())?;
    ensure(again == store, || "reloaded store differs".into())?;

    let outcome = run_campaign(&campaign_manifest(dir))?;
    ensure(outcome.launched == 0 && outcome.skipped == 64, || {
        format!(
            "re-execution launched {} and skipped {}",
            outcome.launched, outcome.skipped
        )
    })?;
    Ok(format!(
        "{} bytes identical after load and persist; re-execution launched 0 runs",
        original.len()
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Check)> = vec![
        (
            "tier derivation reproduces the reference tier table",
            Box::new(tier_derivation),
        ),
        ("simulated calibration converges for all tiers", Box::new(calibration)),
        ("energy and efficiency identities", Box::new(metric_identities)),
        ("fps statistics match the bucket-recount oracle", Box::new(fps_oracle)),
        ("dmon fixture parse and time-weighted power", Box::new(dmon_fixture)),
        ("end-to-end simulated campaign", Box::new(|| end_to_end(dir.path()))),
        (
            "results persist byte-exactly and resume launches nothing",
            Box::new(|| round_trip(dir.path())),
        ),
    ];
    let total = criteria.len();
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}/{total}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}/{total}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", total - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
