//! Frame-rate statistics, energy metrics and repeat aggregation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::FrameTrace;

pub const DEFAULT_BUCKET_S: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("bucket width must be positive, got {0}")]
    BadBucket(f64),
    #[error("frame trace is empty")]
    EmptyTrace,
    #[error("need at least 2 complete buckets, have {0}")]
    InsufficientData(usize),
    #[error("fps must be positive, got {0}")]
    NonPositiveFps(f64),
    #[error("average power must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("average power must be non-negative, got {0}")]
    NegativePower(f64),
    #[error("no records to aggregate")]
    NothingToAggregate,
    #[error("cannot aggregate records of different configurations: {0} vs {1}")]
    Heterogeneous(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    pub mean_fps: f64,
    pub sd_fps: f64,
    pub bucket_count: usize,
    pub total_frames: usize,
}

/// `t` lies in bucket `k` when `origin + k*b <= t < origin + (k+1)*b`.
fn boundary(origin: f64, k: usize, bucket_s: f64) -> f64 {
    origin + k as f64 * bucket_s
}

fn bucket_of(t: f64, origin: f64, bucket_s: f64) -> usize {
    let mut k = ((t - origin) / bucket_s).floor().max(0.0) as usize;
    while k > 0 && t < boundary(origin, k, bucket_s) {
        k -= 1;
    }
    while t >= boundary(origin, k + 1, bucket_s) {
        k += 1;
    }
    k
}

/// Number of buckets that end no later than the last frame does.
pub fn complete_buckets(trace: &FrameTrace, bucket_s: f64) -> usize {
    let (Some(first), Some(last)) = (trace.frames.first(), trace.frames.last()) else {
        return 0;
    };
    let origin = first.t_start_s;
    let end = last.end_s();
    let mut n = ((end - origin) / bucket_s).floor().max(0.0) as usize;
    while n > 0 && boundary(origin, n, bucket_s) > end {
        n -= 1;
    }
    while boundary(origin, n + 1, bucket_s) <= end {
        n += 1;
    }
    n
}

pub(crate) fn mean_and_population_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// FPS over consecutive `bucket_s` windows starting at the first frame.
/// Frames are binned by start time; the trailing partial bucket is dropped.
pub fn fps_stats(trace: &FrameTrace, bucket_s: f64) -> Result<FpsStats, MetricsError> {
    if !(bucket_s.is_finite() && bucket_s > 0.0) {
        return Err(MetricsError::BadBucket(bucket_s));
    }
    let origin = trace.frames.first().ok_or(MetricsError::EmptyTrace)?.t_start_s;
    let n = complete_buckets(trace, bucket_s);
    if n < 2 {
        return Err(MetricsError::InsufficientData(n));
    }
    let mut counts = vec![0usize; n];
    for f in &trace.frames {
        let k = bucket_of(f.t_start_s, origin, bucket_s);
        if k < n {
            counts[k] += 1;
        }
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / bucket_s).collect();
    let (mean_fps, sd_fps) = mean_and_population_sd(&rates);
    Ok(FpsStats {
        mean_fps,
        sd_fps,
        bucket_count: n,
        total_frames: counts.iter().sum(),
    })
}

/// Joules per frame: `p_avg_w / fps`.
pub fn energy_per_frame(p_avg_w: f64, fps: f64) -> Result<f64, MetricsError> {
    if !(fps > 0.0) {
        return Err(MetricsError::NonPositiveFps(fps));
    }
    if !(p_avg_w >= 0.0) {
        return Err(MetricsError::NegativePower(p_avg_w));
    }
    Ok(p_avg_w / fps)
}

/// Frames per second per watt: `fps / p_avg_w`.
pub fn perf_per_watt(fps: f64, p_avg_w: f64) -> Result<f64, MetricsError> {
    if !(p_avg_w > 0.0) {
        return Err(MetricsError::NonPositivePower(p_avg_w));
    }
    Ok(fps / p_avg_w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyMetrics {
    pub p_avg_w: f64,
    pub energy_per_frame_j: f64,
    pub perf_per_watt: f64,
}

impl EnergyMetrics {
    pub fn new(p_avg_w: f64, fps: f64) -> Result<Self, MetricsError> {
        Ok(Self {
            p_avg_w,
            energy_per_frame_j: energy_per_frame(p_avg_w, fps)?,
            perf_per_watt: perf_per_watt(fps, p_avg_w)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub tier_name: String,
    pub splat_count: u64,
    pub animated: bool,
    pub repeat_index: u32,
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/#{}",
            self.tier_name,
            self.splat_count,
            if self.animated { "animated" } else { "static" },
            self.repeat_index
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tier_name: String,
    pub splat_count: u64,
    pub animated: bool,
    pub animated_splats: u64,
    pub repeat_index: u32,
    pub duration_s: f64,
    pub fps: FpsStats,
    pub energy: EnergyMetrics,
    pub violations: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Reported by the workload if it knows; never computed here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_memory_mb: Option<f64>,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            tier_name: self.tier_name.clone(),
            splat_count: self.splat_count,
            animated: self.animated,
            repeat_index: self.repeat_index,
        }
    }

    /// Key without the repeat index.
    pub fn group(&self) -> (String, u64, bool) {
        (self.tier_name.clone(), self.splat_count, self.animated)
    }

    pub fn total_splats(&self) -> u64 {
        self.splat_count + self.animated_splats
    }
}

fn canonical_order(a: &RunRecord, b: &RunRecord) -> Ordering {
    a.repeat_index
        .cmp(&b.repeat_index)
        .then(a.started_unix_ms.cmp(&b.started_unix_ms))
        .then(a.finished_unix_ms.cmp(&b.finished_unix_ms))
        .then(a.fps.mean_fps.total_cmp(&b.fps.mean_fps))
        .then(a.fps.sd_fps.total_cmp(&b.fps.sd_fps))
        .then(a.fps.bucket_count.cmp(&b.fps.bucket_count))
        .then(a.fps.total_frames.cmp(&b.fps.total_frames))
        .then(a.energy.p_avg_w.total_cmp(&b.energy.p_avg_w))
        .then(a.duration_s.total_cmp(&b.duration_s))
        .then(a.violations.cmp(&b.violations))
}

fn rounded_mean(values: impl Iterator<Item = usize>, n: usize) -> usize {
    (values.sum::<usize>() + n / 2) / n
}

/// Combines repeats of one configuration.
///
/// FPS and power are averaged across runs; the SD is pooled, weighted by
/// bucket count; energy metrics are recomputed from the averaged power and
/// FPS rather than averaged. Counts and duration are averaged, violations
/// take the worst run, and the time range covers all runs.
pub fn aggregate_repeats(records: &[RunRecord]) -> Result<RunRecord, MetricsError> {
    let first = records.first().ok_or(MetricsError::NothingToAggregate)?;
    for r in records {
        if r.group() != first.group() || r.animated_splats != first.animated_splats {
            return Err(MetricsError::Heterogeneous(
                first.key().to_string(),
                r.key().to_string(),
            ));
        }
    }
    if records.len() == 1 {
        return Ok(first.clone());
    }
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| canonical_order(a, b));
    let n = sorted.len();
    let nf = n as f64;

    let mean_fps = sorted.iter().map(|r| r.fps.mean_fps).sum::<f64>() / nf;
    let p_avg_w = sorted.iter().map(|r| r.energy.p_avg_w).sum::<f64>() / nf;
    let weight: f64 = sorted.iter().map(|r| r.fps.bucket_count as f64).sum();
    let pooled = sorted
        .iter()
        .map(|r| r.fps.bucket_count as f64 * r.fps.sd_fps * r.fps.sd_fps)
        .sum::<f64>()
        / weight;
    let peak: Vec<f64> = sorted.iter().filter_map(|r| r.peak_memory_mb).collect();

    Ok(RunRecord {
        tier_name: first.tier_name.clone(),
        splat_count: first.splat_count,
        animated: first.animated,
        animated_splats: first.animated_splats,
        repeat_index: sorted.iter().map(|r| r.repeat_index).min().unwrap_or(0),
        duration_s: sorted.iter().map(|r| r.duration_s).sum::<f64>() / nf,
        fps: FpsStats {
            mean_fps,
            sd_fps: pooled.sqrt(),
            bucket_count: rounded_mean(sorted.iter().map(|r| r.fps.bucket_count), n),
            total_frames: rounded_mean(sorted.iter().map(|r| r.fps.total_frames), n),
        },
        energy: EnergyMetrics::new(p_avg_w, mean_fps)?,
        violations: sorted.iter().map(|r| r.violations).max().unwrap_or(0),
        started_unix_ms: sorted.iter().map(|r| r.started_unix_ms).min().unwrap_or(0),
        finished_unix_ms: sorted.iter().map(|r| r.finished_unix_ms).max().unwrap_or(0),
        peak_memory_mb: peak.into_iter().reduce(f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Frame;
    use proptest::prelude::*;

    fn frames_at(times_and_ms: impl IntoIterator<Item = (f64, f64)>) -> FrameTrace {
        FrameTrace {
            frames: times_and_ms
                .into_iter()
                .enumerate()
                .map(|(i, (t, ms))| Frame {
                    index: i as u64,
                    t_start_s: t,
                    frame_time_ms: ms,
                })
                .collect(),
        }
    }

    fn record(fps: f64, sd: f64, buckets: usize, p: f64, repeat: u32) -> RunRecord {
        RunRecord {
            tier_name: "rtx3070".into(),
            splat_count: 580_604,
            animated: false,
            animated_splats: 0,
            repeat_index: repeat,
            duration_s: 120.0,
            fps: FpsStats {
                mean_fps: fps,
                sd_fps: sd,
                bucket_count: buckets,
                total_frames: (fps * buckets as f64) as usize,
            },
            energy: EnergyMetrics::new(p, fps).unwrap(),
            violations: repeat as usize,
            started_unix_ms: 1_000 + repeat as u64,
            finished_unix_ms: 2_000 + repeat as u64,
            peak_memory_mb: None,
        }
    }

    #[test]
    fn constant_rate() {
        let trace = frames_at((0..1000).map(|i| (i as f64 / 100.0, 10.0)));
        let s = fps_stats(&trace, 1.0).unwrap();
        assert!((s.mean_fps - 100.0).abs() < 1e-9);
        assert!(s.sd_fps < 1e-9);
    }

    #[test]
    fn two_level_rate() {
        let fast = (0..500).map(|i| (i as f64 * 0.01, 10.0));
        let slow = (0..250).map(|i| (5.0 + i as f64 * 0.02, 20.0));
        let s = fps_stats(&frames_at(fast.chain(slow)), 1.0).unwrap();
        assert_eq!(s.bucket_count, 10);
        assert!((s.mean_fps - 75.0).abs() < 1e-9);
        assert!((s.sd_fps - 25.0).abs() < 1e-9);
    }

    #[test]
    fn short_traces_are_insufficient() {
        let trace = frames_at((0..150).map(|i| (i as f64 * 0.01, 10.0)));
        assert_eq!(fps_stats(&trace, 1.0), Err(MetricsError::InsufficientData(1)));
        assert_eq!(fps_stats(&FrameTrace::default(), 1.0), Err(MetricsError::EmptyTrace));
        assert!(matches!(fps_stats(&trace, 0.0), Err(MetricsError::BadBucket(_))));
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy_per_frame(100.0, 50.0).unwrap(), 2.0);
        assert!((energy_per_frame(150.0, 29.9).unwrap() - 5.017).abs() < 0.001);
        assert_eq!(energy_per_frame(0.0, 12.0).unwrap(), 0.0);
        assert!(energy_per_frame(100.0, 0.0).is_err());
        assert_eq!(perf_per_watt(50.0, 100.0).unwrap(), 0.5);
        assert!((perf_per_watt(45.8, 150.0).unwrap() - 0.3053).abs() < 0.0001);
        assert!(perf_per_watt(50.0, 0.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = record(40.0, 2.0, 120, 150.0, 0);
        assert_eq!(aggregate_repeats(std::slice::from_ref(&one)).unwrap(), one);

        let twice = aggregate_repeats(&[one.clone(), one.clone()]).unwrap();
        assert_eq!(twice.fps.mean_fps, one.fps.mean_fps);
        assert!((twice.fps.sd_fps - one.fps.sd_fps).abs() < 1e-12);
        assert_eq!(twice.energy, one.energy);

        let a = record(100.0, 0.0, 10, 100.0, 0);
        let b = record(50.0, 0.0, 10, 200.0, 1);
        let agg = aggregate_repeats(&[a, b]).unwrap();
        assert_eq!(agg.fps.mean_fps, 75.0);
        assert_eq!(agg.energy.p_avg_w, 150.0);
        assert_eq!(agg.energy.energy_per_frame_j, 2.0);
    }

    #[test]
    fn aggregate_rejects_mixed_configurations() {
        let a = record(100.0, 0.0, 10, 100.0, 0);
        let mut b = a.clone();
        b.animated = true;
        b.animated_splats = 38_844;
        assert!(matches!(
            aggregate_repeats(&[a, b]),
            Err(MetricsError::Heterogeneous(..))
        ));
        assert_eq!(aggregate_repeats(&[]), Err(MetricsError::NothingToAggregate));
    }

    #[test]
    fn pooled_sd_weights_by_buckets() {
        let a = record(60.0, 3.0, 30, 200.0, 0);
        let b = record(60.0, 1.0, 10, 200.0, 1);
        let agg = aggregate_repeats(&[a, b]).unwrap();
        assert!((agg.fps.sd_fps - (7.0f64).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn identities(p in 0.001f64..2000.0, fps in 0.001f64..2000.0) {
            let e = EnergyMetrics::new(p, fps).unwrap();
            prop_assert!((e.energy_per_frame_j * e.perf_per_watt - 1.0).abs() <= 1e-12);
            prop_assert!((e.energy_per_frame_j * fps - p).abs() <= 1e-9);
        }

        #[test]
        fn frame_total_bounded(
            ms in proptest::collection::vec(0.5f64..200.0, 1..2000), bucket in 0.05f64..3.0,
        ) {
            let mut t = 0.0;
            let trace = frames_at(ms.into_iter().map(|m| { let s = t; t += m / 1000.0; (s, m) }));
            if let Ok(s) = fps_stats(&trace, bucket) {
                prop_assert!(s.total_frames <= trace.frames.len());
                prop_assert!(s.sd_fps >= 0.0);
            }
        }

        #[test]
        fn exact_multiple_counts_every_frame(per_bucket in 1usize..50, buckets in 2usize..40) {
            // Dyadic frame times keep the arithmetic exact.
            let frame_s = 1.0 / 64.0;
            let bucket_s = per_bucket as f64 * frame_s;
            let trace = frames_at((0..per_bucket * buckets).map(|i| (i as f64 * frame_s, frame_s * 1000.0)));
            let s = fps_stats(&trace, bucket_s).unwrap();
            prop_assert_eq!(s.bucket_count, buckets);
            prop_assert_eq!(s.total_frames, trace.frames.len());
        }

        #[test]
        fn aggregate_is_permutation_invariant(
            runs in proptest::collection::vec((1.0f64..200.0, 0.0f64..20.0, 2usize..200, 1.0f64..500.0), 1..8),
            seed in any::<u64>(),
        ) {
            let records: Vec<RunRecord> = runs
                .iter()
                .enumerate()
                .map(|(i, &(f, sd, b, p))| record(f, sd, b, p, i as u32))
                .collect();
            let mut shuffled = records.clone();
            let len = shuffled.len();
            for i in (1..len).rev() {
                shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(aggregate_repeats(&records).unwrap(), aggregate_repeats(&shuffled).unwrap());
        }
    }
}
