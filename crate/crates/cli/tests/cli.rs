use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_gpu-tier-bench");
const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures");

const FAKE_SMI: &str = r##"#!/bin/sh
D='@DIR@'
echo "$*" >> "$D/calls.log"
if [ -f "$D/deny" ]; then
  echo "Insufficient Permissions" >&2
  exit 4
fi
if [ "$1" = dmon ]; then
  echo "# gpu    pwr  gtemp  mtemp   mclk   pclk"
  echo "# Idx      W      C      C    MHz    MHz"
  while true; do
    echo "    0    120     51      -   5001    900"
    sleep 0.1
  done
fi
case "$3" in
  -lgc) echo "$4" > "$D/core" ;;
  -rgc) rm -f "$D/core" ;;
esac
exit 0
"##;

const FAKE_PROBE: &str = r#"#!/bin/sh
core=$(cat '@DIR@/core' 2>/dev/null || echo 2520)
awk -v m="$1" -v n="$2" -v k="$3" -v it="$4" -v c="$core" 'BEGIN {
  f = 2 * m * n * k * it
  printf "GEMM_RESULT flops=%.0f elapsed_s=%.12f\n", f, f / (c * 0.021 * 1e12)
}'
"#;

fn cli(args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("GPU_TIER_BENCH_PROBE").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    cli(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct FakeGpu {
    dir: tempfile::TempDir,
}

impl FakeGpu {
    fn new() -> Self {
        let fake = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fake.script("nvidia-smi", FAKE_SMI);
        fake.script("gemm-probe", FAKE_PROBE);
        fake
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn script(&self, name: &str, body: &str) {
        let path = self.path(name);
        std::fs::write(&path, body.replace("@DIR@", &self.dir.path().display().to_string())).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    }

    fn cli(&self, args: &[&str]) -> Command {
        let mut c = cli(args);
        c.env("GPU_TIER_BENCH_NVIDIA_SMI", self.path("nvidia-smi"));
        c
    }

    fn calls(&self) -> Vec<String> {
        std::fs::read_to_string(self.path("calls.log"))
            .unwrap_or_default()
            .lines()
            .map(str::to_string)
            .collect()
    }
}

#[test]
fn tiers_prints_the_derivation() {
    let out = run(&["tiers"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("| RTX 4090 | 82.58 | 55.05 | 450 | 10501 | 10501 | +0.0% |"));
    assert!(rows[1].contains("| 26.73 | 285 | 5250 | 5001 | -4.7% |"));
    assert!(rows[2].contains("| 13.54 | 150 | 4667 | 5001 | +7.2% |"));
    assert!(rows[3].contains("| 6.07 | 150 | 2333 | 5001 | +114.4% |"));

    let json: Value = serde_json::from_slice(&run(&["tiers", "--format", "json"]).stdout).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 4);
    assert_eq!(json[1]["required_mem_clock_mhz"], 5250);
}

#[test]
fn tiers_with_custom_database() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("one.toml");
    std::fs::write(
        &db,
        "version = 1\n[[gpu]]\nname = \"host\"\ntheoretical_fp32_tflops = 82.58\nnominal_power_w = 450.0\n\
         nominal_core_clock_mhz = 2520\nnominal_mem_bandwidth_gbs = 1008.0\nnominal_mem_clock_mhz = 10501\n\
         [[host]]\ngpu = \"host\"\nsupported_mem_clocks_mhz = [405, 810, 5001, 10501]\ncore_clock_step_mhz = 15\n\
         min_power_cap_w = 150.0\nmax_power_cap_w = 450.0\n",
    )
    .unwrap();
    let out = run(&["tiers", "--spec-db", db.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);

    let missing = dir.path().join("missing.toml");
    let out = run(&["tiers", "--spec-db", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.toml"));
}

#[test]
fn calibrate_on_simulated_device() {
    let out = run(&["calibrate", "--tier", "rtx3050", "--device", "sim"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["tier_name"], "rtx3050");
    assert!(report["deviation_pct"].as_f64().unwrap().abs() <= 3.0);
    assert!(report["probes_used"].as_u64().unwrap() <= 12);
}

#[test]
fn unreachable_target_exits_one_with_the_report() {
    let out = run(&[
        "calibrate",
        "--tier",
        "rtx4070ti",
        "--tolerance-pct",
        "0.0001",
        "--max-probes",
        "3",
    ]);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["probes_used"], 3);
    assert!(stderr(&out).contains("did not converge"));
}

#[test]
fn real_device_needs_confirmation() {
    let fake = FakeGpu::new();
    for args in [
        &["apply", "--device", "real", "--tier", "rtx3050"][..],
        &["reset", "--device", "real"],
        &[
            "calibrate",
            "--device",
            "real",
            "--tier",
            "rtx3050",
            "--probe",
            "/bin/true",
        ],
        &[
            "measure",
            "--device",
            "real",
            "--tier",
            "rtx3050",
            "--probe",
            "/bin/true",
        ],
        &[
            "run", "--device", "real", "--tier", "rtx3050", "--splats", "1", "--out", "/tmp/x", "--", "true",
        ],
    ] {
        let out = fake.cli(args).output().unwrap();
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("--i-have-root"));
    }
    assert!(fake.calls().is_empty());
}

#[test]
fn real_apply_and_reset_with_confirmation() {
    let fake = FakeGpu::new();
    let out = fake
        .cli(&[
            "apply",
            "--device",
            "real",
            "--i-have-root",
            "--tier",
            "rtx4070ti",
            "--core-clock-mhz",
            "1125",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let applied: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(applied["core_clock_cap_mhz"], 1125);
    let out = fake
        .cli(&["reset", "--device", "real", "--i-have-root"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fake.calls(),
        [
            "-i 0 -pl 285",
            "-i 0 -lgc 1125",
            "-i 0 -lmc 5001",
            "-i 0 -rgc",
            "-i 0 -rmc",
            "-i 0 -pl 450"
        ]
    );
}

#[test]
fn device_errors_exit_three() {
    let fake = FakeGpu::new();
    std::fs::write(fake.path("deny"), "").unwrap();
    let out = fake
        .cli(&["apply", "--device", "real", "--i-have-root", "--tier", "rtx3050"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("insufficient privileges"));

    let out = cli(&["reset", "--device", "real", "--i-have-root"])
        .env("GPU_TIER_BENCH_NVIDIA_SMI", "/nonexistent/nvidia-smi")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("GPU_TIER_BENCH_NVIDIA_SMI"));
}

#[test]
fn real_calibration_needs_a_probe() {
    let fake = FakeGpu::new();
    let out = fake
        .cli(&["calibrate", "--device", "real", "--i-have-root", "--tier", "rtx3050"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("GPU_TIER_BENCH_PROBE"));
}

#[test]
fn real_measure_through_the_probe() {
    let fake = FakeGpu::new();
    let out = fake
        .cli(&[
            "measure",
            "--device",
            "real",
            "--probe-size",
            "256",
            "--probe-iterations",
            "2",
        ])
        .env("GPU_TIER_BENCH_PROBE", fake.path("gemm-probe"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    // The fake prints elapsed_s with 12 decimals, about 7 significant digits here.
    let tflops = v["tflops"].as_f64().unwrap();
    assert!((tflops / (2520.0 * 0.021) - 1.0).abs() < 1e-4, "{tflops}");
    assert!(
        fake.calls().is_empty(),
        "measuring without --tier sends no control command"
    );
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "tiers",
        "calibrate",
        "apply",
        "reset",
        "measure",
        "run",
        "campaign",
        "report",
        "parse-dmon",
    ] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(stdout(&out).contains("Usage"), "{sub}");
    }
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["calibrate"])), 2);
}

#[test]
fn parse_dmon_fixture() {
    let clean = format!("{FIXTURES}/dmon_rtx4070ti_120.txt");
    let out = run(&["parse-dmon", &clean]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], 120);
    assert_eq!(v["missing_power"], 2);

    let corrupt = format!("{FIXTURES}/dmon_rtx4070ti_120_corrupt.txt");
    let out = run(&["parse-dmon", &corrupt, "--from-s", "10.5", "--to-s", "60.25"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], 120);
    assert_eq!(v["skipped_rows"], 1);
    assert!((v["avg_power_w"].as_f64().unwrap() - 3550.0 / 13.0).abs() < 1e-9);

    let out = run(&["parse-dmon", &clean, "--csv"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).lines().count() > 120);
}

fn single_run(out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--tier",
        "rtx3070",
        "--splats",
        "580604",
        "--duration-s",
        "1.2",
        "--bucket-s",
        "0.25",
        "--sample-period-s",
        "0.2",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = single_run(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["tier_name"], "rtx3070");
    assert!(record["fps"]["mean_fps"].as_f64().unwrap() > 30.0);

    let report_dir = dir.path().join("report");
    let out = run(&[
        "report",
        "--in",
        dir.path().to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv_path = report_dir.join("report.csv");
    assert_eq!(stdout(&out).trim(), csv_path.to_str().unwrap());
    let csv = std::fs::read_to_string(csv_path).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().contains("RTX 3070"));

    let empty = tempfile::tempdir().unwrap();
    let out = run(&["report", "--in", empty.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&run(&["report", "--in", ".", "--format", "pdf"])), 2);
}

#[test]
fn run_with_command_workload() {
    let dir = tempfile::tempdir().unwrap();
    let out = single_run(
        dir.path(),
        &[
            "--",
            BIN,
            "synth-workload",
            "--tflops",
            "13.5",
            "--splats",
            "{splats}",
            "--duration-s",
            "1.5",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    // 16.0 ms fixed plus 96.98 ms * 0.58 / 13.5.
    let fps = record["fps"]["mean_fps"].as_f64().unwrap();
    assert!((45.0..=53.0).contains(&fps), "{fps}");
}

#[test]
fn real_run_with_fake_tools() {
    let fake = FakeGpu::new();
    let dir = tempfile::tempdir().unwrap();
    let out = fake
        .cli(&[
            "run",
            "--device",
            "real",
            "--i-have-root",
            "--tier",
            "rtx3070",
            "--splats",
            "580604",
            "--duration-s",
            "1.5",
            "--bucket-s",
            "0.25",
            "--probe-size",
            "256",
            "--probe-iterations",
            "2",
            "--out",
            dir.path().to_str().unwrap(),
            "--",
            BIN,
            "synth-workload",
            "--tflops",
            "13.5",
            "--splats",
            "{splats}",
            "--duration-s",
            "2",
        ])
        .env("GPU_TIER_BENCH_PROBE", fake.path("gemm-probe"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((record["energy"]["p_avg_w"].as_f64().unwrap() - 120.0).abs() < 1e-9);
    let calls = fake.calls();
    assert!(calls.iter().any(|c| c.starts_with("dmon -i 0")), "{calls:?}");
    assert_eq!(calls.last().unwrap(), "-i 0 -pl 450");
}

#[test]
fn campaign_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("c.toml");
    std::fs::write(
        &manifest,
        "campaign_id = \"cli\"\nhost = \"rtx4090\"\ntiers = [\"rtx3050\"]\nrepeats = 1\nduration_s = 1.2\n\
         output_dir = \"out\"\nbucket_s = 0.25\nsample_period_s = 0.2\n[[workloads]]\nsplat_count = 580604\n",
    )
    .unwrap();
    let m = manifest.to_str().unwrap();
    let out = run(&["campaign", m]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["launched"], 1);
    assert!(dir.path().join("out/results.ndjson").exists());

    let again: Value = serde_json::from_slice(&run(&["campaign", m]).stdout).unwrap();
    assert_eq!(again["launched"], 0);
    assert_eq!(again["skipped"], 1);

    let out = run(&["campaign", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}
