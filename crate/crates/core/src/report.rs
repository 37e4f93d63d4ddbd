//! Aggregated tables and charts from a result store.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{aggregate_repeats, MetricsError, RunRecord};
use crate::store::ResultStore;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const CHART_DIR: &str = "charts";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("result store has no run records")]
    EmptyStore,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" | "md" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(format!("unknown report format `{other}` (table, csv, svg)")),
        }
    }
}

/// One aggregated configuration, with the number of repeats behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub repeats: usize,
    pub record: RunRecord,
}

/// Aggregates repeats and orders rows like the reference table: tiers in
/// order of first appearance, animated before static, splat count descending.
pub fn aggregate_rows(store: &ResultStore, labels: &HashMap<String, String>) -> Result<Vec<ReportRow>, ReportError> {
    let mut tier_order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, bool, std::cmp::Reverse<u64>), Vec<RunRecord>> = BTreeMap::new();
    for r in store.records() {
        let pos = match tier_order.iter().position(|t| *t == r.tier_name) {
            Some(p) => p,
            None => {
                tier_order.push(&r.tier_name);
                tier_order.len() - 1
            }
        };
        groups
            .entry((pos, !r.animated, std::cmp::Reverse(r.splat_count)))
            .or_default()
            .push(r.clone());
    }
    if groups.is_empty() {
        return Err(ReportError::EmptyStore);
    }
    groups
        .into_values()
        .map(|records| {
            let record = aggregate_repeats(&records)?;
            Ok(ReportRow {
                label: labels
                    .get(&record.tier_name)
                    .cloned()
                    .unwrap_or_else(|| record.tier_name.clone()),
                repeats: records.len(),
                record,
            })
        })
        .collect()
}

pub fn format_millions(splats: u64) -> String {
    format!("{:.2} M", splats as f64 / 1e6)
}

pub fn format_fps(mean: f64, sd: f64) -> String {
    format!("{mean:.1} ±{sd:.1}")
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "| GPU | Animations? | # Splats | FPS (mean ± SD) | P_avg (W) | E/frame (J) | FPS/W |\n\
         |---|---|---:|---:|---:|---:|---:|\n",
    );
    let mut prev: Option<(&str, bool)> = None;
    for row in rows {
        let r = &row.record;
        let gpu = if prev.map(|p| p.0) == Some(r.tier_name.as_str()) {
            ""
        } else {
            row.label.as_str()
        };
        let anim = if prev == Some((r.tier_name.as_str(), r.animated)) {
            ""
        } else if r.animated {
            "Yes"
        } else {
            "No"
        };
        let _ = writeln!(
            out,
            "| {gpu} | {anim} | {} | {} | {:.1} | {:.3} | {:.4} |",
            format_millions(r.total_splats()),
            format_fps(r.fps.mean_fps, r.fps.sd_fps),
            r.energy.p_avg_w,
            r.energy.energy_per_frame_j,
            r.energy.perf_per_watt,
        );
        prev = Some((r.tier_name.as_str(), r.animated));
    }
    out
}

pub fn render_csv(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| ReportError::Io {
        path: REPORT_CSV.into(),
        message: e.to_string(),
    };
    w.write_record([
        "tier",
        "label",
        "animated",
        "splat_count",
        "animated_splats",
        "total_splats",
        "repeats",
        "mean_fps",
        "sd_fps",
        "p_avg_w",
        "energy_per_frame_j",
        "perf_per_watt",
        "violations",
        "bucket_count",
        "total_frames",
    ])
    .map_err(io)?;
    for row in rows {
        let r = &row.record;
        w.write_record([
            r.tier_name.clone(),
            row.label.clone(),
            r.animated.to_string(),
            r.splat_count.to_string(),
            r.animated_splats.to_string(),
            r.total_splats().to_string(),
            row.repeats.to_string(),
            r.fps.mean_fps.to_string(),
            r.fps.sd_fps.to_string(),
            r.energy.p_avg_w.to_string(),
            r.energy.energy_per_frame_j.to_string(),
            r.energy.perf_per_watt.to_string(),
            r.violations.to_string(),
            r.fps.bucket_count.to_string(),
            r.fps.total_frames.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io {
        path: REPORT_CSV.into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|c| *c >= v)
        .unwrap_or(10.0 * mag)
}

/// Line chart with markers. `categories` labels integer x positions instead
/// of a numeric axis.
fn line_chart(title: &str, x_label: &str, y_label: &str, categories: Option<&[String]>, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y1: f64 = 0.0;
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if let Some(c) = categories {
        x0 = -0.5;
        x1 = c.len() as f64 - 0.5;
    } else if !(x1 > x0) {
        x0 -= 1.0;
        x1 += 1.0;
    } else {
        let pad = (x1 - x0) * 0.05;
        x0 -= pad;
        x1 += pad;
    }
    let y_max = nice_max(y1 * 1.05);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - y / y_max * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0,
            trim_number(v)
        );
    }
    match categories {
        Some(c) => {
            for (i, name) in c.iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    sx(i as f64),
                    top + ph + 18.0,
                    escape(name)
                );
            }
        }
        None => {
            for i in 0..=5 {
                let v = x0 + (x1 - x0) * i as f64 / 5.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                    sx(v),
                    top + ph + 18.0,
                    trim_number(v)
                );
            }
        }
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = top + 10.0 + i as f64 * 18.0;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn workload_name(r: &RunRecord) -> String {
    format!(
        "{}{}",
        format_millions(r.total_splats()),
        if r.animated { " anim" } else { "" }
    )
}

/// The three chart files, as (file name, svg).
pub fn render_charts(rows: &[ReportRow], store: &ResultStore) -> Vec<(String, String)> {
    let mut tiers: Vec<(String, String)> = Vec::new();
    for row in rows {
        if !tiers.iter().any(|t| t.0 == row.record.tier_name) {
            tiers.push((row.record.tier_name.clone(), row.label.clone()));
        }
    }
    let mut workloads: Vec<(u64, bool, String)> = Vec::new();
    for row in rows {
        let r = &row.record;
        if !workloads.iter().any(|w| w.0 == r.splat_count && w.1 == r.animated) {
            workloads.push((r.splat_count, r.animated, workload_name(r)));
        }
    }
    let power_cap = |tier: &str, fallback: f64| {
        store
            .calibration(tier)
            .and_then(|c| c.report.as_ref())
            .map_or(fallback, |r| r.final_config.power_cap_w)
    };

    let per_workload = |f: &dyn Fn(&ReportRow) -> (f64, f64)| -> Vec<Series> {
        workloads
            .iter()
            .map(|(splats, animated, name)| Series {
                name: name.clone(),
                points: rows
                    .iter()
                    .filter(|r| r.record.splat_count == *splats && r.record.animated == *animated)
                    .map(f)
                    .collect(),
            })
            .collect()
    };
    let fps_power = per_workload(&|r| {
        (
            power_cap(&r.record.tier_name, r.record.energy.p_avg_w),
            r.record.fps.mean_fps,
        )
    });
    let tier_index = |name: &str| tiers.iter().position(|t| t.0 == name).unwrap_or(0) as f64;
    let energy_tier = per_workload(&|r| (tier_index(&r.record.tier_name), r.record.energy.energy_per_frame_j));
    let mut ppw_series = Vec::new();
    for (tier, label) in &tiers {
        for animated in [false, true] {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| &r.record.tier_name == tier && r.record.animated == animated)
                .map(|r| (r.record.total_splats() as f64 / 1e6, r.record.energy.perf_per_watt))
                .collect();
            if !points.is_empty() {
                ppw_series.push(Series {
                    name: format!("{label}{}", if animated { " anim" } else { "" }),
                    points,
                });
            }
        }
    }
    let tier_labels: Vec<String> = tiers.iter().map(|t| t.1.clone()).collect();
    vec![
        (
            "fps_vs_power_cap.svg".to_string(),
            line_chart("FPS vs power cap", "power cap (W)", "FPS", None, &fps_power),
        ),
        (
            "energy_per_frame_vs_tier.svg".to_string(),
            line_chart(
                "Energy per frame by tier",
                "tier",
                "J/frame",
                Some(&tier_labels),
                &energy_tier,
            ),
        ),
        (
            "perf_per_watt_vs_splats.svg".to_string(),
            line_chart(
                "Performance per watt vs scene size",
                "splats (M)",
                "FPS/W",
                None,
                &ppw_series,
            ),
        ),
    ]
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    std::fs::write(path, text).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes the requested format into `out_dir` and returns the files written.
pub fn render_report(
    store: &ResultStore,
    format: ReportFormat,
    out_dir: &Path,
    labels: &HashMap<String, String>,
) -> Result<Vec<PathBuf>, ReportError> {
    let rows = aggregate_rows(store, labels)?;
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| ReportError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    mkdir(out_dir)?;
    match format {
        ReportFormat::Table => {
            let path = out_dir.join(REPORT_MD);
            write(&path, &render_table(&rows))?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let path = out_dir.join(REPORT_CSV);
            write(&path, &render_csv(&rows)?)?;
            Ok(vec![path])
        }
        ReportFormat::Svg => {
            let dir = out_dir.join(CHART_DIR);
            mkdir(&dir)?;
            let mut out = Vec::new();
            for (name, svg) in render_charts(&rows, store) {
                let path = dir.join(name);
                write(&path, &svg)?;
                out.push(path);
            }
            Ok(out)
        }
    }
}
