//! Merges per-run `metrics.csv` files into one curve table and draws simple
//! SVG line charts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bigfair_core::evaluation::{unfairness, EvalReport};
use bigfair_core::training::CheckpointRecord;

use crate::CliError;

/// One checkpoint row; AUCs in ×100 points.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub overall: Option<f64>,
    pub heavy: Option<f64>,
    pub cold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCurves {
    pub tag: String,
    pub points: Vec<CurvePoint>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn field(s: &str) -> Result<Option<f64>, ()> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| ())
    }
}

pub fn parse_metrics(content: &str, path: &str) -> Result<Vec<CurvePoint>, CliError> {
    let mut lines = content.lines();
    let header = lines.next().unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| CliError::Report(format!("{path}: missing column `{name}`")))
    };
    let (is, io, ih, ic) = (idx("step")?, idx("overall_auc")?, idx("heavy_auc")?, idx("cold_auc")?);
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Report(format!("{path}:{}: malformed row", n + 2));
        if f.len() != cols.len() {
            return Err(bad());
        }
        out.push(CurvePoint {
            step: f[is].parse().map_err(|_| bad())?,
            overall: field(f[io]).map_err(|_| bad())?,
            heavy: field(f[ih]).map_err(|_| bad())?,
            cold: field(f[ic]).map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn manifest_tag(dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("run_manifest")).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("run_tag="))
        .map(str::to_string)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Loads each run; tags come from the run manifest and fall back to the
/// directory name. Repeated tags are made unique by appending the directory
/// name.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<RunCurves>, CliError> {
    let mut runs = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in dirs {
        let path = dir.join("metrics.csv");
        let points = parse_metrics(&read(&path)?, &path.display().to_string())?;
        let mut tag = manifest_tag(dir).unwrap_or_else(|| dir_name(dir));
        if seen.contains(&tag) {
            tag = format!("{tag}@{}", dir_name(dir));
        }
        let mut n = 2;
        let base = tag.clone();
        while seen.contains(&tag) {
            tag = format!("{base}#{n}");
            n += 1;
        }
        seen.insert(tag.clone());
        runs.push(RunCurves { tag, points });
    }
    Ok(runs)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curves_csv(runs: &[RunCurves]) -> String {
    let mut out = String::from("run_tag,step,overall_auc,heavy_auc,cold_auc\n");
    for r in runs {
        for p in &r.points {
            let _ = writeln!(out, "{},{},{},{},{}", r.tag, p.step, opt(p.overall), opt(p.heavy), opt(p.cold));
        }
    }
    out
}

/// Per-run unfairness from the recorded curves.
pub fn unfairness_csv(runs: &[RunCurves]) -> String {
    let mut out = String::from("run_tag,best_overall_step,best_cold_step,cold_at_best_overall,cold_at_best_cold,unfairness\n");
    for r in runs {
        let records: Vec<CheckpointRecord> = r
            .points
            .iter()
            .map(|p| CheckpointRecord {
                step: p.step,
                path: None,
                report: EvalReport::from_strata(
                    p.overall.map(|x| x / 100.0),
                    p.heavy.map(|x| x / 100.0),
                    p.cold.map(|x| x / 100.0),
                ),
            })
            .collect();
        match unfairness(&records) {
            Ok(u) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.tag,
                    u.best_overall_step,
                    u.best_cold_step,
                    100.0 * u.cold_at_best_overall,
                    100.0 * u.cold_at_best_cold,
                    u.unfairness
                );
            }
            Err(_) => {
                let _ = writeln!(out, "{},,,,,", r.tag);
            }
        }
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of the three AUC curves of one run against step.
pub fn svg_chart(run: &RunCurves) -> String {
    let series: [(&str, &str, fn(&CurvePoint) -> Option<f64>); 3] = [
        ("overall", "#1f77b4", |p| p.overall),
        ("heavy", "#2ca02c", |p| p.heavy),
        ("cold", "#d62728", |p| p.cold),
    ];
    let values: Vec<f64> = run
        .points
        .iter()
        .flat_map(|p| series.iter().filter_map(move |s| (s.2)(p)))
        .collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 100.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let max_step = run.points.iter().map(|p| p.step).max().unwrap_or(0).max(1) as f64;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x = |step: usize| LEFT + plot_w * step as f64 / max_step;
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&run.tag)
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            yy + 4.0
        );
        let step = (max_step * i as f64 / 4.0).round() as usize;
        let xx = x(step);
        let _ = writeln!(
            s,
            r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{step}</text>"#,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
        LEFT + plot_w / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">AUC x100</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (k, (name, color, get)) in series.iter().enumerate() {
        // absent values split the curve into separate segments
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, s: &mut String| {
            if segment.len() == 1 {
                let _ = writeln!(s, r#"<circle cx="{}" r="2.5" fill="{color}"/>"#, segment[0].replace(',', "\" cy=\""));
            } else if segment.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    segment.join(" ")
                );
            }
            segment.clear();
        };
        for p in &run.points {
            match get(p) {
                Some(v) => segment.push(format!("{:.2},{:.2}", x(p.step), y(v))),
                None => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
        let ly = TOP + 16.0 + 20.0 * k as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// File-name-safe version of a run tag.
pub fn file_stem(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}
