//! Minimal SVG line charts of stage results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::artifacts::read_json;
use super::{DynamicSummary, KinematicSummary};
use crate::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: [f64; 4] = [60.0, 20.0, 40.0, 50.0]; // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#555555"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let ty = |v: f64| if self.log_y { v.max(1e-300).log10() } else { v };
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(pts().map(|p| p.0)).unwrap_or((0.0, 1.0));
        let (y0, y1) = bounds(pts().filter(|p| !self.log_y || p.1 > 0.0).map(|p| ty(p.1))).unwrap_or((0.0, 1.0));
        let (l, r, t, b) = (MARGIN[0], MARGIN[1], MARGIN[2], MARGIN[3]);
        let px = |x: f64| l + (x - x0) / (x1 - x0) * (W - l - r);
        let py = |y: f64| H - b - (ty(y) - y0) / (y1 - y0) * (H - t - b);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            W - l - r,
            H - t - b
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let ylabel = if self.log_y { 10f64.powf(yv) } else { yv };
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(xv),
                H - b + 16.0,
                tick(xv)
            );
            let y_px = H - b - f * (H - t - b);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                l - 4.0,
                y_px + 4.0,
                tick(ylabel)
            );
            let _ = writeln!(
                s,
                r##"<line x1="{l}" x2="{:.1}" y1="{y_px:.1}" y2="{y_px:.1}" stroke="#ddd"/>"##,
                W - r
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            l + (W - l - r) / 2.0,
            H - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            t + (H - t - b) / 2.0,
            t + (H - t - b) / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite() && (!self.log_y || p.1 > 0.0))
                .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
                .collect();
            let dash = if series.dashed {
                r#" stroke-dasharray="6 4""#
            } else {
                ""
            };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                path.join(" ")
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
                l + 8.0,
                t + 16.0 + 14.0 * i as f64,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

#[derive(Deserialize)]
struct JointCsvRow {
    iteration: usize,
    t: f64,
    reference: f64,
    output: f64,
}

fn joint_chart(path: &Path, joint: usize, unit: &str, scale: f64) -> Result<Chart> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: Vec<JointCsvRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let last = rows.iter().map(|r| r.iteration).max().unwrap_or(1);
    let pick = |it: usize| rows.iter().filter(move |r| r.iteration == it);
    let series = vec![
        Series::new("reference", pick(1).map(|r| (r.t, r.reference * scale)).collect()).dashed(),
        Series::new("iteration 1", pick(1).map(|r| (r.t, r.output * scale)).collect()),
        Series::new(
            format!("iteration {last}"),
            pick(last).map(|r| (r.t, r.output * scale)).collect(),
        ),
    ];
    Ok(Chart {
        title: format!("Joint {joint} tracking"),
        x_label: "time [s]".into(),
        y_label: format!("q{joint} [{unit}]"),
        log_y: false,
        series,
    })
}

#[derive(Deserialize)]
struct RecordCsvRow {
    iteration: usize,
    rotation_deg: f64,
    insertion_mm: f64,
    x: f64,
    y: f64,
}

/// Lateral tooltip excursion around the reference at the deepest grid row,
/// first against final iteration.
fn tooltip_chart(path: &Path) -> Result<Chart> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows: Vec<RecordCsvRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
    let depth = rows.iter().map(|r| r.insertion_mm).fold(f64::NEG_INFINITY, f64::max);
    let last = rows.iter().map(|r| r.iteration).max().unwrap_or(1);
    let row = |it: usize| {
        let mut v: Vec<&RecordCsvRow> = rows
            .iter()
            .filter(|r| r.iteration == it && r.insertion_mm == depth)
            .collect();
        v.sort_by(|a, b| a.rotation_deg.total_cmp(&b.rotation_deg));
        v
    };
    let reference = row(1).first().map(|r| (r.x, r.y)).unwrap_or((0.0, 0.0));
    let series = [1, last]
        .iter()
        .map(|it| {
            Series::new(
                format!("iteration {it}"),
                row(*it)
                    .iter()
                    .map(|r| ((r.x - reference.0) * 1e6, (r.y - reference.1) * 1e6))
                    .collect(),
            )
        })
        .collect();
    Ok(Chart {
        title: format!("Tooltip excursion at {depth} mm"),
        x_label: "x [um]".into(),
        y_label: "y [um]".into(),
        log_y: false,
        series,
    })
}

/// Renders every chart the available artifacts allow into `out/plots`.
pub fn render_plots(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("plots");
    let mut charts: Vec<(String, Chart)> = Vec::new();

    let kin = out.join("kinematic").join("summary.json");
    if kin.is_file() {
        let k: KinematicSummary = read_json(&kin)?;
        let pts = |v: &[f64]| v.iter().enumerate().map(|(i, y)| ((i + 1) as f64, *y)).collect();
        charts.push((
            "kinematic_rms".into(),
            Chart {
                title: "Kinematic learning".into(),
                x_label: "iteration".into(),
                y_label: "tooltip error [um]".into(),
                log_y: true,
                series: vec![
                    Series::new("RMS", pts(&k.rms_um)),
                    Series::new("max", pts(&k.max_um)).dashed(),
                ],
            },
        ));
        let records = out.join("kinematic").join("records.csv");
        if records.is_file() {
            charts.push(("tooltip_paths".into(), tooltip_chart(&records)?));
        }
    }

    let dynamic = out.join("dynamic").join("summary.json");
    if dynamic.is_file() {
        let d: DynamicSummary = read_json(&dynamic)?;
        let series = d
            .joints
            .iter()
            .map(|j| {
                Series::new(
                    format!("joint {}", j.joint),
                    j.max_error
                        .iter()
                        .enumerate()
                        .map(|(i, e)| ((i + 1) as f64, e / j.threshold))
                        .collect(),
                )
            })
            .collect();
        charts.push((
            "dynamic_errors".into(),
            Chart {
                title: "Dynamic learning".into(),
                x_label: "iteration".into(),
                y_label: "max error / threshold".into(),
                log_y: true,
                series,
            },
        ));
        for j in &d.joints {
            let csv = out.join("dynamic").join(format!("joint{}.csv", j.joint));
            if csv.is_file() {
                let scale = j
                    .max_error_display
                    .first()
                    .zip(j.max_error.first())
                    .map_or(1.0, |(a, b)| if *b == 0.0 { 1.0 } else { a / b });
                charts.push((
                    format!("joint{}_tracking", j.joint),
                    joint_chart(&csv, j.joint, &j.display_unit, scale)?,
                ));
            }
        }
    }

    if charts.is_empty() {
        return Err(Error::MissingArtifact(out.join("kinematic").join("summary.json")));
    }
    std::fs::create_dir_all(&dir)?;
    charts
        .into_iter()
        .map(|(name, chart)| {
            let path = dir.join(format!("{name}.svg"));
            std::fs::write(&path, chart.to_svg())?;
            Ok(path)
        })
        .collect()
}
