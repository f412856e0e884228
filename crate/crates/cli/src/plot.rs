//! Static SVG plots of sweep summaries and closed-loop trajectories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Control cost against communication savings.
    Tradeoff,
    /// States, input and communication flag over time.
    Trajectory,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let headers: Vec<String> = r
            .headers()
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(CliError::Runtime(format!("{} has no data rows", path.display())));
        }
        Ok(Self { headers, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn num(&self, row: usize, col: usize) -> Result<f64, CliError> {
        let v = &self.rows[row][col];
        match v.as_str() {
            "true" => Ok(1.0),
            "false" => Ok(0.0),
            _ => v
                .parse()
                .map_err(|_| CliError::Runtime(format!("non-numeric value '{v}' in column {}", self.headers[col]))),
        }
    }
}

struct Series {
    label: String,
    color: &'static str,
    points: Vec<(f64, f64)>,
    line: bool,
    markers: bool,
    /// Draw as a zero-order-hold staircase.
    step: bool,
}

struct Panel {
    title: String,
    xlabel: String,
    ylabel: String,
    series: Vec<Series>,
}

/// Roughly five round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_panel(svg: &mut String, p: &Panel, x0: f64, y0: f64, w: f64, h: f64) {
    let (ml, mr, mt, mb) = (70.0, 150.0, 30.0, 45.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let (ox, oy) = (x0 + ml, y0 + mt);
    let (xlo, xhi) = range(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0)));
    let (ylo, yhi) = range(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.1)));
    let sx = |x: f64| ox + (x - xlo) / (xhi - xlo) * pw;
    let sy = |y: f64| oy + ph - (y - ylo) / (yhi - ylo) * ph;

    let _ = writeln!(
        svg,
        r##"<rect x="{ox:.2}" y="{oy:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333"/>"##
    );
    for t in ticks(xlo, xhi) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{oy:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"##,
            oy + ph,
            oy + ph + 15.0,
            fmt_tick(t)
        );
    }
    for t in ticks(ylo, yhi) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{ox:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"##,
            ox + pw,
            ox - 5.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
        ox + pw / 2.0,
        y0 + 18.0,
        escape(&p.title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
        ox + pw / 2.0,
        oy + ph + 35.0,
        escape(&p.xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        x0 + 18.0,
        oy + ph / 2.0,
        x0 + 18.0,
        oy + ph / 2.0,
        escape(&p.ylabel)
    );

    for (i, s) in p.series.iter().enumerate() {
        if s.line && s.points.len() > 1 {
            let mut d = String::new();
            for (k, &(x, y)) in s.points.iter().enumerate() {
                if k == 0 {
                    let _ = write!(d, "M{:.2},{:.2}", sx(x), sy(y));
                } else if s.step {
                    let _ = write!(d, " H{:.2} V{:.2}", sx(x), sy(y));
                } else {
                    let _ = write!(d, " L{:.2},{:.2}", sx(x), sy(y));
                }
            }
            let _ = writeln!(
                svg,
                r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                s.color
            );
        }
        if s.markers {
            for &(x, y) in &s.points {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                    sx(x),
                    sy(y),
                    s.color
                );
            }
        }
        let ly = oy + 12.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            ox + pw + 12.0,
            ly - 9.0,
            s.color,
            ox + pw + 27.0,
            ly,
            escape(&s.label)
        );
    }
}

fn render(panels: &[Panel], width: f64, panel_height: f64) -> String {
    let height = panel_height * panels.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut svg, p, 0.0, i as f64 * panel_height, width, panel_height);
    }
    svg.push_str("</svg>\n");
    svg
}

fn tradeoff_series(table: &Table, fallback_label: &str, color_offset: usize) -> Result<Vec<Series>, CliError> {
    let (gx, gy) = match (table.col("savings_mean"), table.col("r_ctrl_abs_mean")) {
        (Some(x), Some(y)) => (x, y),
        _ => match (table.col("savings"), table.col("r_ctrl_abs")) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(CliError::Runtime(
                    "trade-off plot needs savings and r_ctrl_abs columns".into(),
                ))
            }
        },
    };
    let label_col = table.col("rule");
    let stable_col = table.col("all_stable").or_else(|| table.col("stable"));
    let mut labels: Vec<String> = Vec::new();
    let mut points: Vec<Vec<(f64, f64)>> = Vec::new();
    for r in 0..table.rows.len() {
        // Diverged runs have unbounded cost and would flatten the axis.
        if stable_col.is_some_and(|c| table.rows[r][c] == "false") {
            continue;
        }
        let label = label_col.map_or_else(|| fallback_label.to_string(), |c| table.rows[r][c].clone());
        let idx = match labels.iter().position(|l| *l == label) {
            Some(i) => i,
            None => {
                labels.push(label);
                points.push(Vec::new());
                labels.len() - 1
            }
        };
        points[idx].push((table.num(r, gx)?, table.num(r, gy)?));
    }
    Ok(labels
        .into_iter()
        .zip(points)
        .enumerate()
        .map(|(i, (label, mut pts))| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                line: pts.len() > 1 && label_col.is_some(),
                label,
                color: PALETTE[(i + color_offset) % PALETTE.len()],
                points: pts,
                markers: true,
                step: false,
            }
        })
        .collect())
}

fn trajectory_panels(table: &Table) -> Result<Vec<Panel>, CliError> {
    let t = table
        .col("k")
        .ok_or_else(|| CliError::Runtime("trajectory plot needs a k column".into()))?;
    let ep = table.col("episode");
    let signals: Vec<usize> = (0..table.headers.len())
        .filter(|&c| c != t && Some(c) != ep && table.headers[c] != "r_ctrl")
        .collect();
    let mut episodes: Vec<String> = Vec::new();
    for r in &table.rows {
        let e = ep.map_or_else(|| "0".to_string(), |c| r[c].clone());
        if !episodes.contains(&e) {
            episodes.push(e);
        }
    }
    signals
        .into_iter()
        .map(|c| {
            let name = table.headers[c].clone();
            let step = name == "delta" || name.starts_with('u');
            let series = episodes
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let mut pts = Vec::new();
                    for r in 0..table.rows.len() {
                        if ep.is_none_or(|ec| table.rows[r][ec] == *e) {
                            pts.push((table.num(r, t)?, table.num(r, c)?));
                        }
                    }
                    Ok(Series {
                        label: format!("episode {e}"),
                        color: PALETTE[i % PALETTE.len()],
                        points: pts,
                        line: true,
                        markers: name == "delta",
                        step,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(Panel {
                title: name.clone(),
                xlabel: "step".into(),
                ylabel: name,
                series,
            })
        })
        .collect()
}

/// Renders `inputs` to an SVG at `out`. Nothing is written on error.
pub fn plot(inputs: &[PathBuf], out: &Path, kind: Option<PlotKind>) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("plot needs at least one --input".into()));
    }
    let tables = inputs.iter().map(|p| Table::read(p)).collect::<Result<Vec<_>, _>>()?;
    let kind = kind.unwrap_or_else(|| {
        if tables[0].col("k").is_some() && tables[0].col("delta").is_some() {
            PlotKind::Trajectory
        } else {
            PlotKind::Tradeoff
        }
    });
    let svg = match kind {
        PlotKind::Tradeoff => {
            let mut series = Vec::new();
            for (table, path) in tables.iter().zip(inputs) {
                let stem = path
                    .file_stem()
                    .map_or("input".into(), |s| s.to_string_lossy().into_owned());
                let offset = series.len();
                series.extend(tradeoff_series(table, &stem, offset)?);
            }
            let panel = Panel {
                title: "control cost vs. communication savings".into(),
                xlabel: "savings".into(),
                ylabel: "|R_ctrl|".into(),
                series,
            };
            render(&[panel], 720.0, 460.0)
        }
        PlotKind::Trajectory => {
            if tables.len() != 1 {
                return Err(CliError::Usage("trajectory plot takes exactly one input".into()));
            }
            render(&trajectory_panels(&tables[0])?, 820.0, 220.0)
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(out, svg).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}
