//! SVG line charts of training logs.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

/// Columns never drawn.
const SKIPPED: [&str; 3] = ["iter", "lr", "time_ms"];
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN: f64 = 56.0;

/// One numeric column of a log; `None` marks an empty field.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Parses a training log into the iteration column and every other
/// column that has at least one value.
pub fn parse_log(text: &str) -> Result<Vec<Series>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().context("log is empty")?.split(',').map(str::trim).collect();
    let iter_col = header
        .iter()
        .position(|&h| h == "iter")
        .context("log header has no `iter` column")?;
    let mut series: Vec<Series> = header
        .iter()
        .map(|h| Series {
            name: h.to_string(),
            points: Vec::new(),
        })
        .collect();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            bail!(
                "malformed log: row {} has {} fields, header has {}",
                n + 2,
                fields.len(),
                header.len()
            );
        }
        let x: f64 = fields[iter_col]
            .parse()
            .with_context(|| format!("malformed log: row {} has a non-numeric iter", n + 2))?;
        for (k, f) in fields.iter().enumerate() {
            if k == iter_col || f.is_empty() {
                continue;
            }
            let v: f64 = f
                .parse()
                .with_context(|| format!("malformed log: row {} column {} is not a number: {f:?}", n + 2, header[k]))?;
            series[k].points.push((x, v));
        }
    }
    Ok(series
        .into_iter()
        .filter(|s| !SKIPPED.contains(&s.name.as_str()) && !s.points.is_empty())
        .collect())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders loss columns in a top panel and retrieval in a bottom panel,
/// each polyline tagged with `data-column`.
pub fn render_svg(series: &[Series]) -> Result<String> {
    if series.is_empty() {
        bail!("log has no plottable columns");
    }
    let panels: Vec<Vec<&Series>> = [
        series.iter().filter(|s| s.name.starts_with("loss")).collect::<Vec<_>>(),
        series.iter().filter(|s| !s.name.starts_with("loss")).collect(),
    ]
    .into_iter()
    .filter(|p| !p.is_empty())
    .collect();
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let height = panels.len() as f64 * (PANEL_HEIGHT + MARGIN) + MARGIN;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    let plot_w = WIDTH - 2.0 * MARGIN - 120.0;
    let mut color = 0;
    for (p, panel) in panels.iter().enumerate() {
        let top = MARGIN + p as f64 * (PANEL_HEIGHT + MARGIN);
        let (y0, y1) = bounds(panel.iter().flat_map(|s| s.points.iter().map(|q| q.1)));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| top + PANEL_HEIGHT - (y - y0) / (y1 - y0) * PANEL_HEIGHT;
        writeln!(
            svg,
            r#"<g class="axes"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{l}" y1="{top}" x2="{l}" y2="{b}" stroke="black"/>"#,
            l = MARGIN,
            r = MARGIN + plot_w,
            b = top + PANEL_HEIGHT
        )?;
        for t in 0..=4 {
            let f = t as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                sx(xv),
                top + PANEL_HEIGHT + 14.0,
                fmt_tick(xv),
                MARGIN - 4.0,
                sy(yv) + 4.0,
                fmt_tick(yv)
            )?;
        }
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text></g>"#,
            MARGIN + plot_w / 2.0,
            top + PANEL_HEIGHT + 30.0
        )?;
        for (k, s) in panel.iter().enumerate() {
            let c = COLORS[color % COLORS.len()];
            color += 1;
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            writeln!(
                svg,
                r#"<polyline data-column="{}" fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
                s.name,
                pts.join(" ")
            )?;
            let ly = top + 12.0 + k as f64 * 16.0;
            let lx = MARGIN + plot_w + 12.0;
            writeln!(
                svg,
                r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
                lx + 18.0,
                lx + 22.0,
                ly + 4.0,
                s.name
            )?;
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
