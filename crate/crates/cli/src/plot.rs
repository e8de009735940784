//! Dependency-free SVG line charts: `L_recon` and `|ρ|` against step.

use std::fmt::Write;

use reentangle::eval::MetricsRecord;
use reentangle::objectives::LossWeights;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 340.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const MAX_POINTS: usize = 600;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub id: &'static str,
    pub title: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

/// Averages consecutive points into at most `max` bins.
pub fn downsample(points: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let per = points.len().div_ceil(max);
    points
        .chunks(per)
        .map(|c| {
            let n = c.len() as f64;
            (
                c.iter().map(|p| p.0).sum::<f64>() / n,
                c.iter().map(|p| p.1).sum::<f64>() / n,
            )
        })
        .collect()
}

/// The two standard panels for labelled runs.
pub fn standard_panels(runs: &[(String, Vec<MetricsRecord>)], w: &LossWeights) -> [Panel; 2] {
    let recon = runs
        .iter()
        .map(|(label, h)| Series {
            label: label.clone(),
            points: downsample(
                &h.iter().map(|r| (r.step as f64, r.recon(w))).collect::<Vec<_>>(),
                MAX_POINTS,
            ),
        })
        .collect();
    let rho = runs
        .iter()
        .map(|(label, h)| Series {
            label: label.clone(),
            points: h.iter().filter_map(|r| r.rho.map(|x| (r.step as f64, x))).collect(),
        })
        .collect();
    [
        Panel {
            id: "recon",
            title: "Reconstruction loss".into(),
            y_label: "L_recon".into(),
            log_y: true,
            series: recon,
        },
        Panel {
            id: "rho",
            title: "Disentanglement".into(),
            y_label: "|ρ|".into(),
            log_y: false,
            series: rho,
        },
    ]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn render_panel(out: &mut String, panel: &Panel, x0: f64) {
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let ty = |y: f64| if panel.log_y { y.max(1e-300).log10() } else { y };
    let pts = || {
        panel
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.0.is_finite() && p.1.is_finite())
    };
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        if panel.log_y && y <= 0.0 {
            continue;
        }
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(ty(y));
        ymax = ymax.max(ty(y));
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if panel.id == "rho" {
        (ymin, ymax) = (0.0, 1.0);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        (ymin, ymax) = (ymin - 0.5, ymax + 0.5);
    }
    let sx = |x: f64| x0 + MARGIN_L + (x - xmin) / (xmax - xmin) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - ymin) / (ymax - ymin) * plot_h;

    let _ = writeln!(out, r#"<g class="panel" id="{}">"#, panel.id);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        x0 + MARGIN_L + plot_w / 2.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{MARGIN_T}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#444"/>"##,
        x0 + MARGIN_L
    );
    for t in ticks(xmin, xmax, 4) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            sx(t),
            MARGIN_T + plot_h + 14.0,
            fmt_tick(t)
        );
    }
    for t in ticks(ymin, ymax, 4) {
        let label = if panel.log_y {
            fmt_tick(10f64.powf(t))
        } else {
            fmt_tick(t)
        };
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"##,
            x0 + MARGIN_L,
            x0 + MARGIN_L + plot_w,
            x0 + MARGIN_L - 4.0,
            sy(t) + 3.0,
            y = sy(t),
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">step</text>"#,
        x0 + MARGIN_L + plot_w / 2.0,
        PANEL_H - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.1} {:.1})">{}{}</text>"#,
        x0 + 14.0,
        MARGIN_T + plot_h / 2.0,
        x0 + 14.0,
        MARGIN_T + plot_h / 2.0,
        escape(&panel.y_label),
        if panel.log_y { " (log)" } else { "" }
    );
    for (i, s) in panel.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for &(x, y) in s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite() && !(panel.log_y && p.1 <= 0.0))
        {
            let _ = write!(
                d,
                "{}{:.1},{:.1}",
                if d.is_empty() { "M" } else { " L" },
                sx(x),
                sy(ty(y))
            );
        }
        let _ = writeln!(
            out,
            r#"<path class="series" data-label="{}" d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(&s.label)
        );
        let ly = MARGIN_T + 14.0 + 14.0 * i as f64;
        let lx = x0 + MARGIN_L + plot_w - 110.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 3.0,
            escape(&s.label)
        );
    }
    out.push_str("</g>\n");
}

/// One SVG document with the panels laid out left to right.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif">"#
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}
