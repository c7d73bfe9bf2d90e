//! Dependency-free SVG emission for the report plots: volume curves with a
//! mean +/- std band per group, and the expert-usage heatmap.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub color: String,
    /// Mean curve, one value per frame.
    pub mean: Vec<f64>,
    /// Optional (lower, upper) band around the mean.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 55.0;

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Line chart over frame index with optional shaded bands.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[Series]) -> String {
    let frames = series.iter().map(|s| s.mean.len()).max().unwrap_or(0);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for (&m, band) in s.mean.iter().zip(std::iter::repeat(&s.band)) {
            y_min = y_min.min(m);
            y_max = y_max.max(m);
            let _ = band;
        }
        if let Some((lo, hi)) = &s.band {
            for &v in lo.iter().chain(hi.iter()) {
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    if !y_min.is_finite() || !y_max.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |f: usize| MARGIN_L + plot_w * f as f64 / (frames.max(2) - 1) as f64;
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"28\" font-family=\"sans-serif\" font-size=\"17\" text-anchor=\"middle\">{title}</text>\n",
        MARGIN_L + plot_w / 2.0
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h,
        MARGIN_T + plot_h
    );
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y_of(v);
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_L}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    for f in (0..frames).step_by((frames / 6).max(1)) {
        let x = x_of(f);
        let _ = write!(
            svg,
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{f}</text>\n",
            MARGIN_T + plot_h + 18.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">frame</text>\n\
         <text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        MARGIN_L + plot_w / 2.0,
        MARGIN_T + plot_h + 38.0,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    );

    for s in series {
        if let Some((lo, hi)) = &s.band {
            let mut d = String::new();
            for (f, &v) in lo.iter().enumerate() {
                let cmd = if f == 0 { 'M' } else { 'L' };
                let _ = write!(d, "{cmd}{:.2},{:.2} ", x_of(f), y_of(v));
            }
            for (f, &v) in hi.iter().enumerate().rev() {
                let _ = write!(d, "L{:.2},{:.2} ", x_of(f), y_of(v));
            }
            let _ = write!(svg, "<path d=\"{d}Z\" fill=\"{}\" opacity=\"0.18\"/>\n", s.color);
        }
    }
    for s in series {
        let mut d = String::new();
        for (f, &v) in s.mean.iter().enumerate() {
            let cmd = if f == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2},{:.2} ", x_of(f), y_of(v));
        }
        let _ = write!(
            svg,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            s.color
        );
    }
    // legend
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 16.0 * i as f64;
        let x = WIDTH - MARGIN_R + 12.0;
        let _ = write!(
            svg,
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            x + 22.0,
            s.color,
            x + 28.0,
            y + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Row-normalized heatmap (e.g. phenotype x expert usage), annotated with
/// the cell values.
pub fn heatmap_svg(title: &str, row_labels: &[String], col_labels: &[String], matrix: &[Vec<f64>]) -> String {
    let rows = matrix.len();
    let cols = matrix.first().map(|r| r.len()).unwrap_or(0);
    let cell = 64.0;
    let left = 110.0;
    let top = 70.0;
    let width = left + cols as f64 * cell + 40.0;
    let height = top + rows as f64 * cell + 40.0;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"30\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        width / 2.0
    );
    for (ri, row) in matrix.iter().enumerate() {
        for (ci, &v) in row.iter().enumerate() {
            let x = left + ci as f64 * cell;
            let y = top + ri as f64 * cell;
            // dark blue at 1, white at 0
            let shade = (255.0 * (1.0 - v)).round().clamp(0.0, 255.0) as u8;
            let _ = write!(
                svg,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#999\"/>\n\
                 <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" fill=\"{}\">{:.2}</text>\n",
                x + cell / 2.0,
                y + cell / 2.0 + 5.0,
                if v > 0.6 { "white" } else { "black" },
                v
            );
        }
    }
    for (ri, label) in row_labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"end\">{label}</text>\n",
            left - 10.0,
            top + ri as f64 * cell + cell / 2.0 + 5.0
        );
    }
    for (ci, label) in col_labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{label}</text>\n",
            left + ci as f64 * cell + cell / 2.0,
            top - 12.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
