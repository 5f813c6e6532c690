//! Minimal deterministic SVG rendering: heatmaps, line charts and paired
//! histograms. No timestamps or random ids, so output is byte-stable.

use std::fmt::Write;

use crate::eval::{AccuracyGrid, Histogram};

const FONT: &str = "font-family=\"sans-serif\" font-size=\"11\"";

fn header(w: f64, h: f64) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue (0) through yellow (1), clamped.
fn color(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let stops = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let x = t * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn cell(out: &mut String, x: f64, y: f64, w: f64, h: f64, v: Option<f64>) {
    let fill = v.map(color).unwrap_or_else(|| "#d0d0d0".into());
    let _ = writeln!(
        out,
        "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>"
    );
}

/// Accuracy heatmap: rows are memorization positions, columns query
/// positions. The distractor row and the column marginal sit in separate
/// strips below, the row marginal in a strip to the right.
pub fn heatmap(grid: &AccuracyGrid, title: &str) -> String {
    let (rows, cols) = (grid.seq_len, grid.queries);
    let size = (360.0 / rows.max(cols) as f64).clamp(2.0, 24.0);
    let (left, top, gap) = (60.0, 40.0, 8.0);
    let (gw, gh) = (cols as f64 * size, rows as f64 * size);
    let strips = if grid.has_distractor_row() { 2.0 } else { 1.0 };
    let width = left + gw + gap + size + 90.0;
    let height = top + gh + strips * (gap + size) + 50.0;
    let mut s = header(width, height);
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"20\" {FONT} font-size=\"13\">{}</text>",
        escape(title)
    );
    for r in 0..rows {
        for c in 0..cols {
            cell(
                &mut s,
                left + c as f64 * size,
                top + r as f64 * size,
                size,
                size,
                grid.cell(r, c),
            );
        }
    }
    let rm = grid.row_marginal();
    for (r, v) in rm.iter().enumerate() {
        cell(&mut s, left + gw + gap, top + r as f64 * size, size, size, *v);
    }
    let mut y = top + gh + gap;
    if grid.has_distractor_row() {
        for c in 0..cols {
            cell(&mut s, left + c as f64 * size, y, size, size, grid.distractor(c));
        }
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\" {FONT}>distractor</text>", y + size * 0.8);
        y += size + gap;
    }
    for (c, v) in grid.column_marginal().iter().enumerate() {
        cell(&mut s, left + c as f64 * size, y, size, size, *v);
    }
    let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\" {FONT}>mean</text>", y + size * 0.8);
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"{:.1}\" {FONT}>query position →</text>",
        y + size + 18.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" {FONT} transform=\"rotate(-90 14 {:.1})\">memorization position →</text>",
        top + gh,
        top + gh
    );
    // colour bar
    let bx = left + gw + gap + size + 20.0;
    for i in 0..50 {
        let v = 1.0 - i as f64 / 49.0;
        cell(&mut s, bx, top + i as f64 * 4.0, 12.0, 4.0, Some(v));
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>1.0</text>",
        bx + 16.0,
        top + 8.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>0.0</text>",
        bx + 16.0,
        top + 200.0
    );
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

/// Polyline chart with linear axes; non-finite points break the line.
pub fn line_chart(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h, left, top) = (560.0, 320.0, 60.0, 30.0);
    let (pw, ph) = (w - left - 150.0, h - top - 45.0);
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = header(w, h);
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"18\" {FONT} font-size=\"13\">{}</text>",
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for (v, anchor_y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\" {FONT}>{v:.3}</text>", anchor_y + 4.0);
    }
    for (v, anchor_x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>{v:.3}</text>",
            anchor_x - 10.0,
            top + ph + 14.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>{}</text>",
        left + pw / 2.0 - 30.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{:.1}\" {FONT} transform=\"rotate(-90 12 {:.1})\">{}</text>",
        top + ph / 2.0 + 30.0,
        top + ph / 2.0 + 30.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let dash = if ser.dashed { " stroke-dasharray=\"5 3\"" } else { "" };
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, s: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(
                    s,
                    "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
                    run.join(" ")
                );
            }
            run.clear();
        };
        for &(x, y) in &ser.points {
            if x.is_finite() && y.is_finite() {
                run.push(format!("{:.2},{:.2}", px(x), py(y)));
            } else {
                flush(&mut run, &mut s);
            }
        }
        flush(&mut run, &mut s);
        let ly = top + 12.0 + i as f64 * 16.0;
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{colour}\" stroke-width=\"2\"{dash}/>",
            left + pw + 10.0,
            left + pw + 30.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>{}</text>",
            left + pw + 34.0,
            ly + 4.0,
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Two histograms on shared log-spaced bins drawn as overlaid bars.
pub fn histogram_pair(a: &Histogram, b: &Histogram, labels: (&str, &str), title: &str) -> String {
    let (w, h, left, top) = (520.0, 280.0, 50.0, 30.0);
    let (pw, ph) = (w - left - 130.0, h - top - 45.0);
    let bins = a.counts.len().max(1);
    let max = a.counts.iter().chain(&b.counts).copied().max().unwrap_or(1).max(1) as f64;
    let bw = pw / bins as f64;
    let mut s = header(w, h);
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"18\" {FONT} font-size=\"13\">{}</text>",
        escape(title)
    );
    for (hist, colour) in [(a, PALETTE[0]), (b, PALETTE[1])] {
        for (i, &c) in hist.counts.iter().enumerate() {
            let bh = c as f64 / max * ph;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{colour}\" fill-opacity=\"0.55\"/>",
                left + i as f64 * bw,
                top + ph - bh,
                bw
            );
        }
    }
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw:.1}\" height=\"{ph:.1}\" fill=\"none\" stroke=\"#444\"/>"
    );
    if let (Some(lo), Some(hi)) = (a.edges.first(), a.edges.last()) {
        let _ = writeln!(
            s,
            "<text x=\"{left}\" y=\"{:.1}\" {FONT}>{lo:.2e}</text>",
            top + ph + 14.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>{hi:.2e}</text>",
            left + pw - 40.0,
            top + ph + 14.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" {FONT}>Δt (log scale)</text>",
        left + pw / 2.0 - 30.0,
        h - 8.0
    );
    for (i, (label, colour)) in [(labels.0, PALETTE[0]), (labels.1, PALETTE[1])].iter().enumerate() {
        let ly = top + 12.0 + i as f64 * 16.0;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"10\" fill=\"{colour}\" fill-opacity=\"0.55\"/>",
            left + pw + 10.0,
            ly - 8.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" {FONT}>{}</text>",
            left + pw + 26.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
