//! Minimal static SVG emitters for the report plots.

use anyhow::Result;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 5] = ["#3465a4", "#cc0000", "#4e9a06", "#f57900", "#75507b"];

/// Vertical bar chart of labeled values in `[0, 1]`.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64], path: &Path) -> Result<()> {
    let mut s = header(title);
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let n = labels.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = H - MARGIN - v * plot_h;
        writeln!(
            s,
            "<line x1=\"{MARGIN}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#dddddd\"/>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.1}</text>",
            W - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        )?;
    }
    for (i, (label, &v)) in labels.iter().zip(values.iter()).enumerate() {
        let x = MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        let h = v.clamp(0.0, 1.0) * plot_h;
        let y = H - MARGIN - h;
        writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>",
            PALETTE[i % PALETTE.len()],
            x + bar_w / 2.0,
            H - MARGIN + 16.0,
            xml_escape(label),
            x + bar_w / 2.0,
            y - 4.0
        )?;
    }
    writeln!(s, "</svg>")?;
    std::fs::write(path, s)?;
    Ok(())
}

/// Line chart of one or more named series.
pub fn line_chart(
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
    path: &Path,
) -> Result<()> {
    let mut s = header(title);
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (0.0f64, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * plot_h;

    for tick in 0..=5 {
        let v = y0 + (y1 - y0) * tick as f64 / 5.0;
        let y = py(v);
        writeln!(
            s,
            "<line x1=\"{MARGIN}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            W - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        )?;
    }
    for tick in 0..=5 {
        let v = x0 + (x1 - x0) * tick as f64 / 5.0;
        let x = px(v);
        writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{v:.1}</text>",
            H - MARGIN + 16.0
        )?;
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        xml_escape(x_label)
    )?;
    writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    )?;

    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut d = String::new();
        for (i, &(x, y)) in pts.iter().enumerate() {
            write!(d, "{}{:.1},{:.1} ", if i == 0 { "M" } else { "L" }, px(x), py(y))?;
        }
        writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>")?;
        for &(x, y) in pts {
            writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                px(x),
                py(y)
            )?;
        }
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            W - MARGIN - 120.0,
            MARGIN + 16.0 * si as f64,
            xml_escape(name)
        )?;
    }
    writeln!(s, "</svg>")?;
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_produce_valid_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let bar = dir.path().join("bar.svg");
        bar_chart(
            "ap per class",
            &["1".into(), "2".into(), "3".into()],
            &[0.9, 0.5, 0.7],
            &bar,
        )
        .unwrap();
        let text = std::fs::read_to_string(&bar).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));

        let line = dir.path().join("line.svg");
        line_chart(
            "sweep",
            &[("uniform".into(), vec![(2.0, 0.4), (6.0, 0.6), (14.0, 0.7)])],
            "support frames",
            "mAP@0.5",
            &line,
        )
        .unwrap();
        assert!(std::fs::read_to_string(&line).unwrap().contains("uniform"));
    }
}
