//! Report artifacts: text/CSV files, PPM image dumps, and small
//! hand-rolled SVG plots. Everything here is byte-deterministic: the same
//! inputs always produce the same file contents.

use std::path::Path;

use crate::util::fsio::atomic_write;

use super::EvalError;

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a text artifact (CSV, SVG, manifest) atomically.
pub fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    atomic_write(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Writes an RGB float image as a binary PPM (P6). Values are clamped to
/// [0, 1] and quantized to 8 bits.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<(), EvalError> {
    if rgb.len() != width * height * 3 {
        return Err(EvalError::BadInput(format!(
            "ppm buffer holds {} values but {}x{} rgb needs {}",
            rgb.len(),
            width,
            height,
            width * height * 3
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.reserve(rgb.len());
    for &v in rgb {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    atomic_write(path, &bytes).map_err(|e| io_err(path, e))
}

/// One curve of an SVG line plot: points with optional symmetric error bars.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    /// (x, y, half-width of the error bar); pass 0.0 for no bar.
    pub points: Vec<(f64, f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn fmt(v: f64) -> String {
    // Two decimals are plenty for pixel coordinates and keep files stable.
    format!("{v:.2}")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_ranges(xs: &[f64], ys: &[f64]) -> Frame {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        for &x in xs {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for &y in ys {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() || !x1.is_finite() {
            x0 = 0.0;
            x1 = 1.0;
        }
        if !y0.is_finite() || !y1.is_finite() {
            y0 = 0.0;
            y1 = 1.0;
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn svg_head(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn svg_axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        fmt(MARGIN),
        fmt(MARGIN),
        fmt(W - 2.0 * MARGIN),
        fmt(H - 2.0 * MARGIN)
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x0 + t * (frame.x1 - frame.x0);
        let yv = frame.y0 + t * (frame.y1 - frame.y0);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(frame.px(xv)),
            fmt(H - MARGIN + 18.0),
            trim_tick(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN - 6.0),
            fmt(frame.py(yv) + 4.0),
            trim_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        fmt(W / 2.0),
        fmt(H - 12.0),
        xml_escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        fmt(H / 2.0),
        fmt(H / 2.0),
        xml_escape(y_label)
    ));
    out
}

fn trim_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders series as polylines with optional vertical error bars and a
/// legend. The output string is deterministic.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[PlotSeries]) -> String {
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]))
        .collect();
    let frame = Frame::from_ranges(&xs, &ys);
    let mut out = svg_head(title);
    out.push_str(&svg_axes(&frame, x_label, y_label));
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{},{}", fmt(frame.px(p.0)), fmt(frame.py(p.1))))
            .collect();
        if pts.len() > 1 {
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        }
        for p in &s.points {
            let cx = frame.px(p.0);
            out.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                fmt(cx),
                fmt(frame.py(p.1))
            ));
            if p.2 > 0.0 {
                out.push_str(&format!(
                    "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"{color}\"/>\n",
                    fmt(frame.py(p.1 - p.2)),
                    fmt(frame.py(p.1 + p.2)),
                    x = fmt(cx)
                ));
            }
        }
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(W - MARGIN - 150.0),
            fmt(MARGIN + 10.0 + k as f64 * 18.0),
            fmt(W - MARGIN - 132.0),
            fmt(MARGIN + 20.0 + k as f64 * 18.0),
            xml_escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Renders one scatter cloud, e.g. validation accuracy against test
/// accuracy across a hyperparameter grid.
pub fn svg_scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let frame = Frame::from_ranges(&xs, &ys);
    let mut out = svg_head(title);
    out.push_str(&svg_axes(&frame, x_label, y_label));
    for p in points {
        out.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            fmt(frame.px(p.0)),
            fmt(frame.py(p.1)),
            PALETTE[0]
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_has_the_right_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let rgb = vec![0.5f32; 2 * 3 * 3];
        write_ppm(&path, 2, 3, &rgb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n2 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 2 * 3 * 3);
        assert_eq!(bytes[header.len()], 128);

        assert!(matches!(
            write_ppm(&path, 2, 2, &rgb),
            Err(EvalError::BadInput(_))
        ));
    }

    #[test]
    fn ppm_clamps_out_of_range_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clamp.ppm");
        write_ppm(&path, 1, 1, &[-1.0, 2.0, 1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        assert_eq!(&bytes[n - 3..], &[0, 255, 255]);
    }

    #[test]
    fn line_plot_contains_every_series_and_is_deterministic() {
        let series = vec![
            PlotSeries {
                label: "a".into(),
                points: vec![(0.0, 1.0, 0.1), (1.0, 2.0, 0.2), (2.0, 1.5, 0.0)],
            },
            PlotSeries {
                label: "b".into(),
                points: vec![(0.0, 0.5, 0.0), (2.0, 0.8, 0.05)],
            },
        ];
        let svg = svg_line_plot("title", "x", "y", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 5);
        // Three error bars have positive half-width.
        assert_eq!(svg.matches("<line x1").count(), 3);
        assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
        assert_eq!(svg, svg_line_plot("title", "x", "y", &series));
    }

    #[test]
    fn scatter_plots_every_point_and_escapes_labels() {
        let pts = vec![(0.1, 0.2), (0.3, 0.4), (0.5, 0.1)];
        let svg = svg_scatter("a<b", "x&y", "z", &pts);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("a&lt;b") && svg.contains("x&amp;y"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn degenerate_ranges_still_render() {
        let svg = svg_scatter("flat", "x", "y", &[(1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(svg.matches("<circle").count(), 2);
        let empty = svg_line_plot("none", "x", "y", &[]);
        assert!(empty.contains("</svg>"));
    }
}
