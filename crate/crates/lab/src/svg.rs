//! Minimal deterministic SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    out: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(title: &str, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) -> Self {
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let mut c = Canvas { out: String::new(), x: widen(x), y: widen(y) };
        let _ = write!(
            c.out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            W / 2.0,
            escape(title)
        );
        let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
        let _ = writeln!(c.out, "<path d=\"M{x0},{y1} L{x0},{y0} L{x1},{y0}\" stroke=\"black\" fill=\"none\"/>");
        for i in 0..=4 {
            let v = c.y.0 + (c.y.1 - c.y.0) * i as f64 / 4.0;
            let py = c.py(v);
            let _ = writeln!(c.out, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", LEFT - 6.0, py + 4.0, tick(v));
            let _ = writeln!(c.out, "<path d=\"M{x0},{py:.1} L{x1},{py:.1}\" stroke=\"#ddd\"/>");
        }
        let _ = writeln!(c.out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 12.0, escape(x_label));
        let _ = writeln!(
            c.out,
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        c
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn legend(&mut self, names: &[String]) {
        for (i, n) in names.iter().enumerate() {
            let y = TOP + 4.0 + 16.0 * i as f64;
            let x = W - RIGHT - 150.0;
            let _ = writeln!(self.out, "<rect x=\"{x}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/>", color(i));
            let _ = writeln!(self.out, "<text x=\"{}\" y=\"{}\">{}</text>", x + 14.0, y + 9.0, escape(n));
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn empty(title: &str) -> String {
    let mut c = Canvas::new(title, (0.0, 1.0), (0.0, 1.0), "", "");
    let _ = writeln!(c.out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>", W / 2.0, H / 2.0);
    c.finish()
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| Some(acc.map_or((v, v), |(a, b): (f64, f64)| (a.min(v), b.max(v)))))
}

/// One polyline per named series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (Some(xb), Some(yb)) = (
        bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0))),
        bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1))),
    ) else {
        return empty(title);
    };
    let mut c = Canvas::new(title, xb, (yb.0.min(0.0), yb.1), x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.1},{:.1}", if j == 0 { "M" } else { "L" }, c.px(x), c.py(y)))
            .collect();
        let _ = writeln!(c.out, "<path d=\"{}\" stroke=\"{}\" fill=\"none\" stroke-width=\"1.5\"/>", d.join(" "), color(i));
    }
    let names: Vec<String> = series.iter().map(|s| s.0.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// Grouped bars: `groups[g] = (label, values per series)`, values in `[0, 1]`.
pub fn grouped_bars(title: &str, y_label: &str, series: &[String], groups: &[(String, Vec<f64>)]) -> String {
    if groups.is_empty() || series.is_empty() {
        return empty(title);
    }
    let mut c = Canvas::new(title, (0.0, groups.len() as f64), (0.0, 1.0), "", y_label);
    let slot = (W - LEFT - RIGHT) / groups.len() as f64;
    let bar = slot * 0.8 / series.len() as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64 + slot * 0.1;
        for (s, &v) in values.iter().enumerate() {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            let top = c.py(v);
            let _ = writeln!(
                c.out,
                "<rect x=\"{:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                x0 + bar * s as f64,
                bar * 0.95,
                H - BOTTOM - top,
                color(s)
            );
        }
        let _ = writeln!(
            c.out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + slot * 0.4,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    c.legend(series);
    c.finish()
}

/// Histogram of values in `[0, 1]` with `bins` equal-width bins per series.
pub fn histogram(title: &str, x_label: &str, series: &[(String, Vec<f64>)], bins: usize) -> String {
    if series.iter().all(|s| s.1.is_empty()) || bins == 0 {
        return empty(title);
    }
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|(_, vals)| {
            let mut h = vec![0usize; bins];
            for &v in vals.iter().filter(|v| v.is_finite()) {
                h[((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
            }
            h
        })
        .collect();
    let max = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut c = Canvas::new(title, (0.0, 1.0), (0.0, max), x_label, "count");
    let width = (W - LEFT - RIGHT) / bins as f64 / series.len() as f64;
    for (s, h) in counts.iter().enumerate() {
        for (b, &n) in h.iter().enumerate() {
            let x = c.px(b as f64 / bins as f64) + width * s as f64;
            let top = c.py(n as f64);
            let _ = writeln!(
                c.out,
                "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\" fill-opacity=\"0.8\"/>",
                width * 0.95,
                H - BOTTOM - top,
                color(s)
            );
        }
    }
    let names: Vec<String> = series.iter().map(|s| s.0.clone()).collect();
    c.legend(&names);
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_deterministic() {
        let series = vec![("a<b".to_string(), vec![(0.0, 1.0), (1.0, 0.5)])];
        let a = line_chart("t", "x", "y", &series);
        assert_eq!(a, line_chart("t", "x", "y", &series));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a&lt;b"));
        for svg in [
            line_chart("t", "x", "y", &[]),
            grouped_bars("t", "y", &[], &[]),
            histogram("t", "x", &[], 10),
            grouped_bars("t", "y", &["s".into()], &[("g".into(), vec![0.4])]),
            histogram("t", "x", &[("s".into(), vec![0.0, 0.5, 1.0])], 4),
        ] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }
}
