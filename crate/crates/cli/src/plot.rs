//! Minimal standalone SVG charts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    /// Half-width of an error bar, if any.
    pub err: Option<f64>,
}

pub enum Series {
    Line(Vec<Point>),
    Markers(Vec<Point>),
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed reference lines.
    pub h_lines: Vec<f64>,
    pub v_lines: Vec<f64>,
    /// Tick labels for the x axis, overriding numeric ticks.
    pub x_ticks: Option<Vec<(f64, String)>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= n as f64)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            h_lines: Vec::new(),
            v_lines: Vec::new(),
            x_ticks: None,
        }
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            let (Series::Line(pts) | Series::Markers(pts)) = s;
            for p in pts {
                xs.push(p.x);
                ys.push(p.y - p.err.unwrap_or(0.0));
                ys.push(p.y + p.err.unwrap_or(0.0));
            }
        }
        xs.extend(&self.v_lines);
        ys.extend(&self.h_lines);
        let finite = |v: &[f64]| {
            let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
            if f.is_empty() {
                None
            } else {
                Some((f.iter().copied().fold(f64::INFINITY, f64::min), f.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
            }
        };
        let (x0, x1) = finite(&xs)?;
        let (y0, y1) = finite(&ys)?;
        let pad = |a: f64, b: f64| {
            let d = if b > a { (b - a) * 0.05 } else { a.abs().max(1.0) * 0.05 };
            (a - d, b + d)
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Some((x0, x1, y0, y1))
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let Some((x0, x1, y0, y1)) = self.bounds() else {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
            s.push_str("</svg>\n");
            return s;
        };
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
        let py = |y: f64| TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
        );
        for t in nice_ticks(y0, y1, 6) {
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT + plot_w,
                py(t),
                py(t),
                LEFT - 6.0,
                py(t) + 4.0,
                fmt_tick(t)
            );
        }
        let x_ticks: Vec<(f64, String)> = match &self.x_ticks {
            Some(t) => t.clone(),
            None => nice_ticks(x0, x1, 8).into_iter().map(|t| (t, fmt_tick(t))).collect(),
        };
        for (t, label) in x_ticks {
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                px(t),
                px(t),
                TOP + plot_h,
                TOP + plot_h + 5.0,
                px(t),
                TOP + plot_h + 18.0,
                escape(&label)
            );
        }
        for &h in &self.h_lines {
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
                LEFT + plot_w,
                py(h),
                py(h)
            );
        }
        for &v in &self.v_lines {
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" x2="{:.2}" y1="{TOP}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
                px(v),
                px(v),
                TOP + plot_h
            );
        }
        let colors = ["#1f5f9f", "#c0392b", "#27864a", "#8e44ad"];
        for (i, series) in self.series.iter().enumerate() {
            let color = colors[i % colors.len()];
            let (Series::Line(pts) | Series::Markers(pts)) = series;
            for p in pts {
                if let Some(e) = p.err {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="{color}"/>"#,
                        px(p.x),
                        px(p.x),
                        py(p.y - e),
                        py(p.y + e)
                    );
                }
            }
            match series {
                Series::Line(pts) => {
                    let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.x), py(p.y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                        path.join(" ")
                    );
                }
                Series::Markers(pts) => {
                    for p in pts {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, px(p.x), py(p.y));
                    }
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }
}
