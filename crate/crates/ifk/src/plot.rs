//! Self-contained SVG line plot of an experiment series (log-scale y).

use std::fmt::Write as _;
use std::path::Path;

use crate::bench::{ExperimentResult, Series};
use crate::error::{IfkError, Result};
use crate::io::write_atomic;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
const DASHES: [&str; 5] = ["", "", "6,3", "", "6,3"];

/// Maps `(k, value)` to SVG coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Axes {
    pub k_min: f64,
    pub k_max: f64,
    pub log_min: f64,
    pub log_max: f64,
}

impl Axes {
    pub fn fit(series: &Series) -> Option<Self> {
        let vals: Vec<f64> = series
            .columns()
            .iter()
            .flat_map(|(_, c)| c.iter().copied())
            .filter(|v| v.is_finite() && *v > 0.0)
            .collect();
        if vals.is_empty() || series.is_empty() {
            return None;
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
        let mut hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
        if hi <= lo {
            hi = lo + 1.0;
        }
        let k_min = series.k[0] as f64;
        let mut k_max = *series.k.last().unwrap() as f64;
        if k_max <= k_min {
            k_max = k_min + 1.0;
        }
        Some(Self {
            k_min,
            k_max,
            log_min: lo,
            log_max: hi,
        })
    }

    pub fn x(&self, k: f64) -> f64 {
        LEFT + (k - self.k_min) / (self.k_max - self.k_min) * (WIDTH - LEFT - RIGHT)
    }

    pub fn y(&self, v: f64) -> f64 {
        TOP + (self.log_max - v.log10()) / (self.log_max - self.log_min) * (HEIGHT - TOP - BOTTOM)
    }
}

pub fn render_svg(series: &Series, title: &str) -> Result<String> {
    let ax = Axes::fit(series).ok_or_else(|| IfkError::config("series", "nothing positive to plot"))?;
    let mut s = String::new();
    let w = |s: &mut String, t: String| s.push_str(&t);
    w(
        &mut s,
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ),
    );
    w(&mut s, format!("<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"));
    w(&mut s, format!("<text x=\"{}\" y=\"18\" text-anchor=\"middle\">{}</text>\n", WIDTH / 2.0, escape(title)));
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (TOP, HEIGHT - BOTTOM);
    w(
        &mut s,
        format!("<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", x1 - x0, y1 - y0),
    );

    // decade grid
    let mut d = ax.log_min as i32;
    while d as f64 <= ax.log_max {
        let y = ax.y(10f64.powi(d));
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y:.2}\" x2=\"{x1}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">1e{d}</text>", x0 - 6.0, y + 4.0);
        d += 1;
    }
    let ticks = 5;
    for i in 0..=ticks {
        let k = ax.k_min + (ax.k_max - ax.k_min) * i as f64 / ticks as f64;
        let x = ax.x(k);
        let _ = writeln!(s, "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", y1 + 18.0, k.round());
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">k</text>", (x0 + x1) / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">error (log scale)</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    for (i, (name, col)) in series.columns().iter().enumerate() {
        let pts: Vec<String> = series
            .k
            .iter()
            .zip(col.iter())
            .filter(|(_, v)| v.is_finite() && **v > 0.0)
            .map(|(k, v)| format!("{:.2},{:.2}", ax.x(*k as f64), ax.y(*v)))
            .collect();
        let dash = if DASHES[i].is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", DASHES[i])
        };
        let _ = writeln!(
            s,
            "<polyline data-series=\"{name}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
            COLORS[i],
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{}\" stroke-width=\"1.5\"{dash}/>",
            lx + 25.0,
            COLORS[i]
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{name}</text>", lx + 30.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn emit_plot(result: &ExperimentResult, path: &Path) -> Result<()> {
    let title = if result.config.label.is_empty() {
        result.config.model_label()
    } else {
        result.config.label.clone()
    };
    write_atomic(path, render_svg(&result.series, &title)?.as_bytes())
}
