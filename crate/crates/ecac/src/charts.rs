//! Simple SVG line charts over metrics files: evaluation return, mean
//! consecutive-policy KL, and the normalized Q error, each against
//! environment steps. Multiple metrics files overlay as labeled series.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::{read_metrics, MetricsRecord, RowKind};

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e5 || a < 1e-3 {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

fn render_chart(title: &str, y_label: &str, x_max: f64, series: &[Series], path: &Path) -> Result<()> {
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(_, y) in &s.points {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |x: f64| MARGIN_LEFT + (x / x_max.max(1.0)) * plot_w;
    let y_of = |y: f64| MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    ));

    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_BOTTOM,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_BOTTOM
    ));

    // ticks
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let xv = frac * x_max;
        let x = x_of(xv);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_BOTTOM,
            HEIGHT - MARGIN_BOTTOM + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 18.0,
            fmt_tick(xv)
        ));
        let yv = y_min + frac * (y_max - y_min);
        let y = y_of(yv);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_LEFT}\" y2=\"{y}\" stroke=\"black\"/>\n",
            MARGIN_LEFT - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            fmt_tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">environment steps</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        if !s.points.is_empty() {
            let coords: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", x_of(x), y_of(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                coords.join(" ")
            ));
        }
        let ly = MARGIN_TOP + 8.0 + i as f64 * 16.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            MARGIN_LEFT + 10.0,
            MARGIN_LEFT + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            MARGIN_LEFT + 40.0,
            ly + 4.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn series_label(path: &Path) -> String {
    // prefer the parent directory name when the file is a generic
    // metrics.csv, so overlaid runs stay distinguishable
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    if stem == "metrics" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

fn extract(records: &[MetricsRecord], pick: impl Fn(&MetricsRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| pick(r).map(|v| (r.step as f64, v)))
        .collect()
}

/// Render the three standard charts from one or more metrics files into
/// `out_dir`. Returns the paths written. The x-axis spans `[0, total steps]`
/// (the largest step seen across inputs); probe gaps are skipped, not
/// zero-filled.
pub fn render_charts(metrics_files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut returns = Vec::new();
    let mut kls = Vec::new();
    let mut eqs = Vec::new();
    let mut x_max: f64 = 0.0;
    for path in metrics_files {
        let records = read_metrics(path)?;
        let label = series_label(path);
        if let Some(last) = records.last() {
            x_max = x_max.max(last.step as f64);
        }
        returns.push(Series {
            label: label.clone(),
            points: extract(&records, |r| {
                (r.row == RowKind::Eval).then_some(r.eval_mean).flatten()
            }),
        });
        kls.push(Series {
            label: label.clone(),
            points: extract(&records, |r| {
                (r.row == RowKind::Train).then_some(r.kl).flatten()
            }),
        });
        eqs.push(Series {
            label,
            points: extract(&records, |r| {
                (r.row == RowKind::Probe).then_some(r.eq_median).flatten()
            }),
        });
    }

    let out = vec![
        out_dir.join("return_vs_steps.svg"),
        out_dir.join("kl_vs_steps.svg"),
        out_dir.join("eq_vs_steps.svg"),
    ];
    render_chart("evaluation return", "mean return", x_max, &returns, &out[0])?;
    render_chart("consecutive-policy KL", "mean KL (nats)", x_max, &kls, &out[1])?;
    render_chart("normalized Q error", "median e_Q", x_max, &eqs, &out[2])?;
    Ok(out)
}
