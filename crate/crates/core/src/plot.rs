//! Deterministic SVG charts for the CSV reports.
//!
//! Pure string assembly, fixed canvas, fixed palette, coordinates
//! rounded to two decimals: identical input data produces identical
//! bytes, which keeps plots inside the byte-exact rerun guarantee.

use crate::error::{Error, Result};
use crate::report::{EvalReport, PocRow, SeparationRow};
use std::path::{Path, PathBuf};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c",
];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Linear map from data range to pixel range, with the data range
/// padded and forced to include 0 so bars have a baseline.
struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>, include_zero: bool, px_lo: f64, px_hi: f64) -> Scale {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let pad = (hi - lo) * 0.05;
        Scale {
            lo: if include_zero && lo == 0.0 { 0.0 } else { lo - pad },
            hi: hi + pad,
            px_lo,
            px_hi,
        }
    }

    fn at(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        self.px_lo + t * (self.px_hi - self.px_lo)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<rect class=\"bg\" x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        esc(title)
    ));
    s
}

fn y_axis(s: &mut String, scale: &Scale) {
    s.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333333\"/>\n",
        l = fmt(MARGIN_L),
        t = fmt(MARGIN_T),
        b = fmt(HEIGHT - MARGIN_B)
    ));
    for i in 0..=4 {
        let v = scale.lo + (scale.hi - scale.lo) * i as f64 / 4.0;
        let y = scale.at(v);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#cccccc\"/>\n",
            fmt(MARGIN_L),
            fmt(WIDTH - MARGIN_R),
            y = fmt(y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            fmt(MARGIN_L - 6.0),
            fmt(y + 4.0),
            v
        ));
    }
}

fn legend(s: &mut String, labels: &[String]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN_T + 14.0 * i as f64;
        s.push_str(&format!(
            "<rect class=\"key\" x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            fmt(WIDTH - MARGIN_R - 130.0),
            fmt(y),
            PALETTE[i % PALETTE.len()]
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            fmt(WIDTH - MARGIN_R - 116.0),
            fmt(y + 9.0),
            esc(label)
        ));
    }
}

/// Grouped bar chart: `values[group][series]`.
pub fn grouped_bar_svg(
    title: &str,
    groups: &[String],
    series: &[String],
    values: &[Vec<f64>],
) -> Result<String> {
    if groups.is_empty() || series.is_empty() {
        return Err(Error::Input("bar chart needs groups and series".into()));
    }
    if values.len() != groups.len() || values.iter().any(|row| row.len() != series.len()) {
        return Err(Error::shape(
            "bar chart values",
            &[groups.len(), series.len()],
            &[values.len(), values.first().map_or(0, |r| r.len())],
        ));
    }
    for row in values {
        check_finite(row, "bar chart")?;
    }
    let scale = Scale::fit(
        values.iter().flatten().copied(),
        true,
        HEIGHT - MARGIN_B,
        MARGIN_T,
    );
    let mut s = svg_open(title);
    y_axis(&mut s, &scale);
    let baseline = scale.at(0.0);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let slot = plot_w / groups.len() as f64;
    let bar_w = slot * 0.8 / series.len() as f64;
    for (g, row) in values.iter().enumerate() {
        let x0 = MARGIN_L + slot * g as f64 + slot * 0.1;
        for (i, &v) in row.iter().enumerate() {
            let y = scale.at(v);
            let (top, h) = if y <= baseline {
                (y, baseline - y)
            } else {
                (baseline, y - baseline)
            };
            s.push_str(&format!(
                "<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                fmt(x0 + bar_w * i as f64),
                fmt(top),
                fmt(bar_w),
                fmt(h),
                PALETTE[i % PALETTE.len()]
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fmt(MARGIN_L + slot * (g as f64 + 0.5)),
            fmt(HEIGHT - MARGIN_B + 16.0),
            esc(&groups[g])
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#333333\"/>\n",
        fmt(MARGIN_L),
        fmt(WIDTH - MARGIN_R),
        y = fmt(baseline)
    ));
    legend(&mut s, series);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Multi-line chart. `band = Some((i, j))` shades the area between
/// curves i and j.
pub fn line_chart_svg(
    title: &str,
    xs: &[f64],
    curves: &[(String, Vec<f64>)],
    band: Option<(usize, usize)>,
) -> Result<String> {
    if xs.is_empty() || curves.is_empty() {
        return Err(Error::Input("line chart needs points and curves".into()));
    }
    check_finite(xs, "line chart x")?;
    for (name, ys) in curves {
        if ys.len() != xs.len() {
            return Err(Error::shape("line chart curve", &[xs.len()], &[ys.len()]));
        }
        check_finite(ys, name)?;
    }
    if let Some((i, j)) = band {
        if i >= curves.len() || j >= curves.len() {
            return Err(Error::Input(format!(
                "band ({i}, {j}) out of range for {} curves",
                curves.len()
            )));
        }
    }
    let x_scale = Scale::fit(xs.iter().copied(), false, MARGIN_L, WIDTH - MARGIN_R);
    let y_scale = Scale::fit(
        curves.iter().flat_map(|(_, ys)| ys.iter().copied()),
        false,
        HEIGHT - MARGIN_B,
        MARGIN_T,
    );
    let mut s = svg_open(title);
    y_axis(&mut s, &y_scale);
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#333333\"/>\n",
        fmt(MARGIN_L),
        fmt(WIDTH - MARGIN_R),
        y = fmt(HEIGHT - MARGIN_B)
    ));
    for &x in xs {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{x}</text>\n",
            fmt(x_scale.at(x)),
            fmt(HEIGHT - MARGIN_B + 16.0),
        ));
    }
    let point = |x: f64, y: f64| format!("{},{}", fmt(x_scale.at(x)), fmt(y_scale.at(y)));
    if let Some((i, j)) = band {
        let mut pts = Vec::with_capacity(xs.len() * 2);
        for (k, &x) in xs.iter().enumerate() {
            pts.push(point(x, curves[i].1[k]));
        }
        for (k, &x) in xs.iter().enumerate().rev() {
            pts.push(point(x, curves[j].1[k]));
        }
        s.push_str(&format!(
            "<polygon class=\"band\" points=\"{}\" fill=\"{}\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
            pts.join(" "),
            PALETTE[j % PALETTE.len()]
        ));
    }
    for (i, (_, ys)) in curves.iter().enumerate() {
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| point(x, y)).collect();
        s.push_str(&format!(
            "<polyline class=\"curve\" points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        ));
    }
    legend(&mut s, &curves.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    Ok(s)
}

fn ordered_unique(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

/// Write one SVG per populated report section. Returns the written
/// paths; an entirely empty input is a warning, not an error.
pub fn emit_plots(
    dir: &Path,
    report: &EvalReport,
    poc: &[PocRow],
    separation: &[SeparationRow],
) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() && report.mi_rows.is_empty() && poc.is_empty() && separation.is_empty()
    {
        log::warn!("emit_plots: nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let put = |name: &str, svg: String, written: &mut Vec<PathBuf>| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, svg)?;
        written.push(path);
        Ok(())
    };

    if !report.rows.is_empty() {
        let groups = ordered_unique(report.rows.iter().map(|r| r.defense.clone()));
        let series = ordered_unique(report.rows.iter().map(|r| r.attack.clone()));
        let mut values = vec![vec![0.0; series.len()]; groups.len()];
        for row in &report.rows {
            let g = groups.iter().position(|d| *d == row.defense).unwrap();
            let a = series.iter().position(|s| *s == row.attack).unwrap();
            values[g][a] = row.adversarial_acc;
        }
        let svg = grouped_bar_svg("adversarial accuracy (%)", &groups, &series, &values)?;
        put("eval_accuracy.svg", svg, &mut written)?;
    }
    if !report.mi_rows.is_empty() {
        let groups = ordered_unique(report.mi_rows.iter().map(|r| r.estimator.clone()));
        let series = ordered_unique(report.mi_rows.iter().map(|r| r.dataset.clone()));
        let mut values = vec![vec![0.0; series.len()]; groups.len()];
        for row in &report.mi_rows {
            let g = groups.iter().position(|d| *d == row.estimator).unwrap();
            let a = series.iter().position(|s| *s == row.dataset).unwrap();
            values[g][a] = row.offset_mean;
        }
        let svg = grouped_bar_svg("offset-normalized MI estimates", &groups, &series, &values)?;
        put("mi_summary.svg", svg, &mut written)?;
    }
    if !poc.is_empty() {
        let xs: Vec<f64> = poc.iter().map(|r| r.iterations as f64).collect();
        let curves = vec![
            ("natural".to_string(), poc.iter().map(|r| r.natural_mi).collect()),
            (
                "adversarial".to_string(),
                poc.iter().map(|r| r.adversarial_mi).collect(),
            ),
            ("cross".to_string(), poc.iter().map(|r| r.cross_mi).collect()),
        ];
        let svg = line_chart_svg(
            "MI estimates vs attack iterations",
            &xs,
            &curves,
            Some((1, 2)),
        )?;
        put("poc_curves.svg", svg, &mut written)?;
    }
    if !separation.is_empty() {
        let groups = ordered_unique(
            separation
                .iter()
                .map(|r| format!("{}/{}", r.objective, r.estimator)),
        );
        let series = vec!["natural".to_string(), "adversarial".to_string()];
        let mut values = vec![vec![0.0; 2]; groups.len()];
        for row in separation {
            let key = format!("{}/{}", row.objective, row.estimator);
            let g = groups.iter().position(|d| *d == key).unwrap();
            values[g][0] = row.natural_mean;
            values[g][1] = row.adversarial_mean;
        }
        let svg = grouped_bar_svg("estimator means by input kind", &groups, &series, &values)?;
        put("separation.svg", svg, &mut written)?;
    }
    Ok(written)
}
