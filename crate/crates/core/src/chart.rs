//! Deterministic SVG radar charts and CSV tables rendered from report files.
//! Identical inputs always produce identical bytes.

use crate::report::{ConfidenceReport, ConsistencyReport, DistanceReport, JudgeReport};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChartError {
    #[error("radar needs at least 3 axes, got {0}")]
    TooFewAxes(usize),
    #[error("series '{name}' has {got} values for {want} axes")]
    SeriesLengthMismatch {
        name: String,
        got: usize,
        want: usize,
    },
    #[error("series '{name}' holds a negative or non-finite value")]
    BadValue { name: String },
}

/// A radar chart over group-pair axes. Values are plotted as given; the
/// baseline ring marks the reference level (1.0 for ratio-normalized
/// reports).
#[derive(Debug, Clone)]
pub struct RadarSpec {
    pub title: String,
    pub axes: Vec<String>,
    pub series: Vec<(String, Vec<f64>)>,
    pub baseline_ring: f64,
}

const PALETTE: [&str; 6] = [
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2",
];

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 640.0;
const CX: f64 = 360.0;
const CY: f64 = 330.0;
const RADIUS: f64 = 230.0;

fn polar(cx: f64, cy: f64, r: f64, axis: usize, n: usize) -> (f64, f64) {
    let angle = -std::f64::consts::FRAC_PI_2
        + (axis as f64) * 2.0 * std::f64::consts::PI / (n as f64);
    (cx + r * angle.cos(), cy + r * angle.sin())
}

fn polygon_points(values: &[f64], scale: f64) -> String {
    let n = values.len();
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (x, y) = polar(CX, CY, v * scale, i, n);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn radar_svg(spec: &RadarSpec) -> Result<String, ChartError> {
    let n = spec.axes.len();
    if n < 3 {
        return Err(ChartError::TooFewAxes(n));
    }
    for (name, values) in &spec.series {
        if values.len() != n {
            return Err(ChartError::SeriesLengthMismatch {
                name: name.clone(),
                got: values.len(),
                want: n,
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ChartError::BadValue { name: name.clone() });
        }
    }

    let mut vmax = spec.baseline_ring.max(1e-9);
    for (_, values) in &spec.series {
        for v in values {
            vmax = vmax.max(*v);
        }
    }
    let scale = RADIUS / (vmax * 1.1);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{CX:.2}" y="32" text-anchor="middle" font-family="sans-serif" font-size="18">{}</text>"#,
        escape(&spec.title)
    );

    // grid rings at quarter fractions of the plotted maximum
    for step in 1..=4 {
        let fraction = step as f64 / 4.0;
        let ring: Vec<f64> = vec![vmax * 1.1 * fraction; n];
        let _ = writeln!(
            svg,
            r##"<polygon points="{}" fill="none" stroke="#dddddd" stroke-width="1"/>"##,
            polygon_points(&ring, scale)
        );
    }
    // spokes and axis labels
    for (i, axis) in spec.axes.iter().enumerate() {
        let (x, y) = polar(CX, CY, RADIUS, i, n);
        let _ = writeln!(
            svg,
            r##"<line x1="{CX:.2}" y1="{CY:.2}" x2="{x:.2}" y2="{y:.2}" stroke="#cccccc" stroke-width="1"/>"##
        );
        let (lx, ly) = polar(CX, CY, RADIUS + 18.0, i, n);
        let anchor = if lx < CX - 1.0 {
            "end"
        } else if lx > CX + 1.0 {
            "start"
        } else {
            "middle"
        };
        let _ = writeln!(
            svg,
            r##"<text x="{lx:.2}" y="{ly:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="12" fill="#333333">{}</text>"##,
            escape(axis)
        );
    }
    // baseline ring
    let baseline: Vec<f64> = vec![spec.baseline_ring; n];
    let _ = writeln!(
        svg,
        r##"<polygon points="{}" fill="none" stroke="#888888" stroke-width="1.5" stroke-dasharray="6 4"/>"##,
        polygon_points(&baseline, scale)
    );
    let (bx, by) = polar(CX, CY, spec.baseline_ring * scale, 0, n);
    let _ = writeln!(
        svg,
        r##"<text x="{bx:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11" fill="#888888">baseline {:.2}</text>"##,
        by - 6.0,
        spec.baseline_ring
    );

    // series polygons and legend
    for (idx, (name, values)) in spec.series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.12" stroke="{color}" stroke-width="2"/>"#,
            polygon_points(values, scale)
        );
        let ly = 56.0 + idx as f64 * 18.0;
        let _ = writeln!(
            svg,
            r#"<rect x="16" y="{:.2}" width="12" height="12" fill="{color}"/>"#,
            ly - 10.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="34" y="{ly:.2}" font-family="sans-serif" font-size="12" fill="#333333">{}</text>"##,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Radar over a distance report's group pairs, ratio-normalized so the
/// baseline ring sits at 1.0.
pub fn distance_radar(report: &DistanceReport) -> Result<String, ChartError> {
    let axes: Vec<String> = report
        .pairs
        .iter()
        .map(|p| format!("{} vs {}", p.group_a, p.group_b))
        .collect();
    let values: Vec<f64> = report
        .pairs
        .iter()
        .map(|p| p.ratio.unwrap_or(0.0))
        .collect();
    radar_svg(&RadarSpec {
        title: format!("{} by {} (ratio to baseline)", report.scenario, report.attribute),
        axes,
        series: vec![("distance / baseline".to_string(), values)],
        baseline_ring: 1.0,
    })
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

/// `dimension,llm_judge,human` rows.
pub fn judge_table_csv(report: &JudgeReport) -> String {
    let mut out = String::from("dimension,llm_judge,human\n");
    for (dimension, mean) in &report.corpus_means {
        let human = report.human_means.get(dimension).copied();
        let _ = writeln!(
            out,
            "{},{:.6},{}",
            dimension,
            mean,
            fmt_opt(human)
        );
    }
    out
}

/// `dimension,icc3k,pearson,shared_items` rows.
pub fn alignment_table_csv(report: &JudgeReport) -> String {
    let mut out = String::from("dimension,icc3k,pearson,shared_items\n");
    for row in &report.alignment {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.dimension,
            fmt_opt(row.icc3k),
            fmt_opt(row.pearson),
            row.shared_items
        );
    }
    out
}

/// `label,measured,baseline,ratio` rows.
pub fn consistency_table_csv(label: &str, report: &ConsistencyReport) -> String {
    let mut out = String::from("label,measured,baseline,ratio\n");
    let _ = writeln!(
        out,
        "{},{:.6},{:.6},{}",
        csv_escape(label),
        report.mean_emd,
        report.baseline_emd,
        fmt_opt(report.ratio)
    );
    out
}

/// `scenario,mean_confidence,responses` rows for the confidence bars.
pub fn confidence_table_csv(report: &ConfidenceReport) -> String {
    let mut out = String::from("scenario,mean_confidence,responses\n");
    for (scenario, value) in &report.mean_confidence {
        let count = report.response_counts.get(scenario).copied().unwrap_or(0);
        let _ = writeln!(out, "{scenario},{value:.6},{count}");
    }
    out
}

/// `attribute,scenario,group_a,group_b,distance,baseline,ratio` rows.
pub fn distance_table_csv(reports: &[DistanceReport]) -> String {
    let mut out = String::from("attribute,scenario,group_a,group_b,distance,baseline,ratio\n");
    for report in reports {
        for pair in &report.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{}",
                csv_escape(&report.attribute),
                report.scenario,
                csv_escape(&pair.group_a),
                csv_escape(&pair.group_b),
                pair.distance,
                report.baseline,
                fmt_opt(pair.ratio)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(axes: usize) -> RadarSpec {
        RadarSpec {
            title: "test".into(),
            axes: (0..axes).map(|i| format!("a{i}")).collect(),
            series: vec![("s".into(), (0..axes).map(|i| 0.5 + i as f64 * 0.1).collect())],
            baseline_ring: 1.0,
        }
    }

    #[test]
    fn radar_requires_three_axes() {
        assert!(matches!(radar_svg(&spec(2)), Err(ChartError::TooFewAxes(2))));
        let svg = radar_svg(&spec(3)).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polygon").count(), 4 + 1 + 1);
    }

    #[test]
    fn radar_bytes_are_deterministic() {
        assert_eq!(radar_svg(&spec(5)).unwrap(), radar_svg(&spec(5)).unwrap());
    }

    #[test]
    fn radar_rejects_mismatched_series() {
        let mut s = spec(4);
        s.series[0].1.pop();
        assert!(matches!(
            radar_svg(&s),
            Err(ChartError::SeriesLengthMismatch { .. })
        ));
    }
}
