//! Merging per-subject metrics and rendering the summary table and plots.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::{Method, MetricsReport, TrajectorySeries};

/// Acquisition interval between frames.
pub const FRAME_PERIOD_MS: usize = 320;

/// Pools reports from different held-out subjects.
pub fn merge_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to merge".into()))?;
    let mut merged = first.clone();
    for r in &reports[1..] {
        if r.digest != merged.digest {
            return Err(Error::Config(format!(
                "cannot merge reports with config digests {} and {}",
                merged.digest, r.digest
            )));
        }
        if (r.n_inputs, r.horizon) != (merged.n_inputs, merged.horizon) || r.pixel_spacing_mm != merged.pixel_spacing_mm {
            return Err(Error::Data("reports disagree on inputs, horizon or pixel spacing".into()));
        }
        if let Some(s) = r.held_out.iter().find(|s| merged.held_out.contains(s)) {
            return Err(Error::Data(format!("subject {s} appears in more than one report")));
        }
        let methods: Vec<Method> = merged.methods.iter().map(|m| m.method).collect();
        if r.methods.iter().map(|m| m.method).collect::<Vec<_>>() != methods {
            return Err(Error::Data("reports cover different methods".into()));
        }
        for (acc, m) in merged.methods.iter_mut().zip(&r.methods) {
            for (a, c) in acc.cells.iter_mut().zip(&m.cells) {
                a.error.merge(&c.error);
                a.ncc.merge(&c.ncc);
            }
            acc.rough_inversions += m.rough_inversions;
            acc.clamped_tracks += m.clamped_tracks;
            acc.held_components += m.held_components;
        }
        merged.windows += r.windows;
        merged.held_out.extend(&r.held_out);
        merged.trajectories.extend(r.trajectories.iter().cloned());
    }
    merged.held_out.sort_unstable();
    Ok(merged)
}

pub fn horizon_label(t: usize) -> String {
    format!("t={t} ({} ms)", t * FRAME_PERIOD_MS)
}

/// Rows are methods, columns horizons; cells are `mean ± std` in mm.
pub fn table_csv(report: &MetricsReport) -> String {
    let mut s = format!("# digest={}\nmethod", report.digest);
    for t in 1..=report.horizon {
        let _ = write!(s, ",{}", horizon_label(t));
    }
    s.push('\n');
    for m in &report.methods {
        s.push_str(m.method.name());
        for c in &m.cells {
            let _ = write!(s, ",{:.2} ± {:.2}", c.error.mean(), c.error.std());
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f", "#9467bd", "#ff7f0e"];

/// One named polyline for [`line_plot_svg`].
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plain line chart with axes, ticks and a legend.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#,
            left - 6.0,
            py(fy) + 4.0
        );
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(fx),
            h - bottom + 16.0,
            if (fx - fx.round()).abs() < 1e-9 { format!("{}", fx.round()) } else { format!("{fx:.2}") }
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let dash = if ser.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            coords.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn per_horizon(report: &MetricsReport, value: impl Fn(&crate::evaluation::Cell) -> f64) -> Vec<Series> {
    report
        .methods
        .iter()
        .map(|m| Series {
            name: m.method.name().to_string(),
            points: m.cells.iter().map(|c| (c.t as f64, value(c))).collect(),
            dashed: matches!(m.method, Method::Oracle | Method::QuantizedOracle),
        })
        .collect()
}

pub fn error_plot_svg(report: &MetricsReport) -> String {
    line_plot_svg(
        "Vessel tracking error",
        "predicted time step t",
        "mean error (mm)",
        &per_horizon(report, |c| c.error.mean()),
    )
}

pub fn ncc_plot_svg(report: &MetricsReport) -> String {
    line_plot_svg(
        "NCC of warped predictions",
        "predicted time step t",
        "mean NCC",
        &per_horizon(report, |c| c.ncc.mean()),
    )
}

/// Superior-inferior position of the first tracked vessel: ground truth
/// and each method's predictions at horizons 1 and T.
pub fn trajectory_plot_svg(report: &MetricsReport) -> Option<String> {
    let first = report.trajectories.first()?;
    let key = (first.subject, first.sequence, first.vessel);
    let chosen: Vec<&TrajectorySeries> = report
        .trajectories
        .iter()
        .filter(|s| (s.subject, s.sequence, s.vessel) == key)
        .collect();
    let mm = report.pixel_spacing_mm;
    let mut series = Vec::new();
    let truth = chosen.iter().find(|s| s.horizon == 1)?;
    series.push(Series {
        name: "ground truth".into(),
        points: truth.frames.iter().zip(&truth.truth).map(|(&f, p)| (f as f64, p[1] * mm)).collect(),
        dashed: false,
    });
    for s in chosen.iter().filter(|s| !matches!(s.method, Method::Oracle)) {
        series.push(Series {
            name: format!("{} t={}", s.method.name(), s.horizon),
            points: s.frames.iter().zip(&s.predicted).map(|(&f, p)| (f as f64, p[1] * mm)).collect(),
            dashed: s.horizon > 1,
        });
    }
    Some(line_plot_svg(
        &format!("Subject {} sequence {} vessel {}", key.0, key.1, key.2),
        "frame",
        "superior-inferior position (mm)",
        &series,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{Cell, MethodMetrics};
    use crate::warp::Stats;

    fn stats(values: &[f64]) -> Stats {
        let mut s = Stats::default();
        values.iter().for_each(|&v| s.push(v));
        s
    }

    fn report(held: usize, digest: &str, errs: &[f64]) -> MetricsReport {
        MetricsReport {
            digest: digest.into(),
            held_out: vec![held],
            n_inputs: 5,
            horizon: 2,
            windows: 1,
            pixel_spacing_mm: 1.7,
            methods: vec![MethodMetrics {
                method: Method::Proposed,
                cells: (1..=2)
                    .map(|t| Cell {
                        t,
                        error: stats(errs),
                        ncc: stats(&[0.9]),
                    })
                    .collect(),
                rough_inversions: 1,
                clamped_tracks: 0,
                held_components: 0,
            }],
            trajectories: vec![TrajectorySeries {
                method: Method::Proposed,
                subject: held,
                sequence: 0,
                vessel: 0,
                horizon: 1,
                frames: vec![5, 6],
                predicted: vec![[1.0, 2.0], [1.0, 3.0]],
                truth: vec![[1.0, 2.5], [1.0, 3.5]],
            }],
        }
    }

    #[test]
    fn merge_pools_statistics() {
        let m = merge_reports(&[report(1, "d", &[1.0, 2.0]), report(0, "d", &[3.0])]).unwrap();
        assert_eq!(m.held_out, vec![0, 1]);
        assert_eq!(m.windows, 2);
        let cell = &m.methods[0].cells[0];
        assert_eq!(cell.error, stats(&[1.0, 2.0, 3.0]));
        assert_eq!(m.methods[0].rough_inversions, 2);
        assert_eq!(m.trajectories.len(), 2);
    }

    #[test]
    fn merge_refuses_mismatches() {
        assert!(matches!(
            merge_reports(&[report(0, "a", &[1.0]), report(1, "b", &[1.0])]),
            Err(Error::Config(_))
        ));
        assert!(merge_reports(&[report(0, "a", &[1.0]), report(0, "a", &[1.0])]).is_err());
        assert!(merge_reports(&[]).is_err());
    }

    #[test]
    fn table_has_millisecond_columns() {
        let mut r = report(0, "d", &[1.0, 3.0]);
        r.horizon = 5;
        for m in &mut r.methods {
            m.cells = (1..=5)
                .map(|t| Cell {
                    t,
                    error: stats(&[1.0, 3.0]),
                    ncc: stats(&[0.9]),
                })
                .collect();
        }
        let csv = table_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# digest=d");
        assert_eq!(
            lines[1],
            "method,t=1 (320 ms),t=2 (640 ms),t=3 (960 ms),t=4 (1280 ms),t=5 (1600 ms)"
        );
        assert_eq!(lines[2], "proposed,2.00 ± 1.00,2.00 ± 1.00,2.00 ± 1.00,2.00 ± 1.00,2.00 ± 1.00");
    }

    #[test]
    fn plots_are_deterministic_svg() {
        let r = report(0, "d", &[1.0]);
        let a = error_plot_svg(&r);
        assert_eq!(a, error_plot_svg(&r));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 1);
        assert!(ncc_plot_svg(&r).contains("proposed"));
        let traj = trajectory_plot_svg(&r).unwrap();
        assert_eq!(traj.matches("<polyline").count(), 2);
        let mut empty = r.clone();
        empty.trajectories.clear();
        assert!(trajectory_plot_svg(&empty).is_none());
    }

    #[test]
    fn labels_are_escaped() {
        let svg = line_plot_svg("a<b", "x", "y", &[]);
        assert!(svg.contains("a&lt;b"));
    }
}
