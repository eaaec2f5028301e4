//! Run reports: named numeric series written as CSV, rendered to
//! self-contained SVG line charts, and summarized as plain text.
//!
//! Values are written with their shortest round-trippable representation, so
//! a CSV read back from disk is bit-identical to what was written. The x
//! axis is always the step index.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed report: {0}")]
    Format(String),
    #[error("report has no data points")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub series: Vec<Series>,
}

impl Report {
    pub fn new(title: &str) -> Self {
        Report {
            title: title.to_string(),
            series: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) -> &mut Self {
        self.series.push(Series {
            name: name.to_string(),
            values,
        });
        self
    }

    fn max_len(&self) -> usize {
        self.series.iter().map(|s| s.values.len()).max().unwrap_or(0)
    }

    fn check_nonempty(&self) -> Result<(), ReportError> {
        if self.max_len() == 0 {
            return Err(ReportError::Empty);
        }
        for s in &self.series {
            if s.name.is_empty() || s.name.contains([',', '"', '\n']) {
                return Err(ReportError::Format(format!(
                    "series name {:?} unusable as a CSV column",
                    s.name
                )));
            }
        }
        Ok(())
    }
}

pub fn write_csv(path: &Path, report: &Report) -> Result<(), ReportError> {
    report.check_nonempty()?;
    let mut out = String::new();
    if report.title.contains('\n') {
        return Err(ReportError::Format("title contains a newline".into()));
    }
    writeln!(out, "# {}", report.title).unwrap();
    write!(out, "step").unwrap();
    for s in &report.series {
        write!(out, ",{}", s.name).unwrap();
    }
    out.push('\n');
    for row in 0..report.max_len() {
        write!(out, "{row}").unwrap();
        for s in &report.series {
            match s.values.get(row) {
                Some(v) => write!(out, ",{v:?}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Report, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let title = match lines.next() {
        Some(l) if l.starts_with('#') => l.trim_start_matches('#').trim().to_string(),
        _ => return Err(ReportError::Format("missing title comment line".into())),
    };
    let header = lines
        .next()
        .ok_or_else(|| ReportError::Format("missing header line".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("step") {
        return Err(ReportError::Format("first column must be step".into()));
    }
    let mut report = Report::new(&title);
    for name in cols {
        report.push(name, Vec::new());
    }
    for (li, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let step: usize = cells
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| ReportError::Format(format!("row {li}: bad step cell")))?;
        if step != li {
            return Err(ReportError::Format(format!(
                "row {li}: step column reads {step}"
            )));
        }
        let mut n = 0usize;
        for (cell, series) in cells.zip(report.series.iter_mut()) {
            n += 1;
            if cell.is_empty() {
                continue;
            }
            if series.values.len() != li {
                return Err(ReportError::Format(format!(
                    "row {li}: series {} resumes after a gap",
                    series.name
                )));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| ReportError::Format(format!("row {li}: bad cell {cell:?}")))?;
            series.values.push(v);
        }
        if n != report.series.len() {
            return Err(ReportError::Format(format!("row {li}: wrong cell count")));
        }
    }
    report.check_nonempty()?;
    Ok(report)
}

const CHART_W: f64 = 800.0;
const CHART_H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 45.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Tick label: plain decimals in a sane range, scientific outside it.
fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

pub fn render_svg(report: &Report) -> Result<String, ReportError> {
    report.check_nonempty()?;
    let n = report.max_len();
    let finite: Vec<f64> = report
        .series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (mut y_min, mut y_max) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if finite.is_empty() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_min == y_max {
        let pad = if y_min == 0.0 { 1.0 } else { y_min.abs() * 0.1 };
        y_min -= pad;
        y_max += pad;
    }
    let x_max = (n - 1).max(1) as f64;
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let sx = |i: usize| MARGIN_L + i as f64 / x_max * plot_w;
    let sy = |v: f64| MARGIN_T + (y_max - v) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         font-family=\"sans-serif\" font-size=\"13\">"
    )
    .unwrap();
    writeln!(
        svg,
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>"
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"28\" text-anchor=\"middle\" font-size=\"17\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        escape_xml(&report.title)
    )
    .unwrap();

    // axes with five ticks each
    let axis = "stroke=\"#333\" stroke-width=\"1\"";
    writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" {axis}/>",
        CHART_H - MARGIN_B,
        CHART_W - MARGIN_R,
        CHART_H - MARGIN_B
    )
    .unwrap();
    writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" {axis}/>",
        CHART_H - MARGIN_B
    )
    .unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = f * x_max;
        let x = MARGIN_L + f * plot_w;
        writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" {axis}/>",
            CHART_H - MARGIN_B,
            CHART_H - MARGIN_B + 5.0
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            CHART_H - MARGIN_B + 20.0,
            fmt_tick(xv.round())
        )
        .unwrap();
        let yv = y_min + f * (y_max - y_min);
        let y = sy(yv);
        writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{MARGIN_L}\" y2=\"{y:.1}\" {axis}/>",
            MARGIN_L - 5.0
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 9.0,
            y + 4.0,
            fmt_tick(yv)
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">step</text>",
        MARGIN_L + plot_w / 2.0,
        CHART_H - 8.0
    )
    .unwrap();

    // one polyline per unbroken run of finite values; lone points as dots
    for (si, s) in report.series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut run: Vec<(usize, f64)> = Vec::new();
        let flush = |run: &mut Vec<(usize, f64)>, svg: &mut String| {
            match run.len() {
                0 => {}
                1 => writeln!(
                    svg,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>",
                    sx(run[0].0),
                    sy(run[0].1)
                )
                .unwrap(),
                _ => {
                    let pts: Vec<String> = run
                        .iter()
                        .map(|&(i, v)| format!("{:.1},{:.1}", sx(i), sy(v)))
                        .collect();
                    writeln!(
                        svg,
                        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>",
                        pts.join(" ")
                    )
                    .unwrap();
                }
            }
            run.clear();
        };
        for (i, &v) in s.values.iter().enumerate() {
            if v.is_finite() {
                run.push((i, v));
            } else {
                flush(&mut run, &mut svg);
            }
        }
        flush(&mut run, &mut svg);

        let ly = MARGIN_T + 16.0 + si as f64 * 20.0;
        let lx = CHART_W - MARGIN_R + 14.0;
        writeln!(
            svg,
            "<line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            ly - 4.0,
            lx + 22.0,
            ly - 4.0
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>",
            lx + 28.0,
            escape_xml(&s.name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn summarize(report: &Report) -> Result<String, ReportError> {
    report.check_nonempty()?;
    let mut out = format!("{}\n", report.title);
    for s in &report.series {
        let finite: Vec<f64> = s.values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            writeln!(out, "  {}: no finite values ({} points)", s.name, s.values.len()).unwrap();
            continue;
        }
        let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            out,
            "  {}: n={} first={} last={} min={} max={}",
            s.name,
            s.values.len(),
            fmt_tick(finite[0]),
            fmt_tick(*finite.last().unwrap()),
            fmt_tick(min),
            fmt_tick(max)
        )
        .unwrap();
    }
    Ok(out)
}

/// Writes `<stem>.csv`, `<stem>.svg`, and `<stem>.txt` under `dir` and
/// returns their paths.
pub fn write_report(dir: &Path, stem: &str, report: &Report) -> Result<[PathBuf; 3], ReportError> {
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    let txt = dir.join(format!("{stem}.txt"));
    write_csv(&csv, report)?;
    std::fs::write(&svg, render_svg(report)?)?;
    std::fs::write(&txt, summarize(report)?)?;
    Ok([csv, svg, txt])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut r = Report::new("training");
        r.push("loss", vec![2.5, 1.25, 0.625, 0.3125]);
        r.push("acc", vec![0.1, 0.2 + 0.1, 0.9, f64::NAN]);
        r
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut report = sample();
        report.push(
            "edge",
            vec![1e-10, -3.25, f64::MIN_POSITIVE, -0.0, 1e300],
        );
        write_csv(&path, &report).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.title, report.title);
        assert_eq!(back.series.len(), report.series.len());
        for (a, b) in back.series.iter().zip(&report.series) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.values.len(), b.values.len());
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}: {x} != {y}", a.name);
            }
        }
    }

    #[test]
    fn shorter_series_leave_trailing_cells_blank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut report = Report::new("mixed lengths");
        report.push("long", vec![1.0, 2.0, 3.0]);
        report.push("short", vec![5.0]);
        write_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("1,2.0,\n"), "got:\n{text}");
        let back = read_csv(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        for (body, why) in [
            ("step,a\n0,1.0\n", "missing title"),
            ("# t\nindex,a\n0,1.0\n", "bad first column"),
            ("# t\nstep,a\n0,1.0\n2,1.0\n", "step skips a row"),
            ("# t\nstep,a\n0,zebra\n", "non-numeric cell"),
            ("# t\nstep,a,b\n0,1.0\n", "missing cell"),
            ("# t\nstep,a\n0,\n1,2.0\n", "series resumes after a gap"),
        ] {
            std::fs::write(&path, body).unwrap();
            assert!(read_csv(&path).is_err(), "accepted {why}");
        }
        let mut bad_name = Report::new("t");
        bad_name.push("a,b", vec![1.0]);
        assert!(matches!(
            write_csv(&path, &bad_name),
            Err(ReportError::Format(_))
        ));
    }

    #[test]
    fn svg_draws_axes_lines_and_legend() {
        let svg = render_svg(&sample()).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">loss</text>"));
        assert!(svg.contains(">acc</text>"));
        assert!(svg.contains(">training</text>"));
        // five ticks per axis plus the two axis lines and two legend swatches
        assert_eq!(svg.matches("<line ").count(), 14);
    }

    #[test]
    fn nan_values_break_the_polyline_into_segments() {
        let mut r = Report::new("gaps");
        r.push("a", vec![0.0, 1.0, f64::NAN, 3.0, 4.0]);
        let svg = render_svg(&r).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);

        let mut lonely = Report::new("dots");
        lonely.push("a", vec![1.0, f64::NAN, 3.0]);
        let svg = render_svg(&lonely).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn flat_series_and_empty_reports_are_handled() {
        let mut flat = Report::new("flat");
        flat.push("c", vec![2.0, 2.0, 2.0]);
        let svg = render_svg(&flat).unwrap();
        assert!(svg.contains("<polyline"));

        assert!(matches!(
            render_svg(&Report::new("void")),
            Err(ReportError::Empty)
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_report(dir.path(), "void", &Report::new("void")),
            Err(ReportError::Empty)
        ));
    }

    #[test]
    fn summary_reports_first_last_min_max() {
        let text = summarize(&sample()).unwrap();
        assert!(text.starts_with("training\n"));
        assert!(
            text.contains("loss: n=4 first=2.5 last=0.3125 min=0.3125 max=2.5"),
            "got:\n{text}"
        );
        assert!(text.contains("acc: n=4 first=0.1 last=0.9"), "got:\n{text}");
    }

    #[test]
    fn write_report_emits_all_three_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let [csv, svg, txt] = write_report(dir.path(), "hist", &sample()).unwrap();
        assert_eq!(read_csv(&csv).unwrap().title, "training");
        assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg "));
        assert!(std::fs::read_to_string(&txt).unwrap().contains("loss"));
    }
}
