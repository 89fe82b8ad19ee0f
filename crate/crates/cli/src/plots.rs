//! Minimal SVG line charts for the CSV curves of an evaluation directory.

use std::fmt::Write as _;
use std::path::Path;

use hpaf_core::{Error, Result};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub points: Vec<(f64, f64)>,
    /// Fixed axis ranges, or `None` to fit the data.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

fn fit(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn render(chart: &Chart) -> String {
    let (x0, x1) = chart
        .x_range
        .unwrap_or_else(|| fit(chart.points.iter().map(|p| p.0)));
    let (y0, y1) = chart
        .y_range
        .unwrap_or_else(|| fit(chart.points.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        chart.title
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    );
    for (v, label) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label:.3}</text>"#,
            sx(v),
            bottom + 16.0
        );
    }
    for (v, label) in [(y0, y0), (y1, y1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label:.3}</text>"#,
            left - 4.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        chart.x_label
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        chart.y_label
    );
    let path: Vec<String> = chart
        .points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        path.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn read_pairs(path: &Path, x_col: usize, y_col: usize) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let get = |i: usize| -> Result<f64> {
            row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::Data(format!("{}: bad value in column {}", path.display(), i + 1))
            })
        };
        out.push((get(x_col)?, get(y_col)?));
    }
    Ok(out)
}

fn write(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Write `roc.svg`, `cmc.svg` and, when a loss history exists, `loss.svg`.
pub fn export(report: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut roc = read_pairs(&report.join("roc.csv"), 1, 2)?;
    roc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    roc.insert(0, (0.0, 0.0));
    roc.push((1.0, 1.0));
    write(
        &out.join("roc.svg"),
        render(&Chart {
            title: "ROC",
            x_label: "false acceptance rate",
            y_label: "true acceptance rate",
            points: roc,
            x_range: Some((0.0, 1.0)),
            y_range: Some((0.0, 1.0)),
        }),
    )?;
    let cmc = read_pairs(&report.join("cmc.csv"), 0, 1)?;
    write(
        &out.join("cmc.svg"),
        render(&Chart {
            title: "CMC",
            x_label: "rank",
            y_label: "identification rate",
            points: cmc,
            x_range: None,
            y_range: Some((0.0, 1.0)),
        }),
    )?;
    let loss_path = report.join("loss_history.csv");
    if loss_path.exists() {
        let loss = read_pairs(&loss_path, 0, 1)?;
        write(
            &out.join("loss.svg"),
            render(&Chart {
                title: "training loss",
                x_label: "epoch",
                y_label: "mean loss",
                points: loss,
                x_range: None,
                y_range: None,
            }),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_maps_corners_inside_the_frame() {
        let svg = render(&Chart {
            title: "t",
            x_label: "x",
            y_label: "y",
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            x_range: Some((0.0, 1.0)),
            y_range: Some((0.0, 1.0)),
        });
        assert!(svg.contains(&format!(
            "{:.2},{:.2} {:.2},{:.2}",
            MARGIN,
            HEIGHT - MARGIN,
            WIDTH - MARGIN,
            MARGIN
        )));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn flat_series_still_renders() {
        let svg = render(&Chart {
            title: "flat",
            x_label: "x",
            y_label: "y",
            points: vec![(1.0, 2.0), (2.0, 2.0)],
            x_range: None,
            y_range: None,
        });
        assert!(!svg.contains("NaN"));
    }
}
