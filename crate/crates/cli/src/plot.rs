//! Minimal SVG rendering of a rollout: quantized and reference paths on
//! equal axes.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("rollout has no rows")]
    Empty,
}

/// The first two quantized and reference coordinates of each row.
pub fn read_rollout(csv: &str) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>), PlotError> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or(PlotError::Empty)?.split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| PlotError::Csv {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let cols = [col("xqs_0")?, col("xqs_1")?, col("xref_0")?, col("xref_1")?];
    let mut quantized = Vec::new();
    let mut reference = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut v = [0.0; 4];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            *slot = fields
                .get(c)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| PlotError::Csv {
                    line: i + 2,
                    message: format!("bad value in column {c}"),
                })?;
        }
        quantized.push([v[0], v[1]]);
        reference.push([v[2], v[3]]);
    }
    if quantized.is_empty() {
        return Err(PlotError::Empty);
    }
    Ok((quantized, reference))
}

pub fn render_svg(quantized: &[[f64; 2]], reference: &[[f64; 2]], title: &str) -> String {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 24.0;
    let all = quantized.iter().chain(reference);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    // One scale for both axes keeps the picture geometrically faithful.
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let cx = 0.5 * (lo[0] + hi[0]);
    let cy = 0.5 * (lo[1] + hi[1]);
    let map = |p: &[f64; 2]| {
        (
            SIZE / 2.0 + (p[0] - cx) * scale,
            SIZE / 2.0 - (p[1] - cy) * scale,
        )
    };
    let polyline = |pts: &[[f64; 2]], color: &str, dash: &str| {
        let mut s = String::new();
        for p in pts {
            let (x, y) = map(p);
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>\n",
            s.trim_end()
        )
    };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(title));
    let _ = writeln!(out, "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    out.push_str(&polyline(reference, "#1f77b4", " stroke-dasharray=\"6 3\""));
    out.push_str(&polyline(quantized, "#d62728", ""));
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "k,t,xqs_0,xqs_1,xref_0,xref_1,dir_index,cost,dropped_channels\n0,0,1,0,1,0,3,0.5,\n1,0.05,0.9,0.1,0.95,0.05,,,\n";

    #[test]
    fn reads_coordinates() {
        let (q, r) = read_rollout(CSV).unwrap();
        assert_eq!(q, vec![[1.0, 0.0], [0.9, 0.1]]);
        assert_eq!(r[1], [0.95, 0.05]);
    }

    #[test]
    fn reports_bad_rows_by_line() {
        let bad = CSV.replace("0.9,0.1", "0.9,oops");
        assert!(matches!(read_rollout(&bad), Err(PlotError::Csv { line: 3, .. })));
        assert!(matches!(read_rollout("a,b\n"), Err(PlotError::Csv { line: 1, .. })));
    }

    #[test]
    fn svg_has_two_paths_on_equal_axes() {
        let (q, r) = read_rollout(CSV).unwrap();
        let svg = render_svg(&q, &r, "a<b");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        // Span is 0.1 on both axes here, so the extreme points hit both margins.
        assert!(svg.contains("456.00,"));
    }
}
