//! Score-track figures: `S_det` over frames with ground-truth spans shaded.

use std::fmt::Write as _;

use crate::datamodel::GtSegment;
use crate::error::{Error, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 32.0;

/// Parses the `frame_index,score` table written at evaluation.
pub fn parse_score_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("frame_index,score") => {}
        _ => return Err(Error::schema("scores", "expected header `frame_index,score`")),
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::schema("scores", format!("line {}: {what}", row + 2));
        let (i, v) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
        let i: usize = i.trim().parse().map_err(|_| bad("bad frame index"))?;
        if i != out.len() {
            return Err(bad("frame indices must be consecutive from 0"));
        }
        let v: f64 = v.trim().parse().map_err(|_| bad("bad score"))?;
        if !v.is_finite() {
            return Err(bad("score is not finite"));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::schema("scores", "no rows"));
    }
    Ok(out)
}

fn x_of(frame: f64, n: usize) -> f64 {
    let span = (n.max(2) - 1) as f64;
    MARGIN + frame / span * (WIDTH - 2.0 * MARGIN)
}

fn y_of(score: f64) -> f64 {
    let s = score.clamp(0.0, 1.0);
    HEIGHT - MARGIN - s * (HEIGHT - 2.0 * MARGIN)
}

/// One polyline for the scores and one shaded rect per segment. Output is
/// a pure function of the inputs.
pub fn render_svg(scores: &[f64], segments: &[GtSegment], title: &str) -> String {
    let n = scores.len();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for seg in segments {
        let x0 = x_of(seg.start as f64 - 0.5, n).max(MARGIN);
        let x1 = x_of(seg.end as f64 + 0.5, n).min(WIDTH - MARGIN);
        let _ = writeln!(
            s,
            r##"<rect class="gt" x="{x0:.2}" y="{MARGIN:.2}" width="{:.2}" height="{:.2}" fill="#f4a6a6" fill-opacity="0.5"/>"##,
            (x1 - x0).max(0.0),
            HEIGHT - 2.0 * MARGIN
        );
    }
    let (y0, y1) = (y_of(0.0), y_of(1.0));
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<line x1="{MARGIN:.2}" y1="{y0:.2}" x2="{MARGIN:.2}" y2="{y1:.2}" stroke="black"/>"#);
    let mut points = String::new();
    for (i, &v) in scores.iter().enumerate() {
        if i > 0 {
            points.push(' ');
        }
        let _ = write!(points, "{:.2},{:.2}", x_of(i as f64, n), y_of(v));
    }
    let _ = writeln!(
        s,
        r##"<polyline class="score" points="{points}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##
    );
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
