//! Sample CSVs and a minimal SVG trajectory plot.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::flow::Trajectory;

/// `x_0..x_{d-1},condition`, one row per sample.
pub fn write_samples_csv<W: Write>(mut w: W, x: &[f64], c: &[usize], dim: usize) -> Result<()> {
    let head: Vec<String> = (0..dim).map(|j| format!("x_{j}")).collect();
    writeln!(w, "{},condition", head.join(","))?;
    for (row, ci) in x.chunks_exact(dim).zip(c) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", vals.join(","), ci)?;
    }
    Ok(())
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 32.0;
const COLORS: [&str; 8] = [
    "#444444", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b",
];

/// Plots trajectories as polylines. Two or more dimensions use the first two
/// coordinates; one-dimensional states are drawn against time.
pub fn trajectories_svg(trajs: &[Trajectory]) -> String {
    let points: Vec<Vec<(f64, f64)>> = trajs
        .iter()
        .map(|tr| {
            tr.times
                .iter()
                .zip(&tr.states)
                .map(|(&t, s)| if s.len() >= 2 { (s[0], s[1]) } else { (t, s[0]) })
                .collect()
        })
        .collect();
    let all = points.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let sx = (SIZE - 2.0 * MARGIN) / (x1 - x0).max(1e-9);
    let sy = (SIZE - 2.0 * MARGIN) / (y1 - y0).max(1e-9);
    let px = |x: f64| MARGIN + (x - x0) * sx;
    let py = |y: f64| SIZE - MARGIN - (y - y0) * sy;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    // axes through the origin when it is in view, else along the border
    let ax = if (x0..=x1).contains(&0.0) { px(0.0) } else { MARGIN };
    let ay = if (y0..=y1).contains(&0.0) { py(0.0) } else { SIZE - MARGIN };
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{ay:.2}" x2="{:.2}" y2="{ay:.2}" stroke="#999999"/>"##,
        SIZE - MARGIN
    );
    let _ = writeln!(
        s,
        r##"<line x1="{ax:.2}" y1="{MARGIN}" x2="{ax:.2}" y2="{:.2}" stroke="#999999"/>"##,
        SIZE - MARGIN
    );
    for (tr, pts) in trajs.iter().zip(&points) {
        let color = COLORS[tr.condition % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" stroke-opacity="0.6" points="{}"/>"#,
            path.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_csv_layout() {
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &[1.0, 2.0, 3.0, 4.0], &[1, 2], 2).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x_0,x_1,condition\n1,2,1\n3,4,2\n");
    }

    #[test]
    fn svg_has_one_polyline_per_trajectory() {
        let tr = Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]],
            condition: 1,
            alpha: 1.0,
        };
        let svg = trajectories_svg(&[tr.clone(), tr]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.ends_with("</svg>\n"));
    }
}
