//! Standalone SVG emission for metric curves and histogram heat-grids.
//! No external services or libraries; charts are plain polylines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of one or more named series over a shared x axis.
pub fn line_chart(
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    path: &Path,
) -> Result<()> {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 40.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
    let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(1e-9);
    let xs = |x: f64| ml + (x - xmin) / (xmax - xmin).max(1e-12) * (w - ml - mr);
    let ys = |y: f64| h - mb - (y - ymin) / (ymax - ymin).max(1e-12) * (h - mt - mb);

    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = write!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        w / 2.0
    );
    // axes
    let _ = write!(
        s,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/><line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - mb,
        h - mb,
        w - mr,
        h - mb
    );
    for i in 0..=4 {
        let yv = ymin + (ymax - ymin) * i as f64 / 4.0;
        let yy = ys(yv);
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{yv:.2}</text>"#,
            ml - 6.0,
            yy + 3.0
        );
        let _ = write!(
            s,
            r##"<line x1="{ml}" y1="{yy}" x2="{}" y2="{yy}" stroke="#dddddd"/>"##,
            w - mr
        );
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path_d: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", xs(x), ys(y))).collect();
        let _ = write!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path_d.join(" ")
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>"#,
            w - mr - 120.0,
            mt + 14.0 * (i as f64 + 1.0)
        );
    }
    let _ = write!(s, "</svg>");
    fs::write(path, s)?;
    Ok(())
}

/// Heat grid: rows (e.g. epochs) by columns (e.g. probability bins), with
/// values in [0, 1] mapped from blue through yellow.
pub fn heat_grid(title: &str, rows: &[Vec<f64>], path: &Path) -> Result<()> {
    let nr = rows.len().max(1);
    let nc = rows.first().map(|r| r.len()).unwrap_or(1).max(1);
    let cell = 12.0f64.min(600.0 / nc as f64).max(3.0);
    let (ml, mt) = (50.0, 40.0);
    let w = ml + cell * nc as f64 + 20.0;
    let h = mt + cell * nr as f64 + 30.0;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = write!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#,
        w / 2.0
    );
    let max = rows
        .iter()
        .flat_map(|r| r.iter().cloned())
        .fold(1e-12, f64::max);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, &v) in row.iter().enumerate() {
            let t = (v / max).clamp(0.0, 1.0);
            let r = (40.0 + 215.0 * t) as u8;
            let g = (60.0 + 170.0 * t) as u8;
            let b = (160.0 * (1.0 - t) + 40.0) as u8;
            let _ = write!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({r},{g},{b})"/>"#,
                ml + ci as f64 * cell,
                mt + ri as f64 * cell
            );
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="9" text-anchor="end">{}</text>"#,
            ml - 4.0,
            mt + ri as f64 * cell + cell * 0.7,
            ri + 1
        );
    }
    let _ = write!(s, "</svg>");
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_render_to_files() {
        let dir = std::env::temp_dir().join("scob-plot-test");
        std::fs::create_dir_all(&dir).unwrap();
        let series = vec![(
            "metric".to_string(),
            vec![(1.0, 0.2), (2.0, 0.5), (3.0, 0.8)],
        )];
        let p1 = dir.join("line.svg");
        line_chart("demo", &series, &p1).unwrap();
        assert!(std::fs::read_to_string(&p1).unwrap().starts_with("<svg"));

        let p2 = dir.join("grid.svg");
        heat_grid("demo", &[vec![0.1, 0.9], vec![0.5, 0.5]], &p2).unwrap();
        assert!(std::fs::read_to_string(&p2).unwrap().contains("rect"));
    }
}
