//! Exporters for per-point score maps: a plain CSV of world coordinates
//! with scores, and a binary PGM image rendering the camera-frame cloud
//! orthographically for a quick visual check.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes one `x,y,z,score` row per point, in order, after a header.
/// Floats use the shortest representation that parses back exactly.
pub fn heatmap_csv(points_world: &[[f64; 3]], scores: &[f64]) -> Result<String> {
    if points_world.len() != scores.len() {
        return Err(Error::Data(format!(
            "heatmap: {} points but {} scores",
            points_world.len(),
            scores.len()
        )));
    }
    let mut out = String::from("x,y,z,score\n");
    for (p, s) in points_world.iter().zip(scores) {
        out.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], s));
    }
    Ok(out)
}

pub fn write_heatmap_csv(path: &Path, points_world: &[[f64; 3]], scores: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(fs::write(path, heatmap_csv(points_world, scores)?)?)
}

/// Parses a heatmap CSV back into points and scores.
pub fn read_heatmap_csv(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("x,y,z,score") => {}
        other => {
            return Err(Error::Data(format!(
                "heatmap csv: expected header 'x,y,z,score', found {other:?}"
            )))
        }
    }
    let mut points = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let mut next = |name: &str| -> Result<f64> {
            fields
                .next()
                .ok_or_else(|| Error::Data(format!("heatmap csv row {}: missing {name}", i + 2)))?
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("heatmap csv row {}: bad {name}: {e}", i + 2)))
        };
        let p = [next("x")?, next("y")?, next("z")?];
        let s = next("score")?;
        if fields.next().is_some() {
            return Err(Error::Data(format!("heatmap csv row {}: trailing fields", i + 2)));
        }
        points.push(p);
        scores.push(s);
    }
    Ok((points, scores))
}

/// Renders scores onto a square grayscale image by orthographic
/// projection of the camera-frame cloud: x maps to columns, y to rows
/// (up is up), pixel value is `255 * score` for the point nearest the
/// camera at that pixel, white where no point lands.
pub fn heatmap_pgm(points_cam: &[[f64; 3]], scores: &[f64], side: usize) -> Result<Vec<u8>> {
    if points_cam.len() != scores.len() {
        return Err(Error::Data(format!(
            "heatmap: {} points but {} scores",
            points_cam.len(),
            scores.len()
        )));
    }
    if side == 0 {
        return Err(Error::Data("pgm: image side must be positive".into()));
    }
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points_cam {
        lo_x = lo_x.min(p[0]);
        hi_x = hi_x.max(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_y = hi_y.max(p[1]);
    }
    // Degenerate extents still render: everything lands on one column or row.
    let span_x = (hi_x - lo_x).max(1e-12);
    let span_y = (hi_y - lo_y).max(1e-12);

    let mut value = vec![255u8; side * side];
    let mut depth = vec![f64::INFINITY; side * side];
    for (p, &s) in points_cam.iter().zip(scores) {
        if !s.is_finite() {
            return Err(Error::Numeric("pgm: non-finite score".into()));
        }
        let col = (((p[0] - lo_x) / span_x) * (side - 1) as f64).round() as usize;
        let row = (((hi_y - p[1]) / span_y) * (side - 1) as f64).round() as usize;
        let idx = row.min(side - 1) * side + col.min(side - 1);
        // Camera looks along +z in its own frame: smaller z is nearer.
        if p[2] < depth[idx] {
            depth[idx] = p[2];
            value[idx] = (s.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(&value);
    Ok(out)
}

pub fn write_heatmap_pgm(
    path: &Path,
    points_cam: &[[f64; 3]],
    scores: &[f64],
    side: usize,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(fs::write(path, heatmap_pgm(points_cam, scores, side)?)?)
}
