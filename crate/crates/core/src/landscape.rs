//! Total loss over a grid of crop centers at fixed scales.

use std::io::Write;

use rayon::prelude::*;

use crate::imagecore::Image;
use crate::objective::ObjectiveError;
use crate::pipeline::CropObjective;
use crate::sampler::CropParams;

pub const CSV_HEADER: &str = "x,y,scale,caption,aesthetic,total";

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeCell {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub caption: f64,
    pub aesthetic: f64,
    pub total: f64,
}

/// `n` evenly spaced feasible center coordinates at `scale`.
pub fn grid_coords(n: usize, scale: f64) -> Vec<f64> {
    let b = (1.0 - scale).max(0.0);
    (0..n).map(|i| (-b + 2.0 * b * i as f64 / (n - 1) as f64).clamp(-b, b)).collect()
}

/// Evaluates the loss on an `n x n` grid, rows over `y`, columns over `x`.
pub fn evaluate_grid(objective: &CropObjective<'_>, scale: f64, n: usize, parallel: bool) -> Result<Vec<LandscapeCell>, ObjectiveError> {
    assert!(n >= 3, "landscape grid needs at least 3 points per axis");
    let coords = grid_coords(n, scale);
    let points: Vec<(f64, f64)> = coords.iter().flat_map(|&y| coords.iter().map(move |&x| (x, y))).collect();
    let eval = |&(x, y): &(f64, f64)| {
        objective.value(CropParams::new(x, y, scale)).map(|r| LandscapeCell {
            x,
            y,
            scale,
            caption: r.caption_term,
            aesthetic: r.aesthetic_term,
            total: r.total,
        })
    };
    if parallel && objective.scorer.concurrent_safe() {
        points.par_iter().map(eval).collect()
    } else {
        points.iter().map(eval).collect()
    }
}

/// Plain decimal with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).expect("scientific exponent");
    let decimals = (8 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn write_csv(cells: &[LandscapeCell], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            format_sig9(c.x),
            format_sig9(c.y),
            format_sig9(c.scale),
            format_sig9(c.caption),
            format_sig9(c.aesthetic),
            format_sig9(c.total)
        )?;
    }
    Ok(())
}

/// Heatmap of `total` normalized to the grid's range: dark blue for low
/// loss, white for high, each cell drawn as a `cell_px` square.
pub fn heatmap_image(cells: &[LandscapeCell], n: usize, cell_px: usize) -> Image {
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c.total), b.max(c.total)));
    let span = hi - lo;
    let side = n * cell_px;
    Image::from_fn(side, side, 3, |i, j, ch| {
        let c = &cells[(i / cell_px) * n + j / cell_px];
        let t = if span > 0.0 { (c.total - lo) / span } else { 0.0 };
        match ch {
            0 | 1 => t,
            _ => 0.35 + 0.65 * t,
        }
    })
    .expect("heatmap shape")
}
