//! Heatmap rendering: a false-colour PNG of the map and an overlay on the
//! source image.

use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};

use crate::error::{Result, SeaError};
use crate::grid::Grid;

/// Default blend strength at full heat.
pub const OVERLAY_ALPHA: f64 = 0.6;

/// Piecewise-linear "jet" colour for a value in [0, 1].
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)].map(|c| (c * 255.0).round() as u8)
}

/// False-colour image of `grid`, resized to `size` (height, width).
pub fn heatmap_image(grid: &Grid, size: (usize, usize)) -> RgbImage {
    let g = grid.resize_bilinear(size.0, size.1);
    RgbImage::from_fn(size.1 as u32, size.0 as u32, |x, y| {
        Rgb(colormap(g.get(y as usize, x as usize)))
    })
}

/// Blends the coloured heatmap onto `base`. Each pixel's weight is
/// `alpha * heat`, so cold regions keep the original image.
pub fn overlay(base: &RgbImage, grid: &Grid, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SeaError::Input(format!("overlay alpha must be in [0,1], got {alpha}")));
    }
    let (w, h) = base.dimensions();
    let g = grid.resize_bilinear(h as usize, w as usize);
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = g.get(y as usize, x as usize);
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let a = alpha * v;
        let c = colormap(v);
        for k in 0..3 {
            px.0[k] = ((1.0 - a) * px.0[k] as f64 + a * c[k] as f64).round() as u8;
        }
    }
    Ok(out)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    crate::data::save_png(&DynamicImage::ImageRgb8(img.clone()), path)
}
