//! Scalar 2-D grids (heatmaps) and the resampling used around them.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(SeaError::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(SeaError::Shape("ragged grid rows".into()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// (row, col) of the first maximal cell.
    pub fn argmax(&self) -> (usize, usize) {
        let (_, imax) = crate::tensor::arg_min_max(&self.data);
        (imax / self.width, imax % self.width)
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let mut out = Vec::with_capacity(height * width);
        let ys: Vec<_> = (0..height).map(|y| source_coord(y, height, self.height)).collect();
        let xs: Vec<_> = (0..width).map(|x| source_coord(x, width, self.width)).collect();
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid {
            height,
            width,
            data: out,
        }
    }

    /// Block-average down to a coarser grid. Both dimensions must divide.
    pub fn area_downsample(&self, height: usize, width: usize) -> Result<Grid> {
        if height == 0
            || width == 0
            || self.height % height != 0
            || self.width % width != 0
        {
            return Err(SeaError::Shape(format!(
                "cannot area-downsample {}x{} to {height}x{width}",
                self.height, self.width
            )));
        }
        let (bh, bw) = (self.height / height, self.width / width);
        let norm = 1.0 / (bh * bw) as f64;
        let mut out = vec![0.0; height * width];
        for y in 0..self.height {
            for x in 0..self.width {
                out[(y / bh) * width + x / bw] += self.get(y, x) * norm;
            }
        }
        Ok(Grid {
            height,
            width,
            data: out,
        })
    }

    /// Values clamped to [0,1] and quantized to 8 bits.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    /// 8-bit grayscale rescaled to [0,1] by dividing by 255.
    pub fn from_gray_image(img: &GrayImage) -> Grid {
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        Grid {
            height: h as usize,
            width: w as usize,
            data,
        }
    }
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Row-major matrix `U` (out_h·out_w × in_h·in_w) such that
/// `U · vec(g) == vec(g.resize_bilinear(out_h, out_w))`.
pub fn bilinear_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let n_in = in_h * in_w;
    let mut m = vec![0.0; out_h * out_w * n_in];
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, out_h, in_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, out_w, in_w)).collect();
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let row = &mut m[(oy * out_w + ox) * n_in..(oy * out_w + ox + 1) * n_in];
            row[y0 * in_w + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * in_w + x1] += (1.0 - fy) * fx;
            row[y1 * in_w + x0] += fy * (1.0 - fx);
            row[y1 * in_w + x1] += fy * fx;
        }
    }
    m
}

/// Row-major matrix `D` (out_h·out_w × in_h·in_w) computing block means.
pub fn area_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 || in_h % out_h != 0 || in_w % out_w != 0 {
        return Err(SeaError::Shape(format!(
            "cannot area-downsample {in_h}x{in_w} to {out_h}x{out_w}"
        )));
    }
    let (bh, bw) = (in_h / out_h, in_w / out_w);
    let norm = 1.0 / (bh * bw) as f64;
    let n_in = in_h * in_w;
    let mut m = vec![0.0; out_h * out_w * n_in];
    for y in 0..in_h {
        for x in 0..in_w {
            let o = (y / bh) * out_w + x / bw;
            m[o * n_in + y * in_w + x] = norm;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let g = Grid::filled(3, 4, 0.7);
        let up = g.resize_bilinear(9, 8);
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let h = Grid::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(h.resize_bilinear(2, 2), h);
    }

    #[test]
    fn bilinear_matrix_matches_resize() {
        let g = Grid::new(2, 3, vec![0.1, 0.5, -0.2, 0.9, 0.0, 0.3]).unwrap();
        let m = bilinear_matrix(2, 3, 5, 7);
        let up = g.resize_bilinear(5, 7);
        for o in 0..35 {
            let v: f64 = (0..6).map(|i| m[o * 6 + i] * g.data()[i]).sum();
            assert!((v - up.data()[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let g = Grid::new(2, 4, vec![1.0, 3.0, 0.0, 0.0, 1.0, 3.0, 4.0, 4.0]).unwrap();
        let d = g.area_downsample(1, 2).unwrap();
        assert_eq!(d.data(), &[2.0, 2.0]);
        assert!(g.area_downsample(1, 3).is_err());
    }

    #[test]
    fn gray_round_trip_is_within_quantization() {
        let g = Grid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let back = Grid::from_gray_image(&g.to_gray_image());
        for (a, b) in g.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
