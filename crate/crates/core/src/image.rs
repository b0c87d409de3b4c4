//! 8-bit grayscale rasters.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`; continuous sampling places
//! pixel centers at half-integers. Under this convention a horizontal mirror
//! maps `x` to `width - x` exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::shape::BBox;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::Schema(format!(
                "raster has {} bytes, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Quantizes values in `[0, 1]` (clamped) to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    /// Pixel value in `[0, 1]`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        f64::from(self.data[j * self.width + i]) / 255.0
    }

    /// Bilinear sample at a continuous position, clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(self.width - 1), (j0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - i0 as f64, fy - j0 as f64);
        let top = self.get(i0, j0) * (1.0 - ax) + self.get(i1, j0) * ax;
        let bottom = self.get(i0, j1) * (1.0 - ax) + self.get(i1, j1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    /// Resamples the window `region` onto a `size x size` grid.
    pub fn crop_resample(&self, region: &BBox, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        let (sx, sy) = (region.w / size as f64, region.h / size as f64);
        for j in 0..size {
            let y = region.y + (j as f64 + 0.5) * sy;
            for i in 0..size {
                out.push(self.sample(region.x + (i as f64 + 0.5) * sx, y));
            }
        }
        out
    }

    pub fn mirrored(&self) -> GrayImage {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Self::new(w as usize, h as usize, gray.into_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_hits_pixel_centers() {
        let img = GrayImage::new(2, 1, vec![0, 255]).unwrap();
        assert_eq!(img.sample(0.5, 0.5), 0.0);
        assert_eq!(img.sample(1.5, 0.5), 1.0);
        assert!((img.sample(1.0, 0.5) - 0.5).abs() < 1e-12);
        // clamped outside
        assert_eq!(img.sample(-3.0, 0.5), 0.0);
    }

    #[test]
    fn mirror_is_exact_involution() {
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let m = img.mirrored();
        assert_eq!(m.as_bytes(), &[3, 2, 1, 6, 5, 4]);
        assert_eq!(m.mirrored(), img);
    }

    #[test]
    fn mirrored_sampling_matches_mirrored_coordinates() {
        let data: Vec<u8> = (0..20).map(|v| (v * 13 % 256) as u8).collect();
        let img = GrayImage::new(5, 4, data).unwrap();
        let m = img.mirrored();
        for &(x, y) in &[(0.7, 1.2), (2.5, 2.5), (4.1, 3.3)] {
            assert!((img.sample(x, y) - m.sample(5.0 - x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(4, 3, (0..12).map(|v| v as u8 * 20).collect()).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(GrayImage::load_png(&p).unwrap(), img);
    }

    #[test]
    fn bad_dimensions() {
        assert!(GrayImage::new(0, 1, vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
    }
}
