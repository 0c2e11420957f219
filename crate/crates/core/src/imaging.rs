//! RGB float images and binary PPM input/output.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB with channels in `[0, 1]`, row-major, `y` down.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let data = fill.iter().copied().cycle().take(3 * width * height).collect();
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::dim("rgb_image", format!("{} values for a {width}×{height} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous coordinates where pixel `(i, j)` is
    /// centered on `(i + 0.5, j + 0.5)`. Taps outside the image are black.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        let mut out = [0.0f64; 3];
        for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
            for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (px, py) = (x0 + dx, y0 + dy);
                if px < 0.0 || py < 0.0 || px >= self.width as f64 || py >= self.height as f64 {
                    continue;
                }
                let rgb = self.get(px as usize, py as usize);
                (0..3).for_each(|c| out[c] += w * f64::from(rgb[c]));
            }
        }
        out.map(|v| v as f32)
    }

    /// Planar `[3, H, W]` values mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_planar_signed(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// 8-bit quantization, the exact values a PPM round trip preserves.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.iter().map(|&v| f32::from(to_u8(v)) / 255.0).collect(), ..*self }
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_u8(v)));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Ok(Self { width: w as usize, height: h as usize, data })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
