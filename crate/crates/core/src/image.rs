//! Image planes, binary masks and probability maps.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Row-major `H × W × C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            bail!(Validation, "image must be non-empty, got {width}x{height}x{channels}");
        }
        if data.len() != width * height * channels {
            bail!(
                Shape,
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            );
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Validation, "image value {v} outside [0, 1]");
        }
        Ok(Self { width, height, channels, data })
    }

    /// A single-colour image.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, 3, data)
    }

    /// Builds an RGB image whose three channels all carry `gray`.
    pub fn from_gray(width: usize, height: usize, gray: &[f64]) -> Result<Self> {
        if gray.len() != width * height {
            bail!(Shape, "gray buffer length {} != {width}x{height}", gray.len());
        }
        let data = gray.iter().flat_map(|&g| [g, g, g]).collect();
        Self::new(width, height, 3, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Mean over channels, in `[0, 1]`.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        let px = self.pixel(x, y);
        px.iter().sum::<f64>() / px.len() as f64
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            bail!(Shape, "mask data length {} does not match {width}x{height}", data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `1.0` for foreground, `0.0` for background.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Max-pools onto a grid of `cell × cell` blocks: a cell is foreground
    /// when any covered pixel is.
    pub fn max_pool(&self, cell: usize) -> Result<Self> {
        if cell == 0 || self.width % cell != 0 || self.height % cell != 0 {
            bail!(Shape, "{}x{} mask is not divisible into {cell}-px cells", self.width, self.height);
        }
        let (w, h) = (self.width / cell, self.height / cell);
        let mut out = Self::empty(w, h);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.set(x / cell, y / cell, true);
                }
            }
        }
        Ok(out)
    }
}

/// Row-major foreground probability map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            bail!(Shape, "probability map length {} does not match {width}x{height}", data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Binary mask of pixels with probability strictly above 0.5.
    pub fn threshold(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| p > 0.5).collect(),
        }
    }
}

impl From<&BinaryMask> for ProbMap {
    fn from(mask: &BinaryMask) -> Self {
        Self { width: mask.width, height: mask.height, data: mask.to_f64() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImagePlane::new(1, 1, 3, vec![0.0, 1.2, 0.0]).is_err());
        assert!(ImagePlane::new(1, 1, 3, vec![0.0, 1.0]).is_err());
        assert!(ImagePlane::new(0, 1, 3, vec![]).is_err());
    }

    #[test]
    fn luminance_is_channel_mean() {
        let img = ImagePlane::new(1, 1, 3, vec![0.0, 0.3, 0.9]).unwrap();
        assert!((img.luminance(0, 0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn max_pool_marks_any_covered_pixel() {
        let mut m = BinaryMask::empty(8, 8);
        m.set(5, 2, true);
        let p = m.max_pool(4).unwrap();
        assert_eq!(p.data(), &[false, true, false, false]);
        assert!(m.max_pool(3).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let p = ProbMap::new(3, 1, vec![0.5, 0.51, 0.2]).unwrap();
        assert_eq!(p.threshold().data(), &[false, true, false]);
    }
}
