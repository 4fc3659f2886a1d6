//! Image carriers.
//!
//! [`ImageGrid`] holds intensities in `[0, 1]`, interleaved `H × W × C` in
//! row-major order. [`PixelField`] has the same layout without the range
//! constraint; it carries residuals and gradients with respect to pixels.

use crate::error::{LabError, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(LabError::InvalidImage(format!("channels must be 1 or 3, got {channels}")));
    }
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(LabError::InvalidImage(format!(
            "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    if len != height * width * channels {
        return Err(LabError::InvalidImage(format!(
            "data length {len} does not match {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LabError::InvalidImage(format!("intensity {bad} outside [0,1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image from arbitrary reals, clamping each element into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(LabError::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Luminance plane (`H × W`). For single-channel images this is the data itself.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect()
    }

    /// Adds a luminance delta to every channel and clamps. Adding the same
    /// amount to R, G and B leaves the colour-difference signals unchanged.
    pub fn add_luminance_clamped(&self, delta: &[f64]) -> ImageGrid {
        debug_assert_eq!(delta.len(), self.pixels());
        let c = self.channels;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v + delta[i / c]).clamp(0.0, 1.0))
            .collect();
        ImageGrid { height: self.height, width: self.width, channels: c, data }
    }

    /// Replaces the luminance plane, keeping chroma, and clamps.
    pub fn with_luminance(&self, luma: &[f64]) -> ImageGrid {
        let old = self.luminance();
        let delta: Vec<f64> = luma.iter().zip(&old).map(|(n, o)| n - o).collect();
        self.add_luminance_clamped(&delta)
    }

    /// Maps `[0,1]` intensities to the model range `[-1,1]`.
    pub fn to_normalized(&self) -> Vec<f64> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    pub fn from_normalized(height: usize, width: usize, channels: usize, y: &[f64]) -> Result<Self> {
        Self::from_clamped(height, width, channels, y.iter().map(|v| (v + 1.0) * 0.5).collect())
    }

    pub fn map_pixels(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| f(*v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Single channel plane `c` as an `H × W` vector.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl PixelField {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn shape_of(image: &ImageGrid) -> Self {
        Self::zeros(image.height(), image.width(), image.channels())
    }

    /// Spreads a luminance-plane gradient onto the colour channels through the
    /// luma weights (the chain rule for `Y = Σ w_c · I_c`).
    pub fn from_luminance_gradient(height: usize, width: usize, channels: usize, g: &[f64]) -> Self {
        if channels == 1 {
            return Self { height, width, channels, data: g.to_vec() };
        }
        let mut data = Vec::with_capacity(g.len() * 3);
        for v in g {
            data.extend(LUMA_WEIGHTS.iter().map(|w| w * v));
        }
        Self { height, width, channels, data }
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &PixelField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small_images() {
        assert!(ImageGrid::new(8, 8, 1, vec![1.5; 64]).is_err());
        assert!(ImageGrid::new(4, 8, 1, vec![0.5; 32]).is_err());
        assert!(ImageGrid::new(8, 8, 2, vec![0.5; 128]).is_err());
        assert!(ImageGrid::new(8, 8, 3, vec![0.5; 192]).is_ok());
    }

    #[test]
    fn luminance_delta_keeps_colour_differences() {
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| 0.2 + 0.5 * ((i % 7) as f64 / 7.0)).collect();
        let img = ImageGrid::new(8, 8, 3, data).unwrap();
        let delta = vec![0.01; 64];
        let out = img.add_luminance_clamped(&delta);
        let (l0, l1) = (img.luminance(), out.luminance());
        for p in 0..64 {
            assert!((l1[p] - l0[p] - 0.01).abs() < 1e-12);
            let cr0 = img.get(p / 8, p % 8, 0) - l0[p];
            let cr1 = out.get(p / 8, p % 8, 0) - l1[p];
            assert!((cr0 - cr1).abs() < 1e-12);
        }
    }
}
