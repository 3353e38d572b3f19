//! Float rasters, resampling, Gaussian blur and blurred multi-resolution
//! pyramids.

mod filter;
mod io;
mod pyramid;

pub use filter::{gaussian_blur, gaussian_kernel, resize};
pub use io::{load_image, save_image};
pub use pyramid::{build_pyramid, BlurPolicy, Pyramid, PyramidLevel};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported or malformed image format: {0}")]
    Format(String),
    #[error("degenerate image size {height}x{width} (each side must be at least 2)")]
    DegenerateSize { height: usize, width: usize },
    #[error("invalid image data: {0}")]
    InvalidData(String),
}

/// Row-major, channel-interleaved float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::InvalidData(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(ImageError::DegenerateSize { height, width });
        }
        if data.len() != height * width * channels {
            return Err(ImageError::InvalidData(format!(
                "expected {} samples for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::InvalidData(format!("non-finite sample at index {pos}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled image with valid shape")
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    /// Smallest and largest sample.
    pub fn range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// True when every sample lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Per-pixel channel mean, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        let c = self.channels as f64;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect()
    }

    /// Copies the pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn crop_box(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self, ImageError> {
        if x1 > self.width || y1 > self.height || x0 >= x1 || y0 >= y1 {
            return Err(ImageError::InvalidData(format!(
                "crop box [{x0},{y0},{x1},{y1}] outside {}x{}",
                self.width, self.height
            )));
        }
        Self::from_fn(y1 - y0, x1 - x0, self.channels, |i, j, c| self.get(y0 + i, x0 + j, c))
    }

    /// Same image expanded to three channels.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self::from_fn(self.height, self.width, 3, |i, j, _| self.get(i, j, 0))
            .expect("valid shape")
    }
}
