//! Seeded synthetic images for gradient checks, benchmarks and recovery
//! experiments.

use rand::Rng;

use crate::imagecore::{gaussian_blur, Image};

/// Normalized coordinate of pixel index `k` along an axis of `n`.
pub fn pixel_to_normalized(k: usize, n: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (n - 1) as f64
}

/// Isotropic Gaussian blob on a flat background; position and width are in
/// normalized image coordinates.
pub fn blob_image(height: usize, width: usize, channels: usize, center: (f64, f64), width_std: f64, amplitude: f64, background: f64) -> Image {
    Image::from_fn(height, width, channels, |i, j, _| {
        let u = pixel_to_normalized(j, width);
        let v = pixel_to_normalized(i, height);
        let r2 = (u - center.0).powi(2) + (v - center.1).powi(2);
        (background + amplitude * (-r2 / (2.0 * width_std * width_std)).exp()).clamp(0.0, 1.0)
    })
    .expect("valid blob shape")
}

/// Smooth random content: a sum of colored Gaussian blobs, lightly blurred.
pub fn smooth_random_image(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Image {
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..5)
        .map(|_| {
            let amp = (0..channels).map(|_| rng.random_range(0.1..0.6)).collect();
            (rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(0.15..0.45), amp)
        })
        .collect();
    let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.05..0.2)).collect();
    let img = Image::from_fn(height, width, channels, |i, j, c| {
        let u = pixel_to_normalized(j, width);
        let v = pixel_to_normalized(i, height);
        let mut acc = base[c];
        for (bx, by, r, amp) in &blobs {
            acc += amp[c] * (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * r * r)).exp();
        }
        acc.min(1.0)
    })
    .expect("valid shape");
    gaussian_blur(&img, 1.0)
}

/// One blob-recovery problem: a single bright blob whose best crop is
/// certified by exhaustive search.
#[derive(Debug, Clone)]
pub struct BlobInstance {
    pub image: Image,
    pub center: (f64, f64),
    pub width_std: f64,
}

pub fn random_blob_instance(size: usize, rng: &mut impl Rng) -> BlobInstance {
    let center = (rng.random_range(-0.45..0.45), rng.random_range(-0.45..0.45));
    let width_std = rng.random_range(0.08..0.16);
    let image = blob_image(size, size, 1, center, width_std, 0.85, 0.05);
    BlobInstance { image, center, width_std }
}
