//! Deterministic, model-free caption distributions that external adapters
//! implement in fixture mode. The formula is fixed by `docs/protocol.md`; this
//! is the reference implementation used to cross-check adapters.

use crate::imagecore::Image;

pub const FIXTURE_GRID: usize = 4;
pub const FIXTURE_STEPS: usize = 3;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash-derived weight in `[-1, 1)` for step `t`, word `w`, grid cell `k`.
pub fn fixture_weight(seed: u64, t: u64, w: u64, k: u64) -> f64 {
    let z = splitmix64(seed ^ (t << 40) ^ (w << 20) ^ k);
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Row-major 4x4 grid of mean luminance; cell of index `i` along an axis of
/// `n` is `floor(4 i / n)`.
pub fn luminance_grid(crop: &Image) -> Vec<f64> {
    let (h, w) = (crop.height(), crop.width());
    let lum = crop.luminance();
    let mut sums = [0.0; FIXTURE_GRID * FIXTURE_GRID];
    let mut counts = vec![0.0; FIXTURE_GRID * FIXTURE_GRID];
    for i in 0..h {
        for j in 0..w {
            let cell = (i * FIXTURE_GRID / h) * FIXTURE_GRID + j * FIXTURE_GRID / w;
            sums[cell] += lum[i * w + j];
            counts[cell] += 1.0;
        }
    }
    sums.iter().zip(&counts).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect()
}

/// `FIXTURE_STEPS` softmax distributions over `vocab_len` words.
pub fn fixture_distributions(crop: &Image, vocab_len: usize, seed: u64) -> Vec<Vec<f64>> {
    let grid = luminance_grid(crop);
    (0..FIXTURE_STEPS as u64)
        .map(|t| {
            let logits: Vec<f64> = (0..vocab_len as u64)
                .map(|w| {
                    let mut acc = 0.0;
                    for (k, m) in grid.iter().enumerate() {
                        acc += m * fixture_weight(seed, t, w, k as u64);
                    }
                    acc
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

/// Fixture-mode aesthetic: mean over all samples.
pub fn fixture_aesthetic(crop: &Image) -> f64 {
    crop.data().iter().sum::<f64>() / crop.data().len() as f64
}
