//! Analytic-versus-finite-difference check of the full θ-gradient chain
//! (multi-scale sampler, synthetic scorers, loss).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::imagecore::{build_pyramid, BlurPolicy};
use crate::objective::synthetic::{default_vocabulary, synthetic_scorer};
use crate::objective::{total_loss, total_loss_value, CaptionBag, ObjectiveError};
use crate::imagecore::Pyramid;
use crate::sampler::{multiscale_crop, multiscale_crop_values, sample_positions, CropParams};
use crate::synth::smooth_random_image;

/// Pass threshold on the worst relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub out_size: usize,
    pub step: f64,
    pub lambda: f64,
    /// Negative control: scale the sampler's ∂/∂x by 1.05 before chaining.
    pub corrupt_jacobian: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { trials: 100, seed: 0, image_size: 64, channels: 3, out_size: 32, step: 1e-4, lambda: 1.0, corrupt_jacobian: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub theta: CropParams,
    pub analytic: [f64; 2],
    pub numeric: [f64; 2],
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Draws of θ thrown away because a difference stencil crossed a pixel
    /// cell boundary.
    pub rejected: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// True when moving the center by `±h` along x or y moves some sample across
/// a source pixel boundary on any level, where the loss has a kink.
pub fn straddles_cell_boundary(pyramid: &Pyramid, theta: CropParams, out_size: usize, h: f64) -> bool {
    let crosses = |center: f64, n: usize| {
        let lo = sample_positions(center - h, theta.s, out_size, n);
        let hi = sample_positions(center + h, theta.s, out_size, n);
        lo.iter().zip(&hi).any(|(a, b)| a.floor() != b.floor())
    };
    pyramid.images().any(|l| crosses(theta.x, l.width()) || crosses(theta.y, l.height()))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = default_vocabulary();
    let mut cases = Vec::with_capacity(cfg.trials);
    let mut rejected = 0;
    for _ in 0..cfg.trials {
        let image = smooth_random_image(cfg.image_size, cfg.image_size, cfg.channels, &mut rng);
        let pyramid = build_pyramid(&image, &[0.25, 1.0 / 3.0, 0.5, 1.0], BlurPolicy::default())
            .map_err(|e| ObjectiveError::Numeric(e.to_string()))?;
        let scorer = synthetic_scorer(vocab.clone(), cfg.channels, rng.random());
        let mut probs = vec![0.0; vocab.len()];
        let words = rng.random_range(1..=3);
        for _ in 0..words {
            probs[rng.random_range(0..vocab.len())] += 1.0 / words as f64;
        }
        let user = CaptionBag::from_probs(probs, words);

        let theta = loop {
            let s = rng.random_range(0.3..0.95);
            let b = 0.9 * (1.0 - s);
            let theta = CropParams::new(rng.random_range(-b..=b), rng.random_range(-b..=b), s);
            if !straddles_cell_boundary(&pyramid, theta, cfg.out_size, cfg.step) {
                break theta;
            }
            rejected += 1;
        };

        let mut crop = multiscale_crop(&pyramid, theta, cfg.out_size).map_err(|e| ObjectiveError::Numeric(e.to_string()))?;
        if cfg.corrupt_jacobian {
            crop.jacobian.dx.iter_mut().for_each(|d| *d *= 1.05);
        }
        let report = total_loss(&crop, &user, &scorer, cfg.lambda)?;
        let analytic = [report.grad_theta[0], report.grad_theta[1]];

        let value_at = |t: CropParams| -> Result<f64, ObjectiveError> {
            let img = multiscale_crop_values(&pyramid, t, cfg.out_size).map_err(|e| ObjectiveError::Numeric(e.to_string()))?;
            Ok(total_loss_value(&img, &user, &scorer, cfg.lambda)?.total)
        };
        let h = cfg.step;
        let numeric = [
            (value_at(CropParams { x: theta.x + h, ..theta })? - value_at(CropParams { x: theta.x - h, ..theta })?) / (2.0 * h),
            (value_at(CropParams { y: theta.y + h, ..theta })? - value_at(CropParams { y: theta.y - h, ..theta })?) / (2.0 * h),
        ];
        let rel_error = relative_error(&analytic, &numeric);
        cases.push(GradcheckCase { theta, analytic, numeric, rel_error });
    }
    let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { cases, max_rel_error, passed: max_rel_error < GRADCHECK_TOLERANCE, rejected })
}
