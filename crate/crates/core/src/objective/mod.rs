//! Loss stack: order-free caption cross-entropy, negated aesthetic score and
//! their λ-weighted sum, plus the [`Scorer`] contract that supplies caption
//! word distributions and aesthetic scores for a crop.

mod caption;
pub mod fixtures;
pub mod synthetic;

pub use caption::{bag_from_text, caption_loss, caption_loss_eps, tokenize, CaptionBag, CaptionLoss, Vocabulary};

use crate::imagecore::Image;
use crate::sampler::CropResult;
use crate::scorerproto::ProtocolError;

/// Guard inside the caption cross-entropy logarithm.
pub const CAPTION_EPS: f64 = 1e-8;

/// Tolerance on the unit sum of each caption step distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error("scorer failed: {0}")]
    Failed(String),
    #[error("scorer rejected input: {0}")]
    InvalidInput(String),
    #[error("scorer produced invalid output: {0}")]
    InvalidOutput(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("caption has no in-vocabulary words")]
    EmptyCaption,
    #[error("vocabulary mismatch: expected dimension {expected}, got {got}")]
    VocabularyMismatch { expected: usize, got: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("failed to read vocabulary {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Forward output of a scorer for one crop.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerOutput {
    /// `T_c` word distributions over the vocabulary.
    pub caption_steps: Vec<Vec<f64>>,
    /// Aesthetic score `g`, higher is better.
    pub aesthetic: f64,
}

/// Per-pixel gradients, laid out like the crop image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGradients {
    /// `Σ_w c_w ∂q_w/∂pixel` for the supplied cotangent `c` on the mean
    /// caption distribution `q`.
    pub caption: Vec<f64>,
    /// `∂g/∂pixel`.
    pub aesthetic: Vec<f64>,
}

/// Anything that can rate a crop: caption word distributions plus an
/// aesthetic score, with optional pixel gradients.
pub trait Scorer: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Crop side length the scorer expects, if it cares.
    fn input_size(&self) -> Option<usize> {
        None
    }

    /// Whether `score` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        true
    }

    fn supports_gradients(&self) -> bool {
        false
    }

    fn score(&self, crop: &Image) -> Result<ScorerOutput, ScorerError>;

    /// Vector-Jacobian product of the caption mean and the aesthetic score.
    /// `Ok(None)` when the scorer does not ship gradients.
    fn pixel_gradients(&self, _crop: &Image, _caption_cotangent: &[f64]) -> Result<Option<PixelGradients>, ScorerError> {
        Ok(None)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn input_size(&self) -> Option<usize> {
        (**self).input_size()
    }
    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }
    fn supports_gradients(&self) -> bool {
        (**self).supports_gradients()
    }
    fn score(&self, crop: &Image) -> Result<ScorerOutput, ScorerError> {
        (**self).score(crop)
    }
    fn pixel_gradients(&self, crop: &Image, cot: &[f64]) -> Result<Option<PixelGradients>, ScorerError> {
        (**self).pixel_gradients(crop, cot)
    }
}

/// Loss terms for one crop. `total = caption_term + lambda * aesthetic_term`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub caption_term: f64,
    pub aesthetic_term: f64,
    pub total: f64,
    pub lambda: f64,
    /// `∂total/∂(x, y, s)`; zeros when `grad_available` is false.
    pub grad_theta: [f64; 3],
    pub grad_available: bool,
}

/// Aesthetic loss: the negated score.
pub fn aesthetic_loss(score: f64) -> Result<f64, ObjectiveError> {
    if !score.is_finite() {
        return Err(ObjectiveError::Numeric(format!("aesthetic score {score}")));
    }
    Ok(-score)
}

/// Checks the shape and normalization of a scorer's caption output.
pub fn validate_output(out: &ScorerOutput, vocab_len: usize) -> Result<(), ScorerError> {
    if out.caption_steps.is_empty() {
        return Err(ScorerError::InvalidOutput("no caption steps".into()));
    }
    for (t, step) in out.caption_steps.iter().enumerate() {
        if step.len() != vocab_len {
            return Err(ScorerError::InvalidOutput(format!(
                "step {t} has {} entries, vocabulary has {vocab_len}",
                step.len()
            )));
        }
        if step.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ScorerError::InvalidOutput(format!("step {t} has a negative or non-finite entry")));
        }
        let sum: f64 = step.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(ScorerError::InvalidOutput(format!("step {t} sums to {sum}")));
        }
    }
    if !out.aesthetic.is_finite() {
        return Err(ScorerError::InvalidOutput(format!("aesthetic score {}", out.aesthetic)));
    }
    Ok(())
}

fn forward(
    crop: &Image,
    user: &CaptionBag,
    scorer: &dyn Scorer,
    lambda: f64,
) -> Result<(ScorerOutput, CaptionLoss, f64, f64), ObjectiveError> {
    if let Some(size) = scorer.input_size() {
        if crop.height() != size || crop.width() != size {
            return Err(ScorerError::InvalidInput(format!(
                "crop is {}x{}, scorer expects {size}x{size}",
                crop.height(),
                crop.width()
            ))
            .into());
        }
    }
    let out = scorer.score(crop)?;
    validate_output(&out, scorer.vocabulary().len())?;
    let cap = caption_loss(user, &out.caption_steps)?;
    let aesthetic_term = aesthetic_loss(out.aesthetic)?;
    let total = cap.value + lambda * aesthetic_term;
    if !total.is_finite() {
        return Err(ObjectiveError::Numeric(format!("total loss {total}")));
    }
    Ok((out, cap, aesthetic_term, total))
}

/// Total loss of a crop without θ gradients.
pub fn total_loss_value(
    crop: &Image,
    user: &CaptionBag,
    scorer: &dyn Scorer,
    lambda: f64,
) -> Result<LossReport, ObjectiveError> {
    let (_, cap, aesthetic_term, total) = forward(crop, user, scorer, lambda)?;
    Ok(LossReport {
        caption_term: cap.value,
        aesthetic_term,
        total,
        lambda,
        grad_theta: [0.0; 3],
        grad_available: false,
    })
}

/// Total loss of a sampled crop. When the scorer ships pixel gradients they
/// are chained through the sampler jacobian into `grad_theta`.
pub fn total_loss(
    crop: &CropResult,
    user: &CaptionBag,
    scorer: &dyn Scorer,
    lambda: f64,
) -> Result<LossReport, ObjectiveError> {
    let (_, cap, aesthetic_term, total) = forward(&crop.image, user, scorer, lambda)?;
    let mut report = LossReport {
        caption_term: cap.value,
        aesthetic_term,
        total,
        lambda,
        grad_theta: [0.0; 3],
        grad_available: false,
    };
    if !scorer.supports_gradients() {
        return Ok(report);
    }
    let Some(grads) = scorer.pixel_gradients(&crop.image, &cap.grad_q)? else {
        return Ok(report);
    };
    let n = crop.image.data().len();
    if grads.caption.len() != n || grads.aesthetic.len() != n {
        return Err(ScorerError::InvalidOutput(format!(
            "pixel gradients have {}/{} entries, crop has {n}",
            grads.caption.len(),
            grads.aesthetic.len()
        ))
        .into());
    }
    let d_pixel: Vec<f64> = grads
        .caption
        .iter()
        .zip(&grads.aesthetic)
        .map(|(c, a)| c - lambda * a)
        .collect();
    report.grad_theta = crop.pullback(&d_pixel);
    if report.grad_theta.iter().any(|g| !g.is_finite()) {
        return Err(ObjectiveError::Numeric(format!("gradient {:?}", report.grad_theta)));
    }
    report.grad_available = true;
    Ok(report)
}
