//! Caption-guided image cropping by direct optimization of crop parameters.
//!
//! A crop is described by [`CropParams`] `(x, y, s)`: a normalized center in
//! `[-1, 1]²` and a scale fraction of the image extent. The crop image is
//! produced by a differentiable multi-scale bilinear sampler, scored by a
//! [`Scorer`] (caption word distributions plus an aesthetic score) and the
//! center is searched with projected L-BFGS while the scale is annealed
//! geometrically, restarting several noisy local searches per scale.

pub mod bench;
pub mod gradcheck;
pub mod imagecore;
pub mod landscape;
pub mod objective;
pub mod pipeline;
pub mod sampler;
pub mod scorerproto;
pub mod solver;
pub mod synth;

pub use imagecore::{BlurPolicy, Image, ImageError, Pyramid};
pub use objective::{
    CaptionBag, LossReport, ObjectiveError, Scorer, ScorerError, ScorerOutput, Vocabulary,
};
pub use pipeline::{CropRun, PipelineError, RunConfig};
pub use sampler::{CropParams, CropResult, PixelBox};
pub use solver::{SolveTrace, SolverConfig, Termination};
