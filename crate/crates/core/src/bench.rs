//! Wall-clock timing of outer iterations on a synthetic image.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::imagecore::build_pyramid;
use crate::objective::synthetic::builtin_scorer;
use crate::objective::bag_from_text;
use crate::pipeline::{CropObjective, PipelineError, RunConfig, Search};
use crate::synth::smooth_random_image;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scorer: String,
    pub image_size: usize,
    pub channels: usize,
    pub iterations: usize,
    pub seed: u64,
    pub run: RunConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { scorer: "synthetic".into(), image_size: 256, channels: 3, iterations: 1, seed: 0, run: RunConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub iteration: usize,
    pub scale: f64,
    pub restarts: usize,
    pub evaluations: usize,
    pub seconds: f64,
}

pub const BENCH_HEADER: &str = "iteration\tscale\trestarts\tevaluations\tseconds";

impl BenchRow {
    pub fn to_line(&self) -> String {
        format!("{}\t{:.6}\t{}\t{}\t{:.4}", self.iteration, self.scale, self.restarts, self.evaluations, self.seconds)
    }
}

/// Times up to `iterations` outer iterations of a run with a builtin scorer.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, PipelineError> {
    let mut run_cfg = cfg.run.clone();
    run_cfg.max_iterations = Some(cfg.iterations);
    run_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image = smooth_random_image(cfg.image_size, cfg.image_size, cfg.channels, &mut rng);
    let scorer = builtin_scorer(&cfg.scorer, None, cfg.channels, cfg.seed).map_err(|e| PipelineError::Objective(e.into()))?;
    let first_word = scorer.vocabulary().tokens()[0].clone();
    let user = bag_from_text(&first_word, scorer.vocabulary())?;
    let pyramid = build_pyramid(&image, &run_cfg.scale_set, run_cfg.blur)?;
    let objective = CropObjective::new(&pyramid, &user, scorer.as_ref(), &run_cfg);
    let mut search = Search::new(objective, &run_cfg);
    let mut rows = Vec::new();
    loop {
        let started = Instant::now();
        let Some(rec) = search.step()? else { break };
        let seconds = started.elapsed().as_secs_f64();
        rows.push(BenchRow {
            iteration: rec.iteration,
            scale: rec.scale,
            restarts: rec.restarts.len(),
            evaluations: rec.restarts.iter().map(|r| r.evaluations).sum::<usize>() + 1,
            seconds,
        });
    }
    Ok(rows)
}
