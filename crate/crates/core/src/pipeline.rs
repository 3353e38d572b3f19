//! The outer search: geometric scale annealing, `K` noisy L-BFGS restarts per
//! scale, averaging of the restart optima into the next center, and global
//! best-crop tracking.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imagecore::{build_pyramid, BlurPolicy, Image, ImageError, Pyramid};
use crate::objective::{bag_from_text, total_loss, total_loss_value, CaptionBag, LossReport, ObjectiveError, Scorer};
use crate::sampler::{clip_params, multiscale_crop, multiscale_crop_values, CropParams, SamplerError};
use crate::solver::{lbfgs_minimize, Bounds, SolverConfig, SolverError, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// `N(0, σ²)` per coordinate.
    Gaussian,
    /// `U(-σ, σ)` per coordinate.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub anneal_factor: f64,
    pub min_scale: f64,
    pub restarts: usize,
    pub noise_sigma: f64,
    pub noise_kind: NoiseKind,
    pub lambda: f64,
    pub scale_set: Vec<f64>,
    pub out_size: usize,
    pub rng_seed: u64,
    /// Finite-difference step in θ for scorers without pixel gradients.
    pub fd_step: f64,
    /// Optional cap on outer iterations in addition to `min_scale`.
    pub max_iterations: Option<usize>,
    pub blur: BlurPolicy,
    pub solver: SolverConfig,
    /// Run the restarts of one scale on the rayon pool when the scorer allows.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            anneal_factor: 0.98,
            min_scale: 0.25,
            restarts: 10,
            noise_sigma: 0.05,
            noise_kind: NoiseKind::Gaussian,
            lambda: 0.01,
            scale_set: vec![0.25, 1.0 / 3.0, 0.5, 1.0],
            out_size: 224,
            rng_seed: 0,
            fd_step: 1e-3,
            max_iterations: None,
            blur: BlurPolicy::default(),
            solver: SolverConfig::default(),
            parallel: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return bad(format!("anneal factor {} not in (0, 1)", self.anneal_factor));
        }
        if !(self.min_scale > 0.0 && self.min_scale < 1.0) {
            return bad(format!("min scale {} not in (0, 1)", self.min_scale));
        }
        if self.restarts == 0 {
            return bad("at least one restart is required".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} is negative", self.noise_sigma));
        }
        if !self.lambda.is_finite() {
            return bad(format!("lambda {}", self.lambda));
        }
        if self.out_size < 2 {
            return bad(format!("output size {} is degenerate", self.out_size));
        }
        if !(self.fd_step > 0.0) {
            return bad(format!("finite-difference step {} must be positive", self.fd_step));
        }
        self.solver.validate().map_err(PipelineError::Config)
    }

    /// Every scale the run visits, in order.
    pub fn scale_schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0.. {
            if self.max_iterations.is_some_and(|m| i >= m) {
                break;
            }
            let s = anneal_scale(i, self.anneal_factor);
            if s < self.min_scale {
                break;
            }
            out.push(s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub start: (f64, f64),
    pub optimum: (f64, f64),
    pub loss: f64,
    pub termination: Termination,
    pub iterations: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub iteration: usize,
    pub scale: f64,
    /// Center the restarts were perturbed around.
    pub center: (f64, f64),
    pub restarts: Vec<RestartRecord>,
    pub aggregate: (f64, f64),
    pub aggregate_loss: f64,
    /// Global best loss after this scale.
    pub best_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRun {
    pub best_theta: CropParams,
    pub best_loss: f64,
    pub per_scale: Vec<ScaleRecord>,
    pub iterations_run: usize,
}

impl CropRun {
    fn empty() -> Self {
        Self {
            best_theta: CropParams::new(0.0, 0.0, 1.0),
            best_loss: f64::INFINITY,
            per_scale: Vec::new(),
            iterations_run: 0,
        }
    }

    fn offer(&mut self, theta: CropParams, loss: f64) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_theta = theta;
        }
    }

    /// Writes one tab-separated record per restart and per aggregate.
    pub fn write_trace(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration\tscale\tkind\tindex\tstart_x\tstart_y\topt_x\topt_y\tloss\ttermination")?;
        for rec in &self.per_scale {
            for (k, r) in rec.restarts.iter().enumerate() {
                writeln!(
                    out,
                    "{}\t{}\trestart\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    rec.iteration,
                    rec.scale,
                    k,
                    r.start.0,
                    r.start.1,
                    r.optimum.0,
                    r.optimum.1,
                    r.loss,
                    termination_name(r.termination)
                )?;
            }
            writeln!(
                out,
                "{}\t{}\taggregate\t-\t{}\t{}\t{}\t{}\t{}\t-",
                rec.iteration, rec.scale, rec.center.0, rec.center.1, rec.aggregate.0, rec.aggregate.1, rec.aggregate_loss
            )?;
        }
        Ok(())
    }
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Gradient => "gradient",
        Termination::Step => "step",
        Termination::MaxIters => "max-iters",
        Termination::LineSearchFailure => "line-search-failure",
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("run aborted after {} scale(s): {source}", partial.per_scale.len())]
    Aborted {
        #[source]
        source: ObjectiveError,
        partial: Box<CropRun>,
    },
}

/// Scale at outer iteration `i`: `factor^i`.
pub fn anneal_scale(i: usize, factor: f64) -> f64 {
    factor.powi(i as i32)
}

/// Adds zero-mean noise of spread `sigma` to each coordinate, then clips the
/// center at `scale`.
pub fn perturb(center: (f64, f64), sigma: f64, kind: NoiseKind, scale: f64, rng: &mut impl Rng) -> (f64, f64) {
    let (dx, dy) = if sigma == 0.0 {
        (0.0, 0.0)
    } else {
        match kind {
            NoiseKind::Gaussian => {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                (normal.sample(rng), normal.sample(rng))
            }
            NoiseKind::Uniform => (rng.random_range(-sigma..=sigma), rng.random_range(-sigma..=sigma)),
        }
    };
    let c = clip_params(CropParams::new(center.0 + dx, center.1 + dy, scale));
    (c.x, c.y)
}

/// Sum in ascending order, so any permutation of `values` gives the same bits.
fn ordered_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().fold(0.0, |a, v| a + v)
}

/// Coordinate-wise mean of restart optima, clipped at `next_scale`.
pub fn aggregate_restarts(optima: &[(f64, f64)], next_scale: f64) -> (f64, f64) {
    assert!(!optima.is_empty(), "at least one restart optimum");
    let k = optima.len() as f64;
    let sx = ordered_sum(optima.iter().map(|p| p.0).collect());
    let sy = ordered_sum(optima.iter().map(|p| p.1).collect());
    let c = clip_params(CropParams::new(sx / k, sy / k, next_scale));
    (c.x, c.y)
}

/// Loss of crop parameters over a fixed pyramid, caption and scorer.
pub struct CropObjective<'a> {
    pub pyramid: &'a Pyramid,
    pub user: &'a CaptionBag,
    pub scorer: &'a dyn Scorer,
    pub lambda: f64,
    pub out_size: usize,
    pub fd_step: f64,
    probe: Option<&'a (dyn Fn(&CropParams) + Sync)>,
}

fn sampler_err(e: SamplerError) -> ObjectiveError {
    ObjectiveError::Numeric(e.to_string())
}

impl<'a> CropObjective<'a> {
    pub fn new(pyramid: &'a Pyramid, user: &'a CaptionBag, scorer: &'a dyn Scorer, cfg: &RunConfig) -> Self {
        Self { pyramid, user, scorer, lambda: cfg.lambda, out_size: cfg.out_size, fd_step: cfg.fd_step, probe: None }
    }

    /// Calls `probe` with every θ handed to the scorer.
    pub fn with_probe(mut self, probe: &'a (dyn Fn(&CropParams) + Sync)) -> Self {
        self.probe = Some(probe);
        self
    }

    /// Loss at `θ` (clipped first), no gradient.
    pub fn value(&self, theta: CropParams) -> Result<LossReport, ObjectiveError> {
        let theta = clip_params(theta);
        if let Some(p) = self.probe {
            p(&theta);
        }
        let crop = multiscale_crop_values(self.pyramid, theta, self.out_size).map_err(sampler_err)?;
        total_loss_value(&crop, self.user, self.scorer, self.lambda)
    }

    /// Loss at `θ` (clipped first) with the analytic θ-gradient when the
    /// scorer provides pixel gradients.
    pub fn with_gradient(&self, theta: CropParams) -> Result<LossReport, ObjectiveError> {
        let theta = clip_params(theta);
        if let Some(p) = self.probe {
            p(&theta);
        }
        let crop = multiscale_crop(self.pyramid, theta, self.out_size).map_err(sampler_err)?;
        total_loss(&crop, self.user, self.scorer, self.lambda)
    }

    /// Loss and `∂/∂(x, y)` at fixed scale; central differences over clipped
    /// points when the scorer does not ship gradients.
    pub fn loss_and_center_gradient(&self, x: f64, y: f64, scale: f64) -> Result<(f64, [f64; 2]), ObjectiveError> {
        let theta = CropParams::new(x, y, scale);
        if self.scorer.supports_gradients() {
            let r = self.with_gradient(theta)?;
            if r.grad_available {
                return Ok((r.total, [r.grad_theta[0], r.grad_theta[1]]));
            }
        }
        let center = self.value(theta)?.total;
        let h = self.fd_step;
        let mut grad = [0.0; 2];
        for (axis, g) in grad.iter_mut().enumerate() {
            let shifted = |d: f64| {
                let mut t = theta;
                if axis == 0 {
                    t.x += d;
                } else {
                    t.y += d;
                }
                clip_params(t)
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            let span = if axis == 0 { plus.x - minus.x } else { plus.y - minus.y };
            if span > 0.0 {
                *g = (self.value(plus)?.total - self.value(minus)?.total) / span;
            }
        }
        Ok((center, grad))
    }
}

/// One local solve over the crop center at a fixed scale.
pub fn restart_solve(
    objective: &CropObjective<'_>,
    scale: f64,
    start: (f64, f64),
    solver: &SolverConfig,
) -> Result<RestartRecord, ObjectiveError> {
    let bound = (1.0 - scale).max(0.0);
    let bounds = Bounds::symmetric(2, bound);
    let f = |p: &[f64]| objective.loss_and_center_gradient(p[0], p[1], scale).map(|(l, g)| (l, g.to_vec()));
    let (best, trace) = lbfgs_minimize(f, &[start.0, start.1], &bounds, solver).map_err(|e| match e {
        SolverError::Objective(inner) => inner,
        SolverError::NonFinite { point } => ObjectiveError::Numeric(format!("loss not finite at center {point:?}")),
        SolverError::Invalid(m) => ObjectiveError::Numeric(m),
    })?;
    Ok(RestartRecord {
        start,
        optimum: (best[0], best[1]),
        loss: trace.best_loss,
        termination: trace.termination,
        iterations: trace.iterates.len() - 1,
        evaluations: trace.evaluations,
    })
}

/// Finds the best crop of `image` for `caption`.
pub fn run(image: &Image, caption: &str, scorer: &dyn Scorer, cfg: &RunConfig) -> Result<CropRun, PipelineError> {
    run_observed(image, caption, scorer, cfg, None)
}

/// [`run`] with a probe called on every θ passed to the scorer.
pub fn run_observed(
    image: &Image,
    caption: &str,
    scorer: &dyn Scorer,
    cfg: &RunConfig,
    probe: Option<&(dyn Fn(&CropParams) + Sync)>,
) -> Result<CropRun, PipelineError> {
    cfg.validate()?;
    let user = bag_from_text(caption, scorer.vocabulary())?;
    let pyramid = build_pyramid(image, &cfg.scale_set, cfg.blur)?;
    let mut objective = CropObjective::new(&pyramid, &user, scorer, cfg);
    if let Some(p) = probe {
        objective = objective.with_probe(p);
    }
    let mut search = Search::new(objective, cfg);
    while search.step()?.is_some() {}
    search.finish()
}

/// The outer loop, one scale per [`Search::step`].
pub struct Search<'a> {
    objective: CropObjective<'a>,
    cfg: &'a RunConfig,
    schedule: Vec<f64>,
    rng: ChaCha8Rng,
    run: CropRun,
    center: (f64, f64),
}

impl<'a> Search<'a> {
    pub fn new(objective: CropObjective<'a>, cfg: &'a RunConfig) -> Self {
        Self {
            objective,
            cfg,
            schedule: cfg.scale_schedule(),
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            run: CropRun::empty(),
            center: (0.0, 0.0),
        }
    }

    pub fn objective(&self) -> &CropObjective<'a> {
        &self.objective
    }

    /// Scales not yet visited.
    pub fn remaining(&self) -> usize {
        self.schedule.len() - self.run.iterations_run
    }

    /// Runs the next scale; `None` once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<&ScaleRecord>, PipelineError> {
        let iteration = self.run.iterations_run;
        let Some(&scale) = self.schedule.get(iteration) else {
            return Ok(None);
        };
        let cfg = self.cfg;
        let center = self.center;
        let starts: Vec<(f64, f64)> =
            (0..cfg.restarts).map(|_| perturb(center, cfg.noise_sigma, cfg.noise_kind, scale, &mut self.rng)).collect();
        let objective = &self.objective;
        let solve = |s: &(f64, f64)| restart_solve(objective, scale, *s, &cfg.solver);
        let parallel = cfg.parallel && objective.scorer.concurrent_safe();
        let outcomes: Vec<Result<RestartRecord, ObjectiveError>> =
            if parallel { starts.par_iter().map(solve).collect() } else { starts.iter().map(solve).collect() };
        let mut restarts = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            restarts.push(outcome.map_err(|source| self.abort(source))?);
        }
        for r in &restarts {
            self.run.offer(CropParams::new(r.optimum.0, r.optimum.1, scale), r.loss);
        }
        let optima: Vec<(f64, f64)> = restarts.iter().map(|r| r.optimum).collect();
        let next_scale = anneal_scale(iteration + 1, cfg.anneal_factor);
        let aggregate = aggregate_restarts(&optima, next_scale);
        let agg_theta = clip_params(CropParams::new(aggregate.0, aggregate.1, scale));
        let aggregate_loss = self.objective.value(agg_theta).map_err(|source| self.abort(source))?.total;
        self.run.offer(agg_theta, aggregate_loss);
        self.run.per_scale.push(ScaleRecord {
            iteration,
            scale,
            center,
            restarts,
            aggregate,
            aggregate_loss,
            best_loss: self.run.best_loss,
        });
        self.run.iterations_run = iteration + 1;
        self.center = aggregate;
        Ok(self.run.per_scale.last())
    }

    fn abort(&self, source: ObjectiveError) -> PipelineError {
        PipelineError::Aborted { source, partial: Box::new(self.run.clone()) }
    }

    pub fn finish(self) -> Result<CropRun, PipelineError> {
        if self.run.per_scale.is_empty() {
            return Err(PipelineError::Config("scale schedule is empty".into()));
        }
        Ok(self.run)
    }
}
