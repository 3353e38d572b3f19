//! Limited-memory BFGS with a strong-Wolfe line search and per-coordinate box
//! projection of every trial point.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Curvature pairs with `sᵀy` at or below this are not stored.
pub const CURVATURE_EPS: f64 = 1e-10;

const MAX_LINE_SEARCH_EVALS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { memory: 10, max_iters: 50, grad_tol: 1e-6, step_tol: 1e-9, wolfe_c1: 1e-4, wolfe_c2: 0.9 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(format!("need 0 < c1 < c2 < 1, got c1={} c2={}", self.wolfe_c1, self.wolfe_c2));
        }
        if self.memory == 0 {
            return Err("memory must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    Step,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub point: Vec<f64>,
    pub loss: f64,
    /// Norm of the projected gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    /// Starting point followed by every accepted iterate.
    pub iterates: Vec<Iterate>,
    pub termination: Termination,
    /// `sᵀy` of every stored curvature pair.
    pub curvature: Vec<f64>,
    pub skipped_pairs: usize,
    pub evaluations: usize,
    /// Loss at the returned point.
    pub best_loss: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SolverError<E> {
    #[error("objective is not finite at {point:?}")]
    NonFinite { point: Vec<f64> },
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Objective(E),
}

/// Per-coordinate closed intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; dim], vec![f64::INFINITY; dim])
    }

    /// `[-half, half]` in every coordinate.
    pub fn symmetric(dim: usize, half: f64) -> Self {
        Self::new(vec![-half; dim], vec![half; dim])
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| v >= lo && v <= hi)
    }

    /// Gradient with components that push against an active bound removed.
    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let blocked = (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0);
                if blocked {
                    0.0
                } else {
                    g[i]
                }
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, sy: f64) {
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, sy));
    }

    /// Two-loop recursion: returns `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, sy) in self.pairs.iter().rev() {
            let a = dot(s, &q) / sy;
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((_, y, sy)) = self.pairs.back() {
            let gamma = sy / dot(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, y, sy), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = dot(y, &q) / sy;
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|qi| *qi = -*qi);
        q
    }
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

struct Problem<'a, F> {
    f: F,
    bounds: &'a Bounds,
    evaluations: usize,
    best: Option<(Vec<f64>, f64)>,
}

impl<F, E> Problem<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>), SolverError<E>> {
        let (f, g) = (self.f)(x).map_err(SolverError::Objective)?;
        self.evaluations += 1;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) || g.len() != x.len() {
            return Err(SolverError::NonFinite { point: x.to_vec() });
        }
        if self.best.as_ref().is_none_or(|(_, b)| f < *b) {
            self.best = Some((x.to_vec(), f));
        }
        Ok((f, g))
    }

    /// Evaluates `P(x + alpha d)` and the slope of the projected path there.
    fn trial(&mut self, x: &[f64], d: &[f64], alpha: f64) -> Result<Trial, SolverError<E>> {
        let mut xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        self.bounds.project(&mut xt);
        let (f, g) = self.eval(&xt)?;
        let slope = (0..x.len())
            .filter(|&i| {
                let raw = x[i] + alpha * d[i];
                raw > self.bounds.lower[i] && raw < self.bounds.upper[i]
            })
            .map(|i| g[i] * d[i])
            .sum();
        Ok(Trial { alpha, x: xt, f, g, slope })
    }

    /// Strong-Wolfe line search (bracketing then zoom with safeguarded cubic
    /// interpolation). `None` when no point with sufficient decrease is found.
    fn line_search(
        &mut self,
        x: &[f64],
        f0: f64,
        d: &[f64],
        slope0: f64,
        alpha0: f64,
        cfg: &SolverConfig,
    ) -> Result<Option<Trial>, SolverError<E>> {
        let armijo = |t: &Trial| t.f <= f0 + cfg.wolfe_c1 * t.alpha * slope0 && t.f < f0;
        let curvature = |t: &Trial| t.slope.abs() <= -cfg.wolfe_c2 * slope0;

        let origin = Trial { alpha: 0.0, x: x.to_vec(), f: f0, g: Vec::new(), slope: slope0 };
        let mut prev = origin;
        let mut alpha = alpha0;
        let mut evals = 0;
        let (mut lo, mut hi) = loop {
            let t = self.trial(x, d, alpha)?;
            evals += 1;
            if !armijo(&t) || (prev.alpha > 0.0 && t.f >= prev.f) {
                break (prev, t);
            }
            if curvature(&t) {
                return Ok(Some(t));
            }
            if t.slope >= 0.0 {
                break (t, prev);
            }
            if evals >= MAX_LINE_SEARCH_EVALS {
                return Ok(Some(t));
            }
            alpha = (alpha * 4.0).min(1e10);
            prev = t;
        };

        while evals < MAX_LINE_SEARCH_EVALS {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= f64::EPSILON * b.max(1.0) {
                break;
            }
            let guess = cubic_min(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope);
            let margin = 0.1 * width;
            let alpha = match guess {
                Some(g) if g > a + margin && g < b - margin => g,
                _ => 0.5 * (a + b),
            };
            let t = self.trial(x, d, alpha)?;
            evals += 1;
            if !armijo(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if curvature(&t) {
                    return Ok(Some(t));
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        // out of budget: keep the sufficient-decrease end of the bracket
        Ok((lo.alpha > 0.0).then_some(lo))
    }
}

/// Minimizer of the cubic through two points with slopes.
fn cubic_min(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> Option<f64> {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Minimizes `f` (returning loss and gradient) from `x0` within `bounds`.
///
/// Returns the best point evaluated, which is the last accepted iterate unless
/// the line search failed after probing a lower trial point.
pub fn lbfgs_minimize<F, E>(
    f: F,
    x0: &[f64],
    bounds: &Bounds,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveTrace), SolverError<E>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    cfg.validate().map_err(SolverError::Invalid)?;
    if x0.len() != bounds.lower.len() {
        return Err(SolverError::Invalid(format!("start has {} coordinates, bounds {}", x0.len(), bounds.lower.len())));
    }
    let mut problem = Problem { f, bounds, evaluations: 0, best: None };
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = problem.eval(&x)?;
    let mut history = History { pairs: VecDeque::with_capacity(cfg.memory), capacity: cfg.memory };
    let mut trace = SolveTrace {
        iterates: vec![Iterate { point: x.clone(), loss: fx, grad_norm: norm(&bounds.projected_gradient(&x, &g)) }],
        termination: Termination::MaxIters,
        curvature: Vec::new(),
        skipped_pairs: 0,
        evaluations: 0,
        best_loss: fx,
    };

    let mut termination = Termination::MaxIters;
    if trace.iterates[0].grad_norm <= cfg.grad_tol {
        termination = Termination::Gradient;
    } else {
        for _ in 0..cfg.max_iters {
            let pg = bounds.projected_gradient(&x, &g);
            let mut d = history.direction(&g);
            for i in 0..d.len() {
                if (x[i] <= bounds.lower[i] && d[i] < 0.0) || (x[i] >= bounds.upper[i] && d[i] > 0.0) {
                    d[i] = 0.0;
                }
            }
            let mut slope = dot(&d, &g);
            if !(slope < 0.0) {
                history.pairs.clear();
                d = pg.iter().map(|v| -v).collect();
                slope = dot(&d, &g);
                if !(slope < 0.0) {
                    termination = Termination::Gradient;
                    break;
                }
            }
            let alpha0 = if history.pairs.is_empty() { (1.0 / norm(&d)).min(1.0) } else { 1.0 };
            let Some(t) = problem.line_search(&x, fx, &d, slope, alpha0, cfg)? else {
                termination = Termination::LineSearchFailure;
                break;
            };

            let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > CURVATURE_EPS {
                trace.curvature.push(sy);
                history.push(s.clone(), y, sy);
            } else {
                trace.skipped_pairs += 1;
            }
            x = t.x;
            fx = t.f;
            g = t.g;
            let grad_norm = norm(&bounds.projected_gradient(&x, &g));
            trace.iterates.push(Iterate { point: x.clone(), loss: fx, grad_norm });
            if grad_norm <= cfg.grad_tol {
                termination = Termination::Gradient;
                break;
            }
            if norm(&s) <= cfg.step_tol {
                termination = Termination::Step;
                break;
            }
        }
    }
    trace.termination = termination;
    trace.evaluations = problem.evaluations;
    let (best, best_loss) = problem.best.expect("at least one evaluation");
    trace.best_loss = best_loss;
    Ok((best, trace))
}
