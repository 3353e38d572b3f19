//! Smooth, differentiable stand-ins for the captioning and aesthetic
//! networks, used by tests, benchmarks and the `builtin:*` CLI scorers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{PixelGradients, Scorer, ScorerError, ScorerOutput, Vocabulary};
use crate::imagecore::Image;

/// Caption half of a builtin scorer.
pub trait CaptionModel: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;
    fn steps(&self, crop: &Image) -> Vec<Vec<f64>>;
    /// `Σ_w cot_w ∂q_w/∂pixel` where `q` is the mean of the steps.
    fn vjp(&self, crop: &Image, cotangent: &[f64]) -> Vec<f64>;
}

/// Aesthetic half of a builtin scorer.
pub trait AestheticModel: Send + Sync {
    fn score(&self, crop: &Image) -> f64;
    fn gradient(&self, crop: &Image) -> Vec<f64>;
}

/// A caption model paired with an aesthetic model, both with analytic pixel
/// gradients.
pub struct BuiltinScorer<C, A> {
    pub caption: C,
    pub aesthetic: A,
    pub input_size: Option<usize>,
}

impl<C: CaptionModel, A: AestheticModel> BuiltinScorer<C, A> {
    pub fn new(caption: C, aesthetic: A) -> Self {
        Self { caption, aesthetic, input_size: None }
    }
}

impl<C: CaptionModel, A: AestheticModel> Scorer for BuiltinScorer<C, A> {
    fn vocabulary(&self) -> &Vocabulary {
        self.caption.vocabulary()
    }

    fn input_size(&self) -> Option<usize> {
        self.input_size
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn score(&self, crop: &Image) -> Result<ScorerOutput, ScorerError> {
        Ok(ScorerOutput { caption_steps: self.caption.steps(crop), aesthetic: self.aesthetic.score(crop) })
    }

    fn pixel_gradients(&self, crop: &Image, cot: &[f64]) -> Result<Option<PixelGradients>, ScorerError> {
        if cot.len() != self.caption.vocabulary().len() {
            return Err(ScorerError::InvalidInput(format!(
                "cotangent has {} entries, vocabulary has {}",
                cot.len(),
                self.caption.vocabulary().len()
            )));
        }
        Ok(Some(PixelGradients { caption: self.caption.vjp(crop, cot), aesthetic: self.aesthetic.gradient(crop) }))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Normalized crop coordinate of pixel index `k` along an axis of `n`.
fn grid_coord(k: usize, n: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (n - 1) as f64
}

/// Per-step `softmax(W_t · features + b_t)` where the features are per-channel
/// means over a `grid x grid` partition of the crop. Weights come from a
/// seeded generator so a seed fully determines the model.
#[derive(Debug, Clone)]
pub struct SoftCaptioner {
    vocab: Vocabulary,
    channels: usize,
    grid: usize,
    // weights[t][w * dim + f]
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl SoftCaptioner {
    pub const DEFAULT_GRID: usize = 4;
    pub const DEFAULT_STEPS: usize = 5;

    pub fn new(vocab: Vocabulary, channels: usize, grid: usize, steps: usize, seed: u64) -> Self {
        assert!(grid >= 1 && steps >= 1);
        let dim = channels * grid * grid;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 4.0 / (dim as f64).sqrt();
        let mut weights = Vec::with_capacity(steps);
        let mut biases = Vec::with_capacity(steps);
        for _ in 0..steps {
            weights.push((0..v * dim).map(|_| gain * rng.sample::<f64, _>(StandardNormal)).collect());
            biases.push((0..v).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect());
        }
        Self { vocab, channels, grid, weights, biases }
    }

    pub fn with_defaults(vocab: Vocabulary, channels: usize, seed: u64) -> Self {
        Self::new(vocab, channels, Self::DEFAULT_GRID, Self::DEFAULT_STEPS, seed)
    }

    fn dim(&self) -> usize {
        self.channels * self.grid * self.grid
    }

    fn cell(&self, k: usize, n: usize) -> usize {
        (k * self.grid / n).min(self.grid - 1)
    }

    /// Cell-mean features, indexed `(cell_row * grid + cell_col) * channels + c`,
    /// and the pixel count of each cell.
    fn features(&self, crop: &Image) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(crop.channels(), self.channels, "captioner built for {} channels", self.channels);
        let (h, w, ch, g) = (crop.height(), crop.width(), self.channels, self.grid);
        let mut sums = vec![0.0; self.dim()];
        let mut counts = vec![0.0; g * g];
        for i in 0..h {
            let ci = self.cell(i, h);
            for j in 0..w {
                let cell = ci * g + self.cell(j, w);
                counts[cell] += 1.0;
                for c in 0..ch {
                    sums[cell * ch + c] += crop.get(i, j, c);
                }
            }
        }
        for (k, s) in sums.iter_mut().enumerate() {
            let n = counts[k / ch];
            if n > 0.0 {
                *s /= n;
            }
        }
        (sums, counts)
    }

    fn step_probs(&self, features: &[f64]) -> Vec<Vec<f64>> {
        let dim = self.dim();
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(wt, bt)| {
                let logits: Vec<f64> = (0..self.vocab.len())
                    .map(|w| bt[w] + wt[w * dim..(w + 1) * dim].iter().zip(features).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                softmax(&logits)
            })
            .collect()
    }
}

impl CaptionModel for SoftCaptioner {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn steps(&self, crop: &Image) -> Vec<Vec<f64>> {
        self.step_probs(&self.features(crop).0)
    }

    fn vjp(&self, crop: &Image, cot: &[f64]) -> Vec<f64> {
        let (features, counts) = self.features(crop);
        let probs = self.step_probs(&features);
        let dim = self.dim();
        let t_c = probs.len() as f64;
        let mut d_feat = vec![0.0; dim];
        for (p, wt) in probs.iter().zip(&self.weights) {
            let dp: Vec<f64> = cot.iter().map(|c| c / t_c).collect();
            let inner: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
            for w in 0..p.len() {
                let dz = p[w] * (dp[w] - inner);
                for (df, wf) in d_feat.iter_mut().zip(&wt[w * dim..(w + 1) * dim]) {
                    *df += dz * wf;
                }
            }
        }
        let (h, w, ch, g) = (crop.height(), crop.width(), self.channels, self.grid);
        let mut out = vec![0.0; h * w * ch];
        for i in 0..h {
            let ci = self.cell(i, h);
            for j in 0..w {
                let cell = ci * g + self.cell(j, w);
                for c in 0..ch {
                    out[crop.index(i, j, c)] = d_feat[cell * ch + c] / counts[cell];
                }
            }
        }
        out
    }
}

/// Two-word captioner (`subject`, `background`) whose subject probability is
/// `sigmoid(gain * (center_mean - border_mean) + offset)` over luminance.
///
/// On an image with one bright blob the caption loss for "subject" is a smooth
/// bowl around the blob: lowest when the blob sits in the crop center and the
/// crop border is dark.
#[derive(Debug, Clone)]
pub struct ContrastCaptioner {
    vocab: Vocabulary,
    pub gain: f64,
    pub offset: f64,
    /// Std of the Gaussian center window, crop-normalized units.
    pub center_width: f64,
    /// Decay length of the border weight, crop-normalized units.
    pub border_width: f64,
}

impl Default for ContrastCaptioner {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::new(["subject", "background"]).expect("static vocabulary"),
            gain: 8.0,
            offset: 0.0,
            center_width: 0.35,
            border_width: 0.1,
        }
    }
}

impl ContrastCaptioner {
    /// Normalized center and border weights per pixel. The center window
    /// factors over rows and columns and the border weight is the larger of
    /// the row and column terms, so only `h + w` exponentials are needed.
    fn windows(&self, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let gauss = |n: usize| -> Vec<f64> {
            (0..n).map(|k| (-grid_coord(k, n).powi(2) / (2.0 * self.center_width * self.center_width)).exp()).collect()
        };
        let edge = |n: usize| -> Vec<f64> {
            (0..n).map(|k| (-(1.0 - grid_coord(k, n).abs()) / self.border_width).exp()).collect()
        };
        let (gr, gc, er, ec) = (gauss(h), gauss(w), edge(h), edge(w));
        let mut center = Vec::with_capacity(h * w);
        let mut border = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                center.push(gr[i] * gc[j]);
                border.push(er[i].max(ec[j]));
            }
        }
        let (sc, sb): (f64, f64) = (center.iter().sum(), border.iter().sum());
        center.iter_mut().for_each(|c| *c /= sc);
        border.iter_mut().for_each(|b| *b /= sb);
        (center, border)
    }

    fn subject_prob(&self, crop: &Image) -> (f64, Vec<f64>) {
        let lum = crop.luminance();
        let (center, border) = self.windows(crop.height(), crop.width());
        let contrast: f64 = lum.iter().zip(center.iter().zip(&border)).map(|(l, (c, b))| l * (c - b)).sum();
        let z = self.gain * contrast + self.offset;
        let dz: Vec<f64> = center.iter().zip(&border).map(|(c, b)| self.gain * (c - b)).collect();
        (1.0 / (1.0 + (-z).exp()), dz)
    }
}

impl CaptionModel for ContrastCaptioner {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn steps(&self, crop: &Image) -> Vec<Vec<f64>> {
        let (p, _) = self.subject_prob(crop);
        vec![vec![p, 1.0 - p]]
    }

    fn vjp(&self, crop: &Image, cot: &[f64]) -> Vec<f64> {
        let (p, dz) = self.subject_prob(crop);
        let scale = (cot[0] - cot[1]) * p * (1.0 - p) / crop.channels() as f64;
        let ch = crop.channels();
        let mut out = vec![0.0; crop.data().len()];
        for (k, d) in dz.iter().enumerate() {
            for c in 0..ch {
                out[k * ch + c] = scale * d;
            }
        }
        out
    }
}

/// Uniform distribution regardless of the crop.
#[derive(Debug, Clone)]
pub struct UniformCaptioner {
    vocab: Vocabulary,
}

impl UniformCaptioner {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }
}

impl CaptionModel for UniformCaptioner {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn steps(&self, _crop: &Image) -> Vec<Vec<f64>> {
        vec![vec![1.0 / self.vocab.len() as f64; self.vocab.len()]]
    }

    fn vjp(&self, crop: &Image, _cot: &[f64]) -> Vec<f64> {
        vec![0.0; crop.data().len()]
    }
}

/// Composition score: `-w_thirds * D - w_border * E`.
///
/// `D` is the soft-nearest distance from the luminance-weighted centroid to
/// the four rule-of-thirds points (softmax-weighted mean of the distances,
/// which equals the plain distance when they tie). `E` is the mean squared
/// luminance gradient, in crop-normalized units, over a band along the crop
/// border, which penalizes content cut by the crop edge.
#[derive(Debug, Clone, Copy)]
pub struct ThirdsAesthetic {
    pub w_thirds: f64,
    pub w_border: f64,
    pub temperature: f64,
    pub band: usize,
}

impl Default for ThirdsAesthetic {
    fn default() -> Self {
        Self { w_thirds: 1.0, w_border: 0.1, temperature: 0.05, band: 2 }
    }
}

const THIRDS: [(f64, f64); 4] = [(-1.0 / 3.0, -1.0 / 3.0), (1.0 / 3.0, -1.0 / 3.0), (-1.0 / 3.0, 1.0 / 3.0), (1.0 / 3.0, 1.0 / 3.0)];

impl ThirdsAesthetic {
    fn in_band(&self, i: usize, j: usize, h: usize, w: usize) -> bool {
        i < self.band || j < self.band || i + self.band >= h || j + self.band >= w
    }

    /// Returns `(D, E)` and, when asked, `(∂D/∂lum, ∂E/∂lum)`.
    fn terms(&self, crop: &Image, grads: bool) -> (f64, f64, Option<(Vec<f64>, Vec<f64>)>) {
        let (h, w) = (crop.height(), crop.width());
        let lum = crop.luminance();
        let mass: f64 = lum.iter().sum::<f64>() + 1e-12;
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..h {
            let v = grid_coord(i, h);
            for j in 0..w {
                let l = lum[i * w + j];
                sx += l * grid_coord(j, w);
                sy += l * v;
            }
        }
        let (cx, cy) = (sx / mass, sy / mass);

        let d: Vec<f64> = THIRDS.iter().map(|(px, py)| ((cx - px).powi(2) + (cy - py).powi(2)).sqrt()).collect();
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = d.iter().map(|dk| (-(dk - dmin) / self.temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        let wts: Vec<f64> = e.iter().map(|ek| ek / z).collect();
        let soft: f64 = wts.iter().zip(&d).map(|(a, b)| a * b).sum();

        let k = (w.max(h) - 1) as f64 / 2.0;
        let mut energy = 0.0;
        let mut band_count = 0.0;
        for i in 0..h {
            for j in 0..w {
                let inside = self.in_band(i, j, h, w);
                if inside {
                    band_count += 1.0;
                }
                let l = lum[i * w + j];
                if j + 1 < w && (inside || self.in_band(i, j + 1, h, w)) {
                    energy += (k * (lum[i * w + j + 1] - l)).powi(2);
                }
                if i + 1 < h && (inside || self.in_band(i + 1, j, h, w)) {
                    energy += (k * (lum[(i + 1) * w + j] - l)).powi(2);
                }
            }
        }
        energy /= band_count;
        if !grads {
            return (soft, energy, None);
        }

        // ∂D/∂centroid through the soft-nearest weights
        let (mut dcx, mut dcy) = (0.0, 0.0);
        for (idx, (px, py)) in THIRDS.iter().enumerate() {
            let dd = wts[idx] * (1.0 - (d[idx] - soft) / self.temperature);
            if d[idx] > 0.0 {
                dcx += dd * (cx - px) / d[idx];
                dcy += dd * (cy - py) / d[idx];
            }
        }
        let mut g_soft = vec![0.0; h * w];
        let mut g_energy = vec![0.0; h * w];
        for i in 0..h {
            let v = grid_coord(i, h);
            for j in 0..w {
                let u = grid_coord(j, w);
                g_soft[i * w + j] = (dcx * (u - cx) + dcy * (v - cy)) / mass;
                let inside = self.in_band(i, j, h, w);
                let p = i * w + j;
                if j + 1 < w && (inside || self.in_band(i, j + 1, h, w)) {
                    let t = 2.0 * k * k * (lum[p + 1] - lum[p]) / band_count;
                    g_energy[p + 1] += t;
                    g_energy[p] -= t;
                }
                if i + 1 < h && (inside || self.in_band(i + 1, j, h, w)) {
                    let t = 2.0 * k * k * (lum[p + w] - lum[p]) / band_count;
                    g_energy[p + w] += t;
                    g_energy[p] -= t;
                }
            }
        }
        (soft, energy, Some((g_soft, g_energy)))
    }
}

impl AestheticModel for ThirdsAesthetic {
    fn score(&self, crop: &Image) -> f64 {
        let (d, e, _) = self.terms(crop, false);
        -self.w_thirds * d - self.w_border * e
    }

    fn gradient(&self, crop: &Image) -> Vec<f64> {
        let (_, _, g) = self.terms(crop, true);
        let (g_soft, g_energy) = g.expect("requested");
        let ch = crop.channels();
        let mut out = vec![0.0; crop.data().len()];
        for (p, (a, b)) in g_soft.iter().zip(&g_energy).enumerate() {
            let v = (-self.w_thirds * a - self.w_border * b) / ch as f64;
            for c in 0..ch {
                out[p * ch + c] = v;
            }
        }
        out
    }
}

/// Always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroAesthetic;

impl AestheticModel for ZeroAesthetic {
    fn score(&self, _crop: &Image) -> f64 {
        0.0
    }

    fn gradient(&self, crop: &Image) -> Vec<f64> {
        vec![0.0; crop.data().len()]
    }
}

/// Mean of all samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanIntensity;

impl AestheticModel for MeanIntensity {
    fn score(&self, crop: &Image) -> f64 {
        crop.data().iter().sum::<f64>() / crop.data().len() as f64
    }

    fn gradient(&self, crop: &Image) -> Vec<f64> {
        vec![1.0 / crop.data().len() as f64; crop.data().len()]
    }
}

/// Vocabulary used by the seeded soft captioner when none is supplied.
pub fn default_vocabulary() -> Vocabulary {
    Vocabulary::new([
        "sky", "dog", "cat", "tree", "person", "car", "water", "building", "flower", "grass", "road", "bird",
    ])
    .expect("static vocabulary")
}

/// Seeded soft captioner plus rule-of-thirds aesthetic.
pub fn synthetic_scorer(vocab: Vocabulary, channels: usize, seed: u64) -> BuiltinScorer<SoftCaptioner, ThirdsAesthetic> {
    BuiltinScorer::new(SoftCaptioner::with_defaults(vocab, channels, seed), ThirdsAesthetic::default())
}

/// Blob-seeking contrast captioner plus rule-of-thirds aesthetic.
pub fn heatmap_scorer() -> BuiltinScorer<ContrastCaptioner, ThirdsAesthetic> {
    BuiltinScorer::new(ContrastCaptioner::default(), ThirdsAesthetic::default())
}

/// A scorer whose loss never changes.
pub fn constant_scorer(vocab: Vocabulary) -> BuiltinScorer<UniformCaptioner, ZeroAesthetic> {
    BuiltinScorer::new(UniformCaptioner::new(vocab), ZeroAesthetic)
}

/// Flat caption term, so only the aesthetic term moves the loss.
pub fn aesthetic_only_scorer(vocab: Vocabulary) -> BuiltinScorer<UniformCaptioner, ThirdsAesthetic> {
    BuiltinScorer::new(UniformCaptioner::new(vocab), ThirdsAesthetic::default())
}

/// Names accepted by [`builtin_scorer`].
pub const BUILTIN_NAMES: [&str; 4] = ["synthetic", "heatmap", "constant", "aesthetic"];

/// Builds a builtin scorer by name. `vocab` overrides the default vocabulary
/// where the scorer has a free vocabulary.
pub fn builtin_scorer(
    name: &str,
    vocab: Option<Vocabulary>,
    channels: usize,
    seed: u64,
) -> Result<Box<dyn Scorer>, ScorerError> {
    let vocab = vocab.unwrap_or_else(default_vocabulary);
    Ok(match name {
        "synthetic" => Box::new(synthetic_scorer(vocab, channels, seed)),
        "heatmap" => Box::new(heatmap_scorer()),
        "constant" => Box::new(constant_scorer(vocab)),
        "aesthetic" => Box::new(aesthetic_only_scorer(vocab)),
        other => {
            return Err(ScorerError::InvalidInput(format!(
                "unknown builtin scorer '{other}' (expected one of {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    })
}
