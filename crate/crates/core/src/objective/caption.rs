use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ObjectiveError, CAPTION_EPS};

/// Ordered list of distinct lowercase tokens; position is the word index.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Result<Self, ObjectiveError> {
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.as_ref().trim().to_lowercase()).collect();
        if tokens.is_empty() {
            return Err(ObjectiveError::InvalidVocabulary("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(ObjectiveError::InvalidVocabulary(format!("bad token {tok:?} at line {}", i + 1)));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(ObjectiveError::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// One token per line; a single trailing newline is allowed.
    pub fn parse(text: &str) -> Result<Self, ObjectiveError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::new(body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ObjectiveError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ObjectiveError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Canonical file form: tokens joined by `\n` with a trailing `\n`.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Lowercase hex SHA-256 of the canonical file form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Order-free word distribution of a caption: the mean of its one-hot word
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBag {
    pub probs: Vec<f64>,
    /// Number of recognized words.
    pub source_len: usize,
    /// Out-of-vocabulary words that were dropped.
    pub dropped: usize,
}

impl CaptionBag {
    /// Bag from explicit probabilities, e.g. fixtures.
    pub fn from_probs(probs: Vec<f64>, source_len: usize) -> Self {
        Self { probs, source_len, dropped: 0 }
    }
}

pub fn bag_from_text(text: &str, vocab: &Vocabulary) -> Result<CaptionBag, ObjectiveError> {
    let mut counts = vec![0usize; vocab.len()];
    let mut known = 0usize;
    let mut dropped = 0usize;
    for tok in tokenize(text) {
        match vocab.lookup(&tok) {
            Some(i) => {
                counts[i] += 1;
                known += 1;
            }
            None => dropped += 1,
        }
    }
    if known == 0 {
        return Err(ObjectiveError::EmptyCaption);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} out-of-vocabulary word(s) from caption");
    }
    let probs = counts.into_iter().map(|c| c as f64 / known as f64).collect();
    Ok(CaptionBag { probs, source_len: known, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLoss {
    pub value: f64,
    /// `∂loss/∂q_w` for the mean generated distribution `q`.
    pub grad_q: Vec<f64>,
    /// `∂loss/∂(step t, word w)`, i.e. `grad_q / T_c` for every step.
    pub grad_steps: Vec<Vec<f64>>,
}

/// Cross-entropy between the user bag and the mean generated distribution,
/// with the default log guard.
pub fn caption_loss(user: &CaptionBag, steps: &[Vec<f64>]) -> Result<CaptionLoss, ObjectiveError> {
    caption_loss_eps(user, steps, CAPTION_EPS)
}

/// `H(p, q) = -Σ_w p_w ln((q_w + eps) / (1 + eps))` where `q` is the mean of
/// the generated step distributions.
///
/// Dividing by `1 + eps` keeps the loss exactly zero when `q` puts all its
/// mass on a one-hot `p`, and nonnegative for any distribution `q`.
pub fn caption_loss_eps(user: &CaptionBag, steps: &[Vec<f64>], eps: f64) -> Result<CaptionLoss, ObjectiveError> {
    let dim = user.probs.len();
    if steps.is_empty() {
        return Err(ObjectiveError::Numeric("no generated caption steps".into()));
    }
    if let Some(bad) = steps.iter().find(|s| s.len() != dim) {
        return Err(ObjectiveError::VocabularyMismatch { expected: dim, got: bad.len() });
    }
    let t_c = steps.len() as f64;
    let q: Vec<f64> = (0..dim).map(|w| steps.iter().map(|s| s[w]).sum::<f64>() / t_c).collect();
    let norm = 1.0 + eps;
    let mut value = 0.0;
    let mut grad_q = vec![0.0; dim];
    for w in 0..dim {
        let p = user.probs[w];
        if p != 0.0 {
            value -= p * ((q[w] + eps) / norm).ln();
            grad_q[w] = -p / (q[w] + eps);
        }
    }
    if !value.is_finite() {
        return Err(ObjectiveError::Numeric(format!("caption loss {value}")));
    }
    let per_step: Vec<f64> = grad_q.iter().map(|g| g / t_c).collect();
    let grad_steps = vec![per_step; steps.len()];
    Ok(CaptionLoss { value, grad_q, grad_steps })
}
