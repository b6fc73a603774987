//! A position-factored tabular softmax policy.
//!
//! Logits are indexed by `(prompt, position, token)`: the prompt stands for
//! the visual input and task instruction, the position for the generated
//! prefix. All gradients are exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Floor applied to recorded generation probabilities.
pub const PROB_FLOOR: f64 = 1e-9;
pub const EOS: &str = "<eos>";
pub const DEFAULT_MAX_LEN: usize = 24;

/// Structural fragments shared by every vocabulary, in id order.
pub const STRUCTURAL_TOKENS: [&str; 9] = [
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "<rg>",
    "</rg>",
    "<ins>",
    "</ins>",
    "[semantic]",
];

const CHECKPOINT_MAGIC: &str = "saliency-policy v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("token {t:?} must be nonempty without whitespace")));
            }
            if tokens[..i].contains(t) {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        let eos = tokens
            .iter()
            .position(|t| t == EOS)
            .ok_or_else(|| Error::InvalidArgument("vocabulary lacks end-of-sequence".into()))?;
        Ok(Self { tokens, eos })
    }

    /// Structural fragments, then `content`, then end-of-sequence.
    pub fn with_content<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let tokens = STRUCTURAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(content.iter().map(|s| s.as_ref().to_string()))
            .chain(std::iter::once(EOS.to_string()))
            .collect();
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Ids for whitespace-separated fragments.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    /// Fragments joined by single spaces; end-of-sequence is not rendered.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.eos)
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    /// Generation probabilities under the sampling snapshot.
    pub probs: Vec<f64>,
    pub decoded: String,
    pub reward: f64,
    pub confidence: f64,
}

/// Mean token-wise generation probability.
pub fn confidence(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("trajectory has no tokens"));
    }
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exact categorical KL(p ‖ q).
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocabulary,
    prompts: usize,
    max_len: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(vocab: Vocabulary, prompts: usize, max_len: usize) -> Result<Self> {
        if prompts == 0 || max_len == 0 {
            return Err(Error::InvalidArgument("policy needs at least one prompt and position".into()));
        }
        let n = prompts * max_len * vocab.len();
        Ok(Self {
            vocab,
            prompts,
            max_len,
            logits: vec![0.0; n],
        })
    }

    pub fn from_logits(vocab: Vocabulary, prompts: usize, max_len: usize, logits: Vec<f64>) -> Result<Self> {
        let mut p = Self::uniform(vocab, prompts, max_len)?;
        if logits.len() != p.logits.len() {
            return Err(Error::LengthMismatch {
                left: p.logits.len(),
                right: logits.len(),
            });
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("logits must be finite".into()));
        }
        p.logits = logits;
        Ok(p)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn block_len(&self) -> usize {
        self.max_len * self.vocab.len()
    }

    fn offset(&self, prompt: usize, pos: usize) -> usize {
        (prompt * self.max_len + pos) * self.vocab.len()
    }

    fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.prompts {
            return Err(Error::InvalidArgument(format!(
                "prompt {prompt} out of range (policy has {})",
                self.prompts
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::InvalidArgument(format!("token id {t} out of range")));
        }
        Ok(())
    }

    pub fn logits_at(&self, prompt: usize, pos: usize) -> &[f64] {
        let o = self.offset(prompt, pos);
        &self.logits[o..o + self.vocab.len()]
    }

    pub fn logits_at_mut(&mut self, prompt: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(prompt, pos);
        let v = self.vocab.len();
        &mut self.logits[o..o + v]
    }

    pub fn distribution(&self, prompt: usize, pos: usize) -> Vec<f64> {
        softmax(self.logits_at(prompt, pos))
    }

    /// Draws one response, stopping at end-of-sequence or the max length.
    pub fn sample<R: Rng + ?Sized>(&self, prompt: usize, rng: &mut R) -> Result<Trajectory> {
        self.check_prompt(prompt)?;
        let mut tokens = Vec::new();
        let mut probs = Vec::new();
        for pos in 0..self.max_len {
            let dist = self.distribution(prompt, pos);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = dist.len() - 1;
            for (i, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            tokens.push(pick);
            probs.push(dist[pick].max(PROB_FLOOR));
            if pick == self.vocab.eos() {
                break;
            }
        }
        let confidence = confidence(&probs)?;
        Ok(Trajectory {
            prompt,
            decoded: self.vocab.decode(&tokens),
            tokens,
            probs,
            reward: 0.0,
            confidence,
        })
    }

    /// Probability of each token of `tokens` at its position.
    pub fn token_probs(&self, prompt: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_tokens(tokens)?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| self.distribution(prompt, pos)[t])
            .collect())
    }

    pub fn log_likelihood(&self, prompt: usize, tokens: &[usize]) -> Result<f64> {
        Ok(self.token_probs(prompt, tokens)?.iter().map(|p| p.ln()).sum())
    }

    /// Gradient of `Σ_t w_t · log π(tokens_t)` with respect to this prompt's
    /// logit block (`max_len × vocab` entries, row-major).
    pub fn weighted_logprob_gradient(&self, prompt: usize, tokens: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.check_tokens(tokens)?;
        if weights.len() != tokens.len() {
            return Err(Error::LengthMismatch {
                left: tokens.len(),
                right: weights.len(),
            });
        }
        let v = self.vocab.len();
        let mut grad = vec![0.0; self.block_len()];
        for (pos, (&tok, &w)) in tokens.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let dist = self.distribution(prompt, pos);
            let row = &mut grad[pos * v..(pos + 1) * v];
            for (g, p) in row.iter_mut().zip(&dist) {
                *g -= w * p;
            }
            row[tok] += w;
        }
        Ok(grad)
    }

    /// Gradient of the golden-sequence log-likelihood.
    pub fn sft_gradient(&self, prompt: usize, golden: &[usize]) -> Result<Vec<f64>> {
        self.weighted_logprob_gradient(prompt, golden, &vec![1.0; golden.len()])
    }

    /// Adds `lr · grad` to one prompt's logit block.
    pub fn apply_gradient(&mut self, prompt: usize, grad: &[f64], lr: f64) -> Result<()> {
        self.check_prompt(prompt)?;
        if grad.len() != self.block_len() {
            return Err(Error::LengthMismatch {
                left: self.block_len(),
                right: grad.len(),
            });
        }
        let o = self.offset(prompt, 0);
        for (z, g) in self.logits[o..o + grad.len()].iter_mut().zip(grad) {
            *z += lr * g;
        }
        Ok(())
    }

    /// One gradient-ascent step on the golden-sequence log-likelihood.
    pub fn sft_step(&mut self, prompt: usize, golden: &[usize], lr: f64) -> Result<()> {
        let grad = self.sft_gradient(prompt, golden)?;
        self.apply_gradient(prompt, &grad, lr)
    }

    fn check_shape(&self, other: &TabularPolicy) -> Result<()> {
        if self.prompts != other.prompts || self.max_len != other.max_len || self.vocab != other.vocab {
            return Err(Error::InvalidArgument(format!(
                "policy shapes differ: {}x{}x{} vs {}x{}x{}",
                self.prompts,
                self.max_len,
                self.vocab.len(),
                other.prompts,
                other.max_len,
                other.vocab.len()
            )));
        }
        Ok(())
    }

    /// Σ over positions of KL(π(·|prompt, pos) ‖ reference(·|prompt, pos)).
    pub fn kl_divergence(&self, reference: &TabularPolicy, prompt: usize) -> Result<f64> {
        self.check_shape(reference)?;
        self.check_prompt(prompt)?;
        Ok((0..self.max_len)
            .map(|pos| categorical_kl(&self.distribution(prompt, pos), &reference.distribution(prompt, pos)))
            .sum())
    }

    /// Gradient of [`Self::kl_divergence`] with respect to this policy's
    /// logit block: `p_j (ln(p_j / q_j) − KL)` per position.
    pub fn kl_gradient(&self, reference: &TabularPolicy, prompt: usize) -> Result<Vec<f64>> {
        self.check_shape(reference)?;
        self.check_prompt(prompt)?;
        let v = self.vocab.len();
        let mut grad = vec![0.0; self.block_len()];
        for pos in 0..self.max_len {
            let p = self.distribution(prompt, pos);
            let q = reference.distribution(prompt, pos);
            let kl = categorical_kl(&p, &q);
            for j in 0..v {
                if p[j] > 0.0 {
                    grad[pos * v + j] = p[j] * ((p[j] / q[j]).ln() - kl);
                }
            }
        }
        Ok(grad)
    }

    /// Textual checkpoint; logits are stored as IEEE-754 bit patterns so the
    /// round trip is exact.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(out, "prompts {}", self.prompts).unwrap();
        writeln!(out, "max_len {}", self.max_len).unwrap();
        writeln!(out, "vocab {}", self.vocab.len()).unwrap();
        for t in self.vocab.tokens() {
            writeln!(out, "{t}").unwrap();
        }
        writeln!(out, "logits").unwrap();
        for row in self.logits.chunks(self.vocab.len()) {
            let hex: Vec<String> = row.iter().map(|z| format!("{:016x}", z.to_bits())).collect();
            writeln!(out, "{}", hex.join(" ")).unwrap();
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("checkpoint line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Format(format!("checkpoint truncated before {what}")));

        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(n, "unknown checkpoint header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let (n, line) = next(name)?;
            line.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(n, &format!("expected `{name} <count>`")))
        };
        let prompts = field("prompts")?;
        let max_len = field("max_len")?;
        let vocab_len = field("vocab")?;
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            tokens.push(next("vocabulary")?.1.to_string());
        }
        let vocab = Vocabulary::new(tokens)?;
        let (n, marker) = next("logits")?;
        if marker != "logits" {
            return Err(bad(n, "expected `logits`"));
        }
        let mut logits = Vec::with_capacity(prompts * max_len * vocab_len);
        for _ in 0..prompts * max_len {
            let (n, row) = next("logit rows")?;
            let before = logits.len();
            for word in row.split_whitespace() {
                let bits = u64::from_str_radix(word, 16).map_err(|_| bad(n, "bad hex logit"))?;
                logits.push(f64::from_bits(bits));
            }
            if logits.len() - before != vocab_len {
                return Err(bad(n, "wrong number of logits in row"));
            }
        }
        Self::from_logits(vocab, prompts, max_len, logits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}
