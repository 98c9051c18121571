//! A small autoregressive categorical policy over a template vocabulary.
//!
//! The policy conditions on `feature_id` (standing in for the image), the
//! position bucket, the previous token, and the section it is writing (the
//! last tag emitted so far). Its logits are a factorized sum
//!
//! ```text
//! logit[v] = position[b][v] + bigram[prev][v] + section[s][v] + feature[f][b][v]
//!          + cls_head[f][label(v)]     (only when prev = [VERDICT] and v is a label token)
//! ```
//!
//! so the classification head trained during warmup directly sets the
//! verdict-token distribution used in generation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rationale::{parse_completion, Label, Sample, Verdict, GROUNDING_TAG, INFERENCE_TAG, VERDICT_TAG};

pub const EOS_TOKEN: &str = "<eos>";
pub const HARMFUL_TOKEN: &str = "HARMFUL";
pub const BENIGN_TOKEN: &str = "BENIGN";

const CHECKPOINT_MAGIC: &[u8; 4] = b"TPOL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("vocabulary is missing required token {0:?}")]
    MissingToken(&'static str),
    #[error("vocabulary contains duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownTokenId { id: usize, vocab: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("invalid policy shape: {0}")]
    Shape(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// Number of section states: before any tag, then after each of the three tags.
const SECTIONS: usize = 4;

/// What the next-token distribution conditions on besides feature and position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeState {
    pub prev: Option<usize>,
    /// 0 before any tag; 1, 2, 3 after grounding, inference, verdict respectively.
    pub section: usize,
}

impl DecodeState {
    pub const START: DecodeState = DecodeState { prev: None, section: 0 };
}

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Ancestral sampling from `softmax(logits / temperature)`; temperature > 0.
    Sample { temperature: f64 },
    /// Argmax at every step (the zero-temperature limit).
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Log-probabilities of each emitted token under the decoding distribution
    /// (temperature-scaled when sampling, the policy itself when greedy).
    pub log_probs: Vec<f64>,
}

/// Gradient buffer with the same layout as the policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub context: Vec<f64>,
    pub cls_head: Vec<f64>,
}

impl PolicyGradient {
    pub fn flat(&self) -> Vec<f64> {
        self.context.iter().chain(&self.cls_head).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.context.iter().chain(&self.cls_head).map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    num_features: usize,
    num_buckets: usize,
    max_len: usize,
    eos: usize,
    grounding_tag: usize,
    inference_tag: usize,
    verdict_tag: usize,
    harmful: usize,
    benign: usize,
    /// `[position: B×V] ++ [bigram: (V+1)×V] ++ [section: 4×V] ++ [feature: F×B×V]`;
    /// bigram row V is the start state.
    context: Vec<f64>,
    /// `F×2`, columns ordered benign, harmful.
    cls_head: Vec<f64>,
}

struct Layout {
    v: usize,
    b: usize,
    bigram_off: usize,
    section_off: usize,
    feature_off: usize,
    len: usize,
}

impl ToyPolicy {
    /// Vocabulary used by the bundled synthetic task.
    pub fn default_vocab() -> Vec<String> {
        [
            EOS_TOKEN,
            GROUNDING_TAG,
            INFERENCE_TAG,
            VERDICT_TAG,
            HARMFUL_TOKEN,
            BENIGN_TOKEN,
            "the",
            "image",
            "shows",
            "a",
            "person",
            "and",
            "text",
            "caption",
            "says",
            "together",
            "because",
            "implies",
            "mocks",
            "harmless",
            "not",
            "obviously",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    /// Zero-initialized (uniform) policy.
    pub fn new(
        vocab: Vec<String>,
        num_features: usize,
        num_buckets: usize,
        max_len: usize,
    ) -> Result<Self, PolicyError> {
        if num_features == 0 || num_buckets == 0 || max_len == 0 {
            return Err(PolicyError::Shape("num_features, num_buckets and max_len must be positive".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(PolicyError::DuplicateToken(t.clone()));
            }
        }
        let find = |t: &'static str| index.get(t).copied().ok_or(PolicyError::MissingToken(t));
        let eos = find(EOS_TOKEN)?;
        let grounding_tag = find(GROUNDING_TAG)?;
        let inference_tag = find(INFERENCE_TAG)?;
        let verdict_tag = find(VERDICT_TAG)?;
        let harmful = find(HARMFUL_TOKEN)?;
        let benign = find(BENIGN_TOKEN)?;
        let mut p = ToyPolicy {
            vocab,
            index,
            num_features,
            num_buckets,
            max_len,
            eos,
            grounding_tag,
            inference_tag,
            verdict_tag,
            harmful,
            benign,
            context: Vec::new(),
            cls_head: vec![0.0; num_features * 2],
        };
        p.context = vec![0.0; p.layout().len];
        Ok(p)
    }

    /// Default vocabulary, one bucket per position.
    pub fn with_default_vocab(num_features: usize, max_len: usize) -> Self {
        Self::new(Self::default_vocab(), num_features, max_len, max_len).expect("default vocabulary is valid")
    }

    /// Fills every parameter with `N(0, scale²)`-ish noise (uniform in `[-scale, scale]`).
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.context.iter_mut().chain(self.cls_head.iter_mut()) {
            *p = rng.gen_range(-scale..=scale);
        }
    }

    /// Adds `delta` to the position logit of `token` in every bucket.
    pub fn add_token_bias(&mut self, token: usize, delta: f64) {
        let v = self.vocab.len();
        for b in 0..self.num_buckets {
            self.context[b * v + token] += delta;
        }
    }

    fn add_section_bias(&mut self, section: usize, token: usize, delta: f64) {
        let l = self.layout();
        self.context[l.section_off + section * l.v + token] += delta;
    }

    fn add_bigram_bias(&mut self, prev: usize, token: usize, delta: f64) {
        let l = self.layout();
        self.context[l.bigram_off + prev * l.v + token] += delta;
    }

    /// Biases a fresh policy toward the tag template, standing in for a
    /// prompted base model that already follows the output format but knows
    /// nothing about the labels: tags in order and at most once each, label
    /// tokens only right after `[VERDICT]`, and the end token only after a
    /// label. Label choice stays symmetric.
    pub fn apply_template_prior(&mut self, strength: f64) {
        let s = strength;
        let (g, i, v) = (self.grounding_tag, self.inference_tag, self.verdict_tag);
        self.add_section_bias(0, g, s);
        for (section, tokens) in [(0, vec![i, v]), (1, vec![g, v]), (2, vec![g, i]), (3, vec![g, i, v])] {
            for t in tokens {
                self.add_section_bias(section, t, -s);
            }
        }
        for label in [self.harmful, self.benign] {
            self.add_token_bias(label, -s);
            self.add_bigram_bias(v, label, 2.0 * s);
            self.add_bigram_bias(label, self.eos, 2.0 * s);
        }
        self.add_token_bias(self.eos, -s);
    }

    fn layout(&self) -> Layout {
        let v = self.vocab.len();
        let b = self.num_buckets;
        let bigram_off = b * v;
        let section_off = bigram_off + (v + 1) * v;
        let feature_off = section_off + SECTIONS * v;
        Layout { v, b, bigram_off, section_off, feature_off, len: feature_off + self.num_features * b * v }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, PolicyError> {
        tokens
            .iter()
            .map(|t| self.token_id(t.as_ref()).ok_or_else(|| PolicyError::UnknownToken(t.as_ref().to_string())))
            .collect()
    }

    /// Space-joined completion text; the end token is not rendered.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().filter(|&&t| t != self.eos).map(|&t| self.vocab[t].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn param_count(&self) -> usize {
        self.context.len() + self.cls_head.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        if i < self.context.len() {
            self.context[i]
        } else {
            self.cls_head[i - self.context.len()]
        }
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        if i < self.context.len() {
            self.context[i] = value;
        } else {
            let off = self.context.len();
            self.cls_head[i - off] = value;
        }
    }

    pub fn cls_head(&self) -> &[f64] {
        &self.cls_head
    }

    pub fn zero_gradient(&self) -> PolicyGradient {
        PolicyGradient { context: vec![0.0; self.context.len()], cls_head: vec![0.0; self.cls_head.len()] }
    }

    /// `θ += step · g`.
    pub fn apply_gradient(&mut self, g: &PolicyGradient, step: f64) {
        for (p, d) in self.context.iter_mut().zip(&g.context) {
            *p += step * d;
        }
        for (p, d) in self.cls_head.iter_mut().zip(&g.cls_head) {
            *p += step * d;
        }
    }

    /// Euclidean distance between two same-shape parameter vectors.
    pub fn param_distance(&self, other: &ToyPolicy) -> f64 {
        self.context
            .iter()
            .zip(&other.context)
            .chain(self.cls_head.iter().zip(&other.cls_head))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_architecture(&self, other: &ToyPolicy) -> bool {
        self.vocab == other.vocab
            && self.num_features == other.num_features
            && self.num_buckets == other.num_buckets
            && self.max_len == other.max_len
    }

    fn feature(&self, sample: &Sample) -> usize {
        sample.feature_id % self.num_features
    }

    fn bucket(&self, position: usize) -> usize {
        (position.min(self.max_len - 1) * self.num_buckets / self.max_len).min(self.num_buckets - 1)
    }

    fn label_of(&self, token: usize) -> Option<Label> {
        if token == self.harmful {
            Some(Label::Harmful)
        } else if token == self.benign {
            Some(Label::Benign)
        } else {
            None
        }
    }

    /// Decoding state after emitting `token` from `state`.
    pub fn advance(&self, state: DecodeState, token: usize) -> DecodeState {
        let section = if token == self.grounding_tag {
            1
        } else if token == self.inference_tag {
            2
        } else if token == self.verdict_tag {
            3
        } else {
            state.section
        };
        DecodeState { prev: Some(token), section }
    }

    /// Unscaled logits for the next token. `feature` is reduced modulo the
    /// number of feature classes.
    pub fn logits(&self, feature: usize, position: usize, state: DecodeState) -> Vec<f64> {
        let feature = feature % self.num_features;
        let l = self.layout();
        let b = self.bucket(position);
        let prev_row = state.prev.unwrap_or(l.v);
        let pos = &self.context[b * l.v..(b + 1) * l.v];
        let big = &self.context[l.bigram_off + prev_row * l.v..l.bigram_off + (prev_row + 1) * l.v];
        let so = l.section_off + state.section * l.v;
        let sec = &self.context[so..so + l.v];
        let fo = l.feature_off + (feature * l.b + b) * l.v;
        let feat = &self.context[fo..fo + l.v];
        let mut out: Vec<f64> = (0..l.v).map(|i| pos[i] + big[i] + sec[i] + feat[i]).collect();
        if state.prev == Some(self.verdict_tag) {
            out[self.benign] += self.cls_head[feature * 2];
            out[self.harmful] += self.cls_head[feature * 2 + 1];
        }
        out
    }

    /// Generates up to `max_len` tokens (capped by the policy's own length),
    /// stopping after the end token.
    pub fn generate(&self, sample: &Sample, decoding: Decoding, max_len: usize, seed: u64) -> Generation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.generate_with(sample, decoding, max_len, &mut rng)
    }

    pub fn generate_with<R: Rng + ?Sized>(
        &self,
        sample: &Sample,
        decoding: Decoding,
        max_len: usize,
        rng: &mut R,
    ) -> Generation {
        let f = self.feature(sample);
        let len = max_len.min(self.max_len);
        let mut tokens = Vec::with_capacity(len);
        let mut log_probs = Vec::with_capacity(len);
        let mut state = DecodeState::START;
        for t in 0..len {
            let logits = self.logits(f, t, state);
            let (next, lp) = match decoding {
                Decoding::Greedy => {
                    let lsm = log_softmax(&logits, 1.0);
                    let best = argmax(&lsm);
                    (best, lsm[best])
                }
                Decoding::Sample { temperature } => {
                    let lsm = log_softmax(&logits, temperature);
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = lsm.len() - 1;
                    for (i, lp) in lsm.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    (pick, lsm[pick])
                }
            };
            tokens.push(next);
            log_probs.push(lp);
            if next == self.eos {
                break;
            }
            state = self.advance(state, next);
        }
        Generation { tokens, log_probs }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t >= self.vocab.len()) {
            Some(&id) => Err(PolicyError::UnknownTokenId { id, vocab: self.vocab.len() }),
            None => Ok(()),
        }
    }

    /// Per-token log-probabilities of `tokens` under the policy (temperature 1).
    pub fn token_log_probs(&self, sample: &Sample, tokens: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(tokens)?;
        let f = self.feature(sample);
        let mut state = DecodeState::START;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let lp = log_softmax(&self.logits(f, t, state), 1.0)[tok];
                state = self.advance(state, tok);
                lp
            })
            .collect())
    }

    pub fn sequence_log_prob(&self, sample: &Sample, tokens: &[usize]) -> Result<f64, PolicyError> {
        Ok(self.token_log_probs(sample, tokens)?.iter().sum())
    }

    /// Adds `weight · ∇θ log P(tokens)` into `grad`.
    pub fn accumulate_log_prob_gradient(
        &self,
        sample: &Sample,
        tokens: &[usize],
        weight: f64,
        grad: &mut PolicyGradient,
    ) -> Result<(), PolicyError> {
        self.check_tokens(tokens)?;
        if weight == 0.0 {
            return Ok(());
        }
        let l = self.layout();
        let f = self.feature(sample);
        let mut state = DecodeState::START;
        for (t, &tok) in tokens.iter().enumerate() {
            let lsm = log_softmax(&self.logits(f, t, state), 1.0);
            let b = self.bucket(t);
            let prev_row = state.prev.unwrap_or(l.v);
            let so = l.section_off + state.section * l.v;
            let fo = l.feature_off + (f * l.b + b) * l.v;
            for (v, lp) in lsm.iter().enumerate() {
                // d log p(tok) / d logit[v] = [v == tok] - p[v]
                let d = weight * (f64::from(u8::from(v == tok)) - lp.exp());
                grad.context[b * l.v + v] += d;
                grad.context[l.bigram_off + prev_row * l.v + v] += d;
                grad.context[so + v] += d;
                grad.context[fo + v] += d;
                if state.prev == Some(self.verdict_tag) {
                    if let Some(label) = self.label_of(v) {
                        grad.cls_head[f * 2 + label as usize] += d;
                    }
                }
            }
            state = self.advance(state, tok);
        }
        Ok(())
    }

    /// Verdict parsed from the greedy completion.
    pub fn greedy_verdict(&self, sample: &Sample) -> Verdict {
        let g = self.generate(sample, Decoding::Greedy, self.max_len, 0);
        parse_completion(&self.render(&g.tokens)).verdict
    }

    /// Classification-head distribution `softmax(W_cls[f])` as (benign, harmful).
    pub fn label_probs(&self, sample: &Sample) -> [f64; 2] {
        let f = self.feature(sample);
        let lsm = log_softmax(&self.cls_head[f * 2..f * 2 + 2], 1.0);
        [lsm[0].exp(), lsm[1].exp()]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::data_io::write_atomic(path.as_ref(), &buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }

    /// Binary checkpoint, all integers and floats little-endian:
    /// `"TPOL" u32:version u32:V (u32:len bytes)×V u32:F u32:B u32:max_len
    ///  u64:n f64×n (context) u64:m f64×m (cls_head)`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), PolicyError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for t in &self.vocab {
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        for n in [self.num_features, self.num_buckets, self.max_len] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for block in [&self.context, &self.cls_head] {
            w.write_all(&(block.len() as u64).to_le_bytes())?;
            for x in block.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, PolicyError> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32, PolicyError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn floats<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>, PolicyError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let n = u64::from_le_bytes(b) as usize;
            if n != expected {
                return Err(PolicyError::Checkpoint(format!("expected {expected} parameters, found {n}")));
            }
            (0..n)
                .map(|_| {
                    r.read_exact(&mut b)?;
                    Ok(f64::from_le_bytes(b))
                })
                .collect()
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let version = u32_of(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
        }
        let v = u32_of(r)? as usize;
        let mut vocab = Vec::with_capacity(v.min(1 << 16));
        for _ in 0..v {
            let n = u32_of(r)? as usize;
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            vocab.push(String::from_utf8(bytes).map_err(|e| PolicyError::Checkpoint(e.to_string()))?);
        }
        let (f, b, m) = (u32_of(r)? as usize, u32_of(r)? as usize, u32_of(r)? as usize);
        let mut p = ToyPolicy::new(vocab, f, b, m)?;
        p.context = floats(r, p.context.len())?;
        p.cls_head = floats(r, p.cls_head.len())?;
        Ok(p)
    }
}

pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|x| x - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// `None` trains full-batch; otherwise shuffled minibatches of this size.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

/// Warmup: cross-entropy of the classification head against gold labels,
/// minimized by gradient descent. Returns the updated policy and the mean
/// loss of each epoch (measured before that epoch's updates).
pub fn sft_warmup(policy: &ToyPolicy, train: &[Sample], cfg: &SftConfig) -> Result<(ToyPolicy, Vec<f64>), PolicyError> {
    if train.is_empty() {
        return Err(PolicyError::EmptyTrainingSet);
    }
    let mut p = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.unwrap_or(train.len()).clamp(1, train.len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if batch < train.len() {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; p.cls_head.len()];
            for &i in chunk {
                let s = &train[i];
                let f = p.feature(s);
                let probs = p.label_probs(s);
                let y = s.label as usize;
                epoch_loss -= probs[y].max(f64::MIN_POSITIVE).ln();
                for (k, prob) in probs.iter().enumerate() {
                    grad[f * 2 + k] += prob - f64::from(u8::from(k == y));
                }
            }
            let scale = cfg.learning_rate / chunk.len() as f64;
            for (w, g) in p.cls_head.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
        }
        curve.push(epoch_loss / train.len() as f64);
    }
    Ok((p, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_vocab() -> Vec<String> {
        [EOS_TOKEN, GROUNDING_TAG, INFERENCE_TAG, VERDICT_TAG, HARMFUL_TOKEN, BENIGN_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn vocab_must_contain_tags_and_labels() {
        let mut v = minimal_vocab();
        v.retain(|t| t != VERDICT_TAG);
        assert!(matches!(ToyPolicy::new(v, 1, 1, 4), Err(PolicyError::MissingToken(VERDICT_TAG))));
        let mut v = minimal_vocab();
        v.push("HARMFUL".into());
        assert!(matches!(ToyPolicy::new(v, 1, 1, 4), Err(PolicyError::DuplicateToken(_))));
    }

    #[test]
    fn softmax_rows_normalized_after_random_init() {
        let mut p = ToyPolicy::with_default_vocab(2, 8);
        p.randomize(3, 5.0);
        let mut state = DecodeState::START;
        for t in 0..8 {
            for f in 0..2 {
                let s: f64 = log_softmax(&p.logits(f, t, state), 1.0).iter().map(|x| x.exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            state = p.advance(state, t % p.vocab_size());
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let mut p = ToyPolicy::with_default_vocab(2, 12);
        p.randomize(1, 1.0);
        let s = Sample::new("a", Label::Harmful, 1);
        let a = p.generate(&s, Decoding::Greedy, 12, 1);
        let b = p.generate(&s, Decoding::Greedy, 12, 999);
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let mut p = ToyPolicy::with_default_vocab(2, 20);
        p.randomize(2, 1.0);
        let s = Sample::new("a", Label::Benign, 0);
        let d = Decoding::Sample { temperature: 1.0 };
        assert_eq!(p.generate(&s, d, 20, 42), p.generate(&s, d, 20, 42));
        assert_ne!(p.generate(&s, d, 20, 42).tokens, p.generate(&s, d, 20, 43).tokens);
    }

    #[test]
    fn enumerated_length_one_outcomes_sum_to_one() {
        // Length-1 generations over the minimal vocabulary: every token is a
        // possible complete outcome.
        let mut p = ToyPolicy::new(minimal_vocab(), 1, 1, 1).unwrap();
        p.randomize(9, 2.0);
        let s = Sample::new("x", Label::Benign, 0);
        let total: f64 = (0..p.vocab_size()).map(|tok| p.sequence_log_prob(&s, &[tok]).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Sampling frequencies agree with the enumerated probabilities.
        let n = 20_000;
        let mut hits = vec![0usize; p.vocab_size()];
        for seed in 0..n {
            hits[p.generate(&s, Decoding::Sample { temperature: 1.0 }, 1, seed).tokens[0]] += 1;
        }
        for (tok, hit) in hits.iter().enumerate() {
            let expected = p.sequence_log_prob(&s, &[tok]).unwrap().exp();
            assert!((*hit as f64 / n as f64 - expected).abs() < 0.015);
        }
    }

    #[test]
    fn sampled_log_probs_round_trip() {
        let mut p = ToyPolicy::with_default_vocab(2, 30);
        p.randomize(5, 1.5);
        for seed in 0..20 {
            let s = Sample::new("x", Label::Harmful, seed as usize);
            let g = p.generate(&s, Decoding::Sample { temperature: 1.0 }, 30, seed);
            let total: f64 = g.log_probs.iter().sum();
            assert!((p.sequence_log_prob(&s, &g.tokens).unwrap() - total).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_log_probs_are_exact_for_sampling_distribution() {
        let mut p = ToyPolicy::with_default_vocab(1, 5);
        p.randomize(8, 1.0);
        let s = Sample::new("x", Label::Harmful, 0);
        let g = p.generate(&s, Decoding::Sample { temperature: 0.5 }, 5, 7);
        let mut state = DecodeState::START;
        for (t, (&tok, &lp)) in g.tokens.iter().zip(&g.log_probs).enumerate() {
            assert!((log_softmax(&p.logits(0, t, state), 0.5)[tok] - lp).abs() < 1e-12);
            state = p.advance(state, tok);
        }
    }

    #[test]
    fn uniform_policy_closed_form() {
        let p = ToyPolicy::with_default_vocab(1, 10);
        let s = Sample::new("x", Label::Harmful, 0);
        let v = p.vocab_size() as f64;
        assert_eq!(p.sequence_log_prob(&s, &[]).unwrap(), 0.0);
        let toks = vec![3, 1, 4, 1, 5, 9, 2];
        let lp = p.sequence_log_prob(&s, &toks).unwrap();
        assert!((lp - (-(toks.len() as f64) * v.ln())).abs() < 1e-12);
    }

    #[test]
    fn unknown_tokens_error() {
        let p = ToyPolicy::with_default_vocab(1, 10);
        let s = Sample::new("x", Label::Harmful, 0);
        assert!(matches!(p.sequence_log_prob(&s, &[999]), Err(PolicyError::UnknownTokenId { id: 999, .. })));
        assert!(matches!(p.encode(&["image", "zebra"]), Err(PolicyError::UnknownToken(t)) if t == "zebra"));
    }

    #[test]
    fn render_skips_eos() {
        let p = ToyPolicy::with_default_vocab(1, 10);
        let toks = p.encode(&["[GROUNDING]", "image", "<eos>"]).unwrap();
        assert_eq!(p.render(&toks), "[GROUNDING] image");
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut p = ToyPolicy::new(minimal_vocab(), 2, 2, 4).unwrap();
        p.randomize(11, 1.0);
        let s = Sample::new("x", Label::Harmful, 1);
        let toks = vec![3, 4, 3, 0];
        let mut g = p.zero_gradient();
        p.accumulate_log_prob_gradient(&s, &toks, 1.0, &mut g).unwrap();
        let flat = g.flat();
        let h = 1e-6;
        for (i, analytic) in flat.iter().enumerate() {
            let mut a = p.clone();
            a.set_param(i, p.param(i) + h);
            let mut b = p.clone();
            b.set_param(i, p.param(i) - h);
            let fd = (a.sequence_log_prob(&s, &toks).unwrap() - b.sequence_log_prob(&s, &toks).unwrap()) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-7, "param {i}: fd {fd} vs {analytic}");
        }
        // The cls head only moves through tokens that follow [VERDICT].
        assert!(g.cls_head[2..].iter().any(|x| *x != 0.0));
        assert!(g.cls_head[..2].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn sft_memorizes_single_sample() {
        let p = ToyPolicy::with_default_vocab(2, 4);
        let train = vec![Sample::new("a", Label::Harmful, 1)];
        let cfg = SftConfig { epochs: 2000, learning_rate: 1.0, seed: 0, batch_size: None };
        let (warm, curve) = sft_warmup(&p, &train, &cfg).unwrap();
        assert!(curve.last().unwrap() < &0.01, "{:?}", curve.last());
        assert!(warm.label_probs(&train[0])[1] > 0.99);
    }

    #[test]
    fn sft_contradictory_pair_bounded_by_ln2() {
        let p = ToyPolicy::with_default_vocab(1, 4);
        let train = vec![Sample::new("a", Label::Harmful, 0), Sample::new("b", Label::Benign, 0)];
        let cfg = SftConfig { epochs: 500, learning_rate: 0.5, seed: 0, batch_size: None };
        let (_, curve) = sft_warmup(&p, &train, &cfg).unwrap();
        for l in &curve {
            assert!(*l >= std::f64::consts::LN_2 - 1e-3);
        }
    }

    #[test]
    fn sft_curve_monotone_at_small_lr() {
        let p = ToyPolicy::with_default_vocab(3, 4);
        let train: Vec<Sample> = (0..30)
            .map(|i| Sample::new(format!("s{i}"), if i % 3 == 0 { Label::Benign } else { Label::Harmful }, i % 3))
            .collect();
        let cfg = SftConfig { epochs: 200, learning_rate: 1e-3, seed: 1, batch_size: None };
        let (_, curve) = sft_warmup(&p, &train, &cfg).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        assert!(curve.last().unwrap() < curve.first().unwrap());
    }

    #[test]
    fn sft_rejects_empty() {
        let p = ToyPolicy::with_default_vocab(1, 4);
        let cfg = SftConfig { epochs: 1, learning_rate: 0.1, seed: 0, batch_size: None };
        assert!(matches!(sft_warmup(&p, &[], &cfg), Err(PolicyError::EmptyTrainingSet)));
    }

    #[test]
    fn sft_sets_verdict_token_distribution() {
        let p = ToyPolicy::with_default_vocab(2, 8);
        let train = vec![Sample::new("a", Label::Harmful, 1), Sample::new("b", Label::Benign, 0)];
        let cfg = SftConfig { epochs: 200, learning_rate: 1.0, seed: 0, batch_size: Some(1) };
        let (warm, _) = sft_warmup(&p, &train, &cfg).unwrap();
        let verdict = DecodeState { prev: warm.token_id(VERDICT_TAG), section: 3 };
        let harm = warm.token_id(HARMFUL_TOKEN).unwrap();
        let ben = warm.token_id(BENIGN_TOKEN).unwrap();
        let l1 = warm.logits(1, 3, verdict);
        let l0 = warm.logits(0, 3, verdict);
        assert!(l1[harm] > l1[ben]);
        assert!(l0[ben] > l0[harm]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ToyPolicy::with_default_vocab(3, 16);
        p.randomize(77, 3.0);
        p.set_param(0, f64::MIN_POSITIVE);
        p.set_param(1, -0.0);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ToyPolicy::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p.vocab(), q.vocab());
        for i in 0..p.param_count() {
            assert_eq!(p.param(i).to_bits(), q.param(i).to_bits());
        }
        let mut again = Vec::new();
        q.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ToyPolicy::read_from(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let p = ToyPolicy::with_default_vocab(1, 4);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ToyPolicy::read_from(&mut buf.as_slice()).is_err());
    }
}
