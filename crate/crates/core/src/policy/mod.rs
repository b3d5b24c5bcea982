//! Table-based n-gram policy over a small symbol alphabet.
//!
//! Each context (the previous `order` tokens, BOS-padded) owns one row of
//! logits over the output symbols (the alphabet plus EOS). Rows are stored
//! sparsely; an absent row is the all-zero (uniform) row.

mod cache;
mod checkpoint;
mod grad;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use cache::{response_hash, CacheEntry, RefLogProbCache};
pub use checkpoint::{PolicyCheckpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use grad::GradTable;

pub type Token = u16;

/// Longest supported context; keys pack 16 bits per slot into a `u64`.
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("token {token} at position {position} is not valid here")]
    UnknownToken { token: Token, position: usize },
    #[error("temperature must be finite and > 0, got {0}")]
    BadTemperature(f64),
    #[error("order {0} exceeds the supported maximum {MAX_ORDER}")]
    BadOrder(usize),
    #[error("alphabet size {0} is not supported")]
    BadAlphabet(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Regular symbols `0..alphabet`, then EOS, then BOS.
///
/// BOS only ever appears as context padding, so the output distribution of
/// every row ranges over `alphabet + 1` symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    alphabet: u16,
}

impl Vocab {
    pub fn new(alphabet: usize) -> Result<Self, PolicyError> {
        if alphabet == 0 || alphabet > (u16::MAX as usize - 2) {
            return Err(PolicyError::BadAlphabet(alphabet));
        }
        Ok(Self {
            alphabet: alphabet as u16,
        })
    }

    /// 256 byte symbols.
    pub fn bytes() -> Self {
        Self { alphabet: 256 }
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet as usize
    }

    pub fn eos(&self) -> Token {
        self.alphabet
    }

    pub fn bos(&self) -> Token {
        self.alphabet + 1
    }

    /// Number of symbols each row's softmax ranges over.
    pub fn output_size(&self) -> usize {
        self.alphabet as usize + 1
    }

    pub fn is_regular(&self, t: Token) -> bool {
        t < self.alphabet
    }

    /// Byte-level encoding. Only meaningful for the byte vocabulary.
    pub fn encode(&self, text: &str) -> Vec<Token> {
        text.bytes().map(Token::from).collect()
    }

    /// Lossy inverse of [`Vocab::encode`]; EOS/BOS and out-of-byte symbols are dropped.
    pub fn decode(&self, tokens: &[Token]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256 && self.is_regular(t))
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Summed response log-probability and the number of scored tokens (EOS included).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeqLogProb {
    pub sum_logprob: f64,
    pub token_count: usize,
}

impl SeqLogProb {
    pub fn mean(&self) -> f64 {
        self.sum_logprob / self.token_count as f64
    }
}

/// Packed context key: the last `order` tokens, oldest in the high bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey(pub u64);

impl ContextKey {
    pub fn tokens(self, order: usize) -> Vec<Token> {
        (0..order)
            .rev()
            .map(|slot| ((self.0 >> (16 * slot)) & 0xffff) as Token)
            .collect()
    }

    pub fn from_tokens(tokens: &[Token]) -> Self {
        Self(tokens.iter().fold(0u64, |k, &t| (k << 16) | t as u64))
    }
}

/// Rolling window of the last `order` tokens.
#[derive(Debug, Clone, Copy)]
struct Window {
    key: u64,
    mask: u64,
}

impl Window {
    fn new(order: usize, bos: Token) -> Self {
        let mask = if order == 0 {
            0
        } else if order == MAX_ORDER {
            u64::MAX
        } else {
            (1u64 << (16 * order)) - 1
        };
        let mut key = 0u64;
        for _ in 0..order {
            key = (key << 16) | bos as u64;
        }
        Self { key, mask }
    }

    fn push(&mut self, t: Token) {
        self.key = ((self.key << 16) | t as u64) & self.mask;
    }

    fn context(&self) -> ContextKey {
        ContextKey(self.key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyPolicy {
    vocab: Vocab,
    order: usize,
    rows: HashMap<ContextKey, Vec<f64>>,
}

impl TinyPolicy {
    /// All-zero logits, i.e. the uniform distribution in every context.
    pub fn uniform(vocab: Vocab, order: usize) -> Result<Self, PolicyError> {
        if order > MAX_ORDER {
            return Err(PolicyError::BadOrder(order));
        }
        Ok(Self {
            vocab,
            order,
            rows: HashMap::new(),
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, ctx: ContextKey) -> Option<&[f64]> {
        self.rows.get(&ctx).map(Vec::as_slice)
    }

    /// Mutable row, materialized as zeros on first touch.
    pub fn row_mut(&mut self, ctx: ContextKey) -> &mut [f64] {
        let n = self.vocab.output_size();
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; n])
    }

    pub fn rows(&self) -> impl Iterator<Item = (ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Context key seen after consuming `history` from a BOS-padded start.
    pub fn context_of(&self, history: &[Token]) -> ContextKey {
        let mut w = Window::new(self.order, self.vocab.bos());
        for &t in history {
            w.push(t);
        }
        w.context()
    }

    /// Writes `log softmax(row(ctx))` into `out`.
    pub fn log_probs(&self, ctx: ContextKey, out: &mut Vec<f64>) {
        let n = self.vocab.output_size();
        out.clear();
        match self.rows.get(&ctx) {
            None => out.resize(n, -(n as f64).ln()),
            Some(row) => {
                let lse = log_sum_exp(row);
                out.extend(row.iter().map(|&l| l - lse));
            }
        }
    }

    fn validate(&self, prompt: &[Token], response: &[Token]) -> Result<(), PolicyError> {
        for (position, &token) in prompt.iter().chain(response).enumerate() {
            if !self.vocab.is_regular(token) {
                return Err(PolicyError::UnknownToken { token, position });
            }
        }
        Ok(())
    }

    /// Scores `response` followed by EOS, conditioned on `prompt`.
    pub fn seq_logprob(
        &self,
        prompt: &[Token],
        response: &[Token],
    ) -> Result<SeqLogProb, PolicyError> {
        self.validate(prompt, response)?;
        let mut w = Window::new(self.order, self.vocab.bos());
        for &t in prompt {
            w.push(t);
        }
        let eos = self.vocab.eos();
        let uniform = -(self.vocab.output_size() as f64).ln();
        let mut sum = 0.0;
        for &t in response.iter().chain(std::iter::once(&eos)) {
            sum += match self.rows.get(&w.context()) {
                None => uniform,
                Some(row) => row[t as usize] - log_sum_exp(row),
            };
            w.push(t);
        }
        Ok(SeqLogProb {
            sum_logprob: sum,
            token_count: response.len() + 1,
        })
    }

    /// Adds `scale * d(seq_logprob)/d(logits)` into `grad` and returns the
    /// sequence log-probability.
    pub fn accumulate_grad(
        &self,
        prompt: &[Token],
        response: &[Token],
        scale: f64,
        grad: &mut GradTable,
    ) -> Result<SeqLogProb, PolicyError> {
        self.validate(prompt, response)?;
        let n = self.vocab.output_size();
        let mut w = Window::new(self.order, self.vocab.bos());
        for &t in prompt {
            w.push(t);
        }
        let eos = self.vocab.eos();
        let mut probs = Vec::with_capacity(n);
        let mut sum = 0.0;
        for &t in response.iter().chain(std::iter::once(&eos)) {
            let ctx = w.context();
            let row = grad.row_mut(ctx);
            match self.rows.get(&ctx) {
                None => {
                    let p = 1.0 / n as f64;
                    for g in row.iter_mut() {
                        *g -= scale * p;
                    }
                    sum -= (n as f64).ln();
                }
                Some(logits) => {
                    let lse = softmax_into(logits, &mut probs);
                    for (g, p) in row.iter_mut().zip(&probs) {
                        *g -= scale * p;
                    }
                    sum += logits[t as usize] - lse;
                }
            }
            row[t as usize] += scale;
            w.push(t);
        }
        Ok(SeqLogProb {
            sum_logprob: sum,
            token_count: response.len() + 1,
        })
    }

    /// Gradient of the summed response log-probability w.r.t. the logits.
    /// Nonzero only in visited contexts.
    pub fn grad_seq_logprob(
        &self,
        prompt: &[Token],
        response: &[Token],
    ) -> Result<GradTable, PolicyError> {
        let mut g = GradTable::new(self.vocab.output_size());
        self.accumulate_grad(prompt, response, 1.0, &mut g)?;
        Ok(g)
    }

    /// Autoregressive sampling from `softmax(logits / temperature)` until EOS
    /// or `max_len` regular tokens. The returned tokens exclude EOS.
    pub fn sample(
        &self,
        prompt: &[Token],
        temperature: f64,
        seed: u64,
        max_len: usize,
    ) -> Result<Vec<Token>, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(prompt, temperature, &mut rng, max_len)
    }

    pub fn sample_with<R: Rng>(
        &self,
        prompt: &[Token],
        temperature: f64,
        rng: &mut R,
        max_len: usize,
    ) -> Result<Vec<Token>, PolicyError> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(PolicyError::BadTemperature(temperature));
        }
        self.validate(prompt, &[])?;
        let n = self.vocab.output_size();
        let eos = self.vocab.eos();
        let mut w = Window::new(self.order, self.vocab.bos());
        for &t in prompt {
            w.push(t);
        }
        let mut out = Vec::new();
        let mut probs = Vec::with_capacity(n);
        let mut scaled = Vec::with_capacity(n);
        while out.len() < max_len {
            let u: f64 = rng.random();
            let t = match self.rows.get(&w.context()) {
                None => ((u * n as f64) as usize).min(n - 1) as Token,
                Some(logits) => {
                    scaled.clear();
                    scaled.extend(logits.iter().map(|l| l / temperature));
                    softmax_into(&scaled, &mut probs);
                    inverse_cdf(&probs, u) as Token
                }
            };
            if t == eos {
                break;
            }
            out.push(t);
            w.push(t);
        }
        Ok(out)
    }

    /// Argmax decoding; ties go to the lowest symbol.
    pub fn greedy(&self, prompt: &[Token], max_len: usize) -> Result<Vec<Token>, PolicyError> {
        self.validate(prompt, &[])?;
        let eos = self.vocab.eos();
        let mut w = Window::new(self.order, self.vocab.bos());
        for &t in prompt {
            w.push(t);
        }
        let mut out = Vec::new();
        while out.len() < max_len {
            let t = match self.rows.get(&w.context()) {
                None => 0,
                Some(row) => argmax(row) as Token,
            };
            if t == eos {
                break;
            }
            out.push(t);
            w.push(t);
        }
        Ok(out)
    }

    /// Maximum-likelihood fit of visited rows with additive smoothing:
    /// `logit = ln(count + smoothing)`. This is the exact minimizer of the
    /// token cross-entropy on `corpus` under a Dirichlet prior, used to build
    /// non-uniform reference policies.
    pub fn fit_counts(
        vocab: Vocab,
        order: usize,
        corpus: &[(Vec<Token>, Vec<Token>)],
        smoothing: f64,
    ) -> Result<Self, PolicyError> {
        let mut counts: HashMap<ContextKey, Vec<f64>> = HashMap::new();
        let n = vocab.output_size();
        let probe = Self::uniform(vocab, order)?;
        for (prompt, response) in corpus {
            probe.validate(prompt, response)?;
            let mut w = Window::new(order, vocab.bos());
            for &t in prompt {
                w.push(t);
            }
            for &t in response.iter().chain(std::iter::once(&vocab.eos())) {
                counts.entry(w.context()).or_insert_with(|| vec![0.0; n])[t as usize] += 1.0;
                w.push(t);
            }
        }
        let rows = counts
            .into_iter()
            .map(|(k, c)| (k, c.into_iter().map(|x| (x + smoothing).ln()).collect()))
            .collect();
        Ok(Self { vocab, order, rows })
    }

    pub(crate) fn from_rows(
        vocab: Vocab,
        order: usize,
        rows: HashMap<ContextKey, Vec<f64>>,
    ) -> Result<Self, PolicyError> {
        if order > MAX_ORDER {
            return Err(PolicyError::BadOrder(order));
        }
        if rows.values().any(|r| r.len() != vocab.output_size()) {
            return Err(PolicyError::Checkpoint(
                "row length does not match vocabulary".into(),
            ));
        }
        Ok(Self { vocab, order, rows })
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Fills `out` with `softmax(xs)` and returns `log_sum_exp(xs)`.
pub(crate) fn softmax_into(xs: &[f64], out: &mut Vec<f64>) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(xs.iter().map(|&x| (x - m).exp()));
    let z: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= z;
    }
    m + z.ln()
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair below 1: take the last symbol with mass.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_policy(alphabet: usize, order: usize, seed: u64) -> TinyPolicy {
        let vocab = Vocab::new(alphabet).unwrap();
        let mut p = TinyPolicy::uniform(vocab, order).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx_tokens: Vec<Vec<Token>> = vec![vec![]];
        for _ in 0..order {
            let mut next = Vec::new();
            for c in &ctx_tokens {
                for t in 0..=alphabet as Token + 1 {
                    if t == vocab.eos() {
                        continue;
                    }
                    let mut c2 = c.clone();
                    c2.push(t);
                    next.push(c2);
                }
            }
            ctx_tokens = next;
        }
        for c in ctx_tokens {
            let row = p.row_mut(ContextKey::from_tokens(&c));
            for l in row.iter_mut() {
                *l = rng.random_range(-2.0..2.0);
            }
        }
        p
    }

    #[test]
    fn uniform_logprob() {
        let p = TinyPolicy::uniform(Vocab::bytes(), 2).unwrap();
        let v = Vocab::bytes();
        let r = p.seq_logprob(&v.encode("hi"), &v.encode("abcd")).unwrap();
        assert_eq!(r.token_count, 5);
        assert!((r.sum_logprob + 5.0 * 257f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_response_scores_eos_only() {
        let p = random_policy(3, 1, 1);
        let r = p.seq_logprob(&[2], &[]).unwrap();
        assert_eq!(r.token_count, 1);
        let mut lp = Vec::new();
        p.log_probs(p.context_of(&[2]), &mut lp);
        assert_eq!(r.sum_logprob, lp[3]);
    }

    #[test]
    fn chain_product_oracle() {
        for seed in 0..20 {
            let p = random_policy(3, 2, seed);
            let prompt = [1, 0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let resp: Vec<Token> = (0..3).map(|_| rng.random_range(0..3)).collect();
            // Product of explicit softmax probabilities along the chain.
            let mut hist: Vec<Token> = prompt.to_vec();
            let mut prob = 1.0;
            for &t in resp.iter().chain(std::iter::once(&3)) {
                let ctx = ContextKey::from_tokens(&[
                    *hist.get(hist.len().wrapping_sub(2)).unwrap_or(&4),
                    *hist.last().unwrap_or(&4),
                ]);
                let row = p.row(ctx).unwrap();
                let z: f64 = row.iter().map(|l| l.exp()).sum();
                prob *= row[t as usize].exp() / z;
                hist.push(t);
            }
            let got = p.seq_logprob(&prompt, &resp).unwrap().sum_logprob;
            assert!((got - prob.ln()).abs() < 1e-12, "{got} vs {}", prob.ln());
        }
    }

    #[test]
    fn normalization_by_enumeration() {
        // Order-1 policy on a 3-symbol alphabet: all responses of length <= 2
        // plus the mass of every unfinished length-3 prefix sum to one.
        let p = random_policy(3, 1, 7);
        let prompt = [0];
        let mut total = 0.0;
        total += p.seq_logprob(&prompt, &[]).unwrap().sum_logprob.exp();
        for a in 0..3 {
            total += p.seq_logprob(&prompt, &[a]).unwrap().sum_logprob.exp();
            for b in 0..3 {
                total += p.seq_logprob(&prompt, &[a, b]).unwrap().sum_logprob.exp();
            }
        }
        let mut lp = Vec::new();
        let mut remainder = 0.0;
        for a in 0..3u16 {
            for b in 0..3u16 {
                for c in 0..3u16 {
                    let mut pr = 1.0;
                    let mut prev = prompt[0];
                    for t in [a, b, c] {
                        p.log_probs(ContextKey::from_tokens(&[prev]), &mut lp);
                        pr *= lp[t as usize].exp();
                        prev = t;
                    }
                    remainder += pr;
                }
            }
        }
        assert!((total + remainder - 1.0).abs() < 1e-12);
    }

    #[test]
    fn additivity() {
        let p = random_policy(3, 2, 3);
        let prompt = [0, 1];
        let (a, b) = (vec![2, 0], vec![1, 1, 2]);
        let mut ab = a.clone();
        ab.extend(&b);
        let mut pa = prompt.to_vec();
        pa.extend(&a);
        // Both sides end in EOS once; the prefix part needs its EOS term removed.
        let mut lp = Vec::new();
        p.log_probs(p.context_of(&pa), &mut lp);
        let eos_term = lp[3];
        let lhs = p.seq_logprob(&prompt, &ab).unwrap().sum_logprob;
        let rhs = p.seq_logprob(&prompt, &a).unwrap().sum_logprob - eos_term
            + p.seq_logprob(&pa, &b).unwrap().sum_logprob;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn unknown_token() {
        let p = TinyPolicy::uniform(Vocab::new(3).unwrap(), 1).unwrap();
        assert_eq!(
            p.seq_logprob(&[0], &[1, 3]),
            Err(PolicyError::UnknownToken {
                token: 3,
                position: 2
            })
        );
        assert!(p.grad_seq_logprob(&[9], &[]).is_err());
    }

    #[test]
    fn rows_normalize() {
        let p = random_policy(4, 1, 5);
        let mut lp = Vec::new();
        for (k, _) in p.rows() {
            p.log_probs(k, &mut lp);
            let s: f64 = lp.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_shape() {
        let p = random_policy(3, 1, 9);
        let g = p.grad_seq_logprob(&[0], &[]).unwrap();
        assert_eq!(g.num_rows(), 1);
        assert!(g.row(ContextKey::from_tokens(&[0])).is_some());
        let g = p.grad_seq_logprob(&[0], &[1, 2, 2, 0]).unwrap();
        for (_, row) in g.rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = random_policy(3, 2, 11);
        let a = p.sample(&[0], 0.7, 42, 50).unwrap();
        assert_eq!(a, p.sample(&[0], 0.7, 42, 50).unwrap());
        assert!(matches!(
            p.sample(&[0], 0.0, 1, 5),
            Err(PolicyError::BadTemperature(_))
        ));
        assert!(matches!(
            p.sample(&[0], -1.0, 1, 5),
            Err(PolicyError::BadTemperature(_))
        ));
    }

    #[test]
    fn low_temperature_is_greedy() {
        for seed in 0..10 {
            let p = random_policy(3, 2, seed);
            let g = p.greedy(&[1], 20).unwrap();
            for s in 0..5 {
                assert_eq!(p.sample(&[1], 1e-6, s, 20).unwrap(), g);
            }
        }
    }

    #[test]
    fn fit_counts_matches_frequencies() {
        let v = Vocab::new(2).unwrap();
        let corpus = vec![(vec![], vec![0]), (vec![], vec![0]), (vec![], vec![1])];
        let p = TinyPolicy::fit_counts(v, 1, &corpus, 0.0).unwrap();
        let mut lp = Vec::new();
        p.log_probs(p.context_of(&[]), &mut lp);
        assert!((lp[0].exp() - 2.0 / 3.0).abs() < 1e-12);
        assert!((lp[1].exp() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(lp[2], f64::NEG_INFINITY);
    }

    #[test]
    fn context_key_round_trip() {
        let k = ContextKey::from_tokens(&[257, 3]);
        assert_eq!(k.tokens(2), vec![257, 3]);
        let p = TinyPolicy::uniform(Vocab::bytes(), 2).unwrap();
        assert_eq!(p.context_of(&[]), ContextKey::from_tokens(&[257, 257]));
        assert_eq!(p.context_of(&[1, 2, 3]), ContextKey::from_tokens(&[2, 3]));
        assert!(TinyPolicy::uniform(Vocab::bytes(), 5).is_err());
    }
}
