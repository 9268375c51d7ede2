//! The frozen actor: an order-m add-k smoothed Markov language model.
//!
//! Logits are the natural log of the smoothed probabilities, so sampling at
//! temperature `T` is `softmax(ln p / T)`, i.e. `normalize(p^(1/T))`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

pub const LM_FORMAT_VERSION: u32 = 1;

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Accepts a vector that is already non-negative and sums to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("distribution has a negative or non-finite entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("distribution sums to {total}")));
        }
        Ok(Distribution { probs })
    }

    /// Normalizes non-negative weights. Fails when every weight is zero.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidInput(format!("cannot normalize weights with total {total}")));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Distribution { probs: weights })
    }

    pub fn uniform(n: usize) -> Self {
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Token ids sorted by probability descending, ties broken by id.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len() as TokenId).collect();
        ids.sort_by(|&a, &b| {
            self.probs[b as usize]
                .total_cmp(&self.probs[a as usize])
                .then(a.cmp(&b))
        });
        ids
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// KL(self || other) in nats; infinite when `self` has mass where `other` has none.
    pub fn kl_divergence(&self, other: &Distribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &q)| if q > 0.0 { p * (p / q).ln() } else { f64::INFINITY })
            .sum()
    }
}

/// Rescales a distribution by temperature: `normalize(p^(1/T))`.
/// Zero entries stay zero.
pub fn apply_temperature(dist: &Distribution, temperature: f64) -> Result<Distribution> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::config("temperature", format!("must be > 0, got {temperature}")));
    }
    if temperature == 1.0 {
        return Ok(dist.clone());
    }
    let logits: Vec<f64> = dist.probs.iter().map(|p| p.ln()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = logits
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { ((l - max) / temperature).exp() })
        .collect();
    Distribution::from_weights(weights)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovLm {
    order: usize,
    smoothing_k: f64,
    vocab: Vocabulary,
    counts: BTreeMap<Vec<TokenId>, ContextCounts>,
}

/// Tabulates m-gram counts over `corpus`, each sequence left-padded with `<s>`.
pub fn train_lm(
    corpus: &[TokenSequence],
    vocab: &Vocabulary,
    order: usize,
    smoothing_k: f64,
) -> Result<MarkovLm> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let mut lm = MarkovLm::untrained(vocab.clone(), order, smoothing_k)?;
    for seq in corpus {
        seq.validate(vocab)?;
        let mut padded = vec![vocab.bos(); order];
        padded.extend_from_slice(&seq.ids);
        for window in padded.windows(order + 1) {
            let entry = lm.counts.entry(window[..order].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(window[order]).or_default() += 1;
        }
    }
    Ok(lm)
}

impl MarkovLm {
    /// A model with no counts: every context yields the uniform distribution.
    pub fn untrained(vocab: Vocabulary, order: usize, smoothing_k: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::config("lm.order", "must be at least 1"));
        }
        if !(smoothing_k.is_finite() && smoothing_k > 0.0) {
            return Err(Error::config("lm.smoothing_k", "must be > 0"));
        }
        Ok(MarkovLm {
            order,
            smoothing_k,
            vocab,
            counts: BTreeMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// The last `order` ids of `<s>^order ⊕ history`.
    pub fn context_of(&self, history: &[TokenId]) -> Vec<TokenId> {
        let m = self.order;
        let mut ctx = vec![self.vocab.bos(); m.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(m)..]);
        ctx
    }

    /// Same as [`context_of`](Self::context_of) for a state split into prompt and continuation.
    pub fn context_of_state(&self, prompt: &[TokenId], generated: &[TokenId]) -> Vec<TokenId> {
        let m = self.order;
        if generated.len() >= m {
            return generated[generated.len() - m..].to_vec();
        }
        let mut joined: Vec<TokenId> = prompt[prompt.len().saturating_sub(m)..].to_vec();
        joined.extend_from_slice(generated);
        self.context_of(&joined)
    }

    /// Smoothed conditional law given an exact context of `order` ids.
    pub fn dist_for_context(&self, context: &[TokenId]) -> Distribution {
        debug_assert_eq!(context.len(), self.order);
        let v = self.vocab.len();
        match self.counts.get(context) {
            None => Distribution::uniform(v),
            Some(c) => {
                let k = self.smoothing_k;
                let denom = c.total as f64 + k * v as f64;
                let mut probs = vec![k / denom; v];
                for (&tok, &n) in &c.next {
                    probs[tok as usize] = (n as f64 + k) / denom;
                }
                Distribution { probs }
            }
        }
    }

    /// Conditional next-token law; only the last `order` ids of `context` are read.
    pub fn next_token_dist(&self, context: &[TokenId]) -> Distribution {
        self.dist_for_context(&self.context_of(context))
    }

    /// Sampling law of the actor for an exact context: `<s>` is masked (it
    /// never appears inside generated text) and temperature is applied.
    pub fn policy_for_context(&self, context: &[TokenId], temperature: f64) -> Result<Distribution> {
        let mut probs = self.dist_for_context(context).probs;
        probs[self.vocab.bos() as usize] = 0.0;
        let masked = Distribution::from_weights(probs)?;
        apply_temperature(&masked, temperature)
    }

    pub fn policy(&self, prompt: &[TokenId], generated: &[TokenId], temperature: f64) -> Result<Distribution> {
        self.policy_for_context(&self.context_of_state(prompt, generated), temperature)
    }

    /// `Σ_t ln p(x_t | x_{t-m..t-1})` with `<s>` padding.
    pub fn sequence_logprob(&self, seq: &[TokenId]) -> f64 {
        self.conditional_logprob(&[], seq)
    }

    /// Log-probability of `continuation` following `prefix`.
    pub fn conditional_logprob(&self, prefix: &[TokenId], continuation: &[TokenId]) -> f64 {
        let mut history: Vec<TokenId> = prefix.to_vec();
        let mut total = 0.0;
        for &tok in continuation {
            total += self.next_token_dist(&history).prob(tok).ln();
            history.push(tok);
        }
        total
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: LmCheckpoint = artifact::read_json(path)?;
        Self::from_checkpoint(ckpt)
    }

    pub fn to_checkpoint(&self) -> LmCheckpoint {
        LmCheckpoint {
            format_version: LM_FORMAT_VERSION,
            order: self.order,
            smoothing_k: self.smoothing_k,
            vocab: self.vocab.clone(),
            counts: self
                .counts
                .iter()
                .map(|(ctx, c)| ContextEntry {
                    context: ctx.clone(),
                    next: c.next.iter().map(|(&t, &n)| (t, n)).collect(),
                })
                .collect(),
            config_digest: None,
        }
    }

    pub fn from_checkpoint(ckpt: LmCheckpoint) -> Result<Self> {
        if ckpt.format_version != LM_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "LM checkpoint format {} (expected {LM_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut lm = MarkovLm::untrained(ckpt.vocab, ckpt.order, ckpt.smoothing_k)?;
        let v = lm.vocab.len() as TokenId;
        for entry in ckpt.counts {
            if entry.context.len() != lm.order
                || entry.context.iter().chain(entry.next.iter().map(|(t, _)| t)).any(|&t| t >= v)
            {
                return Err(Error::Incompatible("malformed LM count entry".into()));
            }
            let c = lm.counts.entry(entry.context).or_default();
            for (tok, n) in entry.next {
                c.total += n;
                *c.next.entry(tok).or_default() += n;
            }
        }
        Ok(lm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextEntry {
    pub context: Vec<TokenId>,
    pub next: Vec<(TokenId, u64)>,
}

/// On-disk LM: counts stored sparsely, one entry per seen context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub format_version: u32,
    pub order: usize,
    pub smoothing_k: f64,
    pub vocab: Vocabulary,
    pub counts: Vec<ContextEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, tokenize};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm_from(lines: &[&str], order: usize, k: f64) -> MarkovLm {
        let vocab = build_vocab(lines, 1).unwrap();
        let corpus: Vec<_> = lines.iter().map(|l| tokenize(l, &vocab)).collect();
        train_lm(&corpus, &vocab, order, k).unwrap()
    }

    #[test]
    fn add_k_counts_match_hand_arithmetic() {
        // "a a a": bigrams (a,a) twice after the <s>-headed one.
        let lm = lm_from(&["a a a"], 1, 0.01);
        let v = lm.vocab_size() as f64;
        assert_eq!(v, 4.0);
        let a = lm.vocab().id("a").unwrap();
        let p = lm.next_token_dist(&[a]).prob(a);
        assert!((p - (2.0 + 0.01) / (2.0 + 0.01 * v)).abs() < 1e-15);

        let lm = lm_from(&["a b"], 1, 1.0);
        assert_eq!(lm.vocab_size(), 5);
        let (a, b) = (lm.vocab().id("a").unwrap(), lm.vocab().id("b").unwrap());
        assert!((lm.next_token_dist(&[a]).prob(b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn start_context_uses_first_token_counts() {
        let lm = lm_from(&["a b", "a c", "b c"], 1, 0.5);
        let d = lm.next_token_dist(&[]);
        let v = lm.vocab();
        let denom = 3.0 + 0.5 * v.len() as f64;
        assert!((d.prob(v.id("a").unwrap()) - 2.5 / denom).abs() < 1e-15);
        assert!((d.prob(v.id("b").unwrap()) - 1.5 / denom).abs() < 1e-15);
        assert!((d.prob(v.id("c").unwrap()) - 0.5 / denom).abs() < 1e-15);
    }

    #[test]
    fn order_zero_and_bad_k_rejected() {
        let vocab = build_vocab(&["a"], 1).unwrap();
        let corpus = vec![tokenize("a", &vocab)];
        assert!(matches!(train_lm(&corpus, &vocab, 0, 0.1), Err(Error::Config { .. })));
        assert!(matches!(train_lm(&corpus, &vocab, 1, 0.0), Err(Error::Config { .. })));
    }

    #[test]
    fn unseen_context_is_uniform() {
        let lm = lm_from(&["a b c"], 2, 0.1);
        let c = lm.vocab().id("c").unwrap();
        let d = lm.next_token_dist(&[c, c]);
        assert!(d.probs().iter().all(|&p| p == 1.0 / lm.vocab_size() as f64));
    }

    #[test]
    fn distributions_normalized_and_positive() {
        let lm = lm_from(&["a b c d", "b c a", "d d a b"], 2, 0.1);
        let v = lm.vocab_size() as TokenId;
        let max_count = lm.counts.values().map(|c| c.total).max().unwrap() as f64;
        let floor = 0.1 / (max_count + 0.1 * v as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let ctx: Vec<TokenId> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..v)).collect();
            let d = lm.next_token_dist(&ctx);
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.probs().iter().all(|&p| p >= floor - 1e-18));
        }
    }

    #[test]
    fn temperature_examples() {
        let d = Distribution::new(vec![0.8, 0.2]).unwrap();
        assert_eq!(apply_temperature(&d, 1.0).unwrap(), d);
        let t2 = apply_temperature(&d, 2.0).unwrap();
        let (s8, s2) = (0.8f64.sqrt(), 0.2f64.sqrt());
        assert!((t2.prob(0) - s8 / (s8 + s2)).abs() < 1e-12);
        assert!((t2.prob(0) - 2.0 / 3.0).abs() < 1e-12);
        let u = Distribution::uniform(5);
        for t in [0.3, 1.7, 9.0] {
            let out = apply_temperature(&u, t).unwrap();
            assert!(out.probs().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
        assert!(matches!(apply_temperature(&d, 0.0), Err(Error::Config { .. })));
        assert!(matches!(apply_temperature(&d, -1.0), Err(Error::Config { .. })));
    }

    #[test]
    fn sequence_logprob_examples() {
        let lm = lm_from(&["a b a", "b b"], 1, 0.2);
        let a = lm.vocab().id("a").unwrap();
        assert_eq!(lm.sequence_logprob(&[a]), lm.next_token_dist(&[]).prob(a).ln());

        let uniform = MarkovLm::untrained(lm.vocab().clone(), 1, 0.1).unwrap();
        let v = uniform.vocab_size() as f64;
        let lp = uniform.sequence_logprob(&[0, 1, 2, 1, 0]);
        assert!((lp - 5.0 * (1.0 / v).ln()).abs() < 1e-12);

        // independent re-summation over explicit contexts
        let seq = [a, 1, 1, a, 0, 2];
        let mut expected = 0.0;
        for t in 0..seq.len() {
            let ctx = if t == 0 { vec![lm.vocab().bos()] } else { vec![seq[t - 1]] };
            expected += lm.dist_for_context(&ctx).prob(seq[t]).ln();
        }
        assert!((lm.sequence_logprob(&seq) - expected).abs() < 1e-12);
    }

    #[test]
    fn policy_masks_bos() {
        let lm = lm_from(&["a b"], 1, 0.5);
        let d = lm.policy(&[0], &[], 1.0).unwrap();
        assert_eq!(d.prob(lm.vocab().bos()), 0.0);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn context_of_state_matches_joined_history() {
        let lm = lm_from(&["a b c d"], 3, 0.1);
        let p = [0, 1];
        for g in [&[][..], &[2], &[2, 3], &[2, 3, 0, 1]] {
            let mut joined = p.to_vec();
            joined.extend_from_slice(g);
            assert_eq!(lm.context_of_state(&p, g), lm.context_of(&joined));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let lm = lm_from(&["a b c", "c b a", "a a"], 2, 0.3);
        let text = artifact::to_sorted_json(&lm.to_checkpoint()).unwrap();
        let back = MarkovLm::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, lm);
        assert_eq!(artifact::to_sorted_json(&back.to_checkpoint()).unwrap(), text);
    }

    #[test]
    fn wrong_checkpoint_version_refused() {
        let mut ckpt = lm_from(&["a"], 1, 0.1).to_checkpoint();
        ckpt.format_version = 99;
        assert!(matches!(MarkovLm::from_checkpoint(ckpt), Err(Error::Incompatible(_))));
    }

    fn arb_dist() -> impl Strategy<Value = Distribution> {
        proptest::collection::vec(0.01f64..1.0, 2..8)
            .prop_map(|w| Distribution::from_weights(w).unwrap())
    }

    proptest! {
        #[test]
        fn temperature_preserves_argmax(d in arb_dist(), t in 0.05f64..20.0) {
            let out = apply_temperature(&d, t).unwrap();
            prop_assert_eq!(out.argmax(), d.argmax());
            prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn low_temperature_concentrates_on_argmax(d in arb_dist()) {
            let ranked = d.ranked();
            let (p1, p2) = (d.prob(ranked[0]), d.prob(ranked[1]));
            prop_assume!(p1 >= 1.1 * p2);
            let out = apply_temperature(&d, 1e-3).unwrap();
            prop_assert!(out.prob(ranked[0]) >= 0.999);
        }
    }
}
