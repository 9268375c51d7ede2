//! Value-guided decoding.
//!
//! At each step the top-K candidates of the base distribution are reweighted
//! by `α = V(state ⊕ x) / V(state)`. With exact values and every token in the
//! subset this is the Bayes conditional `P(x | prefix, a)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Distribution, MarkovLm};
use crate::rollout::{episode_rng, sample};
use crate::vocab::{detokenize, TokenId, TokenSequence};

/// Estimated probability that a state ends up with the attribute.
pub trait ValueFn: Sync {
    fn value(&self, prompt: &[TokenId], generated: &[TokenId]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenormMode {
    #[default]
    PreserveSubsetMass,
    SubsetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    #[default]
    Critic,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerConfig {
    #[serde(rename = "K", alias = "k", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub renorm_mode: RenormMode,
    #[serde(default)]
    pub value_source: ValueSource,
}

fn default_k() -> usize {
    10
}

fn default_epsilon() -> f64 {
    1e-4
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            k: default_k(),
            epsilon: default_epsilon(),
            renorm_mode: RenormMode::default(),
            value_source: ValueSource::default(),
        }
    }
}

impl SteerConfig {
    pub fn with_k(self, k: usize) -> Self {
        SteerConfig { k, ..self }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.k < 1 || self.k > vocab_size {
            return Err(Error::config("steer.K", format!("must lie in [1, {vocab_size}], got {}", self.k)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config("steer.epsilon", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// `clamp(V(next), ε, 1) / clamp(V(cur), ε, 1)`.
pub fn steering_ratio(v_next: f64, v_cur: f64, epsilon: f64) -> f64 {
    v_next.clamp(epsilon, 1.0) / v_cur.clamp(epsilon, 1.0)
}

/// The `k` most probable tokens, ties broken by lower id.
pub fn top_k_subset(base: &Distribution, k: usize) -> Vec<TokenId> {
    let mut ranked = base.ranked();
    ranked.truncate(k);
    ranked
}

/// Multiplies `base[subset[i]]` by `alphas[i]` and renormalizes per `mode`.
pub fn reweight(base: &Distribution, subset: &[TokenId], alphas: &[f64], mode: RenormMode) -> Result<Distribution> {
    if subset.len() != alphas.len() {
        return Err(Error::Shape {
            expected: subset.len(),
            actual: alphas.len(),
        });
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::InvalidInput(format!("steering ratio {a} is not a positive finite number")));
    }
    let p = base.probs();
    let mass: f64 = subset.iter().map(|&c| p[c as usize]).sum();
    let raw: Vec<f64> = subset.iter().zip(alphas).map(|(&c, a)| a * p[c as usize]).collect();
    let raw_mass: f64 = raw.iter().sum();
    match mode {
        RenormMode::PreserveSubsetMass => {
            if raw_mass == 0.0 {
                return Ok(base.clone());
            }
            let mut out = p.to_vec();
            for (&c, r) in subset.iter().zip(&raw) {
                out[c as usize] = r * mass / raw_mass;
            }
            Distribution::from_weights(out)
        }
        RenormMode::SubsetOnly => {
            let mut out = vec![0.0; p.len()];
            for (&c, r) in subset.iter().zip(&raw) {
                out[c as usize] = if raw_mass > 0.0 { *r } else { p[c as usize] };
            }
            Distribution::from_weights(out)
        }
    }
}

/// What one steering step saw, for `--trace` dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub top_k_ids: Vec<TokenId>,
    pub base_probs: Vec<f64>,
    pub alphas: Vec<f64>,
    pub steered_probs: Vec<f64>,
}

pub fn steer_distribution(
    base: &Distribution,
    prompt: &[TokenId],
    generated: &[TokenId],
    value_fn: &dyn ValueFn,
    cfg: &SteerConfig,
) -> Result<(Distribution, StepTrace)> {
    let subset = top_k_subset(base, cfg.k);
    let v_cur = value_fn.value(prompt, generated);
    let mut next = generated.to_vec();
    next.push(0);
    let alphas: Vec<f64> = subset
        .iter()
        .map(|&c| {
            *next.last_mut().unwrap() = c;
            steering_ratio(value_fn.value(prompt, &next), v_cur, cfg.epsilon)
        })
        .collect();
    let steered = reweight(base, &subset, &alphas, cfg.renorm_mode)?;
    let trace = StepTrace {
        base_probs: subset.iter().map(|&c| base.prob(c)).collect(),
        steered_probs: subset.iter().map(|&c| steered.prob(c)).collect(),
        top_k_ids: subset,
        alphas,
    };
    Ok((steered, trace))
}

/// `p → p^θ` for tokens in `history`, then renormalize.
pub fn apply_repetition_penalty(dist: &Distribution, history: &[TokenId], theta: f64) -> Result<Distribution> {
    if !(theta >= 1.0 && theta.is_finite()) {
        return Err(Error::config("decode.repetition_penalty", "must be >= 1"));
    }
    if theta == 1.0 || history.is_empty() {
        return Ok(dist.clone());
    }
    let mut seen = vec![false; dist.len()];
    for &t in history {
        seen[t as usize] = true;
    }
    let weights = dist
        .probs()
        .iter()
        .zip(&seen)
        .map(|(&p, &s)| if s { p.powf(theta) } else { p })
        .collect();
    Distribution::from_weights(weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Greedy,
    #[serde(rename = "top_k_sample")]
    TopK,
    #[default]
    #[serde(rename = "nucleus_sample")]
    Nucleus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeStrategy {
    #[serde(rename = "strategy", default)]
    pub kind: StrategyKind,
    #[serde(default = "default_sample_k")]
    pub sample_k: usize,
    #[serde(default = "default_nucleus_p")]
    pub nucleus_p: f64,
    #[serde(default = "default_penalty")]
    pub repetition_penalty: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sample_k() -> usize {
    10
}

fn default_nucleus_p() -> f64 {
    0.9
}

fn default_penalty() -> f64 {
    1.0
}

fn default_max_len() -> usize {
    16
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        DecodeStrategy {
            kind: StrategyKind::default(),
            sample_k: default_sample_k(),
            nucleus_p: default_nucleus_p(),
            repetition_penalty: default_penalty(),
            max_len: default_max_len(),
            seed: 0,
        }
    }
}

impl DecodeStrategy {
    pub fn greedy(max_len: usize) -> Self {
        DecodeStrategy {
            kind: StrategyKind::Greedy,
            max_len,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_k < 1 {
            return Err(Error::config("decode.sample_k", "must be at least 1"));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::config("decode.nucleus_p", "must lie in (0, 1]"));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::config("decode.repetition_penalty", "must be >= 1"));
        }
        if self.max_len < 1 {
            return Err(Error::config("decode.max_len", "must be at least 1"));
        }
        Ok(())
    }
}

/// Keeps the `k` most probable tokens and renormalizes.
pub fn filter_top_k(dist: &Distribution, k: usize) -> Distribution {
    if k >= dist.len() {
        return dist.clone();
    }
    let mut out = vec![0.0; dist.len()];
    for c in top_k_subset(dist, k) {
        out[c as usize] = dist.prob(c);
    }
    Distribution::from_weights(out).expect("top-1 token has positive mass")
}

/// Smallest most-probable prefix with cumulative mass at least `p`, renormalized.
pub fn filter_nucleus(dist: &Distribution, p: f64) -> Distribution {
    if p >= 1.0 {
        return dist.clone();
    }
    let mut out = vec![0.0; dist.len()];
    let mut cumulative = 0.0;
    for c in dist.ranked() {
        out[c as usize] = dist.prob(c);
        cumulative += dist.prob(c);
        if cumulative >= p {
            break;
        }
    }
    Distribution::from_weights(out).expect("top-1 token has positive mass")
}

/// The law the next token is drawn from, before strategy filtering, plus the
/// steering trace when a value function is present.
pub fn step_distribution(
    lm: &MarkovLm,
    value_fn: Option<&dyn ValueFn>,
    prompt: &[TokenId],
    generated: &[TokenId],
    steer: &SteerConfig,
    repetition_penalty: f64,
) -> Result<(Distribution, Option<StepTrace>)> {
    let base = lm.policy(prompt, generated, 1.0)?;
    let (dist, trace) = match value_fn {
        Some(v) => {
            let (d, t) = steer_distribution(&base, prompt, generated, v, steer)?;
            (d, Some(t))
        }
        None => (base, None),
    };
    let mut history = prompt.to_vec();
    history.extend_from_slice(generated);
    Ok((apply_repetition_penalty(&dist, &history, repetition_penalty)?, trace))
}

fn choose<R: Rng + ?Sized>(dist: &Distribution, strategy: &DecodeStrategy, rng: &mut R) -> Result<TokenId> {
    match strategy.kind {
        StrategyKind::Greedy => Ok(dist.argmax()),
        StrategyKind::TopK => sample(&filter_top_k(dist, strategy.sample_k), rng),
        StrategyKind::Nucleus => sample(&filter_nucleus(dist, strategy.nucleus_p), rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<TokenId>,
    pub trace: Vec<StepTrace>,
}

/// Decodes one continuation; stops after EOS or `max_len` tokens.
pub fn decode_with_rng<R: Rng + ?Sized>(
    lm: &MarkovLm,
    value_fn: Option<&dyn ValueFn>,
    prompt: &[TokenId],
    steer: &SteerConfig,
    strategy: &DecodeStrategy,
    rng: &mut R,
) -> Result<Decoded> {
    steer.validate(lm.vocab_size())?;
    strategy.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    let eos = lm.vocab().eos();
    let mut ids = Vec::with_capacity(strategy.max_len);
    let mut trace = Vec::new();
    while ids.len() < strategy.max_len {
        let (dist, step) = step_distribution(lm, value_fn, prompt, &ids, steer, strategy.repetition_penalty)?;
        trace.extend(step);
        let tok = choose(&dist, strategy, rng)?;
        ids.push(tok);
        if tok == eos {
            break;
        }
    }
    Ok(Decoded { ids, trace })
}

/// [`decode_with_rng`] seeded from `strategy.seed`.
pub fn decode(
    lm: &MarkovLm,
    value_fn: Option<&dyn ValueFn>,
    prompt: &[TokenId],
    steer: &SteerConfig,
    strategy: &DecodeStrategy,
) -> Result<Decoded> {
    decode_with_rng(lm, value_fn, prompt, steer, strategy, &mut episode_rng(strategy.seed, 0, 0))
}

/// One row of a generation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub model: String,
    pub prompt: String,
    pub prompt_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    pub output_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step: Option<Vec<StepTrace>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// `per_prompt` continuations of every prompt, prompt-major. Each sample has
/// its own random stream so the result does not depend on thread scheduling.
pub fn generate_batch(
    lm: &MarkovLm,
    value_fn: Option<&dyn ValueFn>,
    prompts: &[TokenSequence],
    per_prompt: usize,
    steer: &SteerConfig,
    strategy: &DecodeStrategy,
    trace: bool,
) -> Result<Vec<Generation>> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..per_prompt).map(move |i| (p, i)))
        .collect();
    jobs.par_iter()
        .map(|&(p, i)| {
            let prompt = &prompts[p].ids;
            let mut rng = episode_rng(strategy.seed, p, i);
            let out = decode_with_rng(lm, value_fn, prompt, steer, strategy, &mut rng)?;
            Ok(Generation {
                model: if value_fn.is_some() { "steered" } else { "base" }.to_owned(),
                prompt: detokenize(prompt, lm.vocab()),
                prompt_ids: prompt.clone(),
                output_text: detokenize(&out.ids, lm.vocab()),
                output_ids: out.ids,
                per_step: trace.then_some(out.trace),
                config_digest: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::train_lm;
    use crate::vocab::{build_vocab, tokenize};
    use proptest::prelude::*;

    struct Constant(f64);

    impl ValueFn for Constant {
        fn value(&self, _: &[TokenId], _: &[TokenId]) -> f64 {
            self.0
        }
    }

    /// Favours continuations whose last token is `target`.
    struct Likes(TokenId);

    impl ValueFn for Likes {
        fn value(&self, _: &[TokenId], generated: &[TokenId]) -> f64 {
            if generated.last() == Some(&self.0) {
                0.9
            } else {
                0.3
            }
        }
    }

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn lm() -> MarkovLm {
        let lines = ["a b c a b", "b a c c", "c a a b", "a b b c a"];
        let vocab = build_vocab(&lines, 1).unwrap();
        let corpus: Vec<_> = lines.iter().map(|l| tokenize(l, &vocab)).collect();
        train_lm(&corpus, &vocab, 1, 0.5).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(steering_ratio(0.4, 0.4, 1e-4), 1.0);
        assert!((steering_ratio(0.0, 0.5, 1e-4) - 1e-4 / 0.5).abs() < 1e-18);
        assert!((steering_ratio(0.3, 0.0, 0.1) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn preserve_mass_hand_example() {
        let out = reweight(&dist(&[0.5, 0.3, 0.2]), &[0, 1], &[2.0, 1.0], RenormMode::PreserveSubsetMass).unwrap();
        let expect = [0.8 / 1.3, 0.3 * 0.8 / 1.3, 0.2];
        for (a, b) in out.probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.probs()[0] - 0.6154).abs() < 1e-4);
        assert!((out.probs()[1] - 0.1846).abs() < 1e-4);
    }

    #[test]
    fn unit_ratios_are_identity() {
        let base = dist(&[0.1, 0.4, 0.3, 0.2]);
        let subset = top_k_subset(&base, 2);
        assert_eq!(subset, vec![1, 2]);
        let same = reweight(&base, &subset, &[1.0, 1.0], RenormMode::PreserveSubsetMass).unwrap();
        for (a, b) in same.probs().iter().zip(base.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        let truncated = reweight(&base, &subset, &[1.0, 1.0], RenormMode::SubsetOnly).unwrap();
        assert_eq!(truncated.probs()[0], 0.0);
        assert!((truncated.probs()[1] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_id() {
        assert_eq!(top_k_subset(&dist(&[0.25, 0.25, 0.25, 0.25]), 2), vec![0, 1]);
    }

    #[test]
    fn subset_only_with_dead_subset_falls_back_to_base() {
        let base = dist(&[0.0, 0.0, 1.0]);
        let out = reweight(&base, &[0, 1], &[1.0, 1.0], RenormMode::SubsetOnly);
        // both subset entries are zero and so is their base mass
        assert!(out.is_err());
        let out = reweight(&dist(&[0.6, 0.4, 0.0]), &[0, 1], &[1e-300, 1e-300], RenormMode::SubsetOnly).unwrap();
        assert!((out.probs()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_ratios() {
        let base = dist(&[0.5, 0.5]);
        assert!(reweight(&base, &[0], &[0.0], RenormMode::SubsetOnly).is_err());
        assert!(reweight(&base, &[0], &[f64::NAN], RenormMode::SubsetOnly).is_err());
        assert!(reweight(&base, &[0, 1], &[1.0], RenormMode::SubsetOnly).is_err());
    }

    #[test]
    fn repetition_penalty_hand_example() {
        let out = apply_repetition_penalty(&dist(&[0.5, 0.5]), &[0], 2.0).unwrap();
        assert!((out.probs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.probs()[1] - 2.0 / 3.0).abs() < 1e-15);
        let base = dist(&[0.2, 0.8]);
        assert_eq!(apply_repetition_penalty(&base, &[0, 1], 1.0).unwrap(), base);
        assert_eq!(apply_repetition_penalty(&base, &[], 3.0).unwrap(), base);
        assert!(apply_repetition_penalty(&base, &[0], 0.5).is_err());
    }

    #[test]
    fn filters() {
        let d = dist(&[0.1, 0.5, 0.15, 0.25]);
        assert_eq!(filter_top_k(&d, 4), d);
        assert_eq!(filter_nucleus(&d, 1.0), d);
        let top2 = filter_top_k(&d, 2);
        assert!((top2.probs()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(top2.probs()[0], 0.0);
        // 0.5 + 0.25 = 0.75 ≥ 0.7
        let nuc = filter_nucleus(&d, 0.7);
        assert_eq!(nuc.probs()[2], 0.0);
        assert!((nuc.probs()[3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(filter_nucleus(&d, 0.5).probs()[1], 1.0);
    }

    #[test]
    fn constant_values_reproduce_unsteered_greedy() {
        let lm = lm();
        let prompt = tokenize("a", lm.vocab()).ids;
        let strategy = DecodeStrategy::greedy(8);
        let steer = SteerConfig::default().with_k(lm.vocab_size());
        let plain = decode(&lm, None, &prompt, &steer, &strategy).unwrap();
        let steered = decode(&lm, Some(&Constant(0.42)), &prompt, &steer, &strategy).unwrap();
        assert_eq!(plain.ids, steered.ids);
        assert!(steered.trace.iter().all(|t| t.alphas.iter().all(|&a| a == 1.0)));
    }

    #[test]
    fn steering_moves_mass_toward_liked_token() {
        let lm = lm();
        let c = lm.vocab().id("c").unwrap();
        let prompt = tokenize("a", lm.vocab()).ids;
        let steer = SteerConfig::default().with_k(3);
        let base = lm.policy(&prompt, &[], 1.0).unwrap();
        let (steered, trace) = steer_distribution(&base, &prompt, &[], &Likes(c), &steer).unwrap();
        assert!(steered.prob(c) > base.prob(c));
        assert_eq!(trace.top_k_ids.len(), 3);
    }

    #[test]
    fn seeded_decoding_repeats() {
        let lm = lm();
        let prompts = vec![tokenize("a", lm.vocab()), tokenize("b c", lm.vocab())];
        let strategy = DecodeStrategy {
            seed: 3,
            ..Default::default()
        };
        let steer = SteerConfig::default().with_k(3);
        let v = Likes(lm.vocab().id("b").unwrap());
        let a = generate_batch(&lm, Some(&v), &prompts, 4, &steer, &strategy, true).unwrap();
        let b = generate_batch(&lm, Some(&v), &prompts, 4, &steer, &strategy, true).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn config_validation() {
        assert!(SteerConfig::default().validate(10).is_ok());
        assert!(SteerConfig::default().validate(9).is_err());
        let bad = SteerConfig {
            epsilon: 0.5,
            ..Default::default()
        };
        assert!(bad.validate(20).is_err());
        let s = DecodeStrategy {
            nucleus_p: 0.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    fn base_and_alphas() -> impl Strategy<Value = (Vec<f64>, usize, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..1.0, n),
                1..=n,
                proptest::collection::vec(1e-3f64..1e3, n),
            )
        })
    }

    fn valid(weights: Vec<f64>) -> Option<Distribution> {
        Distribution::from_weights(weights).ok()
    }

    proptest! {
        #[test]
        fn steered_output_is_a_distribution((w, k, alphas) in base_and_alphas()) {
            let Some(base) = valid(w) else { return Ok(()) };
            let subset = top_k_subset(&base, k);
            for mode in [RenormMode::PreserveSubsetMass, RenormMode::SubsetOnly] {
                let out = reweight(&base, &subset, &alphas[..k], mode).unwrap();
                let total: f64 = out.probs().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                prop_assert!(out.probs().iter().all(|&p| p >= 0.0));
                for (q, p) in out.probs().iter().zip(base.probs()) {
                    if *p == 0.0 {
                        prop_assert_eq!(*q, 0.0);
                    }
                }
            }
        }

        #[test]
        fn raising_one_ratio_never_lowers_its_token((w, k, alphas) in base_and_alphas(), i in 0usize..12, bump in 1.0f64..10.0) {
            let Some(base) = valid(w) else { return Ok(()) };
            let subset = top_k_subset(&base, k);
            let i = i % k;
            let mut raised = alphas[..k].to_vec();
            raised[i] *= bump;
            let c = subset[i];
            for mode in [RenormMode::PreserveSubsetMass, RenormMode::SubsetOnly] {
                let before = reweight(&base, &subset, &alphas[..k], mode).unwrap().prob(c);
                let after = reweight(&base, &subset, &raised, mode).unwrap().prob(c);
                prop_assert!(after >= before - 1e-15);
            }
        }

        #[test]
        fn preserve_mode_leaves_tail_alone((w, k, alphas) in base_and_alphas()) {
            let Some(base) = valid(w) else { return Ok(()) };
            let subset = top_k_subset(&base, k);
            let out = reweight(&base, &subset, &alphas[..k], RenormMode::PreserveSubsetMass).unwrap();
            for c in 0..base.len() as TokenId {
                if !subset.contains(&c) {
                    prop_assert!((out.prob(c) - base.prob(c)).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn full_width_filters_are_identity(w in proptest::collection::vec(0.0f64..1.0, 2..10)) {
            let Some(base) = valid(w) else { return Ok(()) };
            prop_assert_eq!(filter_top_k(&base, base.len()), base.clone());
            prop_assert_eq!(filter_nucleus(&base, 1.0), base);
        }
    }
}
