//! Exact attribute probabilities for a Markov policy and a DFA attribute.
//!
//! `W(r, c, s)` is the probability of ending in an accepting state with `r`
//! steps left, LM context `c` and automaton state `s`:
//!
//! ```text
//! W(0, c, s) = acc(s)
//! W(r, c, s) = Σ_x p_T(x | c) · W(r−1, shift(c, x), δ(s, x))
//! ```
//!
//! Emitting EOS ends the episode, so its term is `acc(δ(s, EOS))`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::attribute::{dfa_reward, dfa_state_after, DfaAttribute, StateId};
use crate::error::{Error, Result};
use crate::lm::{Distribution, MarkovLm};
use crate::steer::ValueFn;
use crate::vocab::TokenId;

pub const ORACLE_CAPACITY: u128 = 10_000_000;
pub const ENUMERATION_CAPACITY: u128 = 1_000_000;

#[derive(Debug, Clone)]
pub struct OracleTable {
    lm: MarkovLm,
    dfa: DfaAttribute,
    horizon: usize,
    temperature: f64,
    contexts: usize,
    /// `p_T(x | c)` at `c * |V| + x`.
    policy: Vec<f64>,
    /// `W(r, c, s)` at `(r * contexts + c) * states + s`.
    values: Vec<f64>,
}

fn acc(dfa: &DfaAttribute, s: StateId) -> f64 {
    if dfa.is_accepting(s) {
        1.0
    } else {
        0.0
    }
}

pub fn build_oracle(lm: &MarkovLm, dfa: &DfaAttribute, horizon: usize, temperature: f64) -> Result<OracleTable> {
    OracleTable::build(lm, dfa, horizon, temperature)
}

impl OracleTable {
    pub fn build(lm: &MarkovLm, dfa: &DfaAttribute, horizon: usize, temperature: f64) -> Result<Self> {
        let v = lm.vocab_size();
        let m = lm.order();
        let s_count = dfa.num_states();
        let contexts = (v as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
        let entries = contexts
            .saturating_mul(horizon as u128 + 1)
            .saturating_mul(s_count as u128)
            .saturating_add(contexts.saturating_mul(v as u128));
        if entries > ORACLE_CAPACITY {
            return Err(Error::Capacity {
                entries,
                limit: ORACLE_CAPACITY,
            });
        }
        let contexts = contexts as usize;
        let policy: Vec<f64> = (0..contexts)
            .into_par_iter()
            .map(|c| lm.policy_for_context(&context_ids(c, m, v), temperature).map(Distribution::into_probs))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let eos = lm.vocab().eos() as usize;
        let layer = contexts * s_count;
        let mut values = Vec::with_capacity((horizon + 1) * layer);
        values.extend((0..layer).map(|i| acc(dfa, i % s_count)));
        for r in 1..=horizon {
            let prev = &values[(r - 1) * layer..r * layer];
            let next: Vec<f64> = (0..layer)
                .into_par_iter()
                .map(|i| {
                    let (c, s) = (i / s_count, i % s_count);
                    let p = &policy[c * v..(c + 1) * v];
                    let mut w = 0.0;
                    for (x, &px) in p.iter().enumerate() {
                        if px == 0.0 {
                            continue;
                        }
                        let s2 = dfa.step(s, x as TokenId);
                        w += px * if x == eos { acc(dfa, s2) } else { prev[shift(c, x, v, contexts) * s_count + s2] };
                    }
                    w.min(1.0)
                })
                .collect();
            values.extend(next);
        }
        Ok(OracleTable {
            lm: lm.clone(),
            dfa: dfa.clone(),
            horizon,
            temperature,
            contexts,
            policy,
            values,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_entries(&self) -> usize {
        self.values.len()
    }

    pub fn lm(&self) -> &MarkovLm {
        &self.lm
    }

    pub fn dfa(&self) -> &DfaAttribute {
        &self.dfa
    }

    /// `W(r, c, s)` by raw indices.
    pub fn entry(&self, remaining: usize, context: usize, state: StateId) -> f64 {
        let s_count = self.dfa.num_states();
        self.values[(remaining * self.contexts + context) * s_count + state]
    }

    pub fn context_index(&self, context: &[TokenId]) -> usize {
        let v = self.lm.vocab_size();
        context.iter().fold(0, |acc, &t| acc * v + t as usize)
    }

    /// `P(a | prompt ⊕ generated)` under the table's policy.
    pub fn value(&self, prompt: &[TokenId], generated: &[TokenId]) -> f64 {
        let mut text = prompt.to_vec();
        text.extend_from_slice(generated);
        let s = dfa_state_after(&self.dfa, &text);
        let t = generated.len();
        if t >= self.horizon || generated.last() == Some(&self.lm.vocab().eos()) {
            return acc(&self.dfa, s);
        }
        let c = self.context_index(&self.lm.context_of_state(prompt, generated));
        self.entry(self.horizon - t, c, s)
    }

    /// `P(x | prompt ⊕ generated, a) = p_T(x | c) · W_next(x) / W_cur`.
    pub fn exact_conditional(&self, prompt: &[TokenId], generated: &[TokenId]) -> Result<Distribution> {
        if generated.len() >= self.horizon || generated.last() == Some(&self.lm.vocab().eos()) {
            return Err(Error::InvalidInput("state is terminal".into()));
        }
        let w_cur = self.value(prompt, generated);
        if w_cur == 0.0 {
            return Err(Error::AttributeUnreachable);
        }
        let v = self.lm.vocab_size();
        let c = self.context_index(&self.lm.context_of_state(prompt, generated));
        let p = &self.policy[c * v..(c + 1) * v];
        let mut next = generated.to_vec();
        next.push(0);
        let probs: Vec<f64> = (0..v)
            .map(|x| {
                if p[x] == 0.0 {
                    return 0.0;
                }
                *next.last_mut().unwrap() = x as TokenId;
                p[x] * self.value(prompt, &next) / w_cur
            })
            .collect();
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Assertion(format!("exact conditional sums to {total}")));
        }
        Distribution::from_weights(probs)
    }

    /// Largest `|Σ_x p_T(x|c) · W(r−1, c⊕x) − W(r, c)|` over the table,
    /// summed in reverse token order.
    pub fn martingale_residual(&self) -> f64 {
        let v = self.lm.vocab_size();
        let s_count = self.dfa.num_states();
        let eos = self.lm.vocab().eos() as usize;
        let mut worst: f64 = 0.0;
        for r in 1..=self.horizon {
            for c in 0..self.contexts {
                for s in 0..s_count {
                    let mut sum = 0.0;
                    for x in (0..v).rev() {
                        let s2 = self.dfa.step(s, x as TokenId);
                        let w = if x == eos {
                            acc(&self.dfa, s2)
                        } else {
                            self.entry(r - 1, shift(c, x, v, self.contexts), s2)
                        };
                        sum += self.policy[c * v + x] * w;
                    }
                    worst = worst.max((sum - self.entry(r, c, s)).abs());
                }
            }
        }
        worst
    }

    /// Smallest nonzero value in the table; steering with a clamp floor
    /// below it leaves every ratio exact.
    pub fn min_positive_value(&self) -> Option<f64> {
        self.values.iter().copied().filter(|&w| w > 0.0).min_by(f64::total_cmp)
    }

    pub fn is_bounded(&self) -> bool {
        self.values.iter().all(|w| (0.0..=1.0 + 1e-12).contains(w))
    }
}

impl ValueFn for OracleTable {
    fn value(&self, prompt: &[TokenId], generated: &[TokenId]) -> f64 {
        OracleTable::value(self, prompt, generated)
    }
}

pub fn oracle_value(table: &OracleTable, prompt: &[TokenId], generated: &[TokenId]) -> f64 {
    table.value(prompt, generated)
}

pub fn exact_conditional(table: &OracleTable, prompt: &[TokenId], generated: &[TokenId]) -> Result<Distribution> {
    table.exact_conditional(prompt, generated)
}

fn context_ids(index: usize, m: usize, v: usize) -> Vec<TokenId> {
    let mut ids = vec![0; m];
    let mut rest = index;
    for slot in ids.iter_mut().rev() {
        *slot = (rest % v) as TokenId;
        rest /= v;
    }
    ids
}

fn shift(c: usize, x: usize, v: usize, contexts: usize) -> usize {
    (c * v + x) % contexts
}

/// Result of brute-force enumeration from one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub value: f64,
    /// `None` when the state is terminal or the attribute is unreachable.
    pub conditional: Option<Distribution>,
}

/// Sums over every completion of `prompt ⊕ generated` path by path, scoring
/// each finished text from scratch. Shares no code with the table.
pub fn enumerate_check(
    lm: &MarkovLm,
    dfa: &DfaAttribute,
    horizon: usize,
    temperature: f64,
    prompt: &[TokenId],
    generated: &[TokenId],
) -> Result<Enumeration> {
    let eos = lm.vocab().eos();
    let mut text = prompt.to_vec();
    text.extend_from_slice(generated);
    if generated.len() >= horizon || generated.last() == Some(&eos) {
        return Ok(Enumeration {
            value: dfa_reward(dfa, &text),
            conditional: None,
        });
    }
    let depth = horizon - generated.len();
    let paths = (lm.vocab_size() as u128).checked_pow(depth as u32).unwrap_or(u128::MAX);
    if paths > ENUMERATION_CAPACITY {
        return Err(Error::Capacity {
            entries: paths,
            limit: ENUMERATION_CAPACITY,
        });
    }
    let mut by_first = vec![0.0; lm.vocab_size()];
    // (continuation so far, path probability)
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((cont, prob)) = stack.pop() {
        let mut gen = generated.to_vec();
        gen.extend_from_slice(&cont);
        if !cont.is_empty() && (gen.len() == horizon || *cont.last().unwrap() == eos) {
            let mut full = prompt.to_vec();
            full.extend_from_slice(&gen);
            by_first[cont[0] as usize] += prob * dfa_reward(dfa, &full);
            continue;
        }
        let p = lm.policy(prompt, &gen, temperature)?;
        for (x, &px) in p.probs().iter().enumerate() {
            if px > 0.0 {
                let mut next = cont.clone();
                next.push(x as TokenId);
                stack.push((next, prob * px));
            }
        }
    }
    let value: f64 = by_first.iter().sum();
    let conditional = if value > 0.0 {
        Some(Distribution::from_weights(by_first)?)
    } else {
        None
    };
    Ok(Enumeration { value, conditional })
}

/// Exact probability that decoding from `prompt` ends with the attribute,
/// where `step(generated)` gives the next-token law.
///
/// Runs forward over `(LM context, automaton state)` cells, keeping one
/// representative continuation per cell, so `step` must depend on the state
/// only through the step index, the context and the automaton state (true
/// for oracle-steered and plain decoding without a repetition penalty).
pub fn policy_success_probability<F>(
    lm: &MarkovLm,
    dfa: &DfaAttribute,
    prompt: &[TokenId],
    horizon: usize,
    mut step: F,
) -> Result<f64>
where
    F: FnMut(&[TokenId]) -> Result<Distribution>,
{
    let eos = lm.vocab().eos();
    let start = dfa_state_after(dfa, prompt);
    let mut frontier: BTreeMap<(Vec<TokenId>, StateId), (f64, Vec<TokenId>)> = BTreeMap::new();
    frontier.insert((lm.context_of_state(prompt, &[]), start), (1.0, Vec::new()));
    let mut success = 0.0;
    for _ in 0..horizon {
        let mut next_frontier: BTreeMap<(Vec<TokenId>, StateId), (f64, Vec<TokenId>)> = BTreeMap::new();
        for ((_, s), (mass, rep)) in frontier {
            let dist = step(&rep)?;
            for (x, &px) in dist.probs().iter().enumerate() {
                if px == 0.0 {
                    continue;
                }
                let x = x as TokenId;
                let s2 = dfa.step(s, x);
                if x == eos {
                    success += mass * px * acc(dfa, s2);
                    continue;
                }
                let mut gen = rep.clone();
                gen.push(x);
                let key = (lm.context_of_state(prompt, &gen), s2);
                let cell = next_frontier.entry(key).or_insert((0.0, gen));
                cell.0 += mass * px;
            }
        }
        frontier = next_frontier;
    }
    for ((_, s), (mass, _)) in frontier {
        success += mass * acc(dfa, s);
    }
    Ok(success)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::train_lm;
    use crate::vocab::{build_vocab, tokenize};

    fn setup() -> (MarkovLm, DfaAttribute, TokenId) {
        let lines = ["a b t a", "b b a", "a a b", "t b a b"];
        let vocab = build_vocab(&lines, 1).unwrap();
        let corpus: Vec<_> = lines.iter().map(|l| tokenize(l, &vocab)).collect();
        let lm = train_lm(&corpus, &vocab, 1, 0.5).unwrap();
        let t = vocab.id("t").unwrap();
        let dfa = DfaAttribute::contains_token(t, vocab.len()).unwrap();
        (lm, dfa, t)
    }

    #[test]
    fn all_accepting_is_one_and_none_accepting_is_zero() {
        let (lm, _, _) = setup();
        let v = lm.vocab_size();
        let yes = DfaAttribute::new(1, 0, &[0], std::iter::empty(), [(0, 0)], v).unwrap();
        let table = build_oracle(&lm, &yes, 4, 2.0).unwrap();
        assert!(table.values.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        let base = lm.policy(&[0], &[], 2.0).unwrap();
        let cond = table.exact_conditional(&[0], &[]).unwrap();
        for (a, b) in cond.probs().iter().zip(base.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_matches_enumeration() {
        let (lm, dfa, t) = setup();
        for temperature in [1.0, 2.0] {
            let table = build_oracle(&lm, &dfa, 5, temperature).unwrap();
            let a = lm.vocab().id("a").unwrap();
            for generated in [vec![], vec![a], vec![a, a], vec![t, a, a]] {
                let e = enumerate_check(&lm, &dfa, 5, temperature, &[a], &generated).unwrap();
                assert!((table.value(&[a], &generated) - e.value).abs() < 1e-12);
                let exact = table.exact_conditional(&[a], &generated).unwrap();
                for (x, y) in exact.probs().iter().zip(e.conditional.unwrap().probs()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            assert!(table.martingale_residual() < 1e-12);
            assert!(table.is_bounded());
        }
    }

    #[test]
    fn last_step_forces_target() {
        let (lm, dfa, t) = setup();
        let a = lm.vocab().id("a").unwrap();
        let table = build_oracle(&lm, &dfa, 3, 1.0).unwrap();
        let cond = table.exact_conditional(&[a], &[a, a]).unwrap();
        assert!((cond.prob(t) - 1.0).abs() < 1e-12);
        // satisfied already: absorbing
        assert_eq!(table.value(&[a], &[t]), 1.0);
        assert_eq!(table.value(&[t], &[]), 1.0);
    }

    #[test]
    fn terminal_values_and_errors() {
        let (lm, dfa, t) = setup();
        let a = lm.vocab().id("a").unwrap();
        let table = build_oracle(&lm, &dfa, 2, 1.0).unwrap();
        assert_eq!(table.value(&[a], &[a, a]), 0.0);
        assert_eq!(table.value(&[a], &[a, t]), 1.0);
        assert!(matches!(table.exact_conditional(&[a], &[a, a]), Err(Error::InvalidInput(_))));
        let eos = lm.vocab().eos();
        assert_eq!(table.value(&[a], &[eos]), 0.0);
        // <s> is never emitted, so a DFA waiting for it can never accept
        let never = DfaAttribute::contains_token(lm.vocab().bos(), lm.vocab_size()).unwrap();
        let table = build_oracle(&lm, &never, 2, 1.0).unwrap();
        assert_eq!(table.value(&[a], &[]), 0.0);
        assert!(matches!(table.exact_conditional(&[a], &[]), Err(Error::AttributeUnreachable)));
    }

    #[test]
    fn capacity_is_enforced() {
        let (lm, dfa, _) = setup();
        assert!(matches!(build_oracle(&lm, &dfa, 2_000_000, 1.0), Err(Error::Capacity { .. })));
        assert!(matches!(enumerate_check(&lm, &dfa, 40, 1.0, &[0], &[]), Err(Error::Capacity { .. })));
    }

    #[test]
    fn forward_success_matches_start_value() {
        let (lm, dfa, _) = setup();
        let a = lm.vocab().id("a").unwrap();
        let table = build_oracle(&lm, &dfa, 5, 2.0).unwrap();
        let p = policy_success_probability(&lm, &dfa, &[a], 5, |gen| lm.policy(&[a], gen, 2.0)).unwrap();
        assert!((p - table.value(&[a], &[])).abs() < 1e-12);
        let steered = policy_success_probability(&lm, &dfa, &[a], 5, |gen| table.exact_conditional(&[a], gen)).unwrap();
        assert!((steered - 1.0).abs() < 1e-12);
    }

    #[test]
    fn old_tokens_do_not_matter_once_state_is_fixed() {
        let (lm, dfa, _) = setup();
        let v = lm.vocab();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let x = enumerate_check(&lm, &dfa, 5, 1.0, &[a], &[b, a]).unwrap();
        let y = enumerate_check(&lm, &dfa, 5, 1.0, &[b], &[b, a]).unwrap();
        assert!((x.value - y.value).abs() < 1e-15);
    }
}
