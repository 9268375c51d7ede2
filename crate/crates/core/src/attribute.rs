//! Reward models producing `r_end ∈ [0, 1]` for a finished text.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::remote::{remote_scores, RemoteScorerConfig};
use crate::vocab::{detokenize, TokenId, Vocabulary};

pub type StateId = usize;

/// Deterministic automaton over token ids. A missing explicit transition
/// falls back to the state's default.
#[derive(Debug, Clone, PartialEq)]
pub struct DfaAttribute {
    states: usize,
    start: StateId,
    accepting: Vec<bool>,
    transitions: BTreeMap<(StateId, TokenId), StateId>,
    defaults: Vec<Option<StateId>>,
}

/// Token reference in a DFA file: an id, or a token string resolved through
/// the vocabulary (unknown strings resolve to `<unk>`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TokenRef {
    Id(TokenId),
    Name(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransitionSpec {
    pub from: StateId,
    pub token: TokenRef,
    pub to: StateId,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DefaultSpec {
    pub from: StateId,
    pub to: StateId,
}

/// JSON layout of a DFA file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DfaFile {
    pub states: usize,
    pub start: StateId,
    pub accepting: Vec<StateId>,
    #[serde(default)]
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub defaults: Vec<DefaultSpec>,
}

impl DfaAttribute {
    /// Builds and validates an automaton for a vocabulary of `vocab_size`
    /// tokens: ids in range, transition function total, some accepting state
    /// reachable from the start.
    pub fn new(
        states: usize,
        start: StateId,
        accepting: &[StateId],
        transitions: impl IntoIterator<Item = (StateId, TokenId, StateId)>,
        defaults: impl IntoIterator<Item = (StateId, StateId)>,
        vocab_size: usize,
    ) -> Result<Self> {
        let bad = |msg: String| Error::InvalidInput(format!("DFA: {msg}"));
        if states == 0 {
            return Err(bad("no states".into()));
        }
        let check_state = |s: StateId| {
            if s < states {
                Ok(s)
            } else {
                Err(bad(format!("state {s} out of range 0..{states}")))
            }
        };
        check_state(start)?;
        let mut acc = vec![false; states];
        for &s in accepting {
            acc[check_state(s)?] = true;
        }
        let mut table = BTreeMap::new();
        for (from, tok, to) in transitions {
            check_state(from)?;
            check_state(to)?;
            if tok as usize >= vocab_size {
                return Err(bad(format!("token id {tok} outside vocabulary of size {vocab_size}")));
            }
            if let Some(prev) = table.insert((from, tok), to) {
                if prev != to {
                    return Err(bad(format!("conflicting transitions from {from} on {tok}")));
                }
            }
        }
        let mut dflt = vec![None; states];
        for (from, to) in defaults {
            check_state(from)?;
            dflt[from] = Some(check_state(to)?);
        }
        for (s, d) in dflt.iter().enumerate() {
            if d.is_none() {
                let explicit = table.range((s, 0)..=(s, TokenId::MAX)).count();
                if explicit < vocab_size {
                    return Err(bad(format!("state {s} has no default and only {explicit} of {vocab_size} transitions")));
                }
            }
        }
        let dfa = DfaAttribute {
            states,
            start,
            accepting: acc,
            transitions: table,
            defaults: dflt,
        };
        if !dfa.reachable_from_start().iter().zip(&dfa.accepting).any(|(&r, &a)| r && a) {
            return Err(bad("no accepting state is reachable from the start".into()));
        }
        Ok(dfa)
    }

    pub fn from_file_spec(spec: &DfaFile, vocab: &Vocabulary) -> Result<Self> {
        let resolve = |t: &TokenRef| match t {
            TokenRef::Id(id) => *id,
            TokenRef::Name(name) => vocab.id_or_unk(name),
        };
        Self::new(
            spec.states,
            spec.start,
            &spec.accepting,
            spec.transitions.iter().map(|t| (t.from, resolve(&t.token), t.to)),
            spec.defaults.iter().map(|d| (d.from, d.to)),
            vocab.len(),
        )
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let spec: DfaFile = artifact::read_json(path)?;
        Self::from_file_spec(&spec, vocab)
    }

    /// Two-state automaton accepting any sequence that contains `token`.
    pub fn contains_token(token: TokenId, vocab_size: usize) -> Result<Self> {
        Self::at_least(token, 1, vocab_size)
    }

    /// Counter automaton accepting sequences with at least `count` occurrences of `token`.
    pub fn at_least(token: TokenId, count: usize, vocab_size: usize) -> Result<Self> {
        let states = count + 1;
        let transitions = (0..count).map(|s| (s, token, s + 1));
        let defaults = (0..states).map(|s| (s, s));
        Self::new(states, 0, &[count], transitions, defaults, vocab_size)
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn is_accepting(&self, s: StateId) -> bool {
        self.accepting[s]
    }

    pub fn step(&self, s: StateId, tok: TokenId) -> StateId {
        match self.transitions.get(&(s, tok)) {
            Some(&to) => to,
            None => self.defaults[s].expect("transition function validated as total"),
        }
    }

    pub fn run_from(&self, s: StateId, seq: &[TokenId]) -> StateId {
        seq.iter().fold(s, |s, &t| self.step(s, t))
    }

    fn reachable_from_start(&self) -> Vec<bool> {
        let mut seen = vec![false; self.states];
        let mut queue = VecDeque::from([self.start]);
        seen[self.start] = true;
        while let Some(s) = queue.pop_front() {
            let explicit = self.transitions.range((s, 0)..=(s, TokenId::MAX)).map(|(_, &to)| to);
            for to in explicit.chain(self.defaults[s]) {
                if !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
        seen
    }
}

/// Final automaton state after reading `seq` from the start state.
pub fn dfa_state_after(dfa: &DfaAttribute, seq: &[TokenId]) -> StateId {
    dfa.run_from(dfa.start, seq)
}

/// 1 if the automaton accepts `seq`, else 0.
pub fn dfa_reward(dfa: &DfaAttribute, seq: &[TokenId]) -> f64 {
    if dfa.is_accepting(dfa_state_after(dfa, seq)) {
        1.0
    } else {
        0.0
    }
}

/// Soft sentiment-style scorer: `logistic(slope · (pos − neg) / len + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconScorer {
    positive: BTreeSet<TokenId>,
    negative: BTreeSet<TokenId>,
    slope: f64,
    bias: f64,
}

impl LexiconScorer {
    pub fn new(
        positive: impl IntoIterator<Item = TokenId>,
        negative: impl IntoIterator<Item = TokenId>,
        slope: f64,
        bias: f64,
    ) -> Result<Self> {
        let positive: BTreeSet<_> = positive.into_iter().collect();
        let negative: BTreeSet<_> = negative.into_iter().collect();
        if let Some(t) = positive.intersection(&negative).next() {
            return Err(Error::InvalidInput(format!("token {t} is in both lexicons")));
        }
        if !slope.is_finite() || !bias.is_finite() {
            return Err(Error::config("reward.slope", "slope and bias must be finite"));
        }
        Ok(LexiconScorer {
            positive,
            negative,
            slope,
            bias,
        })
    }

    /// Lexicon files hold one token per line; tokens absent from the
    /// vocabulary are ignored rather than mapped to `<unk>`.
    pub fn load(positive: &Path, negative: &Path, vocab: &Vocabulary, slope: f64, bias: f64) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<TokenId>> {
            Ok(artifact::read_lines(p)?
                .iter()
                .filter_map(|l| vocab.id(l.trim()))
                .collect())
        };
        Self::new(read(positive)?, read(negative)?, slope, bias)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn lexicon_reward(lex: &LexiconScorer, seq: &[TokenId]) -> f64 {
    if seq.is_empty() {
        return logistic(lex.bias);
    }
    let pos = seq.iter().filter(|t| lex.positive.contains(t)).count() as f64;
    let neg = seq.iter().filter(|t| lex.negative.contains(t)).count() as f64;
    logistic(lex.slope * (pos - neg) / seq.len() as f64 + lex.bias)
}

/// Any scorer usable as the terminal reward of an episode.
#[derive(Debug, Clone)]
pub enum RewardModel {
    Dfa(DfaAttribute),
    Lexicon(LexiconScorer),
    Remote(RemoteScorerConfig),
}

impl RewardModel {
    /// Scores finished texts in order. Remote failures carry the indices of
    /// the offending inputs.
    pub fn score(&self, texts: &[Vec<TokenId>], vocab: &Vocabulary) -> Result<Vec<f64>> {
        match self {
            RewardModel::Dfa(d) => Ok(texts.iter().map(|t| dfa_reward(d, t)).collect()),
            RewardModel::Lexicon(l) => Ok(texts.iter().map(|t| lexicon_reward(l, t)).collect()),
            RewardModel::Remote(cfg) => {
                let strings: Vec<String> = texts.iter().map(|t| detokenize(t, vocab)).collect();
                remote_scores(cfg, &strings)
            }
        }
    }

    pub fn as_dfa(&self) -> Option<&DfaAttribute> {
        match self {
            RewardModel::Dfa(d) => Some(d),
            _ => None,
        }
    }
}
