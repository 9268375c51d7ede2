//! Whitespace tokenization, vocabulary construction and prompt loading.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Token inventory. Regular tokens come first (frequency descending, then
/// lexicographic), followed by `<s>`, `</s>` and `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocabulary::from_tokens(repr.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its token list. The specials must be present
    /// exactly once and every token must be distinct.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{tok}`")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks `{name}`")))
        };
        let (bos, eos, unk) = (special(BOS)?, special(EOS)?, special(UNK)?);
        Ok(Vocabulary {
            tokens,
            index,
            bos,
            eos,
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(self.unk)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Stable fingerprint used to refuse checkpoints built for another vocabulary.
    pub fn hash(&self) -> String {
        artifact::digest_hex(self.tokens.join("\n").as_bytes())
    }
}

/// Builds the vocabulary of a corpus. Tokens seen fewer than `min_count`
/// times are left out and will map to `<unk>`.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("corpus is empty".into()));
    }
    if min_count < 1 {
        return Err(Error::config("vocab.min_count", "must be at least 1"));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for tok in line.as_ref().split_whitespace() {
            if tok == BOS || tok == EOS || tok == UNK {
                continue;
            }
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens: Vec<String> = kept.into_iter().map(|(t, _)| t.to_owned()).collect();
    tokens.extend([BOS, EOS, UNK].map(str::to_owned));
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Prompt,
    Generated,
    Mixed,
}

/// Integer-coded text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub origin: Origin,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, origin: Origin) -> Self {
        TokenSequence { ids, origin }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the id range and, for generated text, that `<s>` never appears
    /// after position 0.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of size {}",
                vocab.len()
            )));
        }
        if self.origin == Origin::Generated && self.ids.iter().skip(1).any(|&id| id == vocab.bos()) {
            return Err(Error::InvalidInput("generated text contains <s> after position 0".into()));
        }
        Ok(())
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let ids = text.split_whitespace().map(|t| vocab.id_or_unk(t)).collect();
    TokenSequence::new(ids, Origin::Prompt)
}

pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    pub prompts: Vec<TokenSequence>,
    pub source_path: PathBuf,
}

impl PromptSet {
    /// One prompt per line; blank lines are skipped.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let lines = artifact::read_lines(path)?;
        let prompts: Vec<TokenSequence> = lines
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| tokenize(l, vocab))
            .collect();
        if prompts.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no prompts", path.display())));
        }
        Ok(PromptSet {
            prompts,
            source_path: path.to_owned(),
        })
    }
}

/// Corpus file: one document per line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    artifact::read_lines(path)
}
