//! Run configuration: a TOML file with one table per stage.
//!
//! Any leaf key can be overridden from the environment as
//! `STEERLM_<SECTION>_<KEY>` (upper case) or on the command line as
//! `--section.key value`; flags win over the environment, which wins over
//! the file. Relative paths are resolved against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact;
use crate::critic::{AdamConfig, GaeConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::remote::RemoteScorerConfig;
use crate::rollout::RolloutConfig;
use crate::steer::{DecodeStrategy, SteerConfig, StrategyKind};

pub const ENV_PREFIX: &str = "STEERLM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub critic: CriticSection,
    #[serde(default)]
    pub steer: SteerConfig,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub dfa: Option<PathBuf>,
    pub lexicon_positive: Option<PathBuf>,
    pub lexicon_negative: Option<PathBuf>,
    pub lm_checkpoint: PathBuf,
    pub reference_lm: PathBuf,
    pub critic_checkpoint: PathBuf,
    pub rollouts: PathBuf,
    pub loss_curve: PathBuf,
    pub generations: PathBuf,
    pub report: PathBuf,
    pub sweep_report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        let out = |f: &str| PathBuf::from("out").join(f);
        PathsConfig {
            corpus: None,
            prompts: None,
            dfa: None,
            lexicon_positive: None,
            lexicon_negative: None,
            lm_checkpoint: out("lm.json"),
            reference_lm: out("reference_lm.json"),
            critic_checkpoint: out("critic.json"),
            rollouts: out("rollouts.jsonl"),
            loss_curve: out("loss.csv"),
            generations: out("generations.jsonl"),
            report: out("report.csv"),
            sweep_report: out("sweep.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub order: usize,
    pub smoothing_k: f64,
    pub min_count: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            order: 2,
            smoothing_k: 0.1,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Dfa,
    Lexicon,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub kind: RewardKind,
    pub endpoint_url: Option<String>,
    pub attribute_name: String,
    pub timeout_ms: u64,
    pub max_batch: usize,
    pub lexicon_slope: f64,
    pub lexicon_bias: f64,
    /// Reward at or above which a generation counts as a success.
    pub threshold: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        let remote = RemoteScorerConfig::new("", "positive");
        RewardSection {
            kind: RewardKind::Dfa,
            endpoint_url: None,
            attribute_name: remote.attribute_name,
            timeout_ms: remote.timeout_ms,
            max_batch: remote.max_batch,
            lexicon_slope: 4.0,
            lexicon_bias: 0.0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub temperature: f64,
    pub horizon: usize,
    pub episodes_per_prompt: usize,
    /// Passes of critic training.
    pub epochs: usize,
    /// Draw a new rollout set for every pass instead of reusing one.
    pub fresh_per_epoch: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        RolloutSection {
            temperature: r.temperature,
            horizon: r.horizon,
            episodes_per_prompt: r.episodes_per_prompt,
            epochs: 10,
            fresh_per_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub hidden_dim: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub lr_final_fraction: f64,
}

impl Default for CriticSection {
    fn default() -> Self {
        let gae = GaeConfig::default();
        let adam = AdamConfig::default();
        CriticSection {
            hidden_dim: 32,
            gamma: gae.gamma,
            lambda: gae.lambda,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            batch_size: 64,
            lr_final_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub strategy: StrategyKind,
    pub sample_k: usize,
    pub nucleus_p: f64,
    pub repetition_penalty: f64,
    pub max_len: usize,
    pub samples_per_prompt: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeStrategy::default();
        DecodeSection {
            strategy: d.kind,
            sample_k: d.sample_k,
            nucleus_p: d.nucleus_p,
            repetition_penalty: d.repetition_penalty,
            max_len: d.max_len,
            samples_per_prompt: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Subset sizes to try; 0 stands for the whole vocabulary.
    pub k_values: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            k_values: vec![1, 2, 3, 5, 10, 0],
        }
    }
}

/// Stable 64-bit seed for a named sub-stream of the master seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let digest = Sha256::digest(format!("{master}/{label}/{index}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

impl RunConfig {
    pub fn new(task: impl Into<String>) -> Self {
        RunConfig {
            task: task.into(),
            seed: 0,
            paths: PathsConfig::default(),
            lm: LmSection::default(),
            reward: RewardSection::default(),
            rollout: RolloutSection::default(),
            critic: CriticSection::default(),
            steer: SteerConfig::default(),
            decode: DecodeSection::default(),
            sweep: SweepSection::default(),
        }
    }

    /// A config with every optional key present, used to enumerate valid keys.
    fn schema_example() -> Self {
        let mut c = RunConfig::new("example");
        c.paths.corpus = Some("x".into());
        c.paths.prompts = Some("x".into());
        c.paths.dfa = Some("x".into());
        c.paths.lexicon_positive = Some("x".into());
        c.paths.lexicon_negative = Some("x".into());
        c.reward.endpoint_url = Some("x".into());
        c
    }

    /// Every dotted leaf key with its example value.
    pub fn known_keys() -> BTreeMap<String, toml::Value> {
        let value = toml::Value::try_from(Self::schema_example()).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", value.as_table().expect("config is a table"), &mut out);
        out
    }

    /// Parses `text`, then applies `overrides` (dotted key, raw value) in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        let known = Self::known_keys();
        let mut present = BTreeMap::new();
        flatten("", &table, &mut present);
        for key in present.keys() {
            if !known.contains_key(key) {
                return Err(Error::config(key.clone(), "unknown key"));
            }
        }
        for (key, raw) in overrides {
            let Some(example) = known.get(key) else {
                return Err(Error::config(key.clone(), "unknown key"));
            };
            set_dotted(&mut table, key, parse_value(raw, example))?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_owned()))?;
        Ok(config)
    }

    /// Reads a config file, applies environment then flag overrides,
    /// validates, and resolves relative paths. Returns the config and its digest.
    pub fn load(path: &Path, flag_overrides: &[(String, String)]) -> Result<(Self, String)> {
        let text = artifact::read_text(path)?;
        let mut overrides = env_overrides();
        overrides.extend_from_slice(flag_overrides);
        let mut config = Self::from_toml_with_overrides(&text, &overrides)?;
        let digest = config.digest()?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok((config, digest))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(artifact::digest_hex(artifact::to_sorted_json(self)?.as_bytes()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.corpus,
            &mut paths.prompts,
            &mut paths.dfa,
            &mut paths.lexicon_positive,
            &mut paths.lexicon_negative,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for p in [
            &mut paths.lm_checkpoint,
            &mut paths.reference_lm,
            &mut paths.critic_checkpoint,
            &mut paths.rollouts,
            &mut paths.loss_curve,
            &mut paths.generations,
            &mut paths.report,
            &mut paths.sweep_report,
        ] {
            fix(p);
        }
    }

    /// Range checks for every section plus existence of input files.
    pub fn validate(&self) -> Result<()> {
        if self.lm.order < 1 {
            return Err(Error::config("lm.order", "must be at least 1"));
        }
        if !(self.lm.smoothing_k.is_finite() && self.lm.smoothing_k > 0.0) {
            return Err(Error::config("lm.smoothing_k", "must be > 0"));
        }
        if self.lm.min_count < 1 {
            return Err(Error::config("lm.min_count", "must be at least 1"));
        }
        self.rollout_config(0).validate()?;
        if self.rollout.epochs < 1 {
            return Err(Error::config("rollout.epochs", "must be at least 1"));
        }
        self.gae_config().validate()?;
        self.adam_config().validate()?;
        self.train_config().validate()?;
        if self.steer.k < 1 {
            return Err(Error::config("steer.K", "must be at least 1"));
        }
        if !(self.steer.epsilon > 0.0 && self.steer.epsilon < 0.5) {
            return Err(Error::config("steer.epsilon", "must lie in (0, 0.5)"));
        }
        self.decode_strategy().validate()?;
        if self.decode.samples_per_prompt < 1 {
            return Err(Error::config("decode.samples_per_prompt", "must be at least 1"));
        }
        if self.sweep.k_values.is_empty() {
            return Err(Error::config("sweep.k_values", "must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.reward.threshold) {
            return Err(Error::config("reward.threshold", "must lie in [0, 1]"));
        }
        match self.reward.kind {
            RewardKind::Dfa if self.paths.dfa.is_none() => {
                return Err(Error::config("paths.dfa", "required when reward.kind = \"dfa\""));
            }
            RewardKind::Lexicon if self.paths.lexicon_positive.is_none() || self.paths.lexicon_negative.is_none() => {
                return Err(Error::config(
                    "paths.lexicon_positive",
                    "both lexicon paths are required when reward.kind = \"lexicon\"",
                ));
            }
            RewardKind::Remote => self.remote_config()?.validate()?,
            _ => {}
        }
        let inputs = [
            ("paths.corpus", &self.paths.corpus),
            ("paths.prompts", &self.paths.prompts),
            ("paths.dfa", &self.paths.dfa),
            ("paths.lexicon_positive", &self.paths.lexicon_positive),
            ("paths.lexicon_negative", &self.paths.lexicon_negative),
        ];
        for (key, path) in inputs {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(key, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn rollout_config(&self, round: u64) -> RolloutConfig {
        RolloutConfig {
            temperature: self.rollout.temperature,
            horizon: self.rollout.horizon,
            episodes_per_prompt: self.rollout.episodes_per_prompt,
            seed: derive_seed(self.seed, "rollout", round),
        }
    }

    pub fn gae_config(&self) -> GaeConfig {
        GaeConfig {
            gamma: self.critic.gamma,
            lambda: self.critic.lambda,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.critic.learning_rate,
            beta1: self.critic.beta1,
            beta2: self.critic.beta2,
            epsilon: self.critic.adam_epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.rollout.epochs,
            batch_size: self.critic.batch_size,
            seed: derive_seed(self.seed, "shuffle", 0),
            lr_final_fraction: self.critic.lr_final_fraction,
        }
    }

    pub fn decode_strategy(&self) -> DecodeStrategy {
        DecodeStrategy {
            kind: self.decode.strategy,
            sample_k: self.decode.sample_k,
            nucleus_p: self.decode.nucleus_p,
            repetition_penalty: self.decode.repetition_penalty,
            max_len: self.decode.max_len,
            seed: derive_seed(self.seed, "decode", 0),
        }
    }

    pub fn remote_config(&self) -> Result<RemoteScorerConfig> {
        let endpoint_url = self
            .reward
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::config("reward.endpoint_url", "required when reward.kind = \"remote\""))?;
        Ok(RemoteScorerConfig {
            endpoint_url,
            attribute_name: self.reward.attribute_name.clone(),
            timeout_ms: self.reward.timeout_ms,
            max_batch: self.reward.max_batch,
        })
    }
}

/// `STEERLM_*` variables that name a known key.
pub fn env_overrides() -> Vec<(String, String)> {
    RunConfig::known_keys()
        .into_keys()
        .filter_map(|key| {
            let var = format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase());
            std::env::var(&var).ok().map(|v| (key, v))
        })
        .collect()
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(leaf.to_owned(), value);
    Ok(())
}

/// Reads `raw` as a TOML value, falling back to a bare string, and widens
/// integers where the key holds a real.
fn parse_value(raw: &str, example: &toml::Value) -> toml::Value {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    match (example, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::String(_), toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_)) => {
            toml::Value::String(raw.to_owned())
        }
        (_, v) => v,
    }
}
