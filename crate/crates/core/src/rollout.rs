//! Episodes of the text game: the frozen LM continues a prompt at the
//! exploration temperature and the reward model scores the finished text.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::RewardModel;
use crate::error::{Error, Result};
use crate::lm::{Distribution, MarkovLm};
use crate::vocab::{TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Horizon,
    Eos,
}

/// One finished episode. `values` holds `V(s_0) … V(s_N)` once a critic has
/// evaluated it and is not part of the dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "prompt_ids")]
    pub prompt: Vec<TokenId>,
    #[serde(rename = "generated_ids")]
    pub generated: Vec<TokenId>,
    #[serde(skip)]
    pub values: Vec<f64>,
    pub reward: f64,
    pub ended_by: EndReason,
    /// (master seed, prompt index, episode index)
    pub seed_triplet: [u64; 3],
}

impl Trajectory {
    /// `prompt ⊕ generated`, the text the reward model sees.
    pub fn full_text(&self) -> Vec<TokenId> {
        let mut all = self.prompt.clone();
        all.extend_from_slice(&self.generated);
        all
    }

    pub fn validate(&self) -> Result<()> {
        if self.generated.is_empty() {
            return Err(Error::InvalidInput("trajectory generated no tokens".into()));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::InvalidInput(format!("reward {} outside [0, 1]", self.reward)));
        }
        if !self.values.is_empty() && self.values.len() != self.generated.len() + 1 {
            return Err(Error::Shape {
                expected: self.generated.len() + 1,
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_episodes")]
    pub episodes_per_prompt: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    2.0
}

fn default_horizon() -> usize {
    16
}

fn default_episodes() -> usize {
    80
}

/// Continuations per prompt used for sentiment-style tasks.
pub const SENTIMENT_EPISODES_PER_PROMPT: usize = 25;

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            temperature: default_temperature(),
            horizon: default_horizon(),
            episodes_per_prompt: default_episodes(),
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("rollout.temperature", "must be > 0"));
        }
        if self.horizon < 1 {
            return Err(Error::config("rollout.horizon", "must be at least 1"));
        }
        if self.episodes_per_prompt < 1 {
            return Err(Error::config("rollout.episodes_per_prompt", "must be at least 1"));
        }
        Ok(())
    }
}

/// Independent random stream for one (prompt, episode) pair, so results do
/// not depend on scheduling.
pub fn episode_rng(seed: u64, prompt_index: usize, episode_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((prompt_index as u64) << 32) | (episode_index as u64 & 0xffff_ffff));
    rng
}

pub(crate) fn sample<R: Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> Result<TokenId> {
    let index = WeightedIndex::new(dist.probs())
        .map_err(|e| Error::Assertion(format!("cannot sample from distribution: {e}")))?;
    Ok(index.sample(rng) as TokenId)
}

/// Samples one continuation of `prompt`. The reward is left at zero.
pub fn generate_episode<R: Rng + ?Sized>(
    lm: &MarkovLm,
    prompt: &[TokenId],
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    let eos = lm.vocab().eos();
    let mut generated = Vec::with_capacity(cfg.horizon);
    let mut ended_by = EndReason::Horizon;
    while generated.len() < cfg.horizon {
        let dist = lm.policy(prompt, &generated, cfg.temperature)?;
        let tok = sample(&dist, rng)?;
        generated.push(tok);
        if tok == eos {
            ended_by = EndReason::Eos;
            break;
        }
    }
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        generated,
        values: Vec::new(),
        reward: 0.0,
        ended_by,
        seed_triplet: [cfg.seed, 0, 0],
    })
}

/// `episodes_per_prompt` episodes for every prompt, prompt-major, with
/// rewards attached. Episodes are sampled in parallel.
pub fn collect_rollouts(
    lm: &MarkovLm,
    prompts: &[TokenSequence],
    cfg: &RolloutConfig,
    reward_model: &RewardModel,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..cfg.episodes_per_prompt).map(move |e| (p, e)))
        .collect();
    let mut trajectories = jobs
        .par_iter()
        .map(|&(p, e)| {
            let mut rng = episode_rng(cfg.seed, p, e);
            let mut traj = generate_episode(lm, &prompts[p].ids, cfg, &mut rng)?;
            traj.seed_triplet = [cfg.seed, p as u64, e as u64];
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    attach_rewards(&mut trajectories, lm, reward_model)?;
    Ok(trajectories)
}

/// Scores every trajectory on `prompt ⊕ generated`.
pub fn attach_rewards(trajectories: &mut [Trajectory], lm: &MarkovLm, reward_model: &RewardModel) -> Result<()> {
    let texts: Vec<Vec<TokenId>> = trajectories.iter().map(Trajectory::full_text).collect();
    let rewards = reward_model.score(&texts, lm.vocab())?;
    for (traj, r) in trajectories.iter_mut().zip(rewards) {
        traj.reward = r;
    }
    Ok(())
}
