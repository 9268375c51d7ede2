//! Semi-gradient critic regression on GAE targets.
//!
//! For one episode the loss is `Σ_t A_t²`; with the targets `Ĝ_t = V(s_t) + A_t`
//! held fixed this is `Σ_t (V(s_t) − Ĝ_t)²`, whose gradient is
//! `−2 Σ_t A_t ∂V(s_t)/∂θ`. Batch losses are means over episodes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gae_advantages, td_errors, value_targets, Critic, FeatureSpec, FeatureVector, GaeConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::rollout::Trajectory;

/// Cached features of `s_0 … s_N` for one trajectory.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures {
    pub features: Vec<FeatureVector>,
    pub reward: f64,
}

pub fn prepare_episodes(spec: &FeatureSpec, trajectories: &[Trajectory]) -> Vec<EpisodeFeatures> {
    trajectories
        .iter()
        .map(|t| EpisodeFeatures {
            features: (0..=t.generated.len())
                .map(|i| spec.featurize(&t.prompt, &t.generated[..i]))
                .collect(),
            reward: t.reward,
        })
        .collect()
}

fn episode_values(critic: &Critic, ep: &EpisodeFeatures) -> Result<Vec<f64>> {
    ep.features.iter().map(|x| critic.value(x)).collect()
}

/// Frozen regression targets `Ĝ_t` for each episode under the current critic.
pub fn targets_for(critic: &Critic, episodes: &[&EpisodeFeatures], cfg: &GaeConfig) -> Result<Vec<Vec<f64>>> {
    episodes
        .iter()
        .map(|ep| {
            let values = episode_values(critic, ep)?;
            let adv = gae_advantages(&td_errors(&values, ep.reward, cfg.gamma)?, cfg.gamma, cfg.lambda);
            Ok(value_targets(&values, &adv))
        })
        .collect()
}

/// `mean_episodes Σ_t (V(s_t) − Ĝ_t)²` with the given targets.
pub fn frozen_target_loss(critic: &Critic, episodes: &[&EpisodeFeatures], targets: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (ep, tgt) in episodes.iter().zip(targets) {
        for (x, g) in ep.features.iter().zip(tgt) {
            let r = critic.value(x)? - g;
            total += r * r;
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Batch loss and its semi-gradient.
pub fn loss_and_gradient(critic: &Critic, episodes: &[&EpisodeFeatures], cfg: &GaeConfig) -> Result<(f64, Vec<f64>)> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let scale = 1.0 / episodes.len() as f64;
    let mut grad = vec![0.0; critic.num_params()];
    let mut hidden = Vec::with_capacity(critic.hidden_dim());
    let mut loss = 0.0;
    for ep in episodes {
        let values = episode_values(critic, ep)?;
        let adv = gae_advantages(&td_errors(&values, ep.reward, cfg.gamma)?, cfg.gamma, cfg.lambda);
        for (x, a) in ep.features.iter().zip(&adv) {
            loss += a * a;
            critic.accumulate_grad(x, -2.0 * a * scale, &mut grad, &mut hidden);
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            param: critic.param_name(i),
        });
    }
    Ok((loss * scale, grad))
}

/// Mean `Σ_t A_t²` over a batch of trajectories, values taken from `critic`.
pub fn critic_loss(critic: &Critic, batch: &[Trajectory], cfg: &GaeConfig) -> Result<f64> {
    let episodes = prepare_episodes(critic.spec(), batch);
    let refs: Vec<&EpisodeFeatures> = episodes.iter().collect();
    let targets = targets_for(critic, &refs, cfg)?;
    frozen_target_loss(critic, &refs, &targets)
}

/// One Adam update on `batch`; returns the loss before the update.
pub fn train_step(critic: &mut Critic, batch: &[Trajectory], opt: &mut OptimizerState, cfg: &GaeConfig) -> Result<f64> {
    let episodes = prepare_episodes(critic.spec(), batch);
    let refs: Vec<&EpisodeFeatures> = episodes.iter().collect();
    let lr = opt.config.learning_rate;
    step_prepared(critic, &refs, opt, cfg, lr)
}

fn step_prepared(
    critic: &mut Critic,
    episodes: &[&EpisodeFeatures],
    opt: &mut OptimizerState,
    cfg: &GaeConfig,
    lr: f64,
) -> Result<f64> {
    let (loss, grad) = loss_and_gradient(critic, episodes, cfg)?;
    opt.update_with_lr(critic.params_mut(), &grad, lr);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning rate decays linearly to `lr_final_fraction × lr` over the run.
    pub lr_final_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            lr_final_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("rollout.epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("critic.batch_size", "must be at least 1"));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::config("critic.lr_final_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        base * (1.0 - (1.0 - self.lr_final_fraction) * progress)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// One shuffled pass over `episodes`. `first_step`/`total_steps` place the
/// pass on the run's learning-rate schedule.
#[allow(clippy::too_many_arguments)]
pub fn fit_epoch(
    critic: &mut Critic,
    opt: &mut OptimizerState,
    episodes: &[EpisodeFeatures],
    gae: &GaeConfig,
    train: &TrainConfig,
    epoch: usize,
    first_step: usize,
    total_steps: usize,
) -> Result<Vec<LossRecord>> {
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let base_lr = opt.config.learning_rate;
    let mut records = Vec::new();
    for (i, chunk) in order.chunks(train.batch_size).enumerate() {
        let step = first_step + i;
        let batch: Vec<&EpisodeFeatures> = chunk.iter().map(|&j| &episodes[j]).collect();
        let lr = train.lr_at(base_lr, step, total_steps);
        let loss = step_prepared(critic, &batch, opt, gae, lr)?;
        records.push(LossRecord { epoch, step, loss });
    }
    Ok(records)
}

pub fn steps_per_epoch(num_episodes: usize, batch_size: usize) -> usize {
    num_episodes.div_ceil(batch_size)
}

/// Several passes over a fixed set of stored episodes.
pub fn fit(
    critic: &mut Critic,
    opt: &mut OptimizerState,
    episodes: &[EpisodeFeatures],
    gae: &GaeConfig,
    train: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    gae.validate()?;
    train.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("no training episodes".into()));
    }
    let per_epoch = steps_per_epoch(episodes.len(), train.batch_size);
    let total = per_epoch * train.epochs;
    let mut records = Vec::with_capacity(total);
    for epoch in 0..train.epochs {
        records.extend(fit_epoch(critic, opt, episodes, gae, train, epoch, epoch * per_epoch, total)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::AdamConfig;
    use crate::rollout::EndReason;
    use crate::vocab::build_vocab;
    use rand::Rng;

    fn spec() -> FeatureSpec {
        let vocab = build_vocab(&["a b c d"], 1).unwrap();
        FeatureSpec::new(&vocab, 1, 6).unwrap()
    }

    fn traj(generated: Vec<u32>, reward: f64) -> Trajectory {
        Trajectory {
            prompt: vec![0],
            generated,
            values: Vec::new(),
            reward,
            ended_by: EndReason::Horizon,
            seed_triplet: [0, 0, 0],
        }
    }

    fn random_batch(seed: u64, n: usize) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..6);
                let gen = (0..len).map(|_| rng.random_range(0..4)).collect();
                traj(gen, if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            })
            .collect()
    }

    #[test]
    fn unit_gamma_lambda_loss_is_squared_error_to_reward() {
        let c = Critic::init(spec(), 3, 1);
        let batch = random_batch(4, 5);
        let cfg = GaeConfig { gamma: 1.0, lambda: 1.0 };
        let mut expected = 0.0;
        for t in &batch {
            for i in 0..=t.generated.len() {
                let v = c.value_of_state(&t.prompt, &t.generated[..i]);
                expected += (t.reward - v).powi(2);
            }
        }
        expected /= batch.len() as f64;
        assert!((critic_loss(&c, &batch, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_double_loop() {
        let c = Critic::init(spec(), 4, 2);
        let batch = random_batch(7, 6);
        let cfg = GaeConfig { gamma: 0.9, lambda: 0.7 };
        let mut expected = 0.0;
        for t in &batch {
            let v: Vec<f64> = (0..=t.generated.len())
                .map(|i| c.value_of_state(&t.prompt, &t.generated[..i]))
                .collect();
            let n = v.len() - 1;
            let delta = |k: usize| if k < n { cfg.gamma * v[k + 1] - v[k] } else { t.reward - v[n] };
            for s in 0..=n {
                let a: f64 = (0..=n - s).map(|i| (cfg.gamma * cfg.lambda).powi(i as i32) * delta(s + i)).sum();
                expected += a * a;
            }
        }
        expected /= batch.len() as f64;
        assert!((critic_loss(&c, &batch, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_parameter_gradient_matches_central_difference() {
        let s = spec();
        let mut c = Critic::zeros(s.clone(), 0);
        let bias_feature = s.dim() - 1;
        c.params_mut()[bias_feature] = 0.3;
        let batch = random_batch(3, 4);
        let eps = prepare_episodes(&s, &batch);
        let refs: Vec<&EpisodeFeatures> = eps.iter().collect();
        let cfg = GaeConfig::default();
        let (_, grad) = loss_and_gradient(&c, &refs, &cfg).unwrap();
        let targets = targets_for(&c, &refs, &cfg).unwrap();
        let h = 1e-5;
        let mut plus = c.clone();
        plus.params_mut()[bias_feature] += h;
        let mut minus = c.clone();
        minus.params_mut()[bias_feature] -= h;
        let fd = (frozen_target_loss(&plus, &refs, &targets).unwrap()
            - frozen_target_loss(&minus, &refs, &targets).unwrap())
            / (2.0 * h);
        let rel = (grad[bias_feature] - fd).abs() / grad[bias_feature].abs().max(1e-12);
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn zero_loss_leaves_parameters_unchanged() {
        // V ≡ 0.5 and rewards 0.5: every residual is zero.
        let c0 = Critic::zeros(spec(), 3);
        let mut c = c0.clone();
        let batch = vec![traj(vec![1, 2], 0.5), traj(vec![3], 0.5)];
        let mut opt = OptimizerState::new(c.num_params(), AdamConfig::default());
        let loss = train_step(&mut c, &batch, &mut opt, &GaeConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(c, c0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn overfits_a_small_batch() {
        let mut c = Critic::init(spec(), 8, 5);
        let mut batch = vec![traj(vec![1, 2, 3], 0.9), traj(vec![2, 2], 0.1), traj(vec![3, 1], 0.7)];
        for (i, t) in batch.iter_mut().enumerate() {
            t.prompt = vec![i as u32];
        }
        let cfg = GaeConfig { gamma: 1.0, lambda: 1.0 };
        let mut opt = OptimizerState::new(
            c.num_params(),
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
        );
        let first = train_step(&mut c, &batch, &mut opt, &cfg).unwrap();
        for _ in 0..99 {
            train_step(&mut c, &batch, &mut opt, &cfg).unwrap();
        }
        let last = critic_loss(&c, &batch, &cfg).unwrap();
        assert!(last < first);
        assert!(last < 1e-3, "loss after 100 steps: {last}");
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut c = Critic::zeros(spec(), 2);
        c.params_mut()[0] = f64::NAN;
        let batch = random_batch(1, 2);
        let eps = prepare_episodes(c.spec(), &batch);
        let refs: Vec<&EpisodeFeatures> = eps.iter().collect();
        let err = loss_and_gradient(&c, &refs, &GaeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
    }

    #[test]
    fn fit_is_deterministic() {
        let batch = random_batch(11, 40);
        let run = || {
            let mut c = Critic::init(spec(), 4, 0);
            let mut opt = OptimizerState::new(c.num_params(), AdamConfig::default());
            let eps = prepare_episodes(c.spec(), &batch);
            let train = TrainConfig {
                epochs: 3,
                batch_size: 8,
                seed: 2,
                lr_final_fraction: 0.5,
            };
            let log = fit(&mut c, &mut opt, &eps, &GaeConfig::default(), &train).unwrap();
            (c, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 15);
    }
}
