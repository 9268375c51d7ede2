//! The trainable value head `V(x_1:t) ∈ (0, 1)` on top of fixed features of
//! the frozen model's state.

mod adam;
mod gae;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, OptimizerState};
pub use gae::{episode_loss, gae_advantages, td_errors, value_targets, GaeConfig};
pub use train::{
    critic_loss, fit, fit_epoch, frozen_target_loss, loss_and_gradient, prepare_episodes, targets_for, train_step,
    steps_per_epoch, EpisodeFeatures, LossRecord, TrainConfig,
};

use crate::artifact;
use crate::attribute::logistic;
use crate::error::{Error, Result};
use crate::steer::ValueFn;
use crate::vocab::{TokenId, Vocabulary};

pub const CRITIC_FORMAT_VERSION: u32 = 1;

/// Layout of the state features:
/// `[bag of generated tokens | one-hot of each of the last m tokens | t/L | 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub vocab_size: usize,
    pub m: usize,
    pub horizon: usize,
    pub bos: TokenId,
    pub vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl std::ops::Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl FeatureSpec {
    pub fn new(vocab: &Vocabulary, m: usize, horizon: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::config("lm.order", "feature window must be at least 1"));
        }
        if horizon < 1 {
            return Err(Error::config("rollout.horizon", "must be at least 1"));
        }
        Ok(FeatureSpec {
            vocab_size: vocab.len(),
            m,
            horizon,
            bos: vocab.bos(),
            vocab_hash: vocab.hash(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vocab_size * (1 + self.m) + 2
    }

    /// Only generated tokens enter the bag; the prompt is visible through the
    /// last-m window while it overlaps it.
    pub fn featurize(&self, prompt: &[TokenId], generated: &[TokenId]) -> FeatureVector {
        let v = self.vocab_size;
        let mut x = vec![0.0; self.dim()];
        if !generated.is_empty() {
            let w = 1.0 / generated.len() as f64;
            for &tok in generated {
                x[tok as usize] += w;
            }
        }
        let total = prompt.len() + generated.len();
        for j in 0..self.m {
            // j = 0 is the oldest slot of the window
            let back = self.m - j;
            let tok = if back > total {
                self.bos
            } else {
                let pos = total - back;
                if pos < prompt.len() {
                    prompt[pos]
                } else {
                    generated[pos - prompt.len()]
                }
            };
            x[v * (1 + j) + tok as usize] = 1.0;
        }
        let d = self.dim();
        x[d - 2] = (generated.len() as f64 / self.horizon as f64).min(1.0);
        x[d - 1] = 1.0;
        FeatureVector(x)
    }
}

/// `V = logistic(w2 · tanh(W1 φ + b1) + b2)`, or `logistic(w2 · φ + b2)` when
/// `hidden_dim == 0`. Parameters live in one flat vector laid out as
/// `[W1 (row-major) | b1 | w2 | b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    spec: FeatureSpec,
    hidden_dim: usize,
    params: Vec<f64>,
}

impl Critic {
    pub fn zeros(spec: FeatureSpec, hidden_dim: usize) -> Self {
        let n = Self::param_count(spec.dim(), hidden_dim);
        Critic {
            spec,
            hidden_dim,
            params: vec![0.0; n],
        }
    }

    /// Glorot-uniform first layer, small uniform output layer, zero biases.
    pub fn init(spec: FeatureSpec, hidden_dim: usize, seed: u64) -> Self {
        let mut critic = Self::zeros(spec, hidden_dim);
        if hidden_dim == 0 {
            return critic;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = critic.spec.dim();
        let a1 = (6.0 / (d + hidden_dim) as f64).sqrt();
        let a2 = 1.0 / (hidden_dim as f64).sqrt();
        for w in &mut critic.params[..hidden_dim * d] {
            *w = rng.random_range(-a1..a1);
        }
        let w2 = hidden_dim * d + hidden_dim;
        for w in &mut critic.params[w2..w2 + hidden_dim] {
            *w = rng.random_range(-a2..a2);
        }
        critic
    }

    fn param_count(d: usize, h: usize) -> usize {
        if h == 0 {
            d + 1
        } else {
            h * d + 2 * h + 1
        }
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Human-readable name of flat parameter `i`.
    pub fn param_name(&self, i: usize) -> String {
        let (d, h) = (self.spec.dim(), self.hidden_dim);
        if h == 0 {
            return if i < d { format!("w2[{i}]") } else { "b2".into() };
        }
        if i < h * d {
            format!("w1[{},{}]", i / d, i % d)
        } else if i < h * d + h {
            format!("b1[{}]", i - h * d)
        } else if i < h * d + 2 * h {
            format!("w2[{}]", i - h * d - h)
        } else {
            "b2".into()
        }
    }

    fn pre_activation(&self, x: &[f64], hidden: &mut Vec<f64>) -> f64 {
        let (d, h) = (self.spec.dim(), self.hidden_dim);
        let p = &self.params;
        hidden.clear();
        if h == 0 {
            return dot(&p[..d], x) + p[d];
        }
        let (w1, rest) = p.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let mut z = b2[0];
        for i in 0..h {
            let a = (dot(&w1[i * d..(i + 1) * d], x) + b1[i]).tanh();
            hidden.push(a);
            z += w2[i] * a;
        }
        z
    }

    pub fn value(&self, x: &FeatureVector) -> Result<f64> {
        if x.len() != self.spec.dim() {
            return Err(Error::Shape {
                expected: self.spec.dim(),
                actual: x.len(),
            });
        }
        Ok(logistic(self.pre_activation(x, &mut Vec::new())))
    }

    pub fn value_of_state(&self, prompt: &[TokenId], generated: &[TokenId]) -> f64 {
        let x = self.spec.featurize(prompt, generated);
        logistic(self.pre_activation(&x, &mut Vec::new()))
    }

    /// Adds `upstream · ∂V/∂θ` into `grad` and returns `V`.
    pub(crate) fn accumulate_grad(&self, x: &[f64], upstream: f64, grad: &mut [f64], hidden: &mut Vec<f64>) -> f64 {
        let (d, h) = (self.spec.dim(), self.hidden_dim);
        let v = logistic(self.pre_activation(x, hidden));
        let dz = upstream * v * (1.0 - v);
        if h == 0 {
            for j in 0..d {
                grad[j] += dz * x[j];
            }
            grad[d] += dz;
            return v;
        }
        let w2_off = h * d + h;
        for i in 0..h {
            let a = hidden[i];
            grad[w2_off + i] += dz * a;
            let dpre = dz * self.params[w2_off + i] * (1.0 - a * a);
            grad[h * d + i] += dpre;
            let row = &mut grad[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += dpre * x[j];
            }
        }
        grad[w2_off + h] += dz;
        v
    }

    /// Writes `V(s_0) … V(s_N)` into a trajectory.
    pub fn fill_values(&self, traj: &mut crate::rollout::Trajectory) {
        traj.values = (0..=traj.generated.len())
            .map(|t| self.value_of_state(&traj.prompt, &traj.generated[..t]))
            .collect();
    }

    pub fn to_checkpoint(&self, optimizer: Option<&OptimizerState>) -> CriticCheckpoint {
        CriticCheckpoint {
            format_version: CRITIC_FORMAT_VERSION,
            feature_spec: self.spec.clone(),
            hidden_dim: self.hidden_dim,
            weights: self.params.clone(),
            optimizer: optimizer.cloned(),
            config_digest: None,
        }
    }

    /// Restores a critic, refusing checkpoints built for a different vocabulary.
    pub fn from_checkpoint(ckpt: CriticCheckpoint, vocab: &Vocabulary) -> Result<(Self, Option<OptimizerState>)> {
        if ckpt.format_version != CRITIC_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "critic checkpoint format {} (expected {CRITIC_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        if ckpt.feature_spec.vocab_hash != vocab.hash() || ckpt.feature_spec.vocab_size != vocab.len() {
            return Err(Error::Incompatible(format!(
                "critic was trained for vocabulary {} but the model uses {}",
                ckpt.feature_spec.vocab_hash,
                vocab.hash()
            )));
        }
        let expected = Self::param_count(ckpt.feature_spec.dim(), ckpt.hidden_dim);
        if ckpt.weights.len() != expected {
            return Err(Error::Incompatible(format!(
                "critic has {} weights, layout needs {expected}",
                ckpt.weights.len()
            )));
        }
        if let Some(opt) = &ckpt.optimizer {
            if opt.first_moment.len() != expected || opt.second_moment.len() != expected {
                return Err(Error::Incompatible("optimizer state does not match critic shape".into()));
            }
        }
        let critic = Critic {
            spec: ckpt.feature_spec,
            hidden_dim: ckpt.hidden_dim,
            params: ckpt.weights,
        };
        Ok((critic, ckpt.optimizer))
    }

    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerState>, config_digest: Option<&str>) -> Result<()> {
        let mut ckpt = self.to_checkpoint(optimizer);
        ckpt.config_digest = config_digest.map(str::to_owned);
        artifact::write_json(path, &ckpt)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<(Self, Option<OptimizerState>)> {
        Self::from_checkpoint(artifact::read_json(path)?, vocab)
    }
}

impl ValueFn for Critic {
    fn value(&self, prompt: &[TokenId], generated: &[TokenId]) -> f64 {
        self.value_of_state(prompt, generated)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticCheckpoint {
    pub format_version: u32,
    pub feature_spec: FeatureSpec,
    pub hidden_dim: usize,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;
    use rand::Rng;

    fn spec() -> FeatureSpec {
        let vocab = build_vocab(&["a b c"], 1).unwrap();
        FeatureSpec::new(&vocab, 2, 8).unwrap()
    }

    #[test]
    fn empty_state_features() {
        let s = spec();
        let x = s.featurize(&[0, 1], &[]);
        assert!(x[..s.vocab_size].iter().all(|&b| b == 0.0));
        assert_eq!(x[s.dim() - 2], 0.0);
        assert_eq!(x[s.dim() - 1], 1.0);
        // window holds the two prompt tokens
        assert_eq!(x[s.vocab_size], 1.0);
        assert_eq!(x[2 * s.vocab_size + 1], 1.0);
    }

    #[test]
    fn single_token_bag_is_one_hot() {
        let s = spec();
        let x = s.featurize(&[0], &[2]);
        let bag: Vec<f64> = x[..s.vocab_size].to_vec();
        let mut expected = vec![0.0; s.vocab_size];
        expected[2] = 1.0;
        assert_eq!(bag, expected);
        // window: oldest slot is the prompt token, newest is 2
        assert_eq!(x[s.vocab_size], 1.0);
        assert_eq!(x[2 * s.vocab_size + 2], 1.0);
        assert_eq!(x[s.dim() - 2], 1.0 / 8.0);
    }

    #[test]
    fn short_history_padded_with_bos() {
        let s = spec();
        let x = s.featurize(&[1], &[]);
        assert_eq!(x[s.vocab_size + s.bos as usize], 1.0);
        assert_eq!(x[2 * s.vocab_size + 1], 1.0);
    }

    #[test]
    fn random_bag_recount() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let gen: Vec<TokenId> = (0..rng.random_range(1..12))
                .map(|_| rng.random_range(0..s.vocab_size as TokenId))
                .collect();
            let x = s.featurize(&[0], &gen);
            let bag = &x[..s.vocab_size];
            assert!((bag.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (tok, &share) in bag.iter().enumerate() {
                let n = gen.iter().filter(|&&g| g as usize == tok).count();
                assert!((share - n as f64 / gen.len() as f64).abs() < 1e-12);
            }
            for j in 0..s.m {
                let block = &x[s.vocab_size * (1 + j)..s.vocab_size * (2 + j)];
                assert!(block.iter().sum::<f64>() <= 1.0);
            }
            assert!((0.0..=1.0).contains(&x[s.dim() - 2]));
        }
    }

    #[test]
    fn zero_critic_is_one_half() {
        let s = spec();
        for h in [0, 4] {
            let c = Critic::zeros(s.clone(), h);
            assert_eq!(c.value(&s.featurize(&[0], &[1, 2])).unwrap(), 0.5);
        }
    }

    #[test]
    fn linear_head_bias_weight() {
        let s = spec();
        let mut c = Critic::zeros(s.clone(), 0);
        let bias_feature = s.dim() - 1;
        c.params_mut()[bias_feature] = 1.3;
        let v = c.value(&s.featurize(&[0], &[1])).unwrap();
        assert!((v - logistic(1.3)).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_scalar_reevaluation() {
        let s = spec();
        let c = Critic::init(s.clone(), 5, 3);
        let x = s.featurize(&[0, 1], &[2, 2, 0]);
        let (d, h) = (s.dim(), 5);
        let p = c.params();
        let mut z = p[h * d + 2 * h];
        for i in 0..h {
            let mut pre = p[h * d + i];
            for j in 0..d {
                pre += p[i * d + j] * x[j];
            }
            z += p[h * d + h + i] * pre.tanh();
        }
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((c.value(&x).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn wrong_dimension_is_shape_error() {
        let c = Critic::zeros(spec(), 2);
        assert!(matches!(c.value(&FeatureVector(vec![0.0; 3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn values_stay_in_open_unit_interval() {
        let s = spec();
        let mut c = Critic::init(s.clone(), 4, 9);
        for p in c.params_mut() {
            *p *= 10.0;
        }
        let v = c.value(&s.featurize(&[0], &[1, 1, 1])).unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn checkpoint_guards_vocabulary() {
        let vocab = build_vocab(&["a b c"], 1).unwrap();
        let other = build_vocab(&["a b d"], 1).unwrap();
        let c = Critic::init(FeatureSpec::new(&vocab, 1, 4).unwrap(), 3, 0);
        let opt = OptimizerState::new(c.num_params(), AdamConfig::default());
        let ckpt = c.to_checkpoint(Some(&opt));
        let (back, back_opt) = Critic::from_checkpoint(ckpt.clone(), &vocab).unwrap();
        assert_eq!(back, c);
        assert_eq!(back_opt, Some(opt));
        assert!(matches!(Critic::from_checkpoint(ckpt, &other), Err(Error::Incompatible(_))));
    }

    #[test]
    fn parameter_names() {
        let c = Critic::zeros(spec(), 2);
        let d = c.spec().dim();
        assert_eq!(c.param_name(0), "w1[0,0]");
        assert_eq!(c.param_name(d + 1), "w1[1,1]");
        assert_eq!(c.param_name(2 * d), "b1[0]");
        assert_eq!(c.param_name(2 * d + 2), "w2[0]");
        assert_eq!(c.param_name(c.num_params() - 1), "b2");
    }
}
