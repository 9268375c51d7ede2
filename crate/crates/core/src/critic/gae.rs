//! TD errors and generalized advantage estimates for terminal-reward episodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_lambda() -> f64 {
    0.95
}

impl Default for GaeConfig {
    fn default() -> Self {
        GaeConfig {
            gamma: default_gamma(),
            lambda: default_lambda(),
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("critic.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("critic.lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One-step residuals for an episode with values `V(s_0) … V(s_N)` and a
/// single terminal reward.
///
/// Intermediate rewards are zero, so `δ_t = γ V(s_{t+1}) − V(s_t)` for `t < N`.
/// The reward is observed on leaving the last state and the post-terminal
/// value is zero: `δ_N = r_end − V(s_N)`.
pub fn td_errors(values: &[f64], reward: f64, gamma: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Shape {
            expected: 1,
            actual: 0,
        });
    }
    let n = values.len() - 1;
    let mut deltas: Vec<f64> = values.windows(2).map(|w| gamma * w[1] - w[0]).collect();
    deltas.push(reward - values[n]);
    Ok(deltas)
}

/// `A_t = Σ_i (γλ)^i δ_{t+i}` by the backward recursion `A_t = δ_t + γλ A_{t+1}`.
pub fn gae_advantages(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let decay = gamma * lambda;
    let mut adv = vec![0.0; deltas.len()];
    let mut running = 0.0;
    for t in (0..deltas.len()).rev() {
        running = deltas[t] + decay * running;
        adv[t] = running;
    }
    adv
}

/// Regression targets `Ĝ_t = V(s_t) + A_t`.
pub fn value_targets(values: &[f64], advantages: &[f64]) -> Vec<f64> {
    values.iter().zip(advantages).map(|(v, a)| v + a).collect()
}

/// `Σ_t A_t²` for one episode.
pub fn episode_loss(values: &[f64], reward: f64, cfg: &GaeConfig) -> Result<f64> {
    let deltas = td_errors(values, reward, cfg.gamma)?;
    Ok(gae_advantages(&deltas, cfg.gamma, cfg.lambda)
        .iter()
        .map(|a| a * a)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct double sum, kept independent of the recursion.
    fn naive_advantages(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        (0..deltas.len())
            .map(|t| {
                (0..deltas.len() - t)
                    .map(|i| (gamma * lambda).powi(i as i32) * deltas[t + i])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fixed_point_has_zero_residuals() {
        let d = td_errors(&[0.7; 5], 0.7, 1.0).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_state_episode() {
        let d = td_errors(&[0.2, 0.6], 1.0, 1.0).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-15);
        assert!((d[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_discount() {
        let v = [0.3, 0.5, 0.9];
        let d = td_errors(&v, 1.0, 0.0).unwrap();
        assert_eq!(d, vec![-0.3, -0.5, 1.0 - 0.9]);
    }

    #[test]
    fn empty_values_is_shape_error() {
        assert!(matches!(td_errors(&[], 1.0, 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn hand_evaluated_sum() {
        let a = gae_advantages(&[0.1, -0.2, 0.3], 1.0, 0.5);
        assert!((a[0] - 0.075).abs() < 1e-15);
        assert!((a[1] - (-0.2 + 0.15)).abs() < 1e-15);
        assert!((a[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let d = [0.4, -0.1, 0.25, 0.0];
        assert_eq!(gae_advantages(&d, 0.9, 0.0), d.to_vec());
    }

    #[test]
    fn config_ranges() {
        assert!(GaeConfig { gamma: 0.0, lambda: 0.5 }.validate().is_err());
        assert!(GaeConfig { gamma: 1.0, lambda: 1.1 }.validate().is_err());
        assert!(GaeConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn telescoping_at_unit_gamma_lambda(
            values in proptest::collection::vec(0.0f64..1.0, 1..20),
            r in 0.0f64..=1.0,
        ) {
            let d = td_errors(&values, r, 1.0).unwrap();
            let a = gae_advantages(&d, 1.0, 1.0);
            for (t, v) in values.iter().enumerate() {
                prop_assert!((a[t] - (r - v)).abs() <= 1e-12);
            }
            for g in value_targets(&values, &a) {
                prop_assert!((g - r).abs() <= 1e-12);
            }
        }

        #[test]
        fn recursion_matches_double_sum(
            deltas in proptest::collection::vec(-1.0f64..1.0, 1..25),
            gamma in 0.01f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let fast = gae_advantages(&deltas, gamma, lambda);
            let slow = naive_advantages(&deltas, gamma, lambda);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
