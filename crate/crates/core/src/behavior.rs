//! Behavior data for pre-training datasets: uniform-random rollouts, or the
//! replay of a SAC agent trained on each task's ground-truth reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_pretrain_tasks, EnvConfig, Family, TaskSpec, Transition};
use crate::error::{Error, Result};
use crate::preference::{build_pretrain_datasets, PreferenceDataset};
use crate::sac::{ActMode, Batch, ReplayBuffer, RewardSource, SacAgent, SacConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Uniform-random actions.
    Random,
    /// Every transition seen while training SAC on the ground-truth reward.
    Sac,
}

impl Behavior {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::PointMass => Behavior::Random,
            // random actions never reach most target velocities
            Family::VelocityTrack => Behavior::Sac,
        }
    }
}

/// All `steps` transitions of a SAC agent trained from scratch on `task`'s
/// ground-truth reward, in collection order.
pub fn collect_sac_rollouts(task: &TaskSpec, env: &EnvConfig, sac: &SacConfig, steps: usize, seed: u64) -> Result<Vec<Transition>> {
    if steps == 0 {
        return Err(Error::Contract("steps must be positive".into()));
    }
    let family = task.family();
    let mut agent = SacAgent::new(family, sac.clone(), seed)?;
    let mut buffer = ReplayBuffer::new(steps);
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0E4F);
    let mut explore_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7B1);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let mut state = env.reset(family, &mut env_rng);
    for step in 0..steps {
        let action = if step < sac.random_steps {
            (0..family.action_dim()).map(|_| explore_rng.random_range(-1.0..1.0)).collect()
        } else {
            agent.act(state.observation(), ActMode::Stochastic)?
        };
        let (next, transition) = env.step(&state, &action, task)?;
        let done = next.done;
        buffer.push(transition);
        state = if done { env.reset(family, &mut env_rng) } else { next };
        if buffer.len() >= sac.batch_size {
            for _ in 0..sac.updates_per_step {
                let idx = buffer.sample_indices(sac.batch_size, &mut batch_rng)?;
                let ts: Vec<_> = idx.iter().map(|&i| buffer.get(i)).collect();
                agent.update(&Batch::relabeled(&ts, RewardSource::GroundTruth)?).map_err(|e| Error::Diverged {
                    iteration: step,
                    detail: e.to_string(),
                })?;
            }
        }
    }
    Ok(buffer.iter().cloned().collect())
}

/// Behavior rollouts on every pre-training task of `family`, turned into
/// oracle-labeled datasets of `queries_per_task` queries over `k`-step segments.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_datasets(
    family: Family,
    env: &EnvConfig,
    behavior: Behavior,
    steps_per_task: usize,
    queries_per_task: usize,
    sac: &SacConfig,
    k: usize,
    seed: u64,
) -> Result<Vec<PreferenceDataset>> {
    let rollouts = sample_pretrain_tasks(family)
        .into_iter()
        .enumerate()
        .map(|(i, task)| {
            let s = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let data = match behavior {
                Behavior::Random => env.collect_random_rollouts(&task, steps_per_task, s)?,
                Behavior::Sac => collect_sac_rollouts(&task, env, sac, steps_per_task, s)?,
            };
            log::debug!("collected {} {:?} transitions on {:?}", data.len(), behavior, task);
            Ok((task, data))
        })
        .collect::<Result<Vec<_>>>()?;
    build_pretrain_datasets(&rollouts, queries_per_task, k, seed, env)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sac() -> SacConfig {
        SacConfig {
            hidden: vec![16],
            batch_size: 32,
            random_steps: 100,
            ..SacConfig::default()
        }
    }

    #[test]
    fn sac_rollouts_are_deterministic_and_complete() {
        let env = EnvConfig::default();
        let task = TaskSpec::velocity(1.0).unwrap();
        let a = collect_sac_rollouts(&task, &env, &tiny_sac(), 400, 3).unwrap();
        let b = collect_sac_rollouts(&task, &env, &tiny_sac(), 400, 3).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, b);
        // the first steps are uniform exploration, then the policy acts
        assert!(a[..100].iter().all(|t| t.action[0].abs() <= 1.0));
        assert_ne!(a, collect_sac_rollouts(&task, &env, &tiny_sac(), 400, 4).unwrap());
    }

    #[test]
    fn sac_rollouts_carry_ground_truth_rewards() {
        let env = EnvConfig::default();
        let task = TaskSpec::velocity(2.0).unwrap();
        for t in collect_sac_rollouts(&task, &env, &tiny_sac(), 300, 1).unwrap() {
            let want = -(t.next_state[1] - 2.0).abs() - 0.1 * t.action[0].powi(2);
            assert!((t.reward - want).abs() < 1e-12);
        }
    }

    #[test]
    fn datasets_per_behavior() {
        let env = EnvConfig::default();
        for behavior in [Behavior::Random, Behavior::Sac] {
            let ds = pretrain_datasets(Family::VelocityTrack, &env, behavior, 300, 12, &tiny_sac(), 10, 2).unwrap();
            assert_eq!(ds.len(), 10);
            assert!(ds.iter().all(|d| d.len() == 12));
        }
        assert!(pretrain_datasets(Family::PointMass, &env, Behavior::Sac, 0, 12, &tiny_sac(), 10, 2).is_err());
    }

    #[test]
    fn default_behavior_per_family() {
        assert_eq!(Behavior::default_for(Family::PointMass), Behavior::Random);
        assert_eq!(Behavior::default_for(Family::VelocityTrack), Behavior::Sac);
        assert_eq!(serde_json::to_string(&Behavior::Sac).unwrap(), "\"sac\"");
    }
}
