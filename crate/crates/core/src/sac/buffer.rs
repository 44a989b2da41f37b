//! Replay ring buffer and reward relabeling at sample time.

use ndarray::Array2;
use rand::Rng;

use crate::env::Transition;
use crate::error::{Error, Result};
use crate::meta::RewardEnsemble;
use crate::reward::RewardModel;

/// Fixed-capacity ring of raw transitions. Logical index 0 is the oldest.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    /// Total transitions ever pushed.
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.pushed += 1;
    }

    fn physical(&self, logical: usize) -> usize {
        if self.items.len() < self.capacity {
            logical
        } else {
            (self.cursor + logical) % self.capacity
        }
    }

    /// Transition at logical position `i` (0 = oldest).
    pub fn get(&self, i: usize) -> &Transition {
        assert!(i < self.len(), "replay index {i} out of range");
        &self.items[self.physical(i)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Copies the logical range `start..start + len` (oldest first).
    pub fn window(&self, start: usize, len: usize) -> Vec<Transition> {
        (start..start + len).map(|i| self.get(i).clone()).collect()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Capacity("sampling from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.len())).collect())
    }
}

/// Transitions packed into arrays for an update.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
    /// Training rewards (learned or ground truth), `n x 1`.
    pub rewards: Array2<f64>,
    /// 1 where the transition ended at the goal, `n x 1`.
    pub goal_reached: Array2<f64>,
}

fn stack<'a, F>(ts: &[&'a Transition], f: F) -> Array2<f64>
where
    F: Fn(&'a Transition) -> &'a [f64],
{
    let d = f(ts[0]).len();
    let mut out = Array2::zeros((ts.len(), d));
    for (i, t) in ts.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(f(t)));
    }
    out
}

/// Where training rewards come from.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    GroundTruth,
    Model(&'a RewardModel),
    EnsembleMean(&'a RewardEnsemble),
}

impl Batch {
    /// Arrays for `transitions`, with rewards from `source`. Stored
    /// transitions are only read.
    pub fn relabeled(transitions: &[&Transition], source: RewardSource<'_>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let states = stack(transitions, |t| &t.state);
        let actions = stack(transitions, |t| &t.action);
        let rewards = match source {
            RewardSource::GroundTruth => Array2::from_shape_fn((transitions.len(), 1), |(i, _)| transitions[i].reward),
            RewardSource::Model(m) => relabel(&states, &actions, m)?,
            RewardSource::EnsembleMean(e) => {
                let mut acc = Array2::zeros((transitions.len(), 1));
                for m in &e.members {
                    acc += &relabel(&states, &actions, m)?;
                }
                acc / e.len() as f64
            }
        };
        Ok(Batch {
            next_states: stack(transitions, |t| &t.next_state),
            goal_reached: Array2::from_shape_fn((transitions.len(), 1), |(i, _)| {
                if transitions[i].goal_reached {
                    1.0
                } else {
                    0.0
                }
            }),
            states,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learned rewards `r̂(s_t, a_t)` for rows of `states` and `actions`.
pub fn relabel(states: &Array2<f64>, actions: &Array2<f64>, model: &RewardModel) -> Result<Array2<f64>> {
    if states.ncols() + actions.ncols() != model.input_dim() {
        return Err(Error::Contract(format!(
            "reward model expects {} inputs, transitions have {}",
            model.input_dim(),
            states.ncols() + actions.ncols()
        )));
    }
    model.rewards(states, actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{test_task, EnvConfig, Family};
    use crate::numerics::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize) -> Transition {
        Transition {
            state: vec![i as f64; 4],
            action: vec![0.0; 2],
            next_state: vec![i as f64 + 1.0; 4],
            reward: -(i as f64),
            done: false,
            goal_reached: false,
            episode_step: i,
        }
    }

    #[test]
    fn ring_keeps_logical_order() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(tr(i));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.total_pushed(), 5);
        let steps: Vec<usize> = b.iter().map(|t| t.episode_step).collect();
        assert_eq!(steps, vec![2, 3, 4]);
        assert_eq!(b.window(1, 2)[0].episode_step, 3);
    }

    #[test]
    fn constant_model_relabels_to_constant() {
        let c = 0.3f64;
        let net = Mlp::from_params(
            &[6, 1],
            Activation::Tanh,
            vec![Array2::zeros((6, 1)), Array2::from_elem((1, 1), c.atanh())],
        )
        .unwrap();
        let m = RewardModel::from_net(net, vec![1e-3]).unwrap();
        let ts: Vec<Transition> = (0..7).map(tr).collect();
        let refs: Vec<&Transition> = ts.iter().collect();
        let b = Batch::relabeled(&refs, RewardSource::Model(&m)).unwrap();
        assert!(b.rewards.iter().all(|&r| (r - c).abs() < 1e-15));
        // ground truth untouched
        assert_eq!(ts[3].reward, -3.0);
    }

    #[test]
    fn relabel_matches_per_transition_forward_and_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RewardModel::new(Family::PointMass, &[16, 16], 1e-3, &mut rng);
        let env = EnvConfig::default();
        let ts = env.collect_random_rollouts(&test_task(Family::PointMass), 50, 1).unwrap();
        let refs: Vec<&Transition> = ts.iter().collect();
        let a = Batch::relabeled(&refs, RewardSource::Model(&m)).unwrap();
        let b = Batch::relabeled(&refs, RewardSource::Model(&m)).unwrap();
        assert_eq!(a, b);
        for (i, t) in ts.iter().enumerate() {
            let want = m.reward(&t.state, &t.action).unwrap();
            assert!((a.rewards[[i, 0]] - want).abs() < 1e-14);
        }
        let gt = Batch::relabeled(&refs, RewardSource::GroundTruth).unwrap();
        assert!(gt.rewards.iter().zip(&ts).all(|(r, t)| *r == t.reward));
    }

    #[test]
    fn wrong_family_model_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RewardModel::new(Family::VelocityTrack, &[4], 1e-3, &mut rng);
        let ts: Vec<Transition> = (0..2).map(tr).collect();
        let refs: Vec<&Transition> = ts.iter().collect();
        assert!(matches!(Batch::relabeled(&refs, RewardSource::Model(&m)), Err(Error::Contract(_))));
    }
}
