//! Goal-reaching toy control tasks with hidden-goal rewards.
//!
//! Two families share one interface: a damped point mass in the unit square
//! rewarded by negative distance to an unobserved goal, and a 1-D body
//! rewarded for tracking an unobserved target velocity. The goal is part of
//! the [`TaskSpec`], never of the observation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    PointMass,
    VelocityTrack,
}

impl Family {
    pub fn obs_dim(self) -> usize {
        match self {
            Family::PointMass => 4,
            Family::VelocityTrack => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::PointMass => 2,
            Family::VelocityTrack => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::PointMass => "point-mass",
            Family::VelocityTrack => "velocity-track",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-mass" => Ok(Family::PointMass),
            "velocity-track" => Ok(Family::VelocityTrack),
            other => Err(Error::Config(format!("unknown environment family `{other}`"))),
        }
    }
}

/// One task drawn from the task distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TaskSpec {
    PointMass { goal: [f64; 2] },
    VelocityTrack { target: f64 },
}

impl TaskSpec {
    pub fn point_mass(x: f64, y: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
            return Err(Error::Contract(format!("goal ({x}, {y}) outside the arena")));
        }
        Ok(TaskSpec::PointMass { goal: [x, y] })
    }

    pub fn velocity(target: f64) -> Result<Self> {
        if !(target > 0.0) {
            return Err(Error::Contract(format!("target velocity {target} must be positive")));
        }
        Ok(TaskSpec::VelocityTrack { target })
    }

    pub fn family(&self) -> Family {
        match self {
            TaskSpec::PointMass { .. } => Family::PointMass,
            TaskSpec::VelocityTrack { .. } => Family::VelocityTrack,
        }
    }
}

/// Dynamics constants shared by both families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub point_mass_horizon: usize,
    pub velocity_horizon: usize,
    pub v_max: f64,
    pub damping: f64,
    pub action_cost: f64,
    pub goal_tolerance: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.05,
            point_mass_horizon: 200,
            velocity_horizon: 100,
            v_max: 2.0,
            damping: 0.9,
            action_cost: 0.1,
            goal_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub family: Family,
    /// `(x, y, vx, vy)` or `(x, v)`; this is also the observation.
    pub obs: Vec<f64>,
    pub step: usize,
    pub horizon: usize,
    pub done: bool,
    clip_logged: bool,
}

impl EnvState {
    pub fn observation(&self) -> &[f64] {
        &self.obs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    /// Ground truth. Only used for labels and evaluation, never for
    /// preference-mode policy training.
    pub reward: f64,
    pub done: bool,
    /// Episode ended by reaching the goal rather than the time limit.
    pub goal_reached: bool,
    /// Index of this transition within its episode.
    pub episode_step: usize,
}

impl EnvConfig {
    pub fn horizon(&self, family: Family) -> usize {
        match family {
            Family::PointMass => self.point_mass_horizon,
            Family::VelocityTrack => self.velocity_horizon,
        }
    }

    /// Random initial state: point mass anywhere in the arena at rest,
    /// velocity body at the origin at rest.
    pub fn reset<R: Rng + ?Sized>(&self, family: Family, rng: &mut R) -> EnvState {
        let obs = match family {
            Family::PointMass => vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0, 0.0],
            Family::VelocityTrack => vec![0.0, 0.0],
        };
        self.reset_to(family, obs).expect("valid initial state")
    }

    pub fn reset_to(&self, family: Family, obs: Vec<f64>) -> Result<EnvState> {
        if obs.len() != family.obs_dim() {
            return Err(Error::Dimension(format!(
                "{family} state has {} components, got {}",
                family.obs_dim(),
                obs.len()
            )));
        }
        Ok(EnvState {
            family,
            obs,
            step: 0,
            horizon: self.horizon(family),
            done: false,
            clip_logged: false,
        })
    }

    /// Deterministic dynamics with actions clipped to `[-1, 1]`.
    pub fn dynamics(&self, family: Family, state: &[f64], action: &[f64]) -> Vec<f64> {
        let clip = |a: f64| a.clamp(-1.0, 1.0);
        let vmax = self.v_max;
        match family {
            Family::PointMass => {
                let vx = (self.damping * state[2] + (1.0 - self.damping) * clip(action[0])).clamp(-vmax, vmax);
                let vy = (self.damping * state[3] + (1.0 - self.damping) * clip(action[1])).clamp(-vmax, vmax);
                let x = (state[0] + self.dt * vx).clamp(-1.0, 1.0);
                let y = (state[1] + self.dt * vy).clamp(-1.0, 1.0);
                vec![x, y, vx, vy]
            }
            Family::VelocityTrack => {
                let v = (state[1] + self.dt * clip(action[0])).clamp(-vmax, vmax);
                vec![state[0] + self.dt * v, v]
            }
        }
    }

    /// Ground-truth reward of a transition, computed from the post-action state.
    pub fn reward(&self, task: &TaskSpec, action: &[f64], next_state: &[f64]) -> f64 {
        match task {
            TaskSpec::PointMass { goal } => -distance(next_state, goal),
            TaskSpec::VelocityTrack { target } => {
                let a = action[0].clamp(-1.0, 1.0);
                -(next_state[1] - target).abs() - self.action_cost * a * a
            }
        }
    }

    /// Ground-truth `r(s, a)`; the dynamics are deterministic so the next
    /// state is implied.
    pub fn state_action_reward(&self, task: &TaskSpec, state: &[f64], action: &[f64]) -> f64 {
        let next = self.dynamics(task.family(), state, action);
        self.reward(task, action, &next)
    }

    pub fn step(&self, state: &EnvState, action: &[f64], task: &TaskSpec) -> Result<(EnvState, Transition)> {
        let family = task.family();
        if state.family != family {
            return Err(Error::Contract(format!("{} state stepped with a {family} task", state.family)));
        }
        if state.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if action.len() != family.action_dim() {
            return Err(Error::Dimension(format!(
                "{family} expects {} action components, got {}",
                family.action_dim(),
                action.len()
            )));
        }
        let mut clip_logged = state.clip_logged;
        if !clip_logged && action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            log::warn!("action {action:?} outside [-1, 1]; clipping");
            clip_logged = true;
        }
        let clipped: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let next = self.dynamics(family, &state.obs, &clipped);
        let reward = self.reward(task, &clipped, &next);
        let goal_reached = match task {
            TaskSpec::PointMass { goal } => distance(&next, goal) < self.goal_tolerance,
            TaskSpec::VelocityTrack { .. } => false,
        };
        let step = state.step + 1;
        let done = goal_reached || step >= state.horizon;
        let transition = Transition {
            state: state.obs.clone(),
            action: clipped,
            next_state: next.clone(),
            reward,
            done,
            goal_reached,
            episode_step: state.step,
        };
        let new_state = EnvState {
            family,
            obs: next,
            step,
            horizon: state.horizon,
            done,
            clip_logged,
        };
        Ok((new_state, transition))
    }

    /// `n_steps` transitions under uniform random actions, resetting
    /// whenever an episode ends.
    pub fn collect_random_rollouts(&self, task: &TaskSpec, n_steps: usize, seed: u64) -> Result<Vec<Transition>> {
        if n_steps == 0 {
            return Err(Error::Contract("n_steps must be positive".into()));
        }
        let family = task.family();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_steps);
        let mut state = self.reset(family, &mut rng);
        while out.len() < n_steps {
            let action: Vec<f64> = (0..family.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let (next, tr) = self.step(&state, &action, task)?;
            out.push(tr);
            state = if next.done { self.reset(family, &mut rng) } else { next };
        }
        Ok(out)
    }
}

fn distance(pos: &[f64], goal: &[f64; 2]) -> f64 {
    ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt()
}

/// Fixed pre-training task set for a family.
///
/// Point mass: the 16 goals of `{-1, -0.5, 0.5, 1}^2`, the 5x5 grid over
/// `{-1, -0.5, 0, 0.5, 1}` without its central cross. Velocity: 0.25 to 2.75 in steps of 0.25,
/// without the held-out 1.5.
pub fn sample_pretrain_tasks(family: Family) -> Vec<TaskSpec> {
    const GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
    match family {
        Family::PointMass => GRID
            .iter()
            .flat_map(|&x| GRID.iter().map(move |&y| (x, y)))
            .filter(|&(x, y)| x != 0.0 && y != 0.0)
            .map(|(x, y)| TaskSpec::PointMass { goal: [x, y] })
            .collect(),
        Family::VelocityTrack => (1..=11)
            .map(|i| 0.25 * i as f64)
            .filter(|&v| v != 1.5)
            .map(|target| TaskSpec::VelocityTrack { target })
            .collect(),
    }
}

/// Held-out evaluation task.
pub fn test_task(family: Family) -> TaskSpec {
    match family {
        Family::PointMass => TaskSpec::PointMass { goal: [-0.75, 0.8] },
        Family::VelocityTrack => TaskSpec::VelocityTrack { target: 1.5 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn point_mass_at_goal_has_zero_reward() {
        let c = cfg();
        let task = TaskSpec::point_mass(0.3, -0.2).unwrap();
        let s = c.reset_to(Family::PointMass, vec![0.3, -0.2, 0.0, 0.0]).unwrap();
        let (_, tr) = c.step(&s, &[0.0, 0.0], &task).unwrap();
        assert_eq!(tr.reward, 0.0);
        assert!(tr.done && tr.goal_reached);
    }

    #[test]
    fn point_mass_unit_distance() {
        let c = cfg();
        let task = TaskSpec::point_mass(1.0, 0.0).unwrap();
        let s = c.reset_to(Family::PointMass, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let (next, tr) = c.step(&s, &[0.0, 0.0], &task).unwrap();
        assert_eq!(next.obs[..2], [0.0, 0.0]);
        assert_eq!(tr.reward, -1.0);
        assert!(!tr.done);
    }

    #[test]
    fn velocity_on_target_zero_reward() {
        let c = cfg();
        let task = TaskSpec::velocity(1.5).unwrap();
        let s = c.reset_to(Family::VelocityTrack, vec![0.0, 1.5]).unwrap();
        let (_, tr) = c.step(&s, &[0.0], &task).unwrap();
        assert_eq!(tr.reward, 0.0);
    }

    #[test]
    fn velocity_reward_includes_action_cost() {
        let c = cfg();
        let task = TaskSpec::velocity(1.0).unwrap();
        let s = c.reset_to(Family::VelocityTrack, vec![0.0, 1.0]).unwrap();
        let (next, tr) = c.step(&s, &[1.0], &task).unwrap();
        assert!((next.obs[1] - 1.05).abs() < 1e-15);
        assert!((tr.reward - (-0.05 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_action_is_clipped() {
        let c = cfg();
        let task = TaskSpec::point_mass(1.0, 1.0).unwrap();
        let s = c.reset_to(Family::PointMass, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let (a, _) = c.step(&s, &[5.0, -3.0], &task).unwrap();
        let (b, _) = c.step(&s, &[1.0, -1.0], &task).unwrap();
        assert_eq!(a.obs, b.obs);
    }

    #[test]
    fn stepping_a_done_episode_is_an_error() {
        let c = cfg();
        let task = TaskSpec::point_mass(0.0, 0.0).unwrap();
        let s = c.reset_to(Family::PointMass, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let (done, _) = c.step(&s, &[0.0, 0.0], &task).unwrap();
        assert!(matches!(c.step(&done, &[0.0, 0.0], &task), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_action_dimension() {
        let c = cfg();
        let task = TaskSpec::velocity(1.0).unwrap();
        let s = c.reset_to(Family::VelocityTrack, vec![0.0, 0.0]).unwrap();
        assert!(matches!(c.step(&s, &[0.0, 0.0], &task), Err(Error::Dimension(_))));
    }

    #[test]
    fn pretrain_tasks() {
        let pm = sample_pretrain_tasks(Family::PointMass);
        assert_eq!(pm.len(), 16);
        let allowed = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for t in &pm {
            let TaskSpec::PointMass { goal } = t else { panic!() };
            assert!(goal.iter().all(|g| allowed.contains(g)));
        }
        for (i, a) in pm.iter().enumerate() {
            for b in &pm[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let vel = sample_pretrain_tasks(Family::VelocityTrack);
        assert_eq!(vel.len(), 10);
        assert!(!vel.contains(&TaskSpec::VelocityTrack { target: 1.5 }));
        assert!(vel.contains(&TaskSpec::VelocityTrack { target: 0.25 }));
        assert!(vel.contains(&TaskSpec::VelocityTrack { target: 2.75 }));
        assert_eq!(pm, sample_pretrain_tasks(Family::PointMass));
    }

    #[test]
    fn test_tasks_are_held_out() {
        assert_eq!(test_task(Family::PointMass), TaskSpec::PointMass { goal: [-0.75, 0.8] });
        assert_eq!(test_task(Family::VelocityTrack), TaskSpec::VelocityTrack { target: 1.5 });
        for f in [Family::PointMass, Family::VelocityTrack] {
            assert!(!sample_pretrain_tasks(f).contains(&test_task(f)));
        }
    }

    #[test]
    fn rollouts_count_determinism_and_sign() {
        let c = cfg();
        let task = test_task(Family::PointMass);
        let a = c.collect_random_rollouts(&task, 100, 5).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, c.collect_random_rollouts(&task, 100, 5).unwrap());
        assert!(a.iter().all(|t| t.reward <= 0.0));
        assert!(c.collect_random_rollouts(&task, 0, 5).is_err());
    }

    #[test]
    fn observations_hide_the_goal() {
        let c = cfg();
        for f in [Family::PointMass, Family::VelocityTrack] {
            let tr = c.collect_random_rollouts(&test_task(f), 10, 1).unwrap();
            assert!(tr.iter().all(|t| t.state.len() == f.obs_dim() && t.next_state.len() == f.obs_dim()));
        }
    }

    #[test]
    fn bad_task_specs() {
        assert!(TaskSpec::point_mass(1.5, 0.0).is_err());
        assert!(TaskSpec::velocity(0.0).is_err());
        assert!(TaskSpec::velocity(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn stored_reward_is_recomputable(seed in 0u64..500, pm in any::<bool>()) {
            let c = cfg();
            let task = if pm { test_task(Family::PointMass) } else { test_task(Family::VelocityTrack) };
            for t in c.collect_random_rollouts(&task, 300, seed).unwrap() {
                prop_assert_eq!(t.reward, c.reward(&task, &t.action, &t.next_state));
                prop_assert_eq!(t.reward, c.state_action_reward(&task, &t.state, &t.action));
            }
        }

        #[test]
        fn episodes_respect_horizon(seed in 0u64..200) {
            let c = cfg();
            let task = TaskSpec::point_mass(0.0, 0.0).unwrap();
            let tr = c.collect_random_rollouts(&task, 1000, seed).unwrap();
            let mut len = 0;
            for t in &tr {
                prop_assert_eq!(t.episode_step, len);
                len += 1;
                prop_assert!(len <= c.point_mass_horizon);
                if t.done {
                    if len < c.point_mass_horizon {
                        prop_assert!(t.goal_reached);
                        prop_assert!(-t.reward < c.goal_tolerance);
                    }
                    len = 0;
                }
            }
        }
    }
}
