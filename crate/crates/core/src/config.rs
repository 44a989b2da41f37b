//! JSON configuration files for the command-line entry points.
//!
//! Every key is optional; omitted keys take the documented defaults, and
//! unknown keys are rejected with the offending name in the message.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::behavior::{pretrain_datasets, Behavior};
use crate::env::{EnvConfig, Family, TaskSpec};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::orchestrator::{FeedbackSchedule, Mode, RunConfig};
use crate::preference::PreferenceDataset;
use crate::sac::SacConfig;
use crate::selection::SelectionConfig;

/// How pre-training datasets are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Defaults to random actions for point mass and SAC for velocity tracking.
    pub behavior: Option<Behavior>,
    /// Environment steps collected per pre-training task.
    pub steps_per_task: usize,
    /// Defaults to 4000 for point mass and 40000 for velocity tracking.
    pub queries_per_task: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            behavior: None,
            steps_per_task: 25_000,
            queries_per_task: None,
        }
    }
}

impl DatasetConfig {
    pub fn behavior_for(&self, family: Family) -> Behavior {
        self.behavior.unwrap_or(Behavior::default_for(family))
    }

    pub fn queries_for(&self, family: Family) -> usize {
        self.queries_per_task.unwrap_or(match family {
            Family::PointMass => 4000,
            Family::VelocityTrack => 40_000,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Mode,
    pub family: Family,
    pub task: Option<TaskSpec>,
    pub env: EnvConfig,
    /// Defaults depend on the family; see [`FeedbackSchedule::for_family`].
    pub schedule: Option<FeedbackSchedule>,
    pub selection: SelectionConfig,
    pub meta: MetaConfig,
    pub sac: SacConfig,
    pub datasets: DatasetConfig,
    pub total_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub segment_len: usize,
    pub relabel_with_mean: bool,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let r = RunConfig::default();
        ConfigFile {
            mode: r.mode,
            family: r.family,
            task: r.task,
            env: r.env,
            schedule: None,
            selection: r.selection,
            meta: r.meta,
            sac: r.sac,
            datasets: DatasetConfig::default(),
            total_steps: r.total_steps,
            seed: r.seed,
            eval_every: r.eval_every,
            eval_episodes: r.eval_episodes,
            segment_len: r.segment_len,
            relabel_with_mean: r.relabel_with_mean,
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn schedule(&self) -> FeedbackSchedule {
        self.schedule.clone().unwrap_or_else(|| FeedbackSchedule::for_family(self.family))
    }

    /// Resolved and validated run configuration.
    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = RunConfig {
            mode: self.mode,
            family: self.family,
            task: self.task,
            env: self.env.clone(),
            schedule: self.schedule(),
            selection: self.selection.clone(),
            meta: self.meta.clone(),
            sac: self.sac.clone(),
            total_steps: self.total_steps,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            segment_len: self.segment_len,
            relabel_with_mean: self.relabel_with_mean,
        };
        cfg.validate()?;
        if self.datasets.steps_per_task == 0 || self.datasets.queries_for(self.family) == 0 {
            return Err(Error::Config("datasets.steps_per_task and datasets.queries_per_task must be positive".into()));
        }
        Ok(cfg)
    }

    /// Pre-training datasets for the configured family, segment length and seed.
    pub fn pretrain_datasets(&self) -> Result<Vec<PreferenceDataset>> {
        pretrain_datasets(
            self.family,
            &self.env,
            self.datasets.behavior_for(self.family),
            self.datasets.steps_per_task,
            self.datasets.queries_for(self.family),
            &self.sac,
            self.segment_len,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ConfigFile::parse("{}").unwrap();
        assert_eq!(c, ConfigFile::default());
        let r = c.run_config().unwrap();
        assert_eq!(r.schedule, FeedbackSchedule { frequency: 2000, per_session: 6, budget: 36, constant: true });
        assert_eq!(r.segment_len, 10);
        assert_eq!(r.meta.adapt_max_steps, 40);
        assert_eq!(r.sac.batch_size, 512);
        assert_eq!(c.datasets.queries_for(Family::PointMass), 4000);
        assert_eq!(c.datasets.steps_per_task, 25_000);
    }

    #[test]
    fn velocity_schedule_follows_the_family() {
        let c = ConfigFile::parse(r#"{"family": "velocity-track"}"#).unwrap();
        let r = c.run_config().unwrap();
        assert_eq!((r.schedule.per_session, r.schedule.budget), (10, 100));
        assert_eq!(r.task(), TaskSpec::VelocityTrack { target: 1.5 });
        assert_eq!(c.datasets.queries_for(Family::VelocityTrack), 40_000);
        assert_eq!(c.datasets.behavior_for(Family::VelocityTrack), Behavior::Sac);
        assert_eq!(c.datasets.behavior_for(Family::PointMass), Behavior::Random);
        let c = ConfigFile::parse(r#"{"datasets": {"behavior": "random"}}"#).unwrap();
        assert_eq!(c.datasets.behavior_for(Family::VelocityTrack), Behavior::Random);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            (r#"{"budget": 3}"#, "budget"),
            (r#"{"meta": {"outer_rate": 0.1}}"#, "outer_rate"),
            (r#"{"sac": {"hidden": [8], "tau": 0.1}}"#, "tau"),
        ] {
            match ConfigFile::parse(doc) {
                Err(Error::Config(m)) => assert!(m.contains(key), "{m}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn nested_overrides() {
        let c = ConfigFile::parse(
            r#"{"mode": "scratch", "schedule": {"budget": 12, "per_session": 4},
                "meta": {"hidden": [64, 64], "iterations": 10}, "sac": {"batch_size": 128}}"#,
        )
        .unwrap();
        let r = c.run_config().unwrap();
        assert_eq!(r.mode, Mode::Scratch);
        assert_eq!((r.schedule.budget, r.schedule.per_session, r.schedule.frequency), (12, 4, 2000));
        assert_eq!(r.meta.hidden, vec![64, 64]);
        assert_eq!(r.sac.batch_size, 128);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = ConfigFile::parse(r#"{"family": "velocity-track", "task": {"family": "point-mass", "goal": [0, 0]}}"#)
            .unwrap();
        assert!(matches!(c.run_config(), Err(Error::Config(_))));
        let c = ConfigFile::parse(r#"{"datasets": {"steps_per_task": 0}}"#).unwrap();
        assert!(matches!(c.run_config(), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("{"), Err(Error::Config(_))));
    }

    fn arb_config() -> impl Strategy<Value = ConfigFile> {
        (
            prop_oneof![Just(Mode::FewShot), Just(Mode::Scratch), Just(Mode::Init), Just(Mode::OracleSac)],
            prop::option::of((1u64..10_000, 1usize..50, 0usize..500)),
            prop::collection::vec(1usize..512, 1..4),
            1e-6f64..1.0,
            any::<u64>(),
            prop::option::of(1usize..100_000),
            prop::option::of((-1.0f64..1.0, -1.0f64..1.0)),
        )
            .prop_map(|(mode, sched, hidden, lr, seed, qpt, goal)| ConfigFile {
                mode,
                schedule: sched.map(|(frequency, per_session, budget)| FeedbackSchedule {
                    frequency,
                    per_session,
                    budget,
                    constant: true,
                }),
                meta: MetaConfig { hidden, outer_lr: lr, ..MetaConfig::default() },
                sac: SacConfig { lr, ..SacConfig::default() },
                seed,
                datasets: DatasetConfig { queries_per_task: qpt, ..DatasetConfig::default() },
                task: goal.map(|(x, y)| TaskSpec::PointMass { goal: [x, y] }),
                ..ConfigFile::default()
            })
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_a_fixed_point(c in arb_config()) {
            let once = ConfigFile::parse(&c.to_json()).unwrap();
            prop_assert_eq!(&once, &c);
            prop_assert_eq!(once.to_json(), c.to_json());
        }
    }
}
