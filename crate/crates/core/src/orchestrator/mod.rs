//! The online loop: scheduled feedback sessions, reward adaptation, and SAC
//! training on relabeled replay.

mod labeler;
mod metrics;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use labeler::{LabelSource, OracleLabeler, ScriptedLabeler, SessionRequest, SkippingLabeler};
pub use metrics::{
    label_agreement, read_records, write_record, Agreement, DoneRecord, EvalRecord, MetricsRecord, RunHeader,
    SessionRecord,
};

use crate::env::{test_task, EnvConfig, EnvState, Family, TaskSpec};
use crate::error::{Error, Result};
use crate::meta::{adapt, train_without_reset, AdaptReport, MetaConfig, RewardEnsemble};
use crate::numerics::Adam;
use crate::preference::{segment_return, Label, Query};
use crate::sac::{ActMode, Batch, ReplayBuffer, RewardSource, SacAgent, SacConfig};
use crate::selection::{propose_candidates, select_disagreement, select_uniform, SelectionConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Meta-initialized reward, reset and re-adapted at every session.
    FewShot,
    /// Randomly initialized reward trained with Adam, no reset.
    Scratch,
    /// Meta-initialized reward trained with Adam, no reset.
    Init,
    /// SAC on ground-truth rewards; no feedback.
    OracleSac,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FewShot => "few-shot",
            Mode::Scratch => "scratch",
            Mode::Init => "init",
            Mode::OracleSac => "oracle-sac",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Mode::FewShot | Mode::Init)
    }

    pub fn uses_feedback(self) -> bool {
        self != Mode::OracleSac
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "few-shot" => Ok(Mode::FewShot),
            "scratch" => Ok(Mode::Scratch),
            "init" => Ok(Mode::Init),
            "oracle-sac" => Ok(Mode::OracleSac),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSchedule {
    /// Environment steps between sessions (K).
    pub frequency: u64,
    /// Queries per session (M).
    pub per_session: usize,
    /// Total queries that may be issued, skips included.
    pub budget: usize,
    /// Same number of queries in every session.
    pub constant: bool,
}

impl Default for FeedbackSchedule {
    fn default() -> Self {
        FeedbackSchedule {
            frequency: 2000,
            per_session: 6,
            budget: 36,
            constant: true,
        }
    }
}

impl FeedbackSchedule {
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::PointMass => Self::default(),
            Family::VelocityTrack => FeedbackSchedule {
                per_session: 10,
                budget: 100,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequency == 0 || self.per_session == 0 {
            return Err(Error::Config("schedule.frequency and schedule.per_session must be positive".into()));
        }
        if !self.constant {
            return Err(Error::Config("only constant feedback schedules are supported".into()));
        }
        Ok(())
    }

    /// Queries issued in a session that starts with `used` already charged.
    pub fn session_size(&self, used: usize) -> usize {
        self.per_session.min(self.budget.saturating_sub(used))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub family: Family,
    /// Defaults to the family's held-out test task.
    pub task: Option<TaskSpec>,
    pub env: EnvConfig,
    pub schedule: FeedbackSchedule,
    pub selection: SelectionConfig,
    pub meta: MetaConfig,
    pub sac: SacConfig,
    pub total_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub segment_len: usize,
    /// Train the policy on the ensemble mean instead of member 0.
    pub relabel_with_mean: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::FewShot,
            family: Family::PointMass,
            task: None,
            env: EnvConfig::default(),
            schedule: FeedbackSchedule::default(),
            selection: SelectionConfig::default(),
            meta: MetaConfig::default(),
            sac: SacConfig::default(),
            total_steps: 30_000,
            seed: 0,
            eval_every: 2000,
            eval_episodes: 5,
            segment_len: 10,
            relabel_with_mean: false,
        }
    }
}

impl RunConfig {
    pub fn task(&self) -> TaskSpec {
        self.task.unwrap_or_else(|| test_task(self.family))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.selection.validate()?;
        self.meta.validate()?;
        self.sac.validate()?;
        if self.task().family() != self.family {
            return Err(Error::Config(format!("task is not a {} task", self.family)));
        }
        if self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 || self.segment_len == 0 {
            return Err(Error::Config(
                "total_steps, eval_every, eval_episodes and segment_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-seed{}", self.mode, self.family, self.seed)
    }
}

/// Lazily opened reward checkpoint that remembers whether it was read.
#[derive(Debug)]
pub struct CheckpointHandle {
    source: CheckpointSource,
    accessed: AtomicBool,
}

#[derive(Debug)]
enum CheckpointSource {
    Path(PathBuf),
    Memory(RewardEnsemble),
}

impl CheckpointHandle {
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        CheckpointHandle {
            source: CheckpointSource::Path(path.into()),
            accessed: AtomicBool::new(false),
        }
    }

    pub fn from_ensemble(e: RewardEnsemble) -> Self {
        CheckpointHandle {
            source: CheckpointSource::Memory(e),
            accessed: AtomicBool::new(false),
        }
    }

    pub fn load(&self) -> Result<RewardEnsemble> {
        self.accessed.store(true, Ordering::SeqCst);
        match &self.source {
            CheckpointSource::Path(p) => {
                let f = std::fs::File::open(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::Config(format!("checkpoint {} does not exist", p.display())),
                    _ => Error::Io(e),
                })?;
                RewardEnsemble::read_checkpoint(std::io::BufReader::new(f))
            }
            CheckpointSource::Memory(e) => Ok(e.clone()),
        }
    }

    pub fn was_accessed(&self) -> bool {
        self.accessed.load(Ordering::SeqCst)
    }
}

/// Receives metrics as they are produced and step progress.
pub trait RunObserver {
    fn record(&mut self, _r: &MetricsRecord) {}
    fn progress(&mut self, _step: u64) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl RunObserver for NoObserver {}

impl<F: FnMut(&MetricsRecord)> RunObserver for F {
    fn record(&mut self, r: &MetricsRecord) {
        self(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub success_rate: f64,
    pub final_error: f64,
}

/// Velocity tracking counts as a success when the final speed is this close
/// to the target.
pub const VELOCITY_TOLERANCE: f64 = 0.1;

fn final_error(task: &TaskSpec, obs: &[f64]) -> f64 {
    match task {
        TaskSpec::PointMass { goal } => ((obs[0] - goal[0]).powi(2) + (obs[1] - goal[1]).powi(2)).sqrt(),
        TaskSpec::VelocityTrack { target } => (obs[1] - target).abs(),
    }
}

/// Rollouts of `policy` on `task` from seeded start states, scored with the
/// ground-truth reward.
pub fn evaluate_with<P>(mut policy: P, task: &TaskSpec, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let family = task.family();
    let tolerance = match family {
        Family::PointMass => env.goal_tolerance,
        Family::VelocityTrack => VELOCITY_TOLERANCE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut successes, mut err) = (0.0, 0usize, 0.0);
    for _ in 0..episodes {
        let (ret, last) = rollout_from(&mut policy, task, env, env.reset(family, &mut rng))?;
        total += ret;
        let e = final_error(task, &last);
        err += e;
        if e < tolerance {
            successes += 1;
        }
    }
    let n = episodes as f64;
    Ok(EvalResult {
        mean_return: total / n,
        success_rate: successes as f64 / n,
        final_error: err / n,
    })
}

/// One episode from `state`: ground-truth return and final observation.
pub fn rollout_from<P>(policy: &mut P, task: &TaskSpec, env: &EnvConfig, mut state: EnvState) -> Result<(f64, Vec<f64>)>
where
    P: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut ret = 0.0;
    while !state.done {
        let a = policy(state.observation())?;
        let (next, t) = env.step(&state, &a, task)?;
        ret += t.reward;
        state = next;
    }
    Ok((ret, state.obs))
}

/// Deterministic-mode evaluation of `agent`.
pub fn evaluate(agent: &SacAgent, task: &TaskSpec, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalResult> {
    evaluate_with(|o| agent.act_deterministic(o), task, env, episodes, seed)
}

/// Uniform-random policy on the same start states, a reference point for
/// normalized scores.
pub fn evaluate_random(task: &TaskSpec, env: &EnvConfig, episodes: usize, seed: u64, policy_seed: u64) -> Result<EvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let d = task.family().action_dim();
    evaluate_with(|_| Ok((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()), task, env, episodes, seed)
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    /// The feedback dataset: answered (non-skipped) queries, in order.
    pub dataset: Vec<Query>,
    /// Reward ensemble at the end of the run (none for oracle SAC).
    pub ensemble: Option<RewardEnsemble>,
    pub agent: SacAgent,
    pub feedback_used: usize,
    pub skips: usize,
    pub sessions: usize,
}

impl RunOutcome {
    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn session_records(&self) -> impl Iterator<Item = &SessionRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Session(s) => Some(s),
            _ => None,
        })
    }
}

enum RewardState {
    GroundTruth,
    /// Few-shot: adapt from the meta-initialization at every session.
    Reset { meta: RewardEnsemble, current: RewardEnsemble },
    /// Baselines: keep training the same models with persistent Adam state.
    Continual { current: RewardEnsemble, opts: Vec<Adam> },
}

impl RewardState {
    fn current(&self) -> Option<&RewardEnsemble> {
        match self {
            RewardState::GroundTruth => None,
            RewardState::Reset { current, .. } | RewardState::Continual { current, .. } => Some(current),
        }
    }

    fn retrain(&mut self, data: &[&Query], cfg: &MetaConfig) -> Result<Vec<AdaptReport>> {
        match self {
            RewardState::GroundTruth => Ok(Vec::new()),
            RewardState::Reset { meta, current } => {
                let (adapted, reports) = adapt(meta, data, cfg)?;
                *current = adapted;
                Ok(reports)
            }
            RewardState::Continual { current, opts } => current
                .members
                .iter_mut()
                .zip(opts.iter_mut())
                .map(|(m, opt)| train_without_reset(m, opt, data, cfg))
                .collect(),
        }
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Executes one run. Sessions happen at every step divisible by the session
/// frequency while budget remains; the labeler may block.
pub fn run(
    cfg: &RunConfig,
    checkpoint: Option<&CheckpointHandle>,
    labeler: &mut dyn LabelSource,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let family = cfg.family;
    let task = cfg.task();
    let env = &cfg.env;

    let mut reward = match cfg.mode {
        Mode::OracleSac => RewardState::GroundTruth,
        Mode::FewShot | Mode::Init => {
            let handle = checkpoint
                .ok_or_else(|| Error::Config(format!("mode {} needs a pre-trained checkpoint", cfg.mode)))?;
            let meta = handle.load()?;
            if meta.family != family {
                return Err(Error::Config(format!(
                    "checkpoint was trained on {}, run is on {}",
                    meta.family, family
                )));
            }
            if cfg.mode == Mode::FewShot {
                RewardState::Reset {
                    current: meta.clone(),
                    meta,
                }
            } else {
                let opts = meta.members.iter().map(|_| Adam::new(cfg.meta.fallback_lr)).collect();
                RewardState::Continual { current: meta, opts }
            }
        }
        Mode::Scratch => {
            let current = RewardEnsemble::from_config(family, &cfg.meta, cfg.seed.wrapping_add(0x5C7A));
            let opts = current.members.iter().map(|_| Adam::new(cfg.meta.fallback_lr)).collect();
            RewardState::Continual { current, opts }
        }
    };

    let mut agent = SacAgent::new(family, cfg.sac.clone(), cfg.seed)?;
    let mut env_rng = stream(cfg.seed, 1);
    let mut explore_rng = stream(cfg.seed, 2);
    let mut select_rng = stream(cfg.seed, 3);
    let mut batch_rng = stream(cfg.seed, 4);
    let eval_seed = cfg.seed ^ 0xE7A1_5EED;

    let mut buffer = ReplayBuffer::new(cfg.sac.buffer_capacity);
    let mut dataset: Vec<Query> = Vec::new();
    let mut records = Vec::new();
    let (mut used, mut skips, mut sessions, mut evals) = (0usize, 0usize, 0usize, 0usize);
    let mut next_id = 0u64;

    let emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>, observer: &mut dyn RunObserver| {
        observer.record(&r);
        records.push(r);
    };

    emit(
        MetricsRecord::Run(RunHeader {
            run_id: cfg.run_id(),
            mode: cfg.mode,
            family,
            seed: cfg.seed,
            total_steps: cfg.total_steps,
            budget: cfg.schedule.budget,
            per_session: cfg.schedule.per_session,
            frequency: cfg.schedule.frequency,
        }),
        &mut records,
        observer,
    );

    let mut state = env.reset(family, &mut env_rng);
    for step in 1..=cfg.total_steps {
        // feedback session
        if cfg.mode.uses_feedback() && step % cfg.schedule.frequency == 0 && used < cfg.schedule.budget {
            let m = cfg.schedule.session_size(used);
            let strategy = cfg.selection.strategy_for_session(sessions);
            let pool = m * cfg.selection.sample_multiplier;
            match propose_candidates(&buffer, pool, cfg.segment_len, next_id, false, &mut select_rng) {
                Err(Error::Capacity(msg)) => log::warn!("session at step {step} postponed: {msg}"),
                Err(e) => return Err(e),
                Ok(candidates) => {
                    next_id += pool as u64;
                    let chosen = match strategy {
                        Strategy::Uniform => select_uniform(&candidates, m, &mut select_rng)?,
                        Strategy::Disagreement => {
                            select_disagreement(&candidates, reward.current().expect("feedback modes"), m)?
                        }
                    };
                    let queries: Vec<Query> = chosen.iter().map(|&i| candidates[i].clone()).collect();
                    let labels = labeler.label_session(&SessionRequest {
                        session: sessions,
                        step,
                        queries: &queries,
                        budget_used: used,
                        budget_total: cfg.schedule.budget,
                    })?;
                    if labels.len() != queries.len() || labels.contains(&Label::Unlabeled) {
                        return Err(Error::Labeler(format!(
                            "session {sessions}: {} answers for {} queries",
                            labels.iter().filter(|l| **l != Label::Unlabeled).count(),
                            queries.len()
                        )));
                    }
                    let returns: Vec<(f64, f64)> = queries
                        .iter()
                        .map(|q| (segment_return(&q.first, &task, env), segment_return(&q.second, &task, env)))
                        .collect();
                    let provenance = labeler.provenance();
                    let mut labeled = 0;
                    for (q, &l) in queries.iter().zip(&labels) {
                        if l == Label::Skipped {
                            skips += 1;
                        } else {
                            dataset.push(q.clone().labeled(l, provenance)?);
                            labeled += 1;
                        }
                    }
                    used += queries.len();
                    let refs: Vec<&Query> = dataset.iter().collect();
                    let reports = reward.retrain(&refs, &cfg.meta)?;
                    emit(
                        MetricsRecord::Session(SessionRecord {
                            session: sessions,
                            step,
                            strategy,
                            query_ids: queries.iter().map(|q| q.id).collect(),
                            agreement: label_agreement(&labels, &returns),
                            labels,
                            labeled,
                            skipped: queries.len() - labeled,
                            feedback_used: used,
                            skips,
                            dataset_size: dataset.len(),
                            train_accuracy: reports.iter().map(|r| r.final_accuracy).collect(),
                            inner_steps: reports.iter().map(|r| r.inner_steps).collect(),
                            adam_epochs: reports.iter().map(|r| r.adam_epochs).collect(),
                        }),
                        &mut records,
                        observer,
                    );
                    sessions += 1;
                }
            }
        }

        // environment step
        let action = if step <= cfg.sac.random_steps as u64 {
            (0..family.action_dim()).map(|_| explore_rng.random_range(-1.0..1.0)).collect()
        } else {
            agent.act(state.observation(), ActMode::Stochastic)?
        };
        let (next, transition) = env.step(&state, &action, &task)?;
        let done = next.done;
        buffer.push(transition);
        state = if done { env.reset(family, &mut env_rng) } else { next };

        // policy updates on relabeled replay
        if buffer.len() >= cfg.sac.batch_size {
            for _ in 0..cfg.sac.updates_per_step {
                let idx = buffer.sample_indices(cfg.sac.batch_size, &mut batch_rng)?;
                let ts: Vec<_> = idx.iter().map(|&i| buffer.get(i)).collect();
                let source = match reward.current() {
                    None => RewardSource::GroundTruth,
                    Some(e) if cfg.relabel_with_mean => RewardSource::EnsembleMean(e),
                    Some(e) => RewardSource::Model(&e.members[0]),
                };
                let batch = Batch::relabeled(&ts, source)?;
                agent.update(&batch).map_err(|e| Error::Diverged {
                    iteration: step as usize,
                    detail: e.to_string(),
                })?;
            }
        }

        if step % cfg.eval_every == 0 {
            let r = evaluate(&agent, &task, env, cfg.eval_episodes, eval_seed)?;
            emit(
                MetricsRecord::Eval(EvalRecord {
                    eval: evals,
                    step,
                    mean_return: r.mean_return,
                    success: r.success_rate,
                    final_error: r.final_error,
                    feedback_used: used,
                    skips,
                }),
                &mut records,
                observer,
            );
            evals += 1;
        }
        observer.progress(step);
    }

    emit(
        MetricsRecord::Done(DoneRecord {
            step: cfg.total_steps,
            feedback_used: used,
            skips,
            sessions,
            dataset_size: dataset.len(),
        }),
        &mut records,
        observer,
    );
    Ok(RunOutcome {
        records,
        dataset,
        ensemble: reward.current().cloned(),
        agent,
        feedback_used: used,
        skips,
        sessions,
    })
}

#[cfg(test)]
mod tests;
