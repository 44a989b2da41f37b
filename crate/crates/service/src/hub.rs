//! Shared state between the orchestrator thread and HTTP handlers.
//!
//! The orchestrator blocks in [`HumanLabeler::label_session`] until every
//! query of the session has an answer. Handlers mutate state under one
//! mutex, so answers are totally ordered; the condvar wakes the orchestrator.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use fsprl_core::env::Family;
use fsprl_core::orchestrator::{LabelSource, MetricsRecord, Mode, RunObserver, SessionRequest};
use fsprl_core::preference::{Label, LabelSource as Provenance, Query, Segment};
use fsprl_core::{Error, Result};

/// Observation-only view of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentView {
    /// Per-step observation vectors.
    pub observations: Vec<Vec<f64>>,
    /// Point mass: `[x, y]`. Velocity tracking: `[x]`.
    pub positions: Vec<Vec<f64>>,
    /// Point mass: `[vx, vy]`. Velocity tracking: `[v]`.
    pub velocities: Vec<Vec<f64>>,
    /// Per-step actions taken from each observation.
    pub actions: Vec<Vec<f64>>,
}

impl SegmentView {
    pub fn from_segment(seg: &Segment, family: Family) -> Self {
        let half = family.obs_dim() / 2;
        let rows: Vec<Vec<f64>> = seg.states.rows().into_iter().map(|r| r.to_vec()).collect();
        SegmentView {
            positions: rows.iter().map(|r| r[..half].to_vec()).collect(),
            velocities: rows.iter().map(|r| r[half..].to_vec()).collect(),
            observations: rows,
            actions: seg.actions.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendingQuery {
    pub id: u64,
    pub session: usize,
    pub issued_at_step: u64,
    pub family: Family,
    pub first: SegmentView,
    pub second: SegmentView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    /// Training between sessions.
    Training,
    /// A session is open and waiting for answers.
    Labeling,
    /// The whole budget has been charged; training continues.
    FeedbackComplete,
    Finished,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub run_id: String,
    pub mode: Mode,
    pub family: Family,
    pub state: RunState,
    pub step: u64,
    pub total_steps: u64,
    pub budget_used: usize,
    pub budget_total: usize,
    pub skips: usize,
    pub dataset_size: usize,
    /// Unanswered queries in the open session; 0 between sessions.
    pub pending: usize,
    pub session: Option<usize>,
    pub sessions_completed: usize,
}

/// One human answer, in arrival order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: u64,
    pub session: usize,
    pub choice: Label,
    /// Seconds since the Unix epoch, as sent by the client or stamped on arrival.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub query_id: u64,
    pub choice: Label,
    /// Unanswered queries left in the session.
    pub remaining: usize,
    pub budget_used: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerError {
    NotFound(u64),
    Conflict(u64),
    BadChoice(String),
}

impl std::fmt::Display for AnswerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnswerError::NotFound(id) => write!(f, "query {id} is not pending"),
            AnswerError::Conflict(id) => write!(f, "query {id} was already answered"),
            AnswerError::BadChoice(m) => write!(f, "bad answer: {m}"),
        }
    }
}

#[derive(Debug)]
struct ActiveSession {
    index: usize,
    queries: Vec<Query>,
    answers: Vec<Option<Label>>,
    used_before: usize,
}

impl ActiveSession {
    fn remaining(&self) -> usize {
        self.answers.iter().filter(|a| a.is_none()).count()
    }
}

#[derive(Debug)]
struct RunInfo {
    run_id: String,
    mode: Mode,
    family: Family,
    total_steps: u64,
    budget_total: usize,
}

#[derive(Debug, Default)]
struct State {
    run: Option<RunInfo>,
    step: u64,
    budget_used: usize,
    skips: usize,
    dataset_size: usize,
    sessions_completed: usize,
    active: Option<ActiveSession>,
    /// Every query ever issued, by id.
    issued: BTreeMap<u64, PendingQuery>,
    answered: BTreeMap<u64, Label>,
    answer_log: Vec<AnswerRecord>,
    metrics: Vec<MetricsRecord>,
    finished: bool,
    cancelled: Option<String>,
    last_activity: Option<Instant>,
}

#[derive(Debug, Default)]
struct Shared {
    state: Mutex<State>,
    wake: Condvar,
}

/// Cloneable handle to the shared state.
#[derive(Debug, Clone, Default)]
pub struct FeedbackHub {
    shared: Arc<Shared>,
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl FeedbackHub {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> Option<SessionStatus> {
        let s = self.lock();
        let run = s.run.as_ref()?;
        let (pending, session, used, dataset) = match &s.active {
            Some(a) => {
                let answered: Vec<Label> = a.answers.iter().flatten().copied().collect();
                (
                    a.remaining(),
                    Some(a.index),
                    a.used_before + answered.len(),
                    s.dataset_size + answered.iter().filter(|l| l.is_preference()).count(),
                )
            }
            None => (0, None, s.budget_used, s.dataset_size),
        };
        let skips = s.skips
            + s.active
                .as_ref()
                .map_or(0, |a| a.answers.iter().filter(|l| **l == Some(Label::Skipped)).count());
        let state = if s.cancelled.is_some() {
            RunState::Cancelled
        } else if s.finished {
            RunState::Finished
        } else if pending > 0 {
            RunState::Labeling
        } else if used >= run.budget_total && run.mode.uses_feedback() {
            RunState::FeedbackComplete
        } else {
            RunState::Training
        };
        Some(SessionStatus {
            run_id: run.run_id.clone(),
            mode: run.mode,
            family: run.family,
            state,
            step: s.step,
            total_steps: run.total_steps,
            budget_used: used,
            budget_total: run.budget_total,
            skips,
            dataset_size: dataset,
            pending,
            session,
            sessions_completed: s.sessions_completed,
        })
    }

    /// Lowest-index unanswered query of the open session.
    pub fn next_pending(&self) -> Option<PendingQuery> {
        let s = self.lock();
        let a = s.active.as_ref()?;
        let i = a.answers.iter().position(Option::is_none)?;
        s.issued.get(&a.queries[i].id).cloned()
    }

    pub fn query(&self, id: u64) -> Option<PendingQuery> {
        self.lock().issued.get(&id).cloned()
    }

    pub fn answer(&self, id: u64, choice: Label, timestamp: Option<f64>) -> std::result::Result<AnswerAck, AnswerError> {
        if choice == Label::Unlabeled {
            return Err(AnswerError::BadChoice("choice must be prefer_1, prefer_2 or skip".into()));
        }
        let mut s = self.lock();
        if s.answered.contains_key(&id) {
            return Err(AnswerError::Conflict(id));
        }
        let a = s.active.as_mut().ok_or(AnswerError::NotFound(id))?;
        let i = a.queries.iter().position(|q| q.id == id).ok_or(AnswerError::NotFound(id))?;
        a.answers[i] = Some(choice);
        let session = a.index;
        let remaining = a.remaining();
        let budget_used = a.used_before + a.answers.iter().flatten().count();
        s.answered.insert(id, choice);
        s.answer_log.push(AnswerRecord {
            query_id: id,
            session,
            choice,
            timestamp: timestamp.unwrap_or_else(now_secs),
        });
        s.last_activity = Some(Instant::now());
        drop(s);
        self.shared.wake.notify_all();
        Ok(AnswerAck {
            query_id: id,
            choice,
            remaining,
            budget_used,
        })
    }

    pub fn answer_log(&self) -> Vec<AnswerRecord> {
        self.lock().answer_log.clone()
    }

    /// Metrics records from index `since` on.
    pub fn metrics_since(&self, since: usize) -> Vec<MetricsRecord> {
        let s = self.lock();
        s.metrics.get(since..).map(<[_]>::to_vec).unwrap_or_default()
    }

    /// Aborts a blocked session; the run fails with a labeler error.
    pub fn cancel(&self, reason: &str) {
        self.lock().cancelled = Some(reason.to_string());
        self.shared.wake.notify_all();
    }

    pub fn is_finished(&self) -> bool {
        self.lock().finished
    }

    /// Blocks until a session is open, the run finishes or `timeout` passes.
    pub fn wait_for_session(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        loop {
            if s.active.as_ref().is_some_and(|a| a.remaining() > 0) {
                return true;
            }
            if s.finished || s.cancelled.is_some() {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            s = self.shared.wake.wait_timeout(s, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn observe(&self, r: &MetricsRecord) {
        let mut s = self.lock();
        match r {
            MetricsRecord::Run(h) => {
                s.run = Some(RunInfo {
                    run_id: h.run_id.clone(),
                    mode: h.mode,
                    family: h.family,
                    total_steps: h.total_steps,
                    budget_total: if h.mode.uses_feedback() { h.budget } else { 0 },
                });
            }
            MetricsRecord::Session(rec) => {
                s.budget_used = rec.feedback_used;
                s.skips = rec.skips;
                s.dataset_size = rec.dataset_size;
                s.sessions_completed += 1;
            }
            MetricsRecord::Done(d) => {
                s.finished = true;
                s.step = d.step;
            }
            MetricsRecord::Eval(_) => {}
        }
        s.metrics.push(r.clone());
        drop(s);
        self.shared.wake.notify_all();
    }
}

/// Forwards orchestrator progress and metrics into the hub.
#[derive(Debug, Clone)]
pub struct HubObserver {
    pub hub: FeedbackHub,
}

impl RunObserver for HubObserver {
    fn record(&mut self, r: &MetricsRecord) {
        self.hub.observe(r);
    }

    fn progress(&mut self, step: u64) {
        self.hub.lock().step = step;
    }
}

/// Label source answered through the HTTP API.
#[derive(Debug, Clone)]
pub struct HumanLabeler {
    pub hub: FeedbackHub,
    /// Cancel the run when no answer arrives for this long.
    pub idle_timeout: Option<Duration>,
}

impl HumanLabeler {
    pub fn new(hub: FeedbackHub, idle_timeout: Option<Duration>) -> Self {
        HumanLabeler { hub, idle_timeout }
    }
}

impl LabelSource for HumanLabeler {
    fn label_session(&mut self, req: &SessionRequest<'_>) -> Result<Vec<Label>> {
        let mut s = self.hub.lock();
        if let Some(reason) = &s.cancelled {
            return Err(Error::Labeler(format!("run cancelled: {reason}")));
        }
        let family = s
            .run
            .as_ref()
            .map(|r| r.family)
            .ok_or_else(|| Error::Contract("session opened before the run header".into()))?;
        for q in req.queries {
            s.issued.insert(
                q.id,
                PendingQuery {
                    id: q.id,
                    session: req.session,
                    issued_at_step: req.step,
                    family,
                    first: SegmentView::from_segment(&q.first, family),
                    second: SegmentView::from_segment(&q.second, family),
                },
            );
        }
        s.step = req.step;
        s.active = Some(ActiveSession {
            index: req.session,
            queries: req.queries.to_vec(),
            answers: vec![None; req.queries.len()],
            used_before: req.budget_used,
        });
        s.last_activity = Some(Instant::now());
        self.hub.shared.wake.notify_all();
        log::info!("session {} open with {} queries", req.session, req.queries.len());

        loop {
            if let Some(reason) = s.cancelled.clone() {
                s.active = None;
                return Err(Error::Labeler(format!("run cancelled: {reason}")));
            }
            if s.active.as_ref().is_some_and(|a| a.remaining() == 0) {
                let a = s.active.take().expect("active session");
                // keep counters monotone until the session record arrives
                s.budget_used = a.used_before + a.answers.len();
                s.skips += a.answers.iter().filter(|l| **l == Some(Label::Skipped)).count();
                s.dataset_size += a.answers.iter().flatten().filter(|l| l.is_preference()).count();
                return Ok(a.answers.into_iter().map(|l| l.expect("answered")).collect());
            }
            let wait = match self.idle_timeout {
                Some(t) => {
                    let idle = s.last_activity.map_or(Duration::ZERO, |at| at.elapsed());
                    if idle >= t {
                        s.cancelled = Some(format!("no answer for {:.1}s", t.as_secs_f64()));
                        continue;
                    }
                    t - idle
                }
                None => Duration::from_secs(3600),
            };
            s = self.hub.shared.wake.wait_timeout(s, wait).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Human
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsprl_core::orchestrator::RunHeader;
    use ndarray::Array2;

    fn header() -> MetricsRecord {
        MetricsRecord::Run(RunHeader {
            run_id: "t".into(),
            mode: Mode::FewShot,
            family: Family::PointMass,
            seed: 0,
            total_steps: 100,
            budget: 4,
            per_session: 2,
            frequency: 10,
        })
    }

    fn query(id: u64) -> Query {
        let s = Segment {
            states: Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64),
            actions: Array2::zeros((3, 2)),
            task_id: 0,
            start: 0,
            gt_return: None,
        };
        Query::new(id, s.clone(), s).unwrap()
    }

    #[test]
    fn view_splits_positions_and_velocities() {
        let v = SegmentView::from_segment(&query(0).first, Family::PointMass);
        assert_eq!(v.observations.len(), 3);
        assert_eq!(v.positions[1], vec![4.0, 5.0]);
        assert_eq!(v.velocities[1], vec![6.0, 7.0]);
    }

    #[test]
    fn session_round_trip_between_threads() {
        let hub = FeedbackHub::new();
        assert!(hub.status().is_none());
        HubObserver { hub: hub.clone() }.record(&header());
        let st = hub.status().unwrap();
        assert_eq!((st.pending, st.state), (0, RunState::Training));
        assert!(hub.next_pending().is_none());

        let answerer = {
            let hub = hub.clone();
            std::thread::spawn(move || {
                assert!(hub.wait_for_session(Duration::from_secs(10)));
                let st = hub.status().unwrap();
                assert_eq!((st.pending, st.state, st.session), (2, RunState::Labeling, Some(0)));
                let first = hub.next_pending().unwrap();
                assert_eq!(hub.next_pending().unwrap().id, first.id);
                assert_eq!(hub.answer(9, Label::Prefer1, None), Err(AnswerError::NotFound(9)));
                hub.answer(first.id, Label::Skipped, Some(1.0)).unwrap();
                let st = hub.status().unwrap();
                assert_eq!((st.budget_used, st.dataset_size, st.skips), (1, 0, 1));
                assert_eq!(hub.answer(first.id, Label::Prefer1, None), Err(AnswerError::Conflict(first.id)));
                let second = hub.next_pending().unwrap();
                assert_ne!(second.id, first.id);
                hub.answer(second.id, Label::Prefer2, Some(2.0)).unwrap();
            })
        };
        let qs = [query(3), query(4)];
        let mut labeler = HumanLabeler::new(hub.clone(), None);
        let labels = labeler
            .label_session(&SessionRequest {
                session: 0,
                step: 10,
                queries: &qs,
                budget_used: 0,
                budget_total: 4,
            })
            .unwrap();
        answerer.join().unwrap();
        assert_eq!(labels, vec![Label::Skipped, Label::Prefer2]);
        assert_eq!(hub.answer_log().iter().map(|a| a.query_id).collect::<Vec<_>>(), vec![3, 4]);
        assert!(hub.query(3).is_some() && hub.next_pending().is_none());
        assert_eq!(hub.status().unwrap().pending, 0);
    }

    #[test]
    fn idle_timeout_cancels() {
        let hub = FeedbackHub::new();
        HubObserver { hub: hub.clone() }.record(&header());
        let qs = [query(0)];
        let mut labeler = HumanLabeler::new(hub.clone(), Some(Duration::from_millis(50)));
        let r = labeler.label_session(&SessionRequest {
            session: 0,
            step: 0,
            queries: &qs,
            budget_used: 0,
            budget_total: 4,
        });
        assert!(matches!(r, Err(Error::Labeler(_))));
        assert_eq!(hub.status().unwrap().state, RunState::Cancelled);
    }
}
