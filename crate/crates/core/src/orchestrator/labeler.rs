//! Label sources: the ground-truth oracle, scripted answer lists and
//! wrappers used in tests and replays.

use crate::env::{EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::preference::{label_from_returns, segment_return, Label, LabelSource as Provenance, Query};

/// One feedback session handed to a label source.
#[derive(Debug)]
pub struct SessionRequest<'a> {
    pub session: usize,
    pub step: u64,
    pub queries: &'a [Query],
    /// Charged before this session.
    pub budget_used: usize,
    pub budget_total: usize,
}

/// Anything that answers sessions: one label (prefer or skip) per query,
/// in order. Blocking is allowed; the run waits.
pub trait LabelSource {
    fn label_session(&mut self, req: &SessionRequest<'_>) -> Result<Vec<Label>>;

    /// How answers are tagged in the feedback dataset.
    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }
}

/// Labels by comparing ground-truth segment returns under the task.
#[derive(Debug, Clone)]
pub struct OracleLabeler {
    pub task: TaskSpec,
    pub env: EnvConfig,
}

impl OracleLabeler {
    pub fn new(task: TaskSpec, env: EnvConfig) -> Self {
        OracleLabeler { task, env }
    }

    pub fn label(&self, q: &Query) -> Label {
        label_from_returns(
            segment_return(&q.first, &self.task, &self.env),
            segment_return(&q.second, &self.task, &self.env),
        )
    }
}

impl LabelSource for OracleLabeler {
    fn label_session(&mut self, req: &SessionRequest<'_>) -> Result<Vec<Label>> {
        Ok(req.queries.iter().map(|q| self.label(q)).collect())
    }
}

/// Oracle answers, except that every `n`-th issued query (1-based, counted
/// across sessions) is skipped.
#[derive(Debug, Clone)]
pub struct SkippingLabeler {
    pub oracle: OracleLabeler,
    pub every: usize,
    issued: usize,
}

impl SkippingLabeler {
    pub fn new(oracle: OracleLabeler, every: usize) -> Self {
        assert!(every > 0);
        SkippingLabeler {
            oracle,
            every,
            issued: 0,
        }
    }
}

impl LabelSource for SkippingLabeler {
    fn label_session(&mut self, req: &SessionRequest<'_>) -> Result<Vec<Label>> {
        Ok(req
            .queries
            .iter()
            .map(|q| {
                self.issued += 1;
                if self.issued.is_multiple_of(self.every) {
                    Label::Skipped
                } else {
                    self.oracle.label(q)
                }
            })
            .collect())
    }
}

/// Replays a recorded answer list, e.g. a human answer log, in order.
#[derive(Debug, Clone)]
pub struct ScriptedLabeler {
    answers: std::collections::VecDeque<(u64, Label)>,
    provenance: Provenance,
}

impl ScriptedLabeler {
    pub fn new(answers: impl IntoIterator<Item = (u64, Label)>, provenance: Provenance) -> Self {
        ScriptedLabeler {
            answers: answers.into_iter().collect(),
            provenance,
        }
    }
}

impl LabelSource for ScriptedLabeler {
    fn label_session(&mut self, req: &SessionRequest<'_>) -> Result<Vec<Label>> {
        req.queries
            .iter()
            .map(|q| {
                let (id, label) = self
                    .answers
                    .pop_front()
                    .ok_or_else(|| Error::Labeler(format!("answer log exhausted at query {}", q.id)))?;
                if id != q.id {
                    return Err(Error::Labeler(format!("answer log has query {id}, run issued {}", q.id)));
                }
                Ok(label)
            })
            .collect()
    }

    fn provenance(&self) -> Provenance {
        self.provenance
    }
}
