//! Line-delimited metrics records shared by the CLI, the feedback service
//! and the plot exporter.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::Family;
use crate::error::{Error, Result};
use crate::preference::Label;

use super::Mode;

/// Fractions of a session's queries whose label agreed with the ground
/// truth, disagreed, or were skipped. They sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub correct: f64,
    pub incorrect: f64,
    pub skipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub mode: Mode,
    pub family: Family,
    pub seed: u64,
    pub total_steps: u64,
    pub budget: usize,
    pub per_session: usize,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub step: u64,
    pub strategy: crate::selection::Strategy,
    pub query_ids: Vec<u64>,
    pub labels: Vec<Label>,
    pub labeled: usize,
    pub skipped: usize,
    /// Cumulative, skips included.
    pub feedback_used: usize,
    pub skips: usize,
    pub dataset_size: usize,
    pub agreement: Agreement,
    /// Per ensemble member.
    pub train_accuracy: Vec<f64>,
    pub inner_steps: Vec<usize>,
    pub adam_epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval: usize,
    pub step: u64,
    #[serde(rename = "return")]
    pub mean_return: f64,
    pub success: f64,
    /// Point mass: distance to the goal at episode end. Velocity: |v - target|.
    pub final_error: f64,
    pub feedback_used: usize,
    pub skips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneRecord {
    pub step: u64,
    pub feedback_used: usize,
    pub skips: usize,
    pub sessions: usize,
    pub dataset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Run(RunHeader),
    Session(SessionRecord),
    Eval(EvalRecord),
    Done(DoneRecord),
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records serialize")
    }
}

pub fn write_record<W: Write>(mut w: W, r: &MetricsRecord) -> Result<()> {
    w.write_all(r.to_line().as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Fractions of correct, incorrect and skipped answers in one session;
/// `returns[i]` holds the ground-truth returns of query `i`'s segments.
pub fn label_agreement(labels: &[Label], returns: &[(f64, f64)]) -> Agreement {
    let n = labels.len();
    if n == 0 {
        return Agreement {
            correct: 0.0,
            incorrect: 0.0,
            skipped: 0.0,
        };
    }
    let (mut c, mut w, mut s) = (0usize, 0usize, 0usize);
    for (l, &(r1, r2)) in labels.iter().zip(returns) {
        match l {
            Label::Prefer1 | Label::Prefer2 => {
                if *l == crate::preference::label_from_returns(r1, r2) {
                    c += 1
                } else {
                    w += 1
                }
            }
            _ => s += 1,
        }
    }
    let f = |k: usize| k as f64 / n as f64;
    Agreement {
        correct: f(c),
        incorrect: f(w),
        skipped: f(s),
    }
}
