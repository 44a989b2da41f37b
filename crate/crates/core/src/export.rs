//! Plot-ready tables from one or more metrics streams (typically one per
//! seed). Series are aligned by evaluation index and summarized as mean,
//! min and max across inputs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::Family;
use crate::error::{Error, Result};
use crate::orchestrator::{EvalRecord, MetricsRecord, SessionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XAxis {
    Steps,
    /// Cumulative queries charged, skips included.
    Feedback,
}

impl std::str::FromStr for XAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(XAxis::Steps),
            "feedback" => Ok(XAxis::Feedback),
            other => Err(Error::Config(format!("unknown x axis `{other}` (expected steps or feedback)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Spread {
        let n = values.len() as f64;
        Spread {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub x: Spread,
    pub mean_return: Spread,
    pub success: Spread,
    pub final_error: Spread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRow {
    pub session: usize,
    pub x: Spread,
    pub correct: Spread,
    pub incorrect: Spread,
    pub skipped: Spread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotTables {
    pub family: Family,
    pub x: XAxis,
    pub runs: usize,
    pub evals: Vec<EvalRow>,
    pub sessions: Vec<SessionRow>,
}

fn family_of(records: &[MetricsRecord]) -> Result<Family> {
    records
        .iter()
        .find_map(|r| match r {
            MetricsRecord::Run(h) => Some(h.family),
            _ => None,
        })
        .ok_or_else(|| Error::Format("metrics stream has no run header".into()))
}

/// Rows present in every input; longer inputs are truncated.
fn aligned<'a, T: 'a>(per_run: &'a [Vec<&'a T>]) -> impl Iterator<Item = (usize, Vec<&'a T>)> + 'a {
    let n = per_run.iter().map(Vec::len).min().unwrap_or(0);
    (0..n).map(move |i| (i, per_run.iter().map(|r| r[i]).collect()))
}

pub fn plot_tables(runs: &[Vec<MetricsRecord>], x: XAxis) -> Result<PlotTables> {
    if runs.is_empty() {
        return Err(Error::Config("no metrics inputs".into()));
    }
    let family = family_of(&runs[0])?;
    for r in &runs[1..] {
        let f = family_of(r)?;
        if f != family {
            return Err(Error::Config(format!("metrics mix environment families ({family} and {f})")));
        }
    }
    let evals: Vec<Vec<&EvalRecord>> = runs
        .iter()
        .map(|r| {
            r.iter()
                .filter_map(|m| match m {
                    MetricsRecord::Eval(e) => Some(e),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let sessions: Vec<Vec<&SessionRecord>> = runs
        .iter()
        .map(|r| {
            r.iter()
                .filter_map(|m| match m {
                    MetricsRecord::Session(s) => Some(s),
                    _ => None,
                })
                .collect()
        })
        .collect();

    let spread = |f: &dyn Fn(usize) -> f64, n: usize| Spread::of(&(0..n).map(f).collect::<Vec<_>>());
    let eval_rows = aligned(&evals)
        .map(|(i, rows)| {
            let n = rows.len();
            let xs = |j: usize| match x {
                XAxis::Steps => rows[j].step as f64,
                XAxis::Feedback => rows[j].feedback_used as f64,
            };
            EvalRow {
                index: i,
                x: spread(&xs, n),
                mean_return: spread(&|j| rows[j].mean_return, n),
                success: spread(&|j| rows[j].success, n),
                final_error: spread(&|j| rows[j].final_error, n),
            }
        })
        .collect();
    let session_rows = aligned(&sessions)
        .map(|(i, rows)| {
            let n = rows.len();
            let xs = |j: usize| match x {
                XAxis::Steps => rows[j].step as f64,
                XAxis::Feedback => rows[j].feedback_used as f64,
            };
            SessionRow {
                session: i,
                x: spread(&xs, n),
                correct: spread(&|j| rows[j].agreement.correct, n),
                incorrect: spread(&|j| rows[j].agreement.incorrect, n),
                skipped: spread(&|j| rows[j].agreement.skipped, n),
            }
        })
        .collect();
    Ok(PlotTables {
        family,
        x,
        runs: runs.len(),
        evals: eval_rows,
        sessions: session_rows,
    })
}

fn push_spread(out: &mut String, s: &Spread) {
    write!(out, "\t{}\t{}\t{}", s.mean, s.min, s.max).unwrap();
}

impl PlotTables {
    fn x_name(&self) -> &'static str {
        match self.x {
            XAxis::Steps => "step",
            XAxis::Feedback => "feedback",
        }
    }

    /// Tab-separated evaluation series with a header row.
    pub fn evals_tsv(&self) -> String {
        let x = self.x_name();
        let mut out = format!(
            "eval\t{x}\t{x}_min\t{x}_max\treturn_mean\treturn_min\treturn_max\tsuccess_mean\tsuccess_min\tsuccess_max\tfinal_error_mean\tfinal_error_min\tfinal_error_max\n"
        );
        for r in &self.evals {
            write!(out, "{}\t{}\t{}\t{}", r.index, r.x.mean, r.x.min, r.x.max).unwrap();
            push_spread(&mut out, &r.mean_return);
            push_spread(&mut out, &r.success);
            push_spread(&mut out, &r.final_error);
            out.push('\n');
        }
        out
    }

    /// Tab-separated per-session label agreement.
    pub fn sessions_tsv(&self) -> String {
        let x = self.x_name();
        let mut out = format!(
            "session\t{x}\t{x}_min\t{x}_max\tcorrect_mean\tcorrect_min\tcorrect_max\tincorrect_mean\tincorrect_min\tincorrect_max\tskipped_mean\tskipped_min\tskipped_max\n"
        );
        for r in &self.sessions {
            write!(out, "{}\t{}\t{}\t{}", r.session, r.x.mean, r.x.min, r.x.max).unwrap();
            push_spread(&mut out, &r.correct);
            push_spread(&mut out, &r.incorrect);
            push_spread(&mut out, &r.skipped);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{Agreement, Mode, RunHeader};
    use crate::selection::Strategy;

    fn header(family: Family, seed: u64) -> MetricsRecord {
        MetricsRecord::Run(RunHeader {
            run_id: format!("r{seed}"),
            mode: Mode::FewShot,
            family,
            seed,
            total_steps: 4000,
            budget: 36,
            per_session: 6,
            frequency: 2000,
        })
    }

    fn eval(i: usize, ret: f64, feedback: usize, skips: usize) -> MetricsRecord {
        MetricsRecord::Eval(EvalRecord {
            eval: i,
            step: 2000 * (i as u64 + 1),
            mean_return: ret,
            success: ret / 100.0,
            final_error: 1.0 / ret,
            feedback_used: feedback,
            skips,
        })
    }

    fn session(i: usize, correct: f64) -> MetricsRecord {
        MetricsRecord::Session(SessionRecord {
            session: i,
            step: 2000 * (i as u64 + 1),
            strategy: Strategy::Uniform,
            query_ids: vec![],
            labels: vec![],
            labeled: 6,
            skipped: 0,
            feedback_used: 6 * (i + 1),
            skips: 0,
            dataset_size: 6 * (i + 1),
            agreement: Agreement { correct, incorrect: 1.0 - correct, skipped: 0.0 },
            train_accuracy: vec![],
            inner_steps: vec![],
            adam_epochs: vec![],
        })
    }

    #[test]
    fn single_input_is_reshaped_unchanged() {
        let run = vec![header(Family::PointMass, 0), session(0, 0.5), eval(0, 10.0, 6, 1), eval(1, 20.0, 12, 2)];
        let t = plot_tables(&[run], XAxis::Steps).unwrap();
        assert_eq!(t.evals.len(), 2);
        let r = &t.evals[1];
        assert_eq!((r.x.mean, r.mean_return.mean, r.mean_return.min, r.mean_return.max), (4000.0, 20.0, 20.0, 20.0));
        assert_eq!(r.success.mean, 0.2);
        assert_eq!(t.sessions[0].correct.mean, 0.5);
        let tsv = t.evals_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert!(lines[0].starts_with("eval\tstep\t"));
        assert_eq!(lines[1].split('\t').take(5).collect::<Vec<_>>(), vec!["0", "2000", "2000", "2000", "10"]);
    }

    #[test]
    fn feedback_axis_counts_skips() {
        let run = vec![header(Family::PointMass, 0), eval(0, 10.0, 6, 2)];
        let t = plot_tables(&[run], XAxis::Feedback).unwrap();
        assert_eq!(t.evals[0].x.mean, 6.0);
        assert!(t.evals_tsv().starts_with("eval\tfeedback\t"));
    }

    #[test]
    fn three_seeds_average_by_hand() {
        let runs: Vec<Vec<MetricsRecord>> = [(1.0, 4.0), (2.0, 8.0), (6.0, 3.0)]
            .iter()
            .enumerate()
            .map(|(s, &(a, b))| vec![header(Family::PointMass, s as u64), eval(0, a, 6, 0), eval(1, b, 12, 0)])
            .collect();
        let t = plot_tables(&runs, XAxis::Steps).unwrap();
        assert_eq!(t.runs, 3);
        assert_eq!(t.evals[0].mean_return, Spread { mean: 3.0, min: 1.0, max: 6.0 });
        assert_eq!(t.evals[1].mean_return, Spread { mean: 5.0, min: 3.0, max: 8.0 });
    }

    #[test]
    fn ragged_inputs_truncate() {
        let a = vec![header(Family::PointMass, 0), eval(0, 1.0, 0, 0), eval(1, 2.0, 0, 0)];
        let b = vec![header(Family::PointMass, 1), eval(0, 3.0, 0, 0)];
        assert_eq!(plot_tables(&[a, b], XAxis::Steps).unwrap().evals.len(), 1);
    }

    #[test]
    fn mixed_families_are_rejected() {
        let a = vec![header(Family::PointMass, 0)];
        let b = vec![header(Family::VelocityTrack, 1)];
        assert!(matches!(plot_tables(&[a, b], XAxis::Steps), Err(Error::Config(_))));
        assert!(matches!(plot_tables(&[vec![eval(0, 1.0, 0, 0)]], XAxis::Steps), Err(Error::Format(_))));
        assert!(plot_tables(&[], XAxis::Steps).is_err());
    }
}
