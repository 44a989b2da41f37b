//! Candidate queries from the live replay buffer, and selection by ensemble
//! disagreement or uniformly at random.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::RewardEnsemble;
use crate::preference::{window_starts, Query, Segment};
use crate::sac::ReplayBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    Disagreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    /// Candidates drawn per selected query.
    pub sample_multiplier: usize,
    pub first_session_uniform: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::Disagreement,
            sample_multiplier: 10,
            first_session_uniform: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_multiplier == 0 {
            return Err(Error::Config("selection.sample_multiplier must be at least 1".into()));
        }
        Ok(())
    }

    pub fn strategy_for_session(&self, session: usize) -> Strategy {
        if session == 0 && self.first_session_uniform {
            Strategy::Uniform
        } else {
            self.strategy
        }
    }
}

/// `count` unlabeled queries, each pairing two uniformly drawn
/// episode-aligned `k`-windows of the buffer. Ids run from `first_id`.
pub fn propose_candidates<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    count: usize,
    k: usize,
    first_id: u64,
    keep_returns: bool,
    rng: &mut R,
) -> Result<Vec<Query>> {
    let starts = window_starts(buffer.iter().map(|t| t.episode_step), k);
    if starts.is_empty() || starts[starts.len() - 1] - starts[0] < k {
        return Err(Error::Capacity(format!(
            "replay buffer of {} transitions has no two disjoint {k}-step windows",
            buffer.len()
        )));
    }
    let segment = |rng: &mut R| {
        let s = starts[rng.random_range(0..starts.len())];
        Segment::from_transitions(&buffer.window(s, k), 0, s, keep_returns)
    };
    (0..count)
        .map(|i| {
            let a = segment(rng)?;
            let b = segment(rng)?;
            Query::new(first_id + i as u64, a, b)
        })
        .collect()
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-candidate disagreement: the population std of the members'
/// preference probabilities.
pub fn disagreement(candidates: &[Query], ensemble: &RewardEnsemble) -> Result<Vec<f64>> {
    if ensemble.len() < 2 {
        return Err(Error::Contract(format!(
            "disagreement needs at least two ensemble members, got {}",
            ensemble.len()
        )));
    }
    let refs: Vec<&Query> = candidates.iter().collect();
    Ok(ensemble.probe(&refs)?.iter().map(|p| population_std(&p.members)).collect())
}

/// Indices of the `m` most disputed candidates, by descending std; equal
/// stds keep candidate order.
pub fn select_disagreement(candidates: &[Query], ensemble: &RewardEnsemble, m: usize) -> Result<Vec<usize>> {
    if candidates.len() < m {
        return Err(Error::Capacity(format!("{} candidates for {m} queries", candidates.len())));
    }
    let stds = disagreement(candidates, ensemble)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| stds[b].total_cmp(&stds[a]));
    order.truncate(m);
    Ok(order)
}

/// `m` candidate indices drawn without replacement, in ascending order.
pub fn select_uniform<R: Rng + ?Sized>(candidates: &[Query], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if candidates.len() < m {
        return Err(Error::Capacity(format!("{} candidates for {m} queries", candidates.len())));
    }
    let mut idx = sample(rng, candidates.len(), m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}
