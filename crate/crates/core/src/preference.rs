//! Segments, queries, the Bradley-Terry preference predictor and its
//! cross-entropy loss, oracle labels and pre-training datasets.

use std::io::{BufRead, Write};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Family, TaskSpec, Transition};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Mlp, NumericsError, Tape, Var};
use crate::reward::RewardModel;

/// `k` consecutive `(state, action)` pairs from one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub task_id: usize,
    /// Position of the first pair in the source buffer.
    pub start: usize,
    /// Sum of ground-truth rewards, when known.
    pub gt_return: Option<f64>,
}

impl Segment {
    pub fn from_transitions<'a, I>(transitions: I, task_id: usize, start: usize, keep_return: bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut ret = 0.0;
        let mut k = 0;
        let (mut sd, mut ad) = (None, None);
        for t in transitions {
            if *sd.get_or_insert(t.state.len()) != t.state.len() || *ad.get_or_insert(t.action.len()) != t.action.len() {
                return Err(Error::Dimension("inconsistent transition dimensions in segment".into()));
            }
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            ret += t.reward;
            k += 1;
        }
        if k == 0 {
            return Err(Error::Contract("empty segment".into()));
        }
        let (sd, ad) = (sd.unwrap(), ad.unwrap());
        Ok(Segment {
            states: Array2::from_shape_vec((k, sd), states).expect("shape checked"),
            actions: Array2::from_shape_vec((k, ad), actions).expect("shape checked"),
            task_id,
            start,
            gt_return: keep_return.then_some(ret),
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[state | action]` rows, the reward model's input.
    pub fn inputs(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.states.view(), self.actions.view()]).expect("row counts match")
    }

    fn compatible(&self, other: &Segment) -> bool {
        self.len() == other.len()
            && self.states.ncols() == other.states.ncols()
            && self.actions.ncols() == other.actions.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "unlabeled")]
    Unlabeled,
    #[serde(rename = "prefer_1")]
    Prefer1,
    #[serde(rename = "prefer_2")]
    Prefer2,
    #[serde(rename = "skip")]
    Skipped,
}

impl Label {
    pub fn is_preference(self) -> bool {
        matches!(self, Label::Prefer1 | Label::Prefer2)
    }

    fn flipped(self) -> Label {
        match self {
            Label::Prefer1 => Label::Prefer2,
            Label::Prefer2 => Label::Prefer1,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Oracle,
    Human,
}

/// An ordered pair of segments and, once answered, its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: u64,
    pub first: Segment,
    pub second: Segment,
    label: Label,
    source: Option<LabelSource>,
}

impl Query {
    pub fn new(id: u64, first: Segment, second: Segment) -> Result<Self> {
        if first.is_empty() || !first.compatible(&second) {
            return Err(Error::Contract(format!(
                "query {id}: segments must be non-empty with equal length and dimensions"
            )));
        }
        Ok(Query {
            id,
            first,
            second,
            label: Label::Unlabeled,
            source: None,
        })
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn source(&self) -> Option<LabelSource> {
        self.source
    }

    /// Labels are write-once.
    pub fn set_label(&mut self, label: Label, source: LabelSource) -> Result<()> {
        if self.label != Label::Unlabeled {
            return Err(Error::Contract(format!("query {} is already labeled", self.id)));
        }
        if label == Label::Unlabeled {
            return Err(Error::Contract("cannot label a query as unlabeled".into()));
        }
        self.label = label;
        self.source = Some(source);
        Ok(())
    }

    pub fn labeled(mut self, label: Label, source: LabelSource) -> Result<Self> {
        self.set_label(label, source)?;
        Ok(self)
    }

    /// Same query with the segments exchanged (and the label flipped).
    pub fn swapped(&self) -> Query {
        Query {
            id: self.id,
            first: self.second.clone(),
            second: self.first.clone(),
            label: self.label.flipped(),
            source: self.source,
        }
    }

    pub fn segment_len(&self) -> usize {
        self.first.len()
    }
}

/// Labeled queries for one task. Skipped and unlabeled queries are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub family: Family,
    pub k: usize,
    queries: Vec<Query>,
}

/// Disjoint support / query index sets into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportQuerySplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl PreferenceDataset {
    pub fn new(family: Family, k: usize) -> Self {
        PreferenceDataset {
            family,
            k,
            queries: Vec::new(),
        }
    }

    pub fn from_queries(family: Family, k: usize, queries: Vec<Query>) -> Result<Self> {
        let mut ds = Self::new(family, k);
        for q in queries {
            ds.push(q)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, q: Query) -> Result<()> {
        if !q.label().is_preference() {
            return Err(Error::Contract(format!(
                "query {} has label {:?}; datasets hold only preferences",
                q.id,
                q.label()
            )));
        }
        if q.segment_len() != self.k
            || q.first.states.ncols() != self.family.obs_dim()
            || q.first.actions.ncols() != self.family.action_dim()
        {
            return Err(Error::Dimension(format!(
                "query {} does not match a {} dataset with k = {}",
                q.id, self.family, self.k
            )));
        }
        self.queries.push(q);
        Ok(())
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Query> {
        indices.iter().map(|&i| &self.queries[i]).collect()
    }

    pub fn split<R: Rng + ?Sized>(&self, support: usize, query: usize, rng: &mut R) -> Result<SupportQuerySplit> {
        if support + query > self.len() {
            return Err(Error::Capacity(format!(
                "need {} queries for a support/query split, dataset has {}",
                support + query,
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        Ok(SupportQuerySplit {
            support: idx[..support].to_vec(),
            query: idx[support..support + query].to_vec(),
        })
    }
}

/// Stacked reward-model inputs for a batch of queries.
///
/// Rows `0..n*k` are the first segments, rows `n*k..2*n*k` the second, so
/// one forward pass scores the whole batch.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub inputs: Array2<f64>,
    /// `+1` where the first segment is preferred, `-1` for the second.
    pub signs: Array2<f64>,
    pub n: usize,
    pub k: usize,
}

impl QueryBatch {
    pub fn new(queries: &[&Query]) -> Result<Self> {
        Self::build(queries, true)
    }

    /// Batch for prediction only; labels are ignored.
    pub fn unlabeled(queries: &[&Query]) -> Result<Self> {
        Self::build(queries, false)
    }

    fn build(queries: &[&Query], need_labels: bool) -> Result<Self> {
        let Some(first) = queries.first() else {
            return Err(Error::Contract("empty query batch".into()));
        };
        let k = first.segment_len();
        let n = queries.len();
        let d = first.first.states.ncols() + first.first.actions.ncols();
        let mut inputs = Array2::zeros((2 * n * k, d));
        let mut signs = Array2::zeros((n, 1));
        for (i, q) in queries.iter().enumerate() {
            if q.segment_len() != k || q.first.states.ncols() + q.first.actions.ncols() != d {
                return Err(Error::Dimension("queries in a batch must share segment shape".into()));
            }
            inputs.slice_mut(ndarray::s![i * k..(i + 1) * k, ..]).assign(&q.first.inputs());
            inputs
                .slice_mut(ndarray::s![(n + i) * k..(n + i + 1) * k, ..])
                .assign(&q.second.inputs());
            signs[[i, 0]] = match q.label() {
                Label::Prefer1 => 1.0,
                Label::Prefer2 => -1.0,
                other if need_labels => {
                    return Err(Error::Contract(format!("query {} in a training batch has label {other:?}", q.id)))
                }
                _ => 0.0,
            };
        }
        Ok(QueryBatch { inputs, signs, n, k })
    }

    pub fn from_dataset(ds: &PreferenceDataset) -> Result<Self> {
        Self::new(&ds.queries.iter().collect::<Vec<_>>())
    }
}

/// `R1 - R2` per query as an `n x 1` tape variable.
pub fn preference_logits_on<'t>(net: &Mlp, params: &[Var<'t>], tape: &'t Tape, batch: &QueryBatch) -> Result<Var<'t>> {
    let rows = 2 * batch.n * batch.k;
    let r = net.forward_with(params, tape.constant(batch.inputs.clone()))?;
    let flat = r.reshape(1, rows);
    let half = batch.n * batch.k;
    let r1 = flat.slice_cols(0, half).reshape(batch.n, batch.k).sum_cols();
    let r2 = flat.slice_cols(half, rows).reshape(batch.n, batch.k).sum_cols();
    Ok(r1.sub(r2))
}

/// Mean binary cross-entropy of the Bradley-Terry predictor, as a tape scalar.
///
/// With `z = R1 - R2` and `t = ±1`, `-log P(label) = softplus(-t z)`.
pub fn preference_loss_on<'t>(net: &Mlp, params: &[Var<'t>], tape: &'t Tape, batch: &QueryBatch) -> Result<Var<'t>> {
    let z = preference_logits_on(net, params, tape, batch)?;
    let signed = z.mul(tape.constant(batch.signs.clone()));
    Ok(signed.neg().softplus().mean())
}

fn plain_logits(model: &RewardModel, batch: &QueryBatch) -> Result<Vec<f64>> {
    let r = model.rewards_for_inputs(&batch.inputs)?;
    let half = batch.n * batch.k;
    Ok((0..batch.n)
        .map(|i| {
            let r1: f64 = (0..batch.k).map(|t| r[[i * batch.k + t, 0]]).sum();
            let r2: f64 = (0..batch.k).map(|t| r[[half + i * batch.k + t, 0]]).sum();
            r1 - r2
        })
        .collect())
}

/// `P[σ1 ≻ σ2] = exp(R1) / (exp(R1) + exp(R2))`, evaluated as `sigmoid(R1 - R2)`.
pub fn predict_preference(model: &RewardModel, q: &Query) -> Result<f64> {
    Ok(predict_preferences(model, &[q])?[0])
}

pub fn predict_preferences(model: &RewardModel, queries: &[&Query]) -> Result<Vec<f64>> {
    let batch = QueryBatch::unlabeled(queries)?;
    Ok(plain_logits(model, &batch)?.into_iter().map(sigmoid).collect())
}

/// Mean cross-entropy over labeled queries.
pub fn preference_loss(model: &RewardModel, queries: &[&Query]) -> Result<f64> {
    let batch = QueryBatch::new(queries)?;
    let z = plain_logits(model, &batch)?;
    let total: f64 = z
        .iter()
        .zip(batch.signs.iter())
        .map(|(z, t)| crate::numerics::softplus(-t * z))
        .sum();
    let loss = total / batch.n as f64;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite("preference loss".into()).into());
    }
    Ok(loss)
}

/// Ground-truth return of a segment under `task`.
pub fn segment_return(seg: &Segment, task: &TaskSpec, env: &EnvConfig) -> f64 {
    (0..seg.len())
        .map(|t| {
            let s = seg.states.row(t).to_vec();
            let a = seg.actions.row(t).to_vec();
            env.state_action_reward(task, &s, &a)
        })
        .sum()
}

/// Label by comparing ground-truth returns: the first segment wins only on
/// a strictly larger return, ties go to the second.
pub fn label_from_returns(first: f64, second: f64) -> Label {
    if first > second {
        Label::Prefer1
    } else {
        Label::Prefer2
    }
}

pub fn oracle_label(mut q: Query, task: &TaskSpec, env: &EnvConfig) -> Result<Query> {
    let label = label_from_returns(segment_return(&q.first, task, env), segment_return(&q.second, task, env));
    q.set_label(label, LabelSource::Oracle)?;
    Ok(q)
}

/// Start offsets of all length-`k` windows that stay inside one episode,
/// given the episode step counter of each transition in buffer order.
pub fn window_starts<I: IntoIterator<Item = usize>>(episode_steps: I, k: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut run = 0usize;
    let mut prev: Option<usize> = None;
    for (i, step) in episode_steps.into_iter().enumerate() {
        run = match prev {
            Some(p) if step == p + 1 => run + 1,
            _ => 1,
        };
        prev = Some(step);
        if k > 0 && run >= k {
            starts.push(i + 1 - k);
        }
    }
    starts
}

fn has_two_disjoint(starts: &[usize], k: usize) -> bool {
    match (starts.first(), starts.last()) {
        (Some(a), Some(b)) => b - a >= k,
        _ => false,
    }
}

/// Uniformly sampled episode-aligned segment pairs from a flat buffer.
pub fn sample_segment_pair<R: Rng + ?Sized>(
    transitions: &[Transition],
    starts: &[usize],
    k: usize,
    task_id: usize,
    keep_returns: bool,
    rng: &mut R,
) -> Result<(Segment, Segment)> {
    if starts.is_empty() {
        return Err(Error::Capacity("no episode-aligned window available".into()));
    }
    let mut pick = || -> Result<Segment> {
        let s = starts[rng.random_range(0..starts.len())];
        Segment::from_transitions(&transitions[s..s + k], task_id, s, keep_returns)
    };
    Ok((pick()?, pick()?))
}

/// Artificial pre-training data: for every task, `queries_per_task` pairs of
/// independently sampled windows, labeled by that task's reward.
pub fn build_pretrain_datasets(
    rollouts: &[(TaskSpec, Vec<Transition>)],
    queries_per_task: usize,
    k: usize,
    seed: u64,
    env: &EnvConfig,
) -> Result<Vec<PreferenceDataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rollouts.len());
    for (task_id, (task, transitions)) in rollouts.iter().enumerate() {
        let starts = window_starts(transitions.iter().map(|t| t.episode_step), k);
        if !has_two_disjoint(&starts, k) {
            return Err(Error::Capacity(format!(
                "task {task_id}: buffer of {} transitions has no two disjoint {k}-step windows",
                transitions.len()
            )));
        }
        let mut ds = PreferenceDataset::new(task.family(), k);
        for i in 0..queries_per_task {
            let (a, b) = sample_segment_pair(transitions, &starts, k, task_id, true, &mut rng)?;
            let q = Query::new(i as u64, a, b)?;
            ds.push(oracle_label(q, task, env)?)?;
        }
        out.push(ds);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Line-delimited JSON dataset files: one header line, then one line per query.
// Several datasets may follow each other in one file.

const DATASET_FORMAT: &str = "fsprl-preferences";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    family: Family,
    k: usize,
    state_dim: usize,
    action_dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    task_id: usize,
    start: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    gt_return: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    id: u64,
    label: Label,
    source: Option<LabelSource>,
    first: SegmentRecord,
    second: SegmentRecord,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Array2<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format(format!("expected rows of width {cols}")));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::Format(e.to_string()))
}

impl SegmentRecord {
    fn from_segment(s: &Segment) -> Self {
        SegmentRecord {
            task_id: s.task_id,
            start: s.start,
            states: rows(&s.states),
            actions: rows(&s.actions),
            gt_return: s.gt_return,
        }
    }

    fn into_segment(self, header: &DatasetHeader) -> Result<Segment> {
        if self.states.len() != header.k || self.actions.len() != header.k {
            return Err(Error::Format(format!("segment length differs from k = {}", header.k)));
        }
        Ok(Segment {
            states: from_rows(&self.states, header.state_dim)?,
            actions: from_rows(&self.actions, header.action_dim)?,
            task_id: self.task_id,
            start: self.start,
            gt_return: self.gt_return,
        })
    }
}

pub fn write_datasets<W: Write>(mut w: W, datasets: &[PreferenceDataset]) -> Result<()> {
    for ds in datasets {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            family: ds.family,
            k: ds.k,
            state_dim: ds.family.obs_dim(),
            action_dim: ds.family.action_dim(),
            count: ds.len(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for q in ds.queries() {
            let rec = QueryRecord {
                id: q.id,
                label: q.label(),
                source: q.source(),
                first: SegmentRecord::from_segment(&q.first),
                second: SegmentRecord::from_segment(&q.second),
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_datasets<R: BufRead>(r: R) -> Result<Vec<PreferenceDataset>> {
    let mut lines = r.lines();
    let mut out = Vec::new();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let header: DatasetHeader =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        if header.state_dim != header.family.obs_dim() || header.action_dim != header.family.action_dim() {
            return Err(Error::Format("dataset dimensions do not match its family".into()));
        }
        let mut ds = PreferenceDataset::new(header.family, header.k);
        for _ in 0..header.count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("dataset ended before its declared count".into()))??;
            let rec: QueryRecord =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("query record: {e}")))?;
            let q = Query::new(rec.id, rec.first.into_segment(&header)?, rec.second.into_segment(&header)?)?;
            let source = rec.source.ok_or_else(|| Error::Format(format!("query {} has no label source", rec.id)))?;
            ds.push(q.labeled(rec.label, source)?)?;
        }
        out.push(ds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_pretrain_tasks, test_task};
    use crate::numerics::{Activation, Mlp};
    use proptest::prelude::*;
    use rand::Rng;

    fn seg(rewards_per_row: &[f64]) -> Segment {
        let k = rewards_per_row.len();
        Segment {
            states: Array2::from_shape_fn((k, 4), |(i, j)| rewards_per_row[i] + j as f64),
            actions: Array2::zeros((k, 2)),
            task_id: 0,
            start: 0,
            gt_return: None,
        }
    }

    /// Model whose output is `tanh(bias)` regardless of input.
    fn constant_model(bias: f64) -> RewardModel {
        let net = Mlp::from_params(
            &[6, 1],
            Activation::Tanh,
            vec![Array2::zeros((6, 1)), Array2::from_elem((1, 1), bias)],
        )
        .unwrap();
        RewardModel::from_net(net, vec![1e-3]).unwrap()
    }

    /// Linear model reading only the first state feature; the tanh is
    /// inverted by choosing the feature values.
    fn feature_model() -> RewardModel {
        let mut w = Array2::zeros((6, 1));
        w[[0, 0]] = 1.0;
        let net = Mlp::from_params(&[6, 1], Activation::Tanh, vec![w, Array2::zeros((1, 1))]).unwrap();
        RewardModel::from_net(net, vec![1e-3]).unwrap()
    }

    fn query_with_reward_sums(r1: f64, r2: f64) -> Query {
        // single-step segments with reward atanh^-1 chosen so tanh gives r
        let s1 = Segment {
            states: Array2::from_shape_fn((1, 4), |(_, j)| if j == 0 { r1.atanh() } else { 0.0 }),
            actions: Array2::zeros((1, 2)),
            task_id: 0,
            start: 0,
            gt_return: None,
        };
        let s2 = Segment {
            states: Array2::from_shape_fn((1, 4), |(_, j)| if j == 0 { r2.atanh() } else { 0.0 }),
            ..s1.clone()
        };
        Query::new(0, s1, s2).unwrap()
    }

    #[test]
    fn constant_model_predicts_half_and_ln2_loss() {
        let m = constant_model(0.4);
        let q1 = Query::new(1, seg(&[1.0, 2.0]), seg(&[-3.0, 0.5])).unwrap();
        assert_eq!(predict_preference(&m, &q1).unwrap(), 0.5);
        let a = q1.clone().labeled(Label::Prefer1, LabelSource::Oracle).unwrap();
        let b = Query::new(2, seg(&[0.0, 0.0]), seg(&[1.0, 1.0]))
            .unwrap()
            .labeled(Label::Prefer2, LabelSource::Human)
            .unwrap();
        let loss = preference_loss(&m, &[&a, &b]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ln3_logit_gives_three_quarters() {
        // R1 - R2 = ln 3 with rewards 0.9 and 0.9 - ln 3 in (-1, 1)
        let r1 = 0.9;
        let r2 = 0.9 - 3f64.ln();
        let q = query_with_reward_sums(r1, r2);
        let p = predict_preference(&feature_model(), &q).unwrap();
        assert!((p - 0.75).abs() < 1e-12, "{p}");
    }

    #[test]
    fn hand_computed_two_query_loss() {
        let r1 = 0.9;
        let r2 = 0.9 - 3f64.ln();
        let a = query_with_reward_sums(r1, r2).labeled(Label::Prefer1, LabelSource::Oracle).unwrap();
        let b = query_with_reward_sums(r2, r1).labeled(Label::Prefer1, LabelSource::Oracle).unwrap();
        let want = (-(0.75f64).ln() - (0.25f64).ln()) / 2.0;
        let got = preference_loss(&feature_model(), &[&a, &b]).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let mut w = Array2::zeros((6, 1));
        w[[0, 0]] = 1.0;
        let net = Mlp::from_params(&[6, 1], Activation::Tanh, vec![w, Array2::zeros((1, 1))]).unwrap();
        let m = RewardModel::from_net(net, vec![1e-3]).unwrap();
        let k = 40;
        let hi = Segment {
            states: Array2::from_shape_fn((k, 4), |(_, j)| if j == 0 { 50.0 } else { 0.0 }),
            actions: Array2::zeros((k, 2)),
            task_id: 0,
            start: 0,
            gt_return: None,
        };
        let lo = Segment {
            states: -hi.states.clone(),
            ..hi.clone()
        };
        let q = Query::new(0, hi, lo).unwrap().labeled(Label::Prefer1, LabelSource::Oracle).unwrap();
        assert!(preference_loss(&m, &[&q]).unwrap() < 1e-30);
    }

    #[test]
    fn seeded_model_matches_naive_exponential_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = RewardModel::new(Family::PointMass, &[16, 16], 1e-3, &mut rng);
        let env = EnvConfig::default();
        let tr = env.collect_random_rollouts(&test_task(Family::PointMass), 200, 9).unwrap();
        let q = Query::new(
            0,
            Segment::from_transitions(&tr[3..13], 0, 3, false).unwrap(),
            Segment::from_transitions(&tr[50..60], 0, 50, false).unwrap(),
        )
        .unwrap();
        let naive_sum = |s: &Segment| -> f64 {
            (0..s.len())
                .map(|t| m.reward(&s.states.row(t).to_vec(), &s.actions.row(t).to_vec()).unwrap())
                .sum()
        };
        let (e1, e2) = (naive_sum(&q.first).exp(), naive_sum(&q.second).exp());
        let want = e1 / (e1 + e2);
        assert!((predict_preference(&m, &q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_central_differences_at_full_width() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut model = RewardModel::new(Family::PointMass, &[256, 256, 256], 1e-3, &mut rng);
        let random_seg = |rng: &mut rand_chacha::ChaCha8Rng| Segment {
            states: Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0)),
            actions: Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0)),
            task_id: 0,
            start: 0,
            gt_return: None,
        };
        let queries: Vec<Query> = (0..6)
            .map(|i| {
                let mut q = Query::new(i, random_seg(&mut rng), random_seg(&mut rng)).unwrap();
                q.set_label(if i % 2 == 0 { Label::Prefer1 } else { Label::Prefer2 }, LabelSource::Oracle)
                    .unwrap();
                q
            })
            .collect();
        let refs: Vec<&Query> = queries.iter().collect();
        let batch = QueryBatch::new(&refs).unwrap();

        let tape = Tape::new();
        let params = model.net.bind(&tape, true);
        let loss = preference_loss_on(&model.net, &params, &tape, &batch).unwrap();
        let grads = tape.gradients(loss, &params).unwrap();
        assert!((loss.item() - preference_loss(&model, &refs).unwrap()).abs() < 1e-12);

        let h = 1e-5;
        for layer in 0..model.net.params().len() {
            let (r, c) = model.net.params()[layer].dim();
            for _ in 0..8 {
                let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
                let orig = model.net.params()[layer][[i, j]];
                model.net.params_mut()[layer][[i, j]] = orig + h;
                let up = preference_loss(&model, &refs).unwrap();
                model.net.params_mut()[layer][[i, j]] = orig - h;
                let down = preference_loss(&model, &refs).unwrap();
                model.net.params_mut()[layer][[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads[layer][[i, j]];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4 || (g - fd).abs() < 1e-9, "layer {layer} ({i},{j}): {g} vs {fd}");
            }
        }
    }

    #[test]
    fn unlabeled_in_loss_is_contract_error() {
        let q = Query::new(0, seg(&[1.0]), seg(&[2.0])).unwrap();
        assert!(matches!(preference_loss(&constant_model(0.0), &[&q]), Err(Error::Contract(_))));
        let mut s = q.clone();
        s.set_label(Label::Skipped, LabelSource::Human).unwrap();
        assert!(matches!(preference_loss(&constant_model(0.0), &[&s]), Err(Error::Contract(_))));
    }

    #[test]
    fn labels_are_immutable() {
        let mut q = Query::new(0, seg(&[1.0]), seg(&[2.0])).unwrap();
        q.set_label(Label::Prefer1, LabelSource::Human).unwrap();
        assert!(q.set_label(Label::Prefer2, LabelSource::Human).is_err());
        assert_eq!(q.label(), Label::Prefer1);
    }

    #[test]
    fn mismatched_segments_rejected() {
        assert!(Query::new(0, seg(&[1.0, 2.0]), seg(&[2.0])).is_err());
    }

    #[test]
    fn dataset_rejects_skips() {
        let mut ds = PreferenceDataset::new(Family::PointMass, 1);
        let q = Query::new(0, seg(&[1.0]), seg(&[2.0])).unwrap().labeled(Label::Skipped, LabelSource::Human).unwrap();
        assert!(ds.push(q).is_err());
        assert!(ds.is_empty());
    }

    #[test]
    fn oracle_label_strict_comparison() {
        assert_eq!(label_from_returns(5.0, 3.0), Label::Prefer1);
        assert_eq!(label_from_returns(3.0, 5.0), Label::Prefer2);
        assert_eq!(label_from_returns(4.0, 4.0), Label::Prefer2);
    }

    #[test]
    fn oracle_label_uses_task_reward() {
        let env = EnvConfig::default();
        let task = TaskSpec::point_mass(1.0, 1.0).unwrap();
        // first segment sits on the goal, second far away
        let near = Segment {
            states: Array2::from_shape_fn((3, 4), |(_, j)| if j < 2 { 1.0 } else { 0.0 }),
            actions: Array2::zeros((3, 2)),
            task_id: 0,
            start: 0,
            gt_return: None,
        };
        let far = Segment {
            states: Array2::from_shape_fn((3, 4), |(_, j)| if j < 2 { -1.0 } else { 0.0 }),
            ..near.clone()
        };
        let q = oracle_label(Query::new(0, near.clone(), far.clone()).unwrap(), &task, &env).unwrap();
        assert_eq!(q.label(), Label::Prefer1);
        assert_eq!(q.source(), Some(LabelSource::Oracle));
        let q = oracle_label(Query::new(1, far, near).unwrap(), &task, &env).unwrap();
        assert_eq!(q.label(), Label::Prefer2);
    }

    #[test]
    fn window_starts_respect_episodes() {
        // episode of 4, then episode of 3
        let steps = [0, 1, 2, 3, 0, 1, 2];
        assert_eq!(window_starts(steps, 3), vec![0, 1, 4]);
        assert_eq!(window_starts(steps, 4), vec![0]);
        assert!(window_starts(steps, 5).is_empty());
    }

    fn small_rollouts(n: usize) -> Vec<(TaskSpec, Vec<Transition>)> {
        let env = EnvConfig::default();
        sample_pretrain_tasks(Family::PointMass)
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, env.collect_random_rollouts(&t, n, i as u64).unwrap()))
            .collect()
    }

    #[test]
    fn pretrain_datasets_counts_labels_determinism() {
        let env = EnvConfig::default();
        let rollouts = small_rollouts(400);
        let ds = build_pretrain_datasets(&rollouts, 100, 10, 3, &env).unwrap();
        assert_eq!(ds.len(), 16);
        for (d, (task, _)) in ds.iter().zip(&rollouts) {
            assert_eq!(d.len(), 100);
            for q in d.queries() {
                let r1 = segment_return(&q.first, task, &env);
                let r2 = segment_return(&q.second, task, &env);
                assert_eq!(q.label(), label_from_returns(r1, r2));
                assert_eq!(q.first.gt_return, Some(r1));
                assert_eq!(q.second.gt_return, Some(r2));
            }
        }
        assert_eq!(ds, build_pretrain_datasets(&rollouts, 100, 10, 3, &env).unwrap());
    }

    #[test]
    fn tiny_buffer_is_capacity_error() {
        let env = EnvConfig::default();
        let t = test_task(Family::PointMass);
        let rollouts = vec![(t, env.collect_random_rollouts(&t, 12, 0).unwrap())];
        assert!(matches!(build_pretrain_datasets(&rollouts, 5, 10, 0, &env), Err(Error::Capacity(_))));
    }

    #[test]
    fn split_is_disjoint() {
        let env = EnvConfig::default();
        let ds = build_pretrain_datasets(&small_rollouts(300)[..1], 70, 10, 0, &env).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let split = ds.split(32, 32, &mut rng).unwrap();
        assert_eq!(split.support.len(), 32);
        assert!(split.support.iter().all(|i| !split.query.contains(i)));
        assert!(ds.split(40, 40, &mut rng).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let env = EnvConfig::default();
        let ds = build_pretrain_datasets(&small_rollouts(300)[..3], 20, 10, 1, &env).unwrap();
        let mut buf = Vec::new();
        write_datasets(&mut buf, &ds).unwrap();
        let back = read_datasets(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let env = EnvConfig::default();
        let ds = build_pretrain_datasets(&small_rollouts(300)[..1], 5, 10, 1, &env).unwrap();
        let mut buf = Vec::new();
        write_datasets(&mut buf, &ds).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_datasets(std::io::Cursor::new(cut)), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn antisymmetry_and_shift_invariance(seed in 0u64..1000, shift in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = RewardModel::new(Family::PointMass, &[8, 8], 1e-3, &mut rng);
            let k = 5;
            let mk = |rng: &mut ChaCha8Rng| Segment {
                states: Array2::from_shape_fn((k, 4), |_| rng.random_range(-1.0..1.0)),
                actions: Array2::from_shape_fn((k, 2), |_| rng.random_range(-1.0..1.0)),
                task_id: 0, start: 0, gt_return: None,
            };
            let q = Query::new(0, mk(&mut rng), mk(&mut rng)).unwrap();
            let p = predict_preference(&m, &q).unwrap();
            let ps = predict_preference(&m, &q.swapped()).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!((p + ps - 1.0).abs() <= 1e-12);

            // shifting every reward by a constant leaves the prediction unchanged
            let r1: f64 = m.rewards(&q.first.states, &q.first.actions).unwrap().sum();
            let r2: f64 = m.rewards(&q.second.states, &q.second.actions).unwrap().sum();
            let shifted = sigmoid((r1 + k as f64 * shift) - (r2 + k as f64 * shift));
            prop_assert!((shifted - p).abs() <= 1e-9);
        }

        #[test]
        fn floats_round_trip_exactly(vals in proptest::collection::vec(-1e300f64..1e300, 12)) {
            let s = Segment {
                states: Array2::from_shape_vec((2, 4), vals[..8].to_vec()).unwrap(),
                actions: Array2::from_shape_vec((2, 2), vals[8..12].to_vec()).unwrap(),
                task_id: 3, start: 17, gt_return: Some(vals[0] * 1e-7),
            };
            let q = Query::new(9, s.clone(), s).unwrap().labeled(Label::Prefer2, LabelSource::Human).unwrap();
            let ds = PreferenceDataset::from_queries(Family::PointMass, 2, vec![q]).unwrap();
            let mut buf = Vec::new();
            write_datasets(&mut buf, std::slice::from_ref(&ds)).unwrap();
            prop_assert_eq!(read_datasets(std::io::Cursor::new(buf)).unwrap(), vec![ds]);
        }
    }
}
