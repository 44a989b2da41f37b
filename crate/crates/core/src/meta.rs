//! MAML pre-training of reward-model ensembles and the reset-then-adapt
//! procedure used when new feedback arrives.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Family;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Adam, Mlp, Tape};
use crate::preference::{
    preference_loss_on, predict_preferences, Label, PreferenceDataset, Query, QueryBatch, SupportQuerySplit,
};
use crate::reward::{bind_inner_lrs, inner_step, RewardModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Outer (meta) learning rate β.
    pub outer_lr: f64,
    /// Initial inner learning rate α.
    pub inner_lr: f64,
    /// Outer learning rate for the learned inner step sizes; `None` uses `outer_lr`.
    pub inner_lr_outer_lr: Option<f64>,
    pub learn_inner_lr: bool,
    pub support_size: usize,
    pub query_size: usize,
    pub task_batch: usize,
    /// Inner gradient steps per task during pre-training.
    pub inner_steps: usize,
    pub iterations: usize,
    /// Drop the second-order term (stop-gradient through the inner step).
    pub first_order: bool,
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    /// Adaptation: inner steps before falling back to Adam.
    pub adapt_max_steps: usize,
    pub adapt_target_accuracy: f64,
    pub fallback_lr: f64,
    pub fallback_epochs: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            outer_lr: 1e-4,
            inner_lr: 1e-3,
            inner_lr_outer_lr: Some(1e-2),
            learn_inner_lr: true,
            support_size: 32,
            query_size: 32,
            task_batch: 4,
            inner_steps: 1,
            iterations: 2000,
            first_order: false,
            ensemble_size: 3,
            hidden: vec![256, 256, 256],
            adapt_max_steps: 40,
            adapt_target_accuracy: 0.95,
            fallback_lr: 1e-3,
            fallback_epochs: 200,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.outer_lr > 0.0) || !(self.fallback_lr > 0.0) {
            return bad("meta.outer_lr and meta.fallback_lr must be positive");
        }
        // α = 0 is allowed only with fixed step sizes (the degenerate case)
        if !(self.inner_lr >= 0.0) || (self.learn_inner_lr && self.inner_lr == 0.0) {
            return bad("meta.inner_lr must be positive when learned");
        }
        if matches!(self.inner_lr_outer_lr, Some(r) if !(r > 0.0)) {
            return bad("meta.inner_lr_outer_lr must be positive");
        }
        if self.support_size == 0 || self.query_size == 0 || self.task_batch == 0 || self.inner_steps == 0 {
            return bad("meta sizes and inner_steps must be at least 1");
        }
        if self.ensemble_size == 0 || self.hidden.contains(&0) {
            return bad("meta.ensemble_size and hidden widths must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.adapt_target_accuracy) {
            return bad("meta.adapt_target_accuracy must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `E` reward models sharing an architecture, each with its own seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEnsemble {
    pub family: Family,
    pub members: Vec<RewardModel>,
}

fn member_seed(seed: u64, member: usize) -> u64 {
    seed ^ (member as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seed of the task-sampling stream [`maml_pretrain`] uses for member `m`.
pub fn task_stream_seed(seed: u64, member: usize) -> u64 {
    member_seed(seed, member) ^ 0x5851_F42D_4C95_7F2D
}

impl RewardEnsemble {
    pub fn new(family: Family, hidden: &[usize], size: usize, inner_lr: f64, seed: u64) -> Self {
        let members = (0..size)
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, m));
                RewardModel::new(family, hidden, inner_lr, &mut rng)
            })
            .collect();
        RewardEnsemble { family, members }
    }

    pub fn from_config(family: Family, cfg: &MetaConfig, seed: u64) -> Self {
        Self::new(family, &cfg.hidden, cfg.ensemble_size, cfg.inner_lr, seed)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-member preference probabilities for each query, `[query][member]`.
    pub fn probe(&self, queries: &[&Query]) -> Result<Vec<PreferenceProbe>> {
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| predict_preferences(m, queries))
            .collect::<Result<_>>()?;
        Ok((0..queries.len())
            .map(|q| {
                let members: Vec<f64> = per_member.iter().map(|p| p[q]).collect();
                PreferenceProbe {
                    mean: members.iter().sum::<f64>() / members.len() as f64,
                    members,
                }
            })
            .collect())
    }
}

/// Preference probabilities of one query across an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceProbe {
    pub members: Vec<f64>,
    pub mean: f64,
}

/// Fraction of queries whose predicted preference (`P > 0.5` means the first
/// segment) matches the label. `P = 0.5` is never correct.
pub fn accuracy(model: &RewardModel, queries: &[&Query]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Contract("accuracy of an empty dataset".into()));
    }
    let p = predict_preferences(model, queries)?;
    let correct = p
        .iter()
        .zip(queries)
        .filter(|(&p, q)| match q.label() {
            Label::Prefer1 => p > 0.5,
            Label::Prefer2 => p < 0.5,
            _ => false,
        })
        .count();
    Ok(correct as f64 / queries.len() as f64)
}

/// One task's support and query batches for a meta step.
pub struct MetaTask {
    pub support: QueryBatch,
    pub query: QueryBatch,
}

/// Draws the task batch of one outer iteration: distinct task indices and a
/// support/query split within each.
pub fn sample_meta_batch<R: Rng + ?Sized>(
    datasets: &[PreferenceDataset],
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<Vec<(usize, SupportQuerySplit)>> {
    let tasks = sample(rng, datasets.len(), cfg.task_batch).into_vec();
    tasks
        .into_iter()
        .map(|t| Ok((t, datasets[t].split(cfg.support_size, cfg.query_size, rng)?)))
        .collect()
}

fn meta_tasks(datasets: &[PreferenceDataset], draws: &[(usize, SupportQuerySplit)]) -> Result<Vec<MetaTask>> {
    draws
        .iter()
        .map(|(t, split)| {
            Ok(MetaTask {
                support: QueryBatch::new(&datasets[*t].subset(&split.support))?,
                query: QueryBatch::new(&datasets[*t].subset(&split.query))?,
            })
        })
        .collect()
}

/// Outer objective and its gradients for one task batch.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// Sum over tasks of the post-adaptation query loss.
    pub loss: f64,
    pub params: Vec<Array2<f64>>,
    /// Gradients of the raw (pre-softplus) inner step sizes; empty when not learned.
    pub inner_lr_raw: Vec<f64>,
}

/// `Σ_i L(ψ - α∇L(ψ, support_i), query_i)` and its gradient in `ψ` (and the
/// raw step sizes when learned), differentiating through the inner steps.
pub fn meta_gradient(model: &RewardModel, tasks: &[MetaTask], cfg: &MetaConfig) -> Result<MetaGradient> {
    let tape = Tape::new();
    let params = model.net.bind(&tape, true);
    let (raw, lrs) = bind_inner_lrs(model, &tape, cfg.learn_inner_lr);
    let mut total = tape.scalar(0.0);
    for task in tasks {
        let mut fast = params.clone();
        for _ in 0..cfg.inner_steps {
            let ls = preference_loss_on(&model.net, &fast, &tape, &task.support)?;
            let g = tape.grad(ls, &fast, !cfg.first_order)?;
            fast = inner_step(&fast, &g, &lrs);
        }
        let lq = preference_loss_on(&model.net, &fast, &tape, &task.query)?;
        total = total.add(lq);
    }
    tape.check()?;
    let mut wrt = params.clone();
    wrt.extend_from_slice(&raw);
    let mut grads = tape.gradients(total, &wrt)?;
    let raw_grads = grads.split_off(params.len()).iter().map(|g| g[[0, 0]]).collect();
    Ok(MetaGradient {
        loss: total.item(),
        params: grads,
        inner_lr_raw: raw_grads,
    })
}

/// Progress record emitted once per member and outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub member: usize,
    pub iteration: usize,
    pub meta_loss: f64,
    pub inner_lrs: Vec<f64>,
}

/// Outer-loop optimizer state for one member.
struct MetaLearner {
    params: Adam,
    lrs: Adam,
}

impl MetaLearner {
    fn new(cfg: &MetaConfig) -> Self {
        MetaLearner {
            params: Adam::new(cfg.outer_lr),
            lrs: Adam::new(cfg.inner_lr_outer_lr.unwrap_or(cfg.outer_lr)),
        }
    }

    fn apply(&mut self, model: &mut RewardModel, g: &MetaGradient) -> Result<()> {
        self.params.step(model.net.params_mut(), &g.params)?;
        if !g.inner_lr_raw.is_empty() {
            let mut raw = [Array2::from_shape_vec((1, g.inner_lr_raw.len()), model.inner_lr_raw()).expect("row")];
            let grad = Array2::from_shape_vec((1, g.inner_lr_raw.len()), g.inner_lr_raw.clone()).expect("row");
            self.lrs.step(&mut raw, &[grad])?;
            model.set_inner_lr_raw(&raw[0].iter().copied().collect::<Vec<_>>());
        }
        Ok(())
    }
}

/// MAML pre-training of every ensemble member. Members share the datasets
/// but draw task batches from their own seed streams.
pub fn maml_pretrain(
    ensemble: &mut RewardEnsemble,
    datasets: &[PreferenceDataset],
    cfg: &MetaConfig,
    seed: u64,
    mut log: impl FnMut(&PretrainRecord),
) -> Result<()> {
    cfg.validate()?;
    if datasets.len() < cfg.task_batch {
        return Err(Error::Capacity(format!(
            "{} task datasets for a task batch of {}",
            datasets.len(),
            cfg.task_batch
        )));
    }
    let need = cfg.support_size + cfg.query_size;
    if let Some((i, d)) = datasets.iter().enumerate().find(|(_, d)| d.len() < need) {
        return Err(Error::Capacity(format!("task {i} holds {} queries, a meta draw needs {need}", d.len())));
    }
    if let Some(d) = datasets.iter().find(|d| d.family != ensemble.family) {
        return Err(Error::Config(format!("{} dataset for a {} ensemble", d.family, ensemble.family)));
    }
    for (m, model) in ensemble.members.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(task_stream_seed(seed, m));
        let mut learner = MetaLearner::new(cfg);
        for it in 0..cfg.iterations {
            let draws = sample_meta_batch(datasets, cfg, &mut rng)?;
            let tasks = meta_tasks(datasets, &draws)?;
            let g = meta_gradient(model, &tasks, cfg).map_err(|e| Error::Diverged {
                iteration: it,
                detail: format!("member {m}: {e}"),
            })?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: format!("member {m}: meta loss {}", g.loss),
                });
            }
            learner.apply(model, &g)?;
            log(&PretrainRecord {
                member: m,
                iteration: it,
                meta_loss: g.loss,
                inner_lrs: model.inner_lrs.clone(),
            });
        }
    }
    Ok(())
}

/// Loss and plain gradients of the mean preference loss over `batch`.
pub fn loss_and_grad(model: &RewardModel, batch: &QueryBatch) -> Result<(f64, Vec<Array2<f64>>)> {
    let tape = Tape::new();
    let params = model.net.bind(&tape, true);
    let loss = preference_loss_on(&model.net, &params, &tape, batch)?;
    let grads = tape.gradients(loss, &params)?;
    Ok((loss.item(), grads))
}

/// What one member's adaptation did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptReport {
    pub inner_steps: usize,
    pub adam_epochs: usize,
    pub final_accuracy: f64,
    /// Training loss before each update and after the last one.
    pub losses: Vec<f64>,
}

impl AdaptReport {
    /// Fraction of updates that did not increase the training loss.
    pub fn monotone_fraction(&self) -> f64 {
        let pairs = self.losses.windows(2);
        let n = pairs.len();
        if n == 0 {
            return 1.0;
        }
        self.losses.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / n as f64
    }
}

/// Reset to `meta` and fit `data`: inner-rate gradient steps until the
/// training accuracy target or the step cap, then Adam epochs up to the
/// fallback cap. The result depends only on `meta` and `data`.
pub fn adapt_member(meta: &RewardModel, data: &[&Query], cfg: &MetaConfig) -> Result<(RewardModel, AdaptReport)> {
    let mut model = meta.clone();
    let mut report = AdaptReport {
        inner_steps: 0,
        adam_epochs: 0,
        final_accuracy: 0.0,
        losses: Vec::new(),
    };
    if data.is_empty() {
        return Ok((model, report));
    }
    let batch = QueryBatch::new(data)?;
    let mut acc = accuracy(&model, data)?;
    while acc < cfg.adapt_target_accuracy && report.inner_steps < cfg.adapt_max_steps {
        let (loss, grads) = loss_and_grad(&model, &batch)?;
        report.losses.push(loss);
        for (i, (p, g)) in model.net.params_mut().iter_mut().zip(&grads).enumerate() {
            p.scaled_add(-meta.inner_lrs[i / 2], g);
        }
        report.inner_steps += 1;
        acc = accuracy(&model, data)?;
    }
    if acc < cfg.adapt_target_accuracy {
        let mut adam = Adam::new(cfg.fallback_lr);
        let (epochs, a) = fit_with_adam(&mut model, data, &batch, &mut adam, cfg, &mut report.losses)?;
        report.adam_epochs = epochs;
        acc = a;
    }
    if !report.losses.is_empty() {
        report.losses.push(loss_and_grad(&model, &batch)?.0);
    }
    report.final_accuracy = acc;
    Ok((model, report))
}

fn fit_with_adam(
    model: &mut RewardModel,
    data: &[&Query],
    batch: &QueryBatch,
    adam: &mut Adam,
    cfg: &MetaConfig,
    losses: &mut Vec<f64>,
) -> Result<(usize, f64)> {
    let mut acc = accuracy(model, data)?;
    let mut epochs = 0;
    while acc < cfg.adapt_target_accuracy && epochs < cfg.fallback_epochs {
        let (loss, grads) = loss_and_grad(model, batch)?;
        losses.push(loss);
        adam.step(model.net.params_mut(), &grads)?;
        epochs += 1;
        acc = accuracy(model, data)?;
    }
    Ok((epochs, acc))
}

/// Continued Adam training without reset, used by the baselines: the model
/// and optimizer state carry over between feedback sessions.
pub fn train_without_reset(
    model: &mut RewardModel,
    adam: &mut Adam,
    data: &[&Query],
    cfg: &MetaConfig,
) -> Result<AdaptReport> {
    let mut report = AdaptReport {
        inner_steps: 0,
        adam_epochs: 0,
        final_accuracy: 0.0,
        losses: Vec::new(),
    };
    if data.is_empty() {
        return Ok(report);
    }
    let batch = QueryBatch::new(data)?;
    let (epochs, acc) = fit_with_adam(model, data, &batch, adam, cfg, &mut report.losses)?;
    report.adam_epochs = epochs;
    report.final_accuracy = acc;
    Ok(report)
}

/// Adapts every member from the meta-initialization.
pub fn adapt(meta: &RewardEnsemble, data: &[&Query], cfg: &MetaConfig) -> Result<(RewardEnsemble, Vec<AdaptReport>)> {
    let mut members = Vec::with_capacity(meta.len());
    let mut reports = Vec::with_capacity(meta.len());
    for m in &meta.members {
        let (model, report) = adapt_member(m, data, cfg)?;
        members.push(model);
        reports.push(report);
    }
    Ok((
        RewardEnsemble {
            family: meta.family,
            members,
        },
        reports,
    ))
}

// ---------------------------------------------------------------------------
// Checkpoints: "FSRM", format version, family, member count, then per member
// the layer sizes, output activation, parameter tensors and inner rates.

const MAGIC: &[u8; 4] = b"FSRM";
const VERSION: u32 = 1;

pub(crate) fn family_code(f: Family) -> u8 {
    match f {
        Family::PointMass => 0,
        Family::VelocityTrack => 1,
    }
}

pub(crate) fn family_from_code(c: u8) -> Result<Family> {
    match c {
        0 => Ok(Family::PointMass),
        1 => Ok(Family::VelocityTrack),
        other => Err(Error::Format(format!("unknown family code {other}"))),
    }
}

pub(crate) fn write_mlp<W: Write>(w: &mut W, net: &Mlp) -> Result<()> {
    w.write_u32::<LittleEndian>(net.sizes().len() as u32)?;
    for &s in net.sizes() {
        w.write_u64::<LittleEndian>(s as u64)?;
    }
    w.write_u8(match net.output_activation() {
        Activation::Identity => 0,
        Activation::Tanh => 1,
    })?;
    for p in net.params() {
        for &v in p.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub(crate) fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let sizes = (0..n)
        .map(|_| r.read_u64::<LittleEndian>().map(|s| s as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
        return Err(Error::Format("implausible layer width".into()));
    }
    let output = match r.read_u8()? {
        0 => Activation::Identity,
        1 => Activation::Tanh,
        other => return Err(Error::Format(format!("unknown activation code {other}"))),
    };
    let mut params = Vec::with_capacity(2 * (n - 1));
    for l in 0..n - 1 {
        for shape in [(sizes[l], sizes[l + 1]), (1, sizes[l + 1])] {
            let mut data = vec![0.0; shape.0 * shape.1];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.push(Array2::from_shape_vec(shape, data).expect("sized"));
        }
    }
    Ok(Mlp::from_params(&sizes, output, params)?)
}

pub(crate) fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.read_u32::<LittleEndian>()?;
    if v != version {
        return Err(Error::Format(format!("unsupported checkpoint version {v}")));
    }
    Ok(())
}

impl RewardEnsemble {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(family_code(self.family))?;
        w.write_u32::<LittleEndian>(self.members.len() as u32)?;
        for m in &self.members {
            write_mlp(&mut w, &m.net)?;
            w.write_u32::<LittleEndian>(m.inner_lrs.len() as u32)?;
            for &a in &m.inner_lrs {
                w.write_f64::<LittleEndian>(a)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        check_magic(&mut r, MAGIC, VERSION)?;
        let family = family_from_code(r.read_u8()?)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n == 0 || n > 1024 {
            return Err(Error::Format(format!("implausible ensemble size {n}")));
        }
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let net = read_mlp(&mut r)?;
            let k = r.read_u32::<LittleEndian>()? as usize;
            if k != net.num_layers() {
                return Err(Error::Format("inner rate count differs from layer count".into()));
            }
            let mut lrs = vec![0.0; k];
            r.read_f64_into::<LittleEndian>(&mut lrs)?;
            let model = RewardModel::from_net(net, lrs).map_err(|e| Error::Format(e.to_string()))?;
            if model.input_dim() != family.obs_dim() + family.action_dim() {
                return Err(Error::Format(format!("member input width does not fit {family}")));
            }
            members.push(model);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(RewardEnsemble { family, members })
    }
}
