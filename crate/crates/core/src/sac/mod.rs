//! Soft actor-critic: squashed-Gaussian actor, twin critics with slowly
//! tracking targets, and automatic temperature tuning.

mod buffer;

use std::f64::consts::{LN_2, PI};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use buffer::{relabel, Batch, ReplayBuffer, RewardSource};

use crate::env::Family;
use crate::error::{Error, Result};
use crate::meta::{check_magic, family_code, family_from_code, read_mlp, write_mlp};
use crate::numerics::{Activation, Adam, Mlp, NumericsError, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub discount: f64,
    /// Fraction of the old target kept per target update.
    pub ema_tau: f64,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub init_temperature: f64,
    pub learn_temperature: bool,
    /// Defaults to `-dim(A)`.
    pub target_entropy: Option<f64>,
    pub target_update_every: usize,
    pub updates_per_step: usize,
    pub buffer_capacity: usize,
    /// Uniform-random actions for the first steps of a run.
    pub random_steps: usize,
    pub log_std_bounds: (f64, f64),
    /// Cut bootstrapping at goal termination.
    pub terminal_on_goal: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![256, 256],
            batch_size: 512,
            discount: 0.99,
            ema_tau: 0.995,
            lr: 3e-4,
            adam_betas: (0.9, 0.999),
            init_temperature: 0.1,
            learn_temperature: true,
            target_entropy: None,
            target_update_every: 2,
            updates_per_step: 1,
            buffer_capacity: 1_000_000,
            random_steps: 1000,
            log_std_bounds: (-5.0, 2.0),
            terminal_on_goal: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("sac.hidden needs at least one positive width");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("sac.batch_size must be positive and fit in sac.buffer_capacity");
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.ema_tau) {
            return bad("sac.discount and sac.ema_tau must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.init_temperature >= 0.0) {
            return bad("sac.lr must be positive and sac.init_temperature non-negative");
        }
        if self.learn_temperature && self.init_temperature == 0.0 {
            return bad("a learned temperature must start positive");
        }
        if self.target_update_every == 0 || self.log_std_bounds.0 >= self.log_std_bounds.1 {
            return bad("sac.target_update_every must be positive and log_std bounds ordered");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Per-update diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateInfo {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
    /// Monte-Carlo estimate `-E[log π(a|s)]` on the batch.
    pub entropy: f64,
}

const ACTION_LIMIT: f64 = 1.0 - 1e-9;

fn squash(u: &Array2<f64>) -> Vec<f64> {
    u.iter().map(|v| v.tanh().clamp(-ACTION_LIMIT, ACTION_LIMIT)).collect()
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub cfg: SacConfig,
    pub family: Family,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    log_temp: f64,
    actor_opt: Adam,
    critic_opt: [Adam; 2],
    temp_opt: Adam,
    updates: u64,
    rng: ChaCha8Rng,
}

/// Log-density correction of the tanh squashing, `log(1 - tanh(u)^2)`,
/// in the overflow-free form `2 (ln 2 - u - softplus(-2u))`.
fn squash_correction<'t>(u: Var<'t>) -> Var<'t> {
    u.add(u.scale(-2.0).softplus()).neg().shift(LN_2).scale(2.0)
}

impl SacAgent {
    pub fn new(family: Family, cfg: SacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (o, a) = (family.obs_dim(), family.action_dim());
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(&cfg.hidden);
            v.push(output);
            v
        };
        let actor = Mlp::new(&sizes(o, 2 * a), Activation::Identity, &mut rng);
        let c1 = Mlp::new(&sizes(o + a, 1), Activation::Identity, &mut rng);
        let c2 = Mlp::new(&sizes(o + a, 1), Activation::Identity, &mut rng);
        let adam = || Adam::with_betas(cfg.lr, cfg.adam_betas.0, cfg.adam_betas.1);
        Ok(SacAgent {
            family,
            actor,
            targets: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            log_temp: cfg.init_temperature.ln(),
            actor_opt: adam(),
            critic_opt: [adam(), adam()],
            temp_opt: adam(),
            updates: 0,
            rng,
            cfg,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temp.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn target_entropy(&self) -> f64 {
        self.cfg
            .target_entropy
            .unwrap_or(-(self.family.action_dim() as f64))
    }

    fn log_std(&self, raw: &Array2<f64>) -> Array2<f64> {
        let (lo, hi) = self.cfg.log_std_bounds;
        raw.mapv(|r| lo + 0.5 * (hi - lo) * (r.tanh() + 1.0))
    }

    fn log_std_on<'t>(&self, raw: Var<'t>) -> Var<'t> {
        let (lo, hi) = self.cfg.log_std_bounds;
        raw.tanh().shift(1.0).scale(0.5 * (hi - lo)).shift(lo)
    }

    fn noise(&mut self, rows: usize) -> Array2<f64> {
        let a = self.family.action_dim();
        Array2::from_shape_fn((rows, a), |_| StandardNormal.sample(&mut self.rng))
    }

    /// One action for `obs`. Components lie strictly inside `(-1, 1)`.
    pub fn act(&mut self, obs: &[f64], mode: ActMode) -> Result<Vec<f64>> {
        let (mean, log_std) = self.policy_head(obs)?;
        let u = match mode {
            ActMode::Deterministic => mean,
            ActMode::Stochastic => mean + log_std.mapv(f64::exp) * self.noise(1),
        };
        Ok(squash(&u))
    }

    /// The squashed mean action; needs no randomness.
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(squash(&self.policy_head(obs)?.0))
    }

    fn policy_head(&self, obs: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        if obs.len() != self.family.obs_dim() {
            return Err(Error::Dimension(format!(
                "observation of length {} for {}",
                obs.len(),
                self.family
            )));
        }
        let a = self.family.action_dim();
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row");
        let out = self.actor.forward(&x)?;
        let mean = out.slice(s![.., ..a]).to_owned();
        Ok((mean, self.log_std(&out.slice(s![.., a..]).to_owned())))
    }

    /// Reparameterized actions and their log-probabilities on `tape`.
    fn sample_on<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        states: Var<'t>,
        eps: &Array2<f64>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let a = self.family.action_dim();
        let out = self.actor.forward_with(params, states)?;
        let mean = out.slice_cols(0, a);
        let log_std = self.log_std_on(out.slice_cols(a, 2 * a));
        let eps_v = tape.constant(eps.clone());
        let u = mean.add(log_std.exp().mul(eps_v));
        let gauss = eps_v
            .square()
            .scale(-0.5)
            .sub(log_std)
            .shift(-0.5 * (2.0 * PI).ln())
            .sum_cols();
        let logp = gauss.sub(squash_correction(u).sum_cols());
        Ok((u.tanh(), logp))
    }

    /// Log-probability of the actions produced from noise `eps` at `states`,
    /// with those actions.
    pub fn sample_with_noise(&self, states: &Array2<f64>, eps: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let tape = Tape::new();
        let params = self.actor.bind(&tape, false);
        let (a, logp) = self.sample_on(&tape, &params, tape.constant(states.clone()), eps)?;
        tape.check()?;
        Ok((a.value(), logp.value()))
    }

    fn q_min(nets: &[Mlp; 2], x: &Array2<f64>) -> Result<Array2<f64>> {
        let q1 = nets[0].forward(x)?;
        let q2 = nets[1].forward(x)?;
        Ok(ndarray::Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b)))
    }

    /// TD targets `r + γ (min_j Q'_j(s', a') - T log π(a'|s'))` with `a' ~ π(·|s')`.
    pub fn critic_targets(&mut self, batch: &Batch) -> Result<Array2<f64>> {
        let eps = self.noise(batch.len());
        let (next_a, logp) = self.sample_with_noise(&batch.next_states, &eps)?;
        let x = concatenate(Axis(1), &[batch.next_states.view(), next_a.view()]).expect("rows match");
        let q = Self::q_min(&self.targets, &x)?;
        let t = self.temperature();
        let mut y = Array2::zeros((batch.len(), 1));
        for i in 0..batch.len() {
            let cont = if self.cfg.terminal_on_goal && batch.goal_reached[[i, 0]] > 0.5 {
                0.0
            } else {
                1.0
            };
            let soft = if t == 0.0 { q[[i, 0]] } else { q[[i, 0]] - t * logp[[i, 0]] };
            y[[i, 0]] = if self.cfg.discount == 0.0 {
                batch.rewards[[i, 0]]
            } else {
                batch.rewards[[i, 0]] + self.cfg.discount * cont * soft
            };
        }
        Ok(y)
    }

    /// One gradient update of critics, actor and temperature, then the
    /// target update on every `target_update_every`-th call.
    pub fn update(&mut self, batch: &Batch) -> Result<UpdateInfo> {
        if batch.len() != self.cfg.batch_size {
            return Err(Error::Contract(format!(
                "batch of {} for batch size {}",
                batch.len(),
                self.cfg.batch_size
            )));
        }
        let y = self.critic_targets(batch)?;
        let sa = concatenate(Axis(1), &[batch.states.view(), batch.actions.view()]).expect("rows match");

        // critics
        let (critic_loss, critic_grads) = {
            let tape = Tape::new();
            let y_v = tape.constant(y.clone());
            let x = tape.constant(sa);
            let mut total = tape.scalar(0.0);
            let mut bound = Vec::new();
            for c in &self.critics {
                let p = c.bind(&tape, true);
                let q = c.forward_with(&p, x)?;
                total = total.add(q.sub(y_v).square().mean());
                bound.push(p);
            }
            tape.check()?;
            let mut wrt = bound[0].clone();
            wrt.extend_from_slice(&bound[1]);
            let mut g = tape.gradients(total, &wrt)?;
            let g2 = g.split_off(bound[0].len());
            (total.item(), [g, g2])
        };

        // actor, against the critics before their update
        let eps = self.noise(batch.len());
        let temp = self.temperature();
        let (actor_loss, actor_grads, mean_logp) = {
            let tape = Tape::new();
            let params = self.actor.bind(&tape, true);
            let states = tape.constant(batch.states.clone());
            let (a, logp) = self.sample_on(&tape, &params, states, &eps)?;
            let x = states.concat_cols(a);
            let q1 = self.critics[0].forward_with(&self.critics[0].bind(&tape, false), x)?;
            let q2 = self.critics[1].forward_with(&self.critics[1].bind(&tape, false), x)?;
            let loss = logp.scale(temp).sub(q1.minimum(q2)).mean();
            tape.check()?;
            let g = tape.gradients(loss, &params)?;
            (loss.item(), g, logp.value().mean().unwrap_or(0.0))
        };

        if !critic_loss.is_finite() || !actor_loss.is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "SAC update {}: critic loss {critic_loss}, actor loss {actor_loss}, temperature {temp}",
                self.updates
            ))
            .into());
        }

        for (i, g) in critic_grads.iter().enumerate() {
            self.critic_opt[i].step(self.critics[i].params_mut(), g)?;
        }
        self.actor_opt.step(self.actor.params_mut(), &actor_grads)?;
        if self.cfg.learn_temperature {
            // d/d log T of -log T (log π + H)
            let g = -(mean_logp + self.target_entropy());
            let mut p = [Array2::from_elem((1, 1), self.log_temp)];
            self.temp_opt.step(&mut p, &[Array2::from_elem((1, 1), g)])?;
            self.log_temp = p[0][[0, 0]];
        }

        self.updates += 1;
        if self.updates.is_multiple_of(self.cfg.target_update_every as u64) {
            self.update_targets();
        }
        Ok(UpdateInfo {
            critic_loss,
            actor_loss,
            temperature: self.temperature(),
            entropy: -mean_logp,
        })
    }

    /// `target ← τ target + (1 - τ) critic`.
    pub fn update_targets(&mut self) {
        let tau = self.cfg.ema_tau;
        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            for (tp, cp) in t.params_mut().iter_mut().zip(c.params()) {
                tp.zip_mut_with(cp, |a, b| *a = tau * *a + (1.0 - tau) * b);
            }
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(POLICY_MAGIC)?;
        w.write_u32::<LittleEndian>(POLICY_VERSION)?;
        w.write_u8(family_code(self.family))?;
        write_mlp(&mut w, &self.actor)?;
        for n in self.critics.iter().chain(&self.targets) {
            write_mlp(&mut w, n)?;
        }
        w.write_f64::<LittleEndian>(self.log_temp)?;
        w.write_u64::<LittleEndian>(self.updates)?;
        w.flush()?;
        Ok(())
    }

    /// Restores networks and temperature; optimizer moments start fresh.
    pub fn read_checkpoint<R: Read>(mut r: R, cfg: SacConfig, seed: u64) -> Result<Self> {
        check_magic(&mut r, POLICY_MAGIC, POLICY_VERSION)?;
        let family = family_from_code(r.read_u8()?)?;
        let mut agent = SacAgent::new(family, cfg, seed)?;
        let actor = read_mlp(&mut r)?;
        let nets: Vec<Mlp> = (0..4).map(|_| read_mlp(&mut r)).collect::<Result<_>>()?;
        let (o, a) = (family.obs_dim(), family.action_dim());
        if actor.input_dim() != o || actor.output_dim() != 2 * a || nets.iter().any(|n| n.input_dim() != o + a) {
            return Err(Error::Format(format!("policy networks do not fit {family}")));
        }
        agent.actor = actor;
        let mut it = nets.into_iter();
        agent.critics = [it.next().unwrap(), it.next().unwrap()];
        agent.targets = [it.next().unwrap(), it.next().unwrap()];
        agent.log_temp = r.read_f64::<LittleEndian>()?;
        agent.updates = r.read_u64::<LittleEndian>()?;
        Ok(agent)
    }
}

const POLICY_MAGIC: &[u8; 4] = b"FSPC";
const POLICY_VERSION: u32 = 1;
