//! The learned reward `r̂(s, a)`: an MLP over the concatenated state and
//! action with a tanh output, plus its per-layer inner learning rates.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

use crate::env::Family;
use crate::error::{Error, Result};
use crate::numerics::{softplus, Activation, Mlp, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: Mlp,
    /// One positive inner-loop step size per layer.
    pub inner_lrs: Vec<f64>,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(family: Family, hidden: &[usize], inner_lr: f64, rng: &mut R) -> Self {
        let sizes = layer_sizes(family, hidden);
        let net = Mlp::new(&sizes, Activation::Tanh, rng);
        let layers = net.num_layers();
        RewardModel {
            net,
            inner_lrs: vec![inner_lr; layers],
        }
    }

    pub fn from_net(net: Mlp, inner_lrs: Vec<f64>) -> Result<Self> {
        if inner_lrs.len() != net.num_layers() {
            return Err(Error::Dimension(format!(
                "{} inner learning rates for {} layers",
                inner_lrs.len(),
                net.num_layers()
            )));
        }
        if net.output_activation() != Activation::Tanh || net.output_dim() != 1 {
            return Err(Error::Contract("reward network must have one tanh output".into()));
        }
        Ok(RewardModel { net, inner_lrs })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Rewards for rows of `states` paired with rows of `actions`, as a column.
    pub fn rewards(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array2<f64>> {
        if states.nrows() != actions.nrows() {
            return Err(Error::Dimension(format!(
                "{} states but {} actions",
                states.nrows(),
                actions.nrows()
            )));
        }
        let x = concatenate(Axis(1), &[states.view(), actions.view()])
            .map_err(|e| Error::Dimension(e.to_string()))?;
        self.rewards_for_inputs(&x)
    }

    /// Rewards for pre-concatenated `[state | action]` rows.
    pub fn rewards_for_inputs(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let out = self.net.forward(inputs)?;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerics(crate::numerics::NumericsError::NonFinite(
                "reward model output".into(),
            )));
        }
        Ok(out)
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut row = state.to_vec();
        row.extend_from_slice(action);
        let x = Array2::from_shape_vec((1, row.len()), row).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.rewards_for_inputs(&x)?[[0, 0]])
    }

    /// Layer index of each parameter tensor (weights and bias share a layer).
    pub fn layer_of_param(&self, param: usize) -> usize {
        param / 2
    }

    /// Raw (pre-softplus) parameterization of the inner learning rates.
    pub fn inner_lr_raw(&self) -> Vec<f64> {
        self.inner_lrs.iter().map(|&a| inverse_softplus(a)).collect()
    }

    pub fn set_inner_lr_raw(&mut self, raw: &[f64]) {
        self.inner_lrs = raw.iter().map(|&r| softplus(r)).collect();
    }
}

pub fn layer_sizes(family: Family, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![family.obs_dim() + family.action_dim()];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

pub(crate) fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for large y
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One inner gradient step `ψ' = ψ - α_layer ∇ψ`, with the step sizes given
/// as tape variables (`1x1`), so the step itself can be differentiated.
pub(crate) fn inner_step<'t>(params: &[Var<'t>], grads: &[Var<'t>], lrs: &[Var<'t>]) -> Vec<Var<'t>> {
    params
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(i, (p, g))| p.sub(g.mul_scalar(lrs[i / 2])))
        .collect()
}

/// Per-layer inner step sizes bound to `tape`: learnable through softplus,
/// or fixed constants.
pub(crate) fn bind_inner_lrs<'t>(model: &RewardModel, tape: &'t Tape, learn: bool) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
    if learn {
        let raw: Vec<Var<'t>> = model
            .inner_lr_raw()
            .into_iter()
            .map(|r| tape.param(Array2::from_elem((1, 1), r)))
            .collect();
        let lrs = raw.iter().map(|r| r.softplus()).collect();
        (raw, lrs)
    } else {
        let lrs = model.inner_lrs.iter().map(|&a| tape.scalar(a)).collect();
        (Vec::new(), lrs)
    }
}
