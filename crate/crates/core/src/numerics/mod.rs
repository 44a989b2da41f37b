//! Dense 2-D tensor math with reverse-mode differentiation, small MLPs and Adam.

mod adam;
mod mlp;
mod tape;

pub use adam::Adam;
pub use mlp::{Activation, Mlp};
pub use tape::{Tape, Var};

pub(crate) use tape::{sigmoid, softplus};

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// Whether the gradient graph is kept for a further differentiation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOrder {
    First,
    SecondCapable,
}

/// Value and gradients of a scalar function of `params`.
///
/// `build` receives the tape and the bound parameter variables and returns
/// the scalar loss.
pub fn value_and_grad<F>(params: &[Array2<f64>], build: F) -> Result<(f64, Vec<Array2<f64>>), NumericsError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumericsError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.gradients(loss, &vars)?;
    Ok((loss.item(), grads))
}
