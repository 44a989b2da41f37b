use ndarray::{Array2, Axis};
use rand::Rng;

use super::{NumericsError, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Fully connected network with rectifier hidden layers.
///
/// Parameters are stored flat as `[W0, b0, W1, b1, ...]` with `W` shaped
/// `(fan_in, fan_out)` and `b` shaped `(1, fan_out)`, so a batch is a row
/// per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    output: Activation,
    params: Vec<Array2<f64>>,
}

impl Mlp {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.push(Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)));
            params.push(Array2::from_shape_fn((1, w[1]), |_| rng.random_range(-bound..bound)));
        }
        Mlp {
            sizes: sizes.to_vec(),
            output,
            params,
        }
    }

    pub fn zeros(sizes: &[usize], output: Activation) -> Self {
        let params = sizes
            .windows(2)
            .flat_map(|w| [Array2::zeros((w[0], w[1])), Array2::zeros((1, w[1]))])
            .collect();
        Mlp {
            sizes: sizes.to_vec(),
            output,
            params,
        }
    }

    pub fn from_params(sizes: &[usize], output: Activation, params: Vec<Array2<f64>>) -> Result<Self, NumericsError> {
        let expected: Vec<(usize, usize)> = sizes.windows(2).flat_map(|w| [(w[0], w[1]), (1, w[1])]).collect();
        let got: Vec<(usize, usize)> = params.iter().map(|p| p.dim()).collect();
        if expected != got {
            return Err(NumericsError::Dimension(format!(
                "parameter shapes {got:?} do not fit layer sizes {sizes:?}"
            )));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            output,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Array2<f64>>) -> Result<(), NumericsError> {
        *self = Mlp::from_params(&self.sizes, self.output, params)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// All parameters concatenated in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.iter().copied()).collect()
    }

    fn check_input(&self, cols: usize) -> Result<(), NumericsError> {
        if cols != self.input_dim() {
            return Err(NumericsError::Dimension(format!(
                "input has {cols} features, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Plain forward pass, `(batch, in) -> (batch, out)`.
    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>, NumericsError> {
        self.check_input(input.ncols())?;
        let last = self.num_layers() - 1;
        let mut h = input.clone();
        for layer in 0..=last {
            let (w, b) = (&self.params[2 * layer], &self.params[2 * layer + 1]);
            let mut z = h.dot(w);
            z += &b.index_axis(Axis(0), 0);
            h = if layer < last {
                z.mapv_into(|v| v.max(0.0))
            } else {
                match self.output {
                    Activation::Identity => z,
                    Activation::Tanh => z.mapv_into(f64::tanh),
                }
            };
        }
        Ok(h)
    }

    /// Bind the current parameters to `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Differentiable forward pass using `params` (which need not be this
    /// network's stored values, e.g. inner-loop adapted weights).
    pub fn forward_with<'t>(&self, params: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.check_input(input.shape().1)?;
        if params.len() != self.params.len() {
            return Err(NumericsError::Dimension(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, own) in params.iter().zip(&self.params) {
            if p.shape() != own.dim() {
                return Err(NumericsError::Dimension(format!(
                    "parameter shape {:?} differs from layer shape {:?}",
                    p.shape(),
                    own.dim()
                )));
            }
        }
        let last = self.num_layers() - 1;
        let mut h = input;
        for layer in 0..=last {
            let z = h.matmul(params[2 * layer]).add_row(params[2 * layer + 1]);
            h = if layer < last {
                z.relu()
            } else {
                match self.output {
                    Activation::Identity => z,
                    Activation::Tanh => z.tanh(),
                }
            };
        }
        Ok(h)
    }
}
