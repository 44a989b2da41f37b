use ndarray::{Array2, Zip};

use super::NumericsError;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    /// Moments are allocated lazily on the first step.
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() {
                return Err(NumericsError::Dimension(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.dim() != p.dim()) {
            return Err(NumericsError::Dimension("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![array![[1.0, -2.0], [3.0, 0.5]]];
        let before = params.clone();
        let mut adam = Adam::new(1e-3);
        adam.step(&mut params, &[Array2::zeros((2, 2))]).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![array![[1.0, -2.0, 0.0]]];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut params, &[Array2::ones((1, 3))]).unwrap();
        for (p, start) in params[0].iter().zip([1.0, -2.0, 0.0]) {
            assert!((start - p - 1e-3).abs() < 1e-10);
        }
    }

    // Independent scalar Adam on f(x) = x^2.
    fn scalar_adam(mut x: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        let expected = scalar_adam(1.0, 3, 0.1);
        let mut params = vec![array![[1.0]]];
        let mut adam = Adam::new(0.1);
        for want in expected {
            let g = params[0].mapv(|x| 2.0 * x);
            adam.step(&mut params, &[g]).unwrap();
            assert!((params[0][[0, 0]] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Array2::zeros((2, 2))];
        let mut adam = Adam::new(1e-3);
        assert!(matches!(
            adam.step(&mut params, &[Array2::zeros((2, 3))]),
            Err(NumericsError::Dimension(_))
        ));
    }
}
