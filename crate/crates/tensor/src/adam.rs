use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zeroed moment accumulators for parameters of the given shapes.
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let first: Vec<_> = shapes
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Restores a saved state; moment lists must pair up shape by shape.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<Matrix<T>>,
        second: Vec<Matrix<T>>,
    ) -> Result<Self> {
        if first.len() != second.len() {
            return Err(TensorError::Invalid(format!(
                "adam state has {} first moments but {} second moments",
                first.len(),
                second.len()
            )));
        }
        for (m, v) in first.iter().zip(&second) {
            if m.shape() != v.shape() {
                return Err(TensorError::Shape {
                    op: "adam_state",
                    lhs: m.shape(),
                    rhs: v.shape(),
                });
            }
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.second
    }

    /// One update. `grads[i] == None` is treated as an all-zero gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix<T>],
        grads: &[Option<&Matrix<T>>],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(TensorError::Invalid(format!(
                "adam tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let expected = self.first[i].shape();
            if p.shape() != expected {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: expected,
                });
            }
            if let Some(g) = grads[i] {
                if g.shape() != expected {
                    return Err(TensorError::Shape {
                        op: "adam_step",
                        lhs: g.shape(),
                        rhs: expected,
                    });
                }
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.eps);

        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (i, p) in params.iter_mut().enumerate() {
            let state = p
                .data_mut()
                .iter_mut()
                .zip(self.first[i].data_mut())
                .zip(self.second[i].data_mut());
            // Separate loops so the common case vectorizes.
            match grads[i] {
                Some(g) => {
                    for (((p, m), v), &g) in state.zip(g.data()) {
                        update(p, m, v, g);
                    }
                }
                None => {
                    for ((p, m), v) in state {
                        update(p, m, v, T::zero());
                    }
                }
            }
        }
        Ok(())
    }
}
