use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast_vec, matvec_acc, matvec_t_acc, outer_acc, Scalar};

/// Fully connected layer `y = W x + b`, `W` stored row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            n_in,
            n_out,
            weight: vec![S::zero(); n_in * n_out],
            bias: vec![S::zero(); n_out],
        }
    }

    /// Uniform `±1/sqrt(n_in)` initialisation.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut draw = || S::of(rng.random_range(-bound..bound));
        Dense {
            n_in,
            n_out,
            weight: (0..n_in * n_out).map(|_| draw()).collect(),
            bias: (0..n_out).map(|_| draw()).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward_into(&self, x: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.n_in);
        out.copy_from_slice(&self.bias);
        matvec_acc(&self.weight, x, out);
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.n_in {
            return Err(Error::Dimension {
                expected: self.n_in,
                got: x.len(),
                context: "dense input",
            });
        }
        let mut out = vec![S::zero(); self.n_out];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    /// Accumulate parameter gradients into `grad` and, if given, the input
    /// gradient into `dx`.
    pub fn backward(&self, x: &[S], dy: &[S], grad: &mut Dense<S>, dx: Option<&mut [S]>) {
        debug_assert_eq!(dy.len(), self.n_out);
        outer_acc(&mut grad.weight, dy, x);
        for (b, d) in grad.bias.iter_mut().zip(dy) {
            *b += *d;
        }
        if let Some(dx) = dx {
            matvec_t_acc(&self.weight, dy, dx);
        }
    }

    pub fn cast<T: Scalar>(&self) -> Dense<T> {
        Dense {
            n_in: self.n_in,
            n_out: self.n_out,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_of_head() {
        assert_eq!(Dense::<f64>::zeros(8, 2).parameter_count(), 18);
        assert_eq!(Dense::<f64>::zeros(32, 160).parameter_count(), 5280);
    }

    #[test]
    fn linear_squared_loss_gradient_is_closed_form() {
        // L = |W x - y|², dL/dW = 2 (W x - y) xᵀ, dL/dx = 2 Wᵀ (W x - y)
        let mut d = Dense::<f64>::zeros(3, 2);
        d.weight = vec![1.0, -2.0, 0.5, 0.3, 0.0, 1.5];
        let x = [0.2, -1.0, 2.0];
        let y = [1.0, -1.0];
        let out = d.forward(&x).unwrap();
        let r: Vec<f64> = out.iter().zip(&y).map(|(a, b)| a - b).collect();
        let dy: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let mut g = Dense::zeros(3, 2);
        let mut dx = [0.0; 3];
        d.backward(&x, &dy, &mut g, Some(&mut dx));
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.weight[o * 3 + i] - 2.0 * r[o] * x[i]).abs() < 1e-12);
            }
        }
        for i in 0..3 {
            let expect: f64 = (0..2).map(|o| 2.0 * d.weight[o * 3 + i] * r[o]).sum();
            assert!((dx[i] - expect).abs() < 1e-12);
        }
        assert!(d.forward(&[1.0]).is_err());
    }
}
