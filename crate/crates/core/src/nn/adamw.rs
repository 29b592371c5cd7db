use std::collections::BTreeMap;

use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay, looked up per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: BTreeMap<String, f64>,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, decays: &[(&str, f64)]) -> Self {
        AdamWConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: decays.iter().map(|(g, d)| (g.to_string(), *d)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<S> {
    pub step: u64,
    pub first: Vec<Vec<S>>,
    pub second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new<P: ParamSet<S>>(params: &P) -> Self {
        let zeros: Vec<Vec<S>> = params.tensors().iter().map(|t| vec![S::zero(); t.data.len()]).collect();
        AdamWState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One optimiser step. Decay `p ← p − lr·wd·p` is applied before and
/// independently of the bias-corrected Adam step.
pub fn adamw_update<S: Scalar, P: ParamSet<S>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamWState<S>,
    config: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let lr = S::of(config.learning_rate);
    let (b1, b2) = (S::of(config.beta1), S::of(config.beta2));
    let eps = S::of(config.epsilon);
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() || state.first.len() != param_tensors.len() {
        return Err(Error::Dimension {
            expected: param_tensors.len(),
            got: grad_tensors.len(),
            context: "adamw tensor count",
        });
    }
    for (k, (p, g)) in param_tensors.iter_mut().zip(&grad_tensors).enumerate() {
        let wd = *config
            .weight_decay
            .get(p.group)
            .ok_or_else(|| Error::Config(format!("no weight decay configured for parameter group '{}'", p.group)))?;
        if p.data.len() != g.data.len() {
            return Err(Error::Dimension {
                expected: p.data.len(),
                got: g.data.len(),
                context: "adamw gradient shape",
            });
        }
        let decay = S::one() - lr * S::of(wd);
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *x *= decay;
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{Tensor, TensorMut};
    use super::*;

    #[derive(Clone)]
    struct Toy {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl ParamSet<f64> for Toy {
        fn tensors(&self) -> Vec<Tensor<'_, f64>> {
            vec![
                Tensor {
                    group: "lstm",
                    name: "a",
                    shape: vec![self.a.len()],
                    data: &self.a,
                },
                Tensor {
                    group: "weights_net",
                    name: "b",
                    shape: vec![self.b.len()],
                    data: &self.b,
                },
            ]
        }
        fn tensors_mut(&mut self) -> Vec<TensorMut<'_, f64>> {
            vec![
                TensorMut {
                    group: "lstm",
                    name: "a",
                    data: &mut self.a,
                },
                TensorMut {
                    group: "weights_net",
                    name: "b",
                    data: &mut self.b,
                },
            ]
        }
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = Toy {
            a: vec![2.0, -3.0],
            b: vec![1.0],
        };
        let g = Toy {
            a: vec![0.0; 2],
            b: vec![0.0],
        };
        let cfg = AdamWConfig::new(1e-4, &[("lstm", 0.1), ("weights_net", 0.2)]);
        let mut st = AdamWState::new(&p);
        adamw_update(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((p.a[0] - 2.0 * (1.0 - 1e-5)).abs() < 1e-15);
        assert!((p.a[1] + 3.0 * (1.0 - 1e-5)).abs() < 1e-15);
        assert!((p.b[0] - (1.0 - 2e-5)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let mut p = Toy {
            a: vec![0.5, 0.5],
            b: vec![0.5],
        };
        let g = Toy {
            a: vec![3.0, -0.01],
            b: vec![250.0],
        };
        let cfg = AdamWConfig::new(1e-3, &[("lstm", 0.0), ("weights_net", 0.0)]);
        let mut st = AdamWState::new(&p);
        adamw_update(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((p.a[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((p.a[1] - (0.5 + 1e-3)).abs() < 1e-8);
        assert!((p.b[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn unknown_group_is_an_error() {
        let mut p = Toy {
            a: vec![1.0],
            b: vec![1.0],
        };
        let g = p.clone();
        let cfg = AdamWConfig::new(1e-4, &[("lstm", 0.1)]);
        let mut st = AdamWState::new(&p);
        assert!(matches!(adamw_update(&mut p, &g, &mut st, &cfg), Err(Error::Config(_))));
    }
}
