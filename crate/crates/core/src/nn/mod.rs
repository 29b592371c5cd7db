//! Dense and LSTM layers with hand-written reverse-mode gradients, losses,
//! AdamW, finite-difference checking and checkpoint I/O.

mod adamw;
mod checkpoint;
mod dense;
mod gradcheck;
mod loss;
mod lstm;

pub use adamw::{adamw_update, AdamWConfig, AdamWState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ManifestEntry};
pub use dense::Dense;
pub use gradcheck::{grad_check, GradCheckReport, DENOMINATOR_FLOOR, GRAD_CHECK_STEP};
pub use loss::{bce_loss, softmax, softmax_bce};
pub use lstm::{Lstm, LstmState, LstmTrace};

use crate::scalar::Scalar;

/// Read-only view of one named parameter tensor.
#[derive(Debug)]
pub struct Tensor<'a, S> {
    pub group: &'static str,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

#[derive(Debug)]
pub struct TensorMut<'a, S> {
    pub group: &'static str,
    pub name: &'static str,
    pub data: &'a mut [S],
}

/// A model whose parameters are a fixed, ordered list of named tensors.
/// Gradients are held in a value of the same type.
pub trait ParamSet<S: Scalar> {
    fn tensors(&self) -> Vec<Tensor<'_, S>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, S>>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<S> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[S]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn dense_tensors<'a, S>(group: &'static str, d: &'a Dense<S>) -> [Tensor<'a, S>; 2] {
    [
        Tensor {
            group,
            name: "weight",
            shape: vec![d.n_out, d.n_in],
            data: &d.weight,
        },
        Tensor {
            group,
            name: "bias",
            shape: vec![d.n_out],
            data: &d.bias,
        },
    ]
}

pub(crate) fn dense_tensors_mut<'a, S>(group: &'static str, d: &'a mut Dense<S>) -> [TensorMut<'a, S>; 2] {
    [
        TensorMut {
            group,
            name: "weight",
            data: &mut d.weight,
        },
        TensorMut {
            group,
            name: "bias",
            data: &mut d.bias,
        },
    ]
}

pub(crate) fn lstm_tensors<'a, S>(group: &'static str, l: &'a Lstm<S>) -> [Tensor<'a, S>; 4] {
    let g = 4 * l.n_hidden;
    [
        Tensor {
            group,
            name: "w_ih",
            shape: vec![g, l.n_in],
            data: &l.w_ih,
        },
        Tensor {
            group,
            name: "w_hh",
            shape: vec![g, l.n_hidden],
            data: &l.w_hh,
        },
        Tensor {
            group,
            name: "b_ih",
            shape: vec![g],
            data: &l.b_ih,
        },
        Tensor {
            group,
            name: "b_hh",
            shape: vec![g],
            data: &l.b_hh,
        },
    ]
}

pub(crate) fn lstm_tensors_mut<'a, S>(group: &'static str, l: &'a mut Lstm<S>) -> [TensorMut<'a, S>; 4] {
    [
        TensorMut {
            group,
            name: "w_ih",
            data: &mut l.w_ih,
        },
        TensorMut {
            group,
            name: "w_hh",
            data: &mut l.w_hh,
        },
        TensorMut {
            group,
            name: "b_ih",
            data: &mut l.b_ih,
        },
        TensorMut {
            group,
            name: "b_hh",
            data: &mut l.b_hh,
        },
    ]
}
