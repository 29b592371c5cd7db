//! Floating-point abstraction shared by the numerical kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::of(30.0) {
        x
    } else if x < S::of(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `out += W x` for a row-major `rows × x.len()` matrix.
#[inline]
pub fn matvec_acc<S: Scalar>(w: &[S], x: &[S], out: &mut [S]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = S::zero();
        for (a, b) in row.iter().zip(x) {
            acc += *a * *b;
        }
        *o += acc;
    }
}

/// `out += Wᵀ y` for a row-major `y.len() × out.len()` matrix.
#[inline]
pub fn matvec_t_acc<S: Scalar>(w: &[S], y: &[S], out: &mut [S]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi == S::zero() {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += *a * *yi;
        }
    }
}

/// `W += y xᵀ`.
#[inline]
pub fn outer_acc<S: Scalar>(w: &mut [S], y: &[S], x: &[S]) {
    let cols = x.len();
    for (yi, row) in y.iter().zip(w.chunks_exact_mut(cols)) {
        if *yi == S::zero() {
            continue;
        }
        for (a, b) in row.iter_mut().zip(x) {
            *a += *yi * *b;
        }
    }
}

pub fn cast_vec<A: Scalar, B: Scalar>(v: &[A]) -> Vec<B> {
    v.iter().map(|x| B::of(x.as_f64())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0f64).is_finite());
        assert!(sigmoid(800.0f32) == 1.0);
    }

    #[test]
    fn softplus_tails() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0f64), 100.0);
        assert!(softplus(-100.0f64) > 0.0);
    }

    #[test]
    fn matvec_shapes() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec_acc(&w, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut back = [0.0; 3];
        matvec_t_acc(&w, &[1.0, 1.0], &mut back);
        assert_eq!(back, [5.0, 7.0, 9.0]);
    }
}
