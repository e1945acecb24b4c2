//! The scalar abstraction every numeric kernel is generic over.
//!
//! A [`Scalar`] is either a plain `f64`, a forward-mode dual number
//! ([`crate::autodiff::Dual`]), or a tape-tracked variable
//! ([`crate::autodiff::Var`]). Control-flow decisions (step acceptance,
//! event brackets, activation branches) are always taken on the primal
//! [`Scalar::value`], so every scalar type walks the exact same branch
//! sequence and the dual/tape value components reproduce the `f64` run
//! bit for bit.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Sized
{
    fn from_f64(v: f64) -> Self;

    /// Primal value; all discrete decisions are made on this.
    fn value(&self) -> f64;

    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tan(&self) -> Self;
    fn sqrt(&self) -> Self;
    /// Derivative at exactly 0 is taken as 0.
    fn abs(&self) -> Self;
    fn exp(&self) -> Self;

    /// Σ coeffs[i]·terms[i] with constant coefficients, in slice order.
    fn lincomb(terms: &[Self], coeffs: &[f64]) -> Self {
        debug_assert_eq!(terms.len(), coeffs.len());
        let mut acc = Self::from_f64(0.0);
        for (t, &c) in terms.iter().zip(coeffs) {
            acc = acc + t.clone() * Self::from_f64(c);
        }
        acc
    }

    /// Σ a[i]·b[i], in slice order.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::from_f64(0.0);
        for (x, y) in a.iter().zip(b) {
            acc = acc + x.clone() * y.clone();
        }
        acc
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(&self) -> f64 {
        *self
    }

    #[inline]
    fn sin(&self) -> Self {
        f64::sin(*self)
    }

    #[inline]
    fn cos(&self) -> Self {
        f64::cos(*self)
    }

    #[inline]
    fn tan(&self) -> Self {
        f64::tan(*self)
    }

    #[inline]
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }

    #[inline]
    fn abs(&self) -> Self {
        f64::abs(*self)
    }

    #[inline]
    fn exp(&self) -> Self {
        f64::exp(*self)
    }

    #[inline]
    fn lincomb(terms: &[Self], coeffs: &[f64]) -> Self {
        let mut acc = 0.0;
        for (t, &c) in terms.iter().zip(coeffs) {
            acc += t * c;
        }
        acc
    }

    #[inline]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }
}

/// Lift a slice of `f64` into any scalar type as constants.
pub fn lift<T: Scalar>(vals: &[f64]) -> Vec<T> {
    vals.iter().map(|&v| T::from_f64(v)).collect()
}

/// Extract the primal values of a scalar slice.
pub fn values<T: Scalar>(vals: &[T]) -> Vec<f64> {
    vals.iter().map(|v| v.value()).collect()
}
