//! Forward-mode dual numbers carrying a batch of directional tangents.
//!
//! A constant is represented with an empty tangent vector, so lifting
//! tableau coefficients and recorded data costs no allocation. Seeded
//! values carry one tangent entry per differentiation direction; the
//! width is fixed within a computation.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    value: f64,
    /// One entry per direction; empty means "all zero".
    tangent: Vec<f64>,
}

impl Dual {
    pub fn constant(value: f64) -> Self {
        Self { value, tangent: Vec::new() }
    }

    pub fn with_tangent(value: f64, tangent: Vec<f64>) -> Self {
        Self { value, tangent }
    }

    /// Unit seed along direction `dir` out of `n_dir`.
    pub fn seeded(value: f64, n_dir: usize, dir: usize) -> Self {
        let mut tangent = vec![0.0; n_dir];
        tangent[dir] = 1.0;
        Self { value, tangent }
    }

    pub fn tangent(&self) -> &[f64] {
        &self.tangent
    }

    /// Tangent along direction `dir`, treating an empty tangent as zero.
    pub fn tangent_at(&self, dir: usize) -> f64 {
        self.tangent.get(dir).copied().unwrap_or(0.0)
    }

    fn unary(&self, value: f64, dfdx: f64) -> Self {
        let tangent = self.tangent.iter().map(|t| t * dfdx).collect();
        Self { value, tangent }
    }

    /// ca·a + cb·b over tangents, with empty meaning zero.
    fn combine(a: &[f64], b: &[f64], ca: f64, cb: f64) -> Vec<f64> {
        match (a.is_empty(), b.is_empty()) {
            (true, true) => Vec::new(),
            (true, false) => b.iter().map(|y| cb * y).collect(),
            (false, true) => a.iter().map(|x| ca * x).collect(),
            (false, false) => {
                assert_eq!(a.len(), b.len(), "mixed tangent widths in one computation");
                a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
            }
        }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value + rhs.value,
            tangent: Dual::combine(&self.tangent, &rhs.tangent, 1.0, 1.0),
        }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value - rhs.value,
            tangent: Dual::combine(&self.tangent, &rhs.tangent, 1.0, -1.0),
        }
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            value: self.value * rhs.value,
            tangent: Dual::combine(&self.tangent, &rhs.tangent, rhs.value, self.value),
        }
    }
}

impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let value = self.value / rhs.value;
        // d(a/b) = da/b − (a/b)·db/b
        let inv = 1.0 / rhs.value;
        Dual {
            value,
            tangent: Dual::combine(&self.tangent, &rhs.tangent, inv, -value * inv),
        }
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            value: -self.value,
            tangent: self.tangent.iter().map(|t| -t).collect(),
        }
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn sin(&self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }

    fn cos(&self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }

    fn tan(&self) -> Self {
        let t = self.value.tan();
        self.unary(t, 1.0 + t * t)
    }

    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn abs(&self) -> Self {
        let sign = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.value.abs(), sign)
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn lincomb(terms: &[Self], coeffs: &[f64]) -> Self {
        debug_assert_eq!(terms.len(), coeffs.len());
        let mut value = 0.0;
        let width = terms.iter().map(|t| t.tangent.len()).max().unwrap_or(0);
        let mut tangent = vec![0.0; width];
        let mut any = false;
        for (t, &c) in terms.iter().zip(coeffs) {
            value += t.value * c;
            if !t.tangent.is_empty() {
                assert_eq!(t.tangent.len(), width, "mixed tangent widths in one computation");
                any = true;
                for (acc, d) in tangent.iter_mut().zip(&t.tangent) {
                    *acc += c * d;
                }
            }
        }
        if !any {
            tangent.clear();
        }
        Dual { value, tangent }
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut value = 0.0;
        let width = a
            .iter()
            .chain(b.iter())
            .map(|t| t.tangent.len())
            .max()
            .unwrap_or(0);
        let mut tangent = vec![0.0; width];
        let mut any = false;
        for (x, y) in a.iter().zip(b) {
            value += x.value * y.value;
            if !x.tangent.is_empty() {
                any = true;
                for (acc, d) in tangent.iter_mut().zip(&x.tangent) {
                    *acc += y.value * d;
                }
            }
            if !y.tangent.is_empty() {
                any = true;
                for (acc, d) in tangent.iter_mut().zip(&y.tangent) {
                    *acc += x.value * d;
                }
            }
        }
        if !any {
            tangent.clear();
        }
        Dual { value, tangent }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_product_quotient() {
        // f(x) = x·sin(x)/exp(x) at x = 0.7, f' by hand
        let x = Dual::seeded(0.7, 1, 0);
        let f = x.clone() * x.sin() / x.exp();
        let xv: f64 = 0.7;
        let expected_val = xv * xv.sin() / xv.exp();
        let expected_der =
            ((xv.sin() + xv * xv.cos()) * xv.exp() - xv * xv.sin() * xv.exp()) / (xv.exp() * xv.exp());
        assert!((f.value() - expected_val).abs() < 1e-15);
        assert!((f.tangent_at(0) - expected_der).abs() < 1e-13);
    }

    #[test]
    fn constants_carry_no_tangent() {
        let c = Dual::constant(2.0) * Dual::constant(3.0);
        assert!(c.tangent().is_empty());
        assert_eq!(c.value(), 6.0);
    }

    #[test]
    fn zero_seed_matches_f64_values_exactly() {
        let x = Dual::with_tangent(0.3, vec![0.0, 0.0]);
        let y = (x.sin() + Dual::constant(2.0)).sqrt();
        let yf = ((0.3_f64).sin() + 2.0).sqrt();
        assert_eq!(y.value(), yf);
        assert_eq!(y.tangent(), &[0.0, 0.0]);
    }

    #[test]
    fn abs_derivative_zero_at_origin() {
        let x = Dual::seeded(0.0, 1, 0);
        assert_eq!(x.abs().tangent_at(0), 0.0);
    }

    #[test]
    fn multi_direction_seeds() {
        // f(a, b) = a·b, grad = (b, a)
        let a = Dual::seeded(2.0, 2, 0);
        let b = Dual::seeded(5.0, 2, 1);
        let f = a * b;
        assert_eq!(f.tangent(), &[5.0, 2.0]);
    }
}
