//! Scalar abstraction for exact second-order derivatives.
//!
//! Model losses and gradients are written once, generically over [`Scalar`].
//! Instantiated at `f64` they are the ordinary analytic formulas; instantiated
//! at [`Dual`] the same code propagates a directional derivative, so the dual
//! part of the gradient is an exact Hessian-vector product (forward over
//! reverse), with no finite-difference error.

/// Arithmetic surface needed by the model implementations.
pub trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    /// Primal value (real part for duals).
    fn value(self) -> f64;
    fn mul_f64(self, f: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn mul_f64(self, f: f64) -> Self {
        self * f
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number: `re + du * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }

    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl std::ops::Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.re / o.re,
            (self.du * o.re - self.re * o.du) / (o.re * o.re),
        )
    }
}

impl std::ops::Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    fn zero() -> Self {
        Dual::constant(0.0)
    }
    fn one() -> Self {
        Dual::constant(1.0)
    }
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn mul_f64(self, f: f64) -> Self {
        Dual::new(self.re * f, self.du * f)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn dual_chain_rules() {
        // f(x) = exp(x) * tanh(x) at x = 0.3, derivative seeded as 1.
        let x = Dual::new(0.3, 1.0);
        let f = x.exp() * x.tanh();
        let t = 0.3_f64.tanh();
        approx(f.re, 0.3_f64.exp() * t, 1e-15);
        approx(
            f.du,
            0.3_f64.exp() * t + 0.3_f64.exp() * (1.0 - t * t),
            1e-15,
        );
    }

    #[test]
    fn dual_division() {
        // d/dx (1/x) = -1/x^2
        let x = Dual::new(2.0, 1.0);
        let inv = Dual::one() / x;
        approx(inv.re, 0.5, 1e-15);
        approx(inv.du, -0.25, 1e-15);
    }

    #[test]
    fn dual_ln() {
        let x = Dual::new(4.0, 1.0);
        let l = x.ln();
        approx(l.re, 4.0_f64.ln(), 1e-15);
        approx(l.du, 0.25, 1e-15);
    }
}
