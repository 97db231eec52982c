//! Scalar abstraction used by the kernel evaluators.
//!
//! Kernel formulas are written once, generically over [`Real`], and evaluated
//! either with `f64` (values) or with [`Dual`] (value plus one directional
//! derivative). Seeding the dual tangent on a hyperparameter yields the exact
//! analytic derivative of any kernel expression with respect to it, which is
//! how the likelihood gradients obtain `dK/dtheta` without hand-deriving a
//! separate formula per family and order.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Minimal real-number interface needed by the kernel formulas.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Lift an `f64` constant.
    fn lift(x: f64) -> Self;
    /// Primal value.
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powi(self, n: i32) -> Self;
    /// `self^e` for `self > 0`.
    fn powf(self, e: Self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn lift(x: f64) -> Self {
        x
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
}

/// Forward-mode dual number with a single tangent component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    /// The differentiation variable: tangent 1.
    #[inline]
    pub fn var(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
    /// A constant: tangent 0.
    #[inline]
    pub fn con(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: (self.d - self.v * inv * o.d) * inv,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl Real for Dual {
    #[inline]
    fn lift(x: f64) -> Self {
        Dual::con(x)
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            d: self.d * e,
        }
    }
    #[inline]
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }
    #[inline]
    fn sin(self) -> Self {
        Dual {
            v: self.v.sin(),
            d: self.d * self.v.cos(),
        }
    }
    #[inline]
    fn cos(self) -> Self {
        Dual {
            v: self.v.cos(),
            d: -self.d * self.v.sin(),
        }
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        Dual {
            v: self.v.powi(n),
            d: f64::from(n) * self.v.powi(n - 1) * self.d,
        }
    }
    #[inline]
    fn powf(self, e: Self) -> Self {
        // self^e = exp(e ln self); valid for self > 0 which holds for the
        // rational-quadratic base term this is used on.
        let r = self.v.powf(e.v);
        Dual {
            v: r,
            d: r * (e.d * self.v.ln() + e.v * self.d / self.v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dual_matches_finite_differences_on_composite_expression() {
        let f = |x: f64| (x.sin() * x.exp() + 2.0 / x).powi(3) - x.ln() * x.cos();
        let g = |x: Dual| {
            (x.sin() * x.exp() + Dual::lift(2.0) / x).powi(3) - x.ln() * x.cos()
        };
        for &x in &[0.3, 0.7, 1.3, 2.9] {
            let d = g(Dual::var(x));
            assert!((d.v - f(x)).abs() < 1e-12);
            let expect = fd(f, x);
            assert!(
                (d.d - expect).abs() < 1e-5 * expect.abs().max(1.0),
                "x={x}: dual {} vs fd {expect}",
                d.d
            );
        }
    }

    #[test]
    fn dual_powf_with_variable_exponent() {
        // d/da of b^(-a) at fixed b.
        let b = 1.7_f64;
        let f = |a: f64| b.powf(-a);
        let g = Dual::con(b).powf(-Dual::var(2.3));
        assert!((g.v - f(2.3)).abs() < 1e-14);
        assert!((g.d - fd(f, 2.3)).abs() < 1e-8);
    }
}
