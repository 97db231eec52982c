//! Priors, unconstrained reparameterization, and the parameter layout.
//!
//! Every sampled parameter has a prior whose support fixes its transform:
//! `Uniform(a, b)` parameters live on a scaled logit, positive `HalfNormal`
//! parameters on a log. The samplers and optimizers work entirely in the
//! unconstrained space; log-Jacobian terms keep densities consistent.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Prior distribution of a single scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    HalfNormal { scale: f64 },
}

impl Prior {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "uniform prior needs lo < hi");
        Prior::Uniform { lo, hi }
    }

    pub fn half_normal(scale: f64) -> Self {
        assert!(scale > 0.0, "half-normal scale must be positive");
        Prior::HalfNormal { scale }
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::HalfNormal { scale } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.5 * (2.0 / std::f64::consts::PI).ln() - scale.ln()
                        - 0.5 * (x / scale).powi(2)
                }
            }
        }
    }

    pub fn dlogpdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { .. } => 0.0,
            Prior::HalfNormal { scale } => -x / (scale * scale),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Prior::HalfNormal { scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    statrs::function::erf::erf(x / (scale * std::f64::consts::SQRT_2))
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => rng.gen_range(lo..hi),
            Prior::HalfNormal { scale } => {
                let n: f64 = StandardNormal.sample(rng);
                n.abs() * scale
            }
        }
    }

    /// The unconstrained transform matching this prior's support.
    pub fn transform(&self) -> Transform {
        match *self {
            Prior::Uniform { lo, hi } => Transform::Logit { lo, hi },
            Prior::HalfNormal { .. } => Transform::Log,
        }
    }
}

/// Bijection between a constrained parameter and the real line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// x = exp(z) for positive parameters.
    Log,
    /// x = lo + (hi - lo) * sigmoid(z) for bounded parameters.
    Logit { lo: f64, hi: f64 },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(sigmoid(z)), stable for large |z|.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

impl Transform {
    pub fn constrain(&self, z: f64) -> f64 {
        match *self {
            Transform::Log => z.exp(),
            Transform::Logit { lo, hi } => lo + (hi - lo) * sigmoid(z),
        }
    }

    pub fn unconstrain(&self, x: f64) -> f64 {
        match *self {
            Transform::Log => x.ln(),
            Transform::Logit { lo, hi } => (x - lo).ln() - (hi - x).ln(),
        }
    }

    /// ln |dx/dz|.
    pub fn log_jac(&self, z: f64) -> f64 {
        match *self {
            Transform::Log => z,
            Transform::Logit { lo, hi } => (hi - lo).ln() + log_sigmoid(z) + log_sigmoid(-z),
        }
    }

    pub fn dlog_jac_dz(&self, z: f64) -> f64 {
        match *self {
            Transform::Log => 1.0,
            Transform::Logit { .. } => 1.0 - 2.0 * sigmoid(z),
        }
    }

    pub fn dx_dz(&self, z: f64) -> f64 {
        match *self {
            Transform::Log => z.exp(),
            Transform::Logit { lo, hi } => {
                let s = sigmoid(z);
                (hi - lo) * s * (1.0 - s)
            }
        }
    }
}

/// What a parameter controls inside the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Physical operator parameter (index into the operator's parameter list).
    Phi(usize),
    /// Constant mean of the u channel.
    Mean,
    /// Base kernel hyperparameter (index into the family's hyper order).
    BaseHyper(usize),
    /// Extra (discrepancy/bias) kernel hyperparameter.
    ExtraHyper(usize),
    /// Noise standard deviation of a u group.
    NoiseU(usize),
    /// Noise standard deviation of the f channel.
    NoiseF,
}

#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub kind: ParamKind,
    pub prior: Prior,
}

/// Ordered parameterization of a model with constrain/unconstrain maps.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub defs: Vec<ParamDef>,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.defs.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.defs.iter().map(|d| d.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.defs.iter().position(|d| d.name == name)
    }

    pub fn constrain(&self, z: &[f64]) -> Vec<f64> {
        self.defs
            .iter()
            .zip(z)
            .map(|(d, &zi)| d.prior.transform().constrain(zi))
            .collect()
    }

    pub fn unconstrain(&self, x: &[f64]) -> Vec<f64> {
        self.defs
            .iter()
            .zip(x)
            .map(|(d, &xi)| d.prior.transform().unconstrain(xi))
            .collect()
    }

    pub fn log_jacobian(&self, z: &[f64]) -> f64 {
        self.defs
            .iter()
            .zip(z)
            .map(|(d, &zi)| d.prior.transform().log_jac(zi))
            .sum()
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        self.defs
            .iter()
            .zip(x)
            .map(|(d, &xi)| d.prior.logpdf(xi))
            .sum()
    }

    /// One joint draw from the priors, on the constrained scale.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.defs.iter().map(|d| d.prior.sample(rng)).collect()
    }
}

/// Named constrained parameter values, as reported by fits.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transform_round_trip_is_tight() {
        let cases = [
            (Transform::Log, vec![1e-6, 0.01, 1.0, 42.0, 1e4]),
            (
                Transform::Logit { lo: 0.5, hi: 3.0 },
                vec![0.5001, 0.9, 1.7, 2.4, 2.9999],
            ),
        ];
        for (t, xs) in cases {
            for x in xs {
                let z = t.unconstrain(x);
                assert_relative_eq!(t.constrain(z), x, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_prior_is_flat_inside_support() {
        let p = Prior::uniform(0.5, 3.0);
        assert_eq!(p.logpdf(0.7), p.logpdf(2.9));
        assert_eq!(p.logpdf(3.5), f64::NEG_INFINITY);
    }

    #[test]
    fn half_normal_logpdf_normalizes() {
        // Trapezoid quadrature of the density over a wide grid.
        let p = Prior::half_normal(1.7);
        let n = 40_000;
        let hi = 1.7 * 12.0;
        let h = hi / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let x = i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * p.logpdf(x).exp() * h;
        }
        assert_relative_eq!(integral, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn transformed_half_normal_density_integrates_to_one() {
        // Integrate exp(logpdf(x(z)) + log|dx/dz|) over z; the Jacobian must
        // make the pushforward density normalize.
        let p = Prior::half_normal(0.8);
        let t = p.transform();
        let (z_lo, z_hi, n) = (-30.0, 4.0, 200_000);
        let h = (z_hi - z_lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let z = z_lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * (p.logpdf(t.constrain(z)) + t.log_jac(z)).exp() * h;
        }
        assert_relative_eq!(integral, 1.0, max_relative = 1e-3);
    }

    #[test]
    fn logit_jacobian_matches_finite_difference() {
        let t = Transform::Logit { lo: 0.5, hi: 3.0 };
        for &z in &[-3.0, -0.4, 0.0, 1.2, 5.0] {
            let h = 1e-6;
            let fd = (t.constrain(z + h) - t.constrain(z - h)) / (2.0 * h);
            assert_relative_eq!(t.dx_dz(z), fd, max_relative = 1e-6);
            let fd_lj = (t.log_jac(z + h) - t.log_jac(z - h)) / (2.0 * h);
            assert_relative_eq!(t.dlog_jac_dz(z), fd_lj, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn half_normal_cdf_median() {
        let p = Prior::half_normal(2.0);
        assert_relative_eq!(p.cdf(2.0 * 0.674_489_750_196_082), 0.5, max_relative = 1e-9);
    }
}
