//! Log posterior over unconstrained parameters, with analytic gradients.
//!
//! `log p(z) = log-likelihood(x(z)) + log prior(x(z)) + log |dx/dz|`.
//! Numerical failures in the likelihood (a covariance that stays indefinite
//! after the jitter ladder) reject the proposal by returning negative
//! infinity and bumping a counter; they never abort a run.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::infer::assembly::exact_joint;
use crate::infer::priors::ParamLayout;
use crate::infer::PiModel;
use crate::linalg::cholesky_with_jitter;
use crate::model::ObservationSet;
use crate::sparse::{InducingSet, SparseMethod};

const LN_2PI: f64 = 1.837_877_066_409_345_26;

/// A differentiable unnormalized log density over R^dim.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn logp_grad(&self, z: &[f64], grad: &mut [f64]) -> f64;
    fn logp(&self, z: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.logp_grad(z, &mut g)
    }
}

/// Which likelihood the posterior uses.
#[derive(Clone, Debug)]
pub enum Likelihood<'a> {
    Exact,
    Sparse {
        method: SparseMethod,
        inducing: &'a InducingSet,
    },
    /// Prior only; used for prior-predictive checks and sampler validation.
    None,
}

/// Posterior target over the model's unconstrained parameter vector.
pub struct Posterior<'a> {
    pub model: &'a PiModel,
    pub obs: &'a ObservationSet,
    pub layout: ParamLayout,
    pub lik: Likelihood<'a>,
    numerical_rejects: AtomicU64,
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a PiModel, obs: &'a ObservationSet, lik: Likelihood<'a>) -> Self {
        Posterior {
            model,
            obs,
            layout: model.layout(),
            lik,
            numerical_rejects: AtomicU64::new(0),
        }
    }

    pub fn exact(model: &'a PiModel, obs: &'a ObservationSet) -> Self {
        Posterior::new(model, obs, Likelihood::Exact)
    }

    pub fn prior_only(model: &'a PiModel, obs: &'a ObservationSet) -> Self {
        Posterior::new(model, obs, Likelihood::None)
    }

    /// Count of likelihood evaluations rejected for numerical reasons.
    pub fn numerical_rejects(&self) -> u64 {
        self.numerical_rejects.load(Ordering::Relaxed)
    }

    /// Log likelihood and its gradient in the constrained space.
    fn loglik(&self, x: &[f64], grads: bool) -> Option<(f64, Vec<f64>)> {
        match &self.lik {
            Likelihood::None => Some((0.0, vec![0.0; self.layout.dim()])),
            Likelihood::Exact => {
                let u = self.model.unpack(&self.layout, x);
                exact_loglik(self.model, &self.layout, &u, self.obs, grads)
            }
            Likelihood::Sparse { method, inducing } => {
                let u = self.model.unpack(&self.layout, x);
                crate::sparse::loglik_grads(
                    self.model,
                    &self.layout,
                    &u,
                    self.obs,
                    *method,
                    inducing,
                    grads,
                )
            }
        }
    }

    fn eval(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let x = self.layout.constrain(z);
        if x.iter().any(|v| !v.is_finite()) {
            self.numerical_rejects.fetch_add(1, Ordering::Relaxed);
            return f64::NEG_INFINITY;
        }
        let want_grads = grad.is_some();
        let lik = match self.loglik(&x, want_grads) {
            Some(v) => v,
            None => {
                self.numerical_rejects.fetch_add(1, Ordering::Relaxed);
                return f64::NEG_INFINITY;
            }
        };
        let (ll, dll) = lik;
        let lp = self.layout.log_prior(&x) + self.layout.log_jacobian(z) + ll;
        if let Some(g) = grad {
            for (i, def) in self.layout.defs.iter().enumerate() {
                let t = def.prior.transform();
                let dx = (dll[i] + def.prior.dlogpdf(x[i])) * t.dx_dz(z[i]);
                g[i] = dx + t.dlog_jac_dz(z[i]);
            }
        }
        lp
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(z, Some(grad))
    }

    fn logp(&self, z: &[f64]) -> f64 {
        self.eval(z, None)
    }
}

/// Exact log marginal likelihood with gradients via the trace identity
/// `d logL = 1/2 a' dA a - 1/2 tr(A^-1 dA) + dmu' a`, `a = A^-1 (y - mu)`.
pub(crate) fn exact_loglik(
    model: &PiModel,
    layout: &ParamLayout,
    u: &crate::infer::Unpacked,
    obs: &ObservationSet,
    grads: bool,
) -> Option<(f64, Vec<f64>)> {
    let joint = exact_joint(model, layout, u, obs, grads);
    let chol = cholesky_with_jitter(&joint.a).ok()?;
    let y = obs.stacked_y();
    let r = &y - &joint.mean;
    let alpha = chol.solve(&r);
    let n = y.len() as f64;
    let ll = -0.5 * r.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * LN_2PI;
    if !ll.is_finite() {
        return None;
    }
    if !grads {
        return Some((ll, Vec::new()));
    }

    let ainv = chol.inverse();
    let mut g = vec![0.0; layout.dim()];
    for (k, gk) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        if let Some(dk) = &joint.dk[k] {
            acc += 0.5 * quad_form(&alpha, dk);
            acc -= 0.5 * frob_dot(&ainv, dk);
        }
        if let Some(dn) = &joint.dnoise[k] {
            for i in 0..dn.len() {
                acc += 0.5 * (alpha[i] * alpha[i] - ainv[(i, i)]) * dn[i];
            }
        }
        if let Some(dm) = &joint.dmean[k] {
            acc += dm.dot(&alpha);
        }
        *gk = acc;
    }
    Some((ll, g))
}

fn quad_form(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (m * v).dot(v)
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

/// Log posterior of the exact model at an unconstrained point.
pub fn log_posterior(model: &PiModel, obs: &ObservationSet, z: &[f64]) -> f64 {
    Posterior::exact(model, obs).logp(z)
}

/// Log posterior and gradient of the exact model at an unconstrained point.
pub fn grad_log_posterior(model: &PiModel, obs: &ObservationSet, z: &[f64]) -> (f64, Vec<f64>) {
    let p = Posterior::exact(model, obs);
    let mut g = vec![0.0; p.dim()];
    let v = p.logp_grad(z, &mut g);
    (v, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::priors::Prior;
    use crate::infer::{NoiseSpec, VariantSpec};
    use crate::kernel::{Inputs, KernelFamily, KernelSpec};
    use crate::model::{assemble_joint, log_marginal};
    use crate::physics::wk2_operator;
    use approx::assert_relative_eq;

    fn model() -> PiModel {
        PiModel {
            base: KernelSpec::new(KernelFamily::Se1d),
            op: wk2_operator(),
            variant: VariantSpec::Plain,
            mean_prior: Some(Prior::half_normal(100.0)),
            phi_priors: vec![Prior::uniform(0.5, 3.0), Prior::uniform(0.5, 3.0)],
            base_priors: vec![Prior::half_normal(50.0), Prior::half_normal(1.0)],
            extra_priors: vec![],
            noise_u: vec![NoiseSpec::Sampled(Prior::half_normal(15.0))],
            noise_f: NoiseSpec::Sampled(Prior::half_normal(15.0)),
        }
    }

    fn obs() -> ObservationSet {
        ObservationSet::single_group(
            Inputs::from_1d(vec![0.0, 0.25, 0.5, 0.75]),
            vec![92.0, 95.0, 88.0, 90.5],
            Inputs::from_1d(vec![0.1, 0.4, 0.8]),
            vec![100.0, 40.0, 60.0],
        )
        .unwrap()
    }

    #[test]
    fn log_posterior_decomposes_into_components() {
        let m = model();
        let o = obs();
        let p = Posterior::exact(&m, &o);
        let x = vec![1.1, 1.3, 91.0, 12.0, 0.3, 3.5, 9.0];
        let z = p.layout.unconstrain(&x);

        let got = p.logp(&z);
        let (bk, mean_u, variant, noise) = m.concrete(&p.layout, &x).unwrap();
        let joint = assemble_joint(&bk, &mean_u, &variant, &noise, &o).unwrap();
        let ll = log_marginal(&joint, &o.stacked_y()).unwrap();
        let expect = ll + p.layout.log_prior(&x) + p.layout.log_jacobian(&z);
        assert_relative_eq!(got, expect, max_relative = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model();
        let o = obs();
        let p = Posterior::exact(&m, &o);
        let x = vec![1.1, 1.3, 91.0, 12.0, 0.3, 3.5, 9.0];
        let z = p.layout.unconstrain(&x);
        let mut g = vec![0.0; p.dim()];
        p.logp_grad(&z, &mut g);

        let h = 1e-6;
        for k in 0..p.dim() {
            let mut hi = z.clone();
            let mut lo = z.clone();
            hi[k] += h;
            lo[k] -= h;
            let fd = (p.logp(&hi) - p.logp(&lo)) / (2.0 * h);
            assert_relative_eq!(g[k], fd, max_relative = 1e-4, epsilon = 1e-6);
        }
    }

    #[test]
    fn prior_only_posterior_has_zero_likelihood_term() {
        let m = model();
        let o = obs();
        let p = Posterior::prior_only(&m, &o);
        let x = vec![1.1, 1.3, 91.0, 12.0, 0.3, 3.5, 9.0];
        let z = p.layout.unconstrain(&x);
        let expect = p.layout.log_prior(&x) + p.layout.log_jacobian(&z);
        assert_relative_eq!(p.logp(&z), expect, max_relative = 1e-12);
    }

    #[test]
    fn uniform_prior_contributes_equally_inside_support() {
        // Two in-support values of R move only the likelihood and Jacobian,
        // not the prior mass.
        let m = model();
        let x = vec![0.9, 1.3, 91.0, 12.0, 0.3, 3.5, 9.0];
        let mut x2 = x.clone();
        x2[0] = 2.4;
        let layout = m.layout();
        let a = layout.log_prior(&x);
        let b = layout.log_prior(&x2);
        assert_eq!(a, b);
    }
}
