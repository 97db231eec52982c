//! Inference: model description, log posterior with analytic gradients,
//! Hamiltonian Monte Carlo, MAP optimization, and chain diagnostics.

pub mod assembly;
pub mod diag;
pub mod hmc;
pub mod map;
pub mod posterior;
pub mod priors;

pub use diag::{diagnostics, Diagnostics};
pub use hmc::{HmcConfig, PosteriorDraws};
pub use map::{map_estimate, MapConfig, MapResult};
pub use posterior::{grad_log_posterior, log_posterior, Posterior};
pub use priors::{ParamDef, ParamKind, ParamLayout, ParamVector, Prior, Transform};

use thiserror::Error;

use crate::kernel::{HyperParams, KernelFamily, KernelSpec};
use crate::model::{ExtraKernel, ModelError, ModelVariant, NoiseParams};
use crate::physics::{BlockKernel, LinearOperatorSpec, MeanFn, PhysParams, PhysicsError};

/// Model variant at the description level: which extra kernel family, if any,
/// is attached to the u channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantSpec {
    Plain,
    Discrepancy(KernelFamily),
    Bias(KernelFamily),
}

impl VariantSpec {
    pub fn extra_family(&self) -> Option<KernelFamily> {
        match self {
            VariantSpec::Plain => None,
            VariantSpec::Discrepancy(f) | VariantSpec::Bias(f) => Some(*f),
        }
    }

    fn suffix(&self) -> &'static str {
        match self {
            VariantSpec::Plain => "",
            VariantSpec::Discrepancy(_) => "_delta",
            VariantSpec::Bias(_) => "_bias",
        }
    }
}

/// Whether a noise standard deviation is sampled or plugged in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    Sampled(Prior),
    Fixed(f64),
}

/// Complete model description: base kernel, operator, variant, mean,
/// and priors for every free parameter.
#[derive(Clone, Debug)]
pub struct PiModel {
    pub base: KernelSpec,
    pub op: LinearOperatorSpec,
    pub variant: VariantSpec,
    /// Prior of the constant u-channel mean; `None` fixes the mean to zero.
    pub mean_prior: Option<Prior>,
    /// One prior per operator parameter, in operator order.
    pub phi_priors: Vec<Prior>,
    /// One prior per base kernel hyperparameter, in family order.
    pub base_priors: Vec<Prior>,
    /// One prior per extra kernel hyperparameter (see [`PiModel::extra_hyper_names`]).
    pub extra_priors: Vec<Prior>,
    pub noise_u: Vec<NoiseSpec>,
    pub noise_f: NoiseSpec,
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("bad inference configuration: {0}")]
    BadConfig(String),
    #[error("all chains diverged; last adapted step size {step_size:.3e}")]
    AllChainsDiverged { step_size: f64 },
    #[error("optimization failed: {0}")]
    OptimFailed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

impl PiModel {
    /// The periodic discrepancy/bias kernel shares the base kernel's period
    /// when both families are periodic.
    pub fn period_tied(&self) -> bool {
        self.base.family == KernelFamily::Periodic1d
            && self.variant.extra_family() == Some(KernelFamily::Periodic1d)
    }

    /// Hyperparameter names of the extra kernel that are free parameters.
    pub fn extra_hyper_names(&self) -> Vec<&'static str> {
        match self.variant.extra_family() {
            None => Vec::new(),
            Some(f) => {
                let tied = self.period_tied();
                f.hyper_names()
                    .iter()
                    .copied()
                    .filter(|n| !(tied && *n == "period"))
                    .collect()
            }
        }
    }

    pub fn validate(&self) -> Result<(), InferError> {
        if self.phi_priors.len() != self.op.param_names.len() {
            return Err(InferError::BadConfig(format!(
                "{} phi priors for {} operator parameters",
                self.phi_priors.len(),
                self.op.param_names.len()
            )));
        }
        if self.base_priors.len() != self.base.family.hyper_names().len() {
            return Err(InferError::BadConfig(
                "base kernel prior count does not match the family".into(),
            ));
        }
        if self.extra_priors.len() != self.extra_hyper_names().len() {
            return Err(InferError::BadConfig(
                "extra kernel prior count does not match the variant".into(),
            ));
        }
        if self.noise_u.is_empty() {
            return Err(InferError::BadConfig("at least one u noise group".into()));
        }
        Ok(())
    }

    /// Ordered parameterization of all sampled values.
    pub fn layout(&self) -> ParamLayout {
        let mut defs = Vec::new();
        for (i, name) in self.op.param_names.iter().enumerate() {
            defs.push(ParamDef {
                name: (*name).to_string(),
                kind: ParamKind::Phi(i),
                prior: self.phi_priors[i],
            });
        }
        if let Some(p) = self.mean_prior {
            defs.push(ParamDef {
                name: "mu".into(),
                kind: ParamKind::Mean,
                prior: p,
            });
        }
        for (j, name) in self.base.family.hyper_names().iter().enumerate() {
            defs.push(ParamDef {
                name: (*name).to_string(),
                kind: ParamKind::BaseHyper(j),
                prior: self.base_priors[j],
            });
        }
        for (j, name) in self.extra_hyper_names().iter().enumerate() {
            defs.push(ParamDef {
                name: format!("{name}{}", self.variant.suffix()),
                kind: ParamKind::ExtraHyper(j),
                prior: self.extra_priors[j],
            });
        }
        let multi = self.noise_u.len() > 1;
        for (g, spec) in self.noise_u.iter().enumerate() {
            if let NoiseSpec::Sampled(p) = spec {
                defs.push(ParamDef {
                    name: if multi {
                        format!("sigma_u{g}")
                    } else {
                        "sigma_u".into()
                    },
                    kind: ParamKind::NoiseU(g),
                    prior: *p,
                });
            }
        }
        if let NoiseSpec::Sampled(p) = self.noise_f {
            defs.push(ParamDef {
                name: "sigma_f".into(),
                kind: ParamKind::NoiseF,
                prior: p,
            });
        }
        ParamLayout { defs }
    }

    /// Concrete model pieces at a constrained parameter vector.
    pub fn unpack(&self, layout: &ParamLayout, x: &[f64]) -> Unpacked {
        let mut phi = vec![f64::NAN; self.op.param_names.len()];
        let mut mean_c = 0.0;
        let n_base = self.base.family.hyper_names().len();
        let mut base_flat = vec![f64::NAN; n_base];
        let extra_names = self.extra_hyper_names();
        let mut extra_flat = vec![f64::NAN; extra_names.len()];
        let mut sigma_u: Vec<f64> = self
            .noise_u
            .iter()
            .map(|s| match s {
                NoiseSpec::Fixed(v) => *v,
                NoiseSpec::Sampled(_) => f64::NAN,
            })
            .collect();
        let mut sigma_f = match self.noise_f {
            NoiseSpec::Fixed(v) => v,
            NoiseSpec::Sampled(_) => f64::NAN,
        };

        for (def, &v) in layout.defs.iter().zip(x) {
            match def.kind {
                ParamKind::Phi(i) => phi[i] = v,
                ParamKind::Mean => mean_c = v,
                ParamKind::BaseHyper(j) => base_flat[j] = v,
                ParamKind::ExtraHyper(j) => extra_flat[j] = v,
                ParamKind::NoiseU(g) => sigma_u[g] = v,
                ParamKind::NoiseF => sigma_f = v,
            }
        }

        let hp = HyperParams::from_flat(self.base.family, &base_flat);
        let extra_hp = self.variant.extra_family().map(|fam| {
            // Rebuild the extra family's flat order, inserting the tied period.
            let mut flat = Vec::with_capacity(fam.hyper_names().len());
            let mut free = extra_flat.iter();
            for name in fam.hyper_names() {
                if self.period_tied() && *name == "period" {
                    flat.push(hp.period.unwrap());
                } else {
                    flat.push(*free.next().unwrap());
                }
            }
            HyperParams::from_flat(fam, &flat)
        });

        Unpacked {
            phi,
            mean_u: MeanFn::Const(mean_c),
            hp,
            extra_hp,
            noise: NoiseParams { sigma_u, sigma_f },
        }
    }

    /// Concrete [`BlockKernel`] and [`ModelVariant`] at a parameter vector,
    /// for the dense model operations.
    pub fn concrete(
        &self,
        layout: &ParamLayout,
        x: &[f64],
    ) -> Result<(BlockKernel, MeanFn, ModelVariant, NoiseParams), InferError> {
        let u = self.unpack(layout, x);
        let phi = PhysParams::new(&self.op, u.phi.clone())?;
        let bk = BlockKernel::new(self.base, u.hp.clone(), self.op.clone(), phi)?;
        let variant = match (&self.variant, &u.extra_hp) {
            (VariantSpec::Plain, _) => ModelVariant::Plain,
            (VariantSpec::Discrepancy(fam), Some(hp)) => ModelVariant::Discrepancy(ExtraKernel {
                spec: KernelSpec::new(*fam),
                hp: hp.clone(),
            }),
            (VariantSpec::Bias(fam), Some(hp)) => ModelVariant::Bias(ExtraKernel {
                spec: KernelSpec::new(*fam),
                hp: hp.clone(),
            }),
            _ => unreachable!("variant with missing extra hyperparameters"),
        };
        Ok((bk, u.mean_u.clone(), variant, u.noise))
    }
}

/// Concrete model pieces at one parameter vector.
#[derive(Clone, Debug)]
pub struct Unpacked {
    pub phi: Vec<f64>,
    pub mean_u: MeanFn,
    pub hp: HyperParams,
    pub extra_hp: Option<HyperParams>,
    pub noise: NoiseParams,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::wk2_operator;

    fn wk2_delta_periodic() -> PiModel {
        PiModel {
            base: KernelSpec::new(KernelFamily::Periodic1d),
            op: wk2_operator(),
            variant: VariantSpec::Discrepancy(KernelFamily::Periodic1d),
            mean_prior: Some(Prior::half_normal(100.0)),
            phi_priors: vec![Prior::uniform(0.5, 3.0), Prior::uniform(0.5, 3.0)],
            base_priors: vec![
                Prior::half_normal(50.0),
                Prior::half_normal(1.0),
                Prior::uniform(0.8, 1.2),
            ],
            extra_priors: vec![Prior::half_normal(50.0), Prior::half_normal(1.0)],
            noise_u: vec![NoiseSpec::Sampled(Prior::half_normal(15.0))],
            noise_f: NoiseSpec::Sampled(Prior::half_normal(15.0)),
        }
    }

    #[test]
    fn layout_names_and_order() {
        let m = wk2_delta_periodic();
        m.validate().unwrap();
        let layout = m.layout();
        let names = layout.names();
        assert_eq!(
            names,
            vec![
                "R",
                "C",
                "mu",
                "sigma",
                "ell",
                "period",
                "sigma_delta",
                "ell_delta",
                "sigma_u",
                "sigma_f"
            ]
        );
    }

    #[test]
    fn periodic_discrepancy_shares_the_base_period() {
        let m = wk2_delta_periodic();
        assert!(m.period_tied());
        let layout = m.layout();
        let x = vec![1.0, 1.1, 90.0, 20.0, 0.9, 1.04, 5.0, 0.7, 4.0, 10.0];
        let u = m.unpack(&layout, &x);
        assert_eq!(u.extra_hp.as_ref().unwrap().period, Some(1.04));
        assert_eq!(u.extra_hp.as_ref().unwrap().sigma, 5.0);
        assert_eq!(u.hp.period, Some(1.04));
        assert_eq!(u.noise.sigma_f, 10.0);
    }

    #[test]
    fn fixed_noise_is_not_a_parameter() {
        let mut m = wk2_delta_periodic();
        m.noise_f = NoiseSpec::Fixed(9.5);
        let layout = m.layout();
        assert!(layout.index_of("sigma_f").is_none());
        let x = vec![1.0, 1.1, 90.0, 20.0, 0.9, 1.04, 5.0, 0.7, 4.0];
        let u = m.unpack(&layout, &x);
        assert_eq!(u.noise.sigma_f, 9.5);
        assert_eq!(u.noise.sigma_u, vec![4.0]);
    }

    #[test]
    fn constrained_round_trip_through_layout() {
        let m = wk2_delta_periodic();
        let layout = m.layout();
        let x = vec![1.3, 2.2, 42.0, 11.0, 1.1, 0.97, 3.0, 0.4, 2.0, 8.0];
        let z = layout.unconstrain(&x);
        let back = layout.constrain(&z);
        for (a, b) in x.iter().zip(&back) {
            approx::assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }
}
