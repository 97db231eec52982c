//! Joint multi-output model assembly, exact marginal likelihood, and
//! predictive distributions.
//!
//! The joint covariance over stacked observations `y = [y_u; y_f]` is
//!
//! ```text
//! K = [ K_uu (+ K_extra)   K_uf ]        S = diag(sigma_u(group)^2 ; sigma_f^2)
//!     [ K_fu               K_ff ]
//! ```
//!
//! where `K_extra` is a discrepancy or measurement-bias kernel attached to
//! the u channel only. Predictions differ between the two: the discrepancy
//! process is part of the predicted signal, the bias process is learned
//! during fitting but removed from predictions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kernel::{gram, DerivOrder, HyperParams, Inputs, KernelError, KernelSpec};
use crate::linalg::{cholesky_with_jitter, mvn_logpdf, sample_sd, NumericalError};
use crate::physics::{block_pieces, mean_f, Block, BlockKernel, MeanFn, PhysicsError};

/// Observed data for the two channels, with per-observation noise groups on u.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    pub x_u: Inputs,
    pub y_u: Vec<f64>,
    pub x_f: Inputs,
    pub y_f: Vec<f64>,
    /// Noise-group id per u observation; group count is `max + 1`.
    pub noise_group_u: Vec<usize>,
}

impl ObservationSet {
    pub fn new(
        x_u: Inputs,
        y_u: Vec<f64>,
        x_f: Inputs,
        y_f: Vec<f64>,
        noise_group_u: Vec<usize>,
    ) -> Result<Self, ModelError> {
        if x_u.len() != y_u.len() || x_u.len() != noise_group_u.len() {
            return Err(ModelError::Shape(format!(
                "u channel: {} inputs, {} outputs, {} noise groups",
                x_u.len(),
                y_u.len(),
                noise_group_u.len()
            )));
        }
        if x_f.len() != y_f.len() {
            return Err(ModelError::Shape(format!(
                "f channel: {} inputs, {} outputs",
                x_f.len(),
                y_f.len()
            )));
        }
        if x_u.len() + x_f.len() == 0 {
            return Err(ModelError::Shape("no observations in either channel".into()));
        }
        Ok(ObservationSet {
            x_u,
            y_u,
            x_f,
            y_f,
            noise_group_u,
        })
    }

    /// Single-group constructor.
    pub fn single_group(
        x_u: Inputs,
        y_u: Vec<f64>,
        x_f: Inputs,
        y_f: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let groups = vec![0; y_u.len()];
        ObservationSet::new(x_u, y_u, x_f, y_f, groups)
    }

    pub fn n_u(&self) -> usize {
        self.y_u.len()
    }

    pub fn n_f(&self) -> usize {
        self.y_f.len()
    }

    pub fn n_noise_groups(&self) -> usize {
        self.noise_group_u.iter().copied().max().map_or(1, |m| m + 1)
    }

    /// Stacked observation vector `[y_u; y_f]`.
    pub fn stacked_y(&self) -> DVector<f64> {
        let mut y = Vec::with_capacity(self.n_u() + self.n_f());
        y.extend_from_slice(&self.y_u);
        y.extend_from_slice(&self.y_f);
        DVector::from_vec(y)
    }

    /// Scale used to floor zero noise groups.
    pub fn u_scale(&self) -> f64 {
        let sd = sample_sd(&self.y_u);
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    }
}

/// An additional kernel on the u channel with concrete hyperparameters.
#[derive(Clone, Debug)]
pub struct ExtraKernel {
    pub spec: KernelSpec,
    pub hp: HyperParams,
}

/// Model variant: plain physics, additive discrepancy, or measurement bias.
#[derive(Clone, Debug)]
pub enum ModelVariant {
    Plain,
    Discrepancy(ExtraKernel),
    Bias(ExtraKernel),
}

impl ModelVariant {
    fn extra(&self) -> Option<&ExtraKernel> {
        match self {
            ModelVariant::Plain => None,
            ModelVariant::Discrepancy(e) | ModelVariant::Bias(e) => Some(e),
        }
    }
}

/// Observation noise standard deviations: one per u group, one for f.
#[derive(Clone, Debug)]
pub struct NoiseParams {
    pub sigma_u: Vec<f64>,
    pub sigma_f: f64,
}

/// Relative floor applied to zero noise groups so `S` stays invertible.
pub const NOISE_FLOOR_REL: f64 = 1e-6;

impl NoiseParams {
    pub fn validate(&self, obs: &ObservationSet) -> Result<(), ModelError> {
        if self.sigma_u.len() < obs.n_noise_groups() && obs.n_u() > 0 {
            return Err(ModelError::Shape(format!(
                "{} noise groups in data, {} sigma_u entries",
                obs.n_noise_groups(),
                self.sigma_u.len()
            )));
        }
        if self.sigma_u.iter().chain([&self.sigma_f]).any(|s| *s < 0.0) {
            return Err(ModelError::Shape("negative noise standard deviation".into()));
        }
        Ok(())
    }

    /// Per-observation u noise with the zero floor applied.
    pub fn sigma_u_at(&self, group: usize, scale: f64) -> f64 {
        self.sigma_u[group].max(NOISE_FLOOR_REL * scale)
    }

    pub fn sigma_f_eff(&self, scale: f64) -> f64 {
        self.sigma_f.max(NOISE_FLOOR_REL * scale)
    }
}

/// A dense joint Gaussian over the stacked observations.
#[derive(Clone, Debug)]
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Numerical(#[from] NumericalError),
}

/// Gram matrix of one physics block over two point sets.
pub fn block_gram(
    bk: &BlockKernel,
    block: Block,
    pts_p: &Inputs,
    pts_q: &Inputs,
) -> Result<DMatrix<f64>, ModelError> {
    let (n, m) = (pts_p.len(), pts_q.len());
    let mut acc = DMatrix::zeros(n, m);
    let phi = bk.phi.values();
    for (coeff, order) in block_pieces(&bk.op, block) {
        let g = gram(&bk.spec, &bk.hp, &order, pts_p, pts_q)?;
        acc += g * coeff.value(phi);
    }
    Ok(acc)
}

fn extra_gram(
    extra: Option<&ExtraKernel>,
    pts_p: &Inputs,
    pts_q: &Inputs,
) -> Result<Option<DMatrix<f64>>, ModelError> {
    match extra {
        None => Ok(None),
        Some(e) => Ok(Some(gram(&e.spec, &e.hp, &DerivOrder::zero(), pts_p, pts_q)?)),
    }
}

/// Mean vector `[mu_u(X_u); mu_f(X_f)]`.
pub fn joint_mean(
    bk: &BlockKernel,
    mean_u: &MeanFn,
    obs: &ObservationSet,
) -> Result<DVector<f64>, ModelError> {
    let mu_f = mean_f(mean_u, &bk.op, &bk.phi)?;
    let mut m = Vec::with_capacity(obs.n_u() + obs.n_f());
    for p in obs.x_u.iter() {
        m.push(mean_u.eval(p));
    }
    for p in obs.x_f.iter() {
        m.push(mu_f.eval(p));
    }
    Ok(DVector::from_vec(m))
}

/// Assemble the joint Gaussian of the stacked observations, including the
/// variant's extra kernel on the u block and the diagonal noise.
pub fn assemble_joint(
    bk: &BlockKernel,
    mean_u: &MeanFn,
    variant: &ModelVariant,
    noise: &NoiseParams,
    obs: &ObservationSet,
) -> Result<JointGaussian, ModelError> {
    noise.validate(obs)?;
    let (n_u, n_f) = (obs.n_u(), obs.n_f());
    let n = n_u + n_f;
    let mut cov = DMatrix::zeros(n, n);

    if n_u > 0 {
        let mut uu = block_gram(bk, Block::UU, &obs.x_u, &obs.x_u)?;
        if let Some(e) = extra_gram(variant.extra(), &obs.x_u, &obs.x_u)? {
            uu += e;
        }
        cov.view_mut((0, 0), (n_u, n_u)).copy_from(&uu);
    }
    if n_u > 0 && n_f > 0 {
        let uf = block_gram(bk, Block::UF, &obs.x_u, &obs.x_f)?;
        cov.view_mut((0, n_u), (n_u, n_f)).copy_from(&uf);
        cov.view_mut((n_u, 0), (n_f, n_u)).copy_from(&uf.transpose());
    }
    if n_f > 0 {
        let ff = block_gram(bk, Block::FF, &obs.x_f, &obs.x_f)?;
        cov.view_mut((n_u, n_u), (n_f, n_f)).copy_from(&ff);
    }

    let scale = obs.u_scale();
    for (i, &g) in obs.noise_group_u.iter().enumerate() {
        let s = noise.sigma_u_at(g, scale);
        cov[(i, i)] += s * s;
    }
    let sf = noise.sigma_f_eff(scale);
    for i in n_u..n {
        cov[(i, i)] += sf * sf;
    }

    Ok(JointGaussian {
        mean: joint_mean(bk, mean_u, obs)?,
        cov,
    })
}

/// Exact log marginal likelihood of the stacked observations.
pub fn log_marginal(joint: &JointGaussian, y: &DVector<f64>) -> Result<f64, ModelError> {
    if y.len() != joint.mean.len() {
        return Err(ModelError::Shape(format!(
            "y has {} entries, joint has {}",
            y.len(),
            joint.mean.len()
        )));
    }
    let chol = cholesky_with_jitter(&joint.cov)?;
    Ok(mvn_logpdf(y, &joint.mean, &chol)?)
}

/// Which channel a prediction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    U,
    F,
}

fn predict(
    bk: &BlockKernel,
    mean_u: &MeanFn,
    variant: &ModelVariant,
    noise: &NoiseParams,
    obs: &ObservationSet,
    xstar: &Inputs,
    channel: Channel,
) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    let joint = assemble_joint(bk, mean_u, variant, noise, obs)?;
    let chol = cholesky_with_jitter(&joint.cov)?;
    let (n_u, n_f, m) = (obs.n_u(), obs.n_f(), xstar.len());

    // Cross-covariance V between training observations (rows) and the
    // prediction points (columns). The discrepancy kernel contributes to the
    // u-channel cross term; the bias kernel never does.
    let mut v = DMatrix::zeros(n_u + n_f, m);
    match channel {
        Channel::U => {
            if n_u > 0 {
                let mut top = block_gram(bk, Block::UU, &obs.x_u, xstar)?;
                if let ModelVariant::Discrepancy(e) = variant {
                    top += extra_gram(Some(e), &obs.x_u, xstar)?.unwrap();
                }
                v.view_mut((0, 0), (n_u, m)).copy_from(&top);
            }
            if n_f > 0 {
                let bot = block_gram(bk, Block::FU, &obs.x_f, xstar)?;
                v.view_mut((n_u, 0), (n_f, m)).copy_from(&bot);
            }
        }
        Channel::F => {
            if n_u > 0 {
                let top = block_gram(bk, Block::UF, &obs.x_u, xstar)?;
                v.view_mut((0, 0), (n_u, m)).copy_from(&top);
            }
            if n_f > 0 {
                let bot = block_gram(bk, Block::FF, &obs.x_f, xstar)?;
                v.view_mut((n_u, 0), (n_f, m)).copy_from(&bot);
            }
        }
    }

    // Prior covariance at the prediction points.
    let mut prior = match channel {
        Channel::U => block_gram(bk, Block::UU, xstar, xstar)?,
        Channel::F => block_gram(bk, Block::FF, xstar, xstar)?,
    };
    if channel == Channel::U {
        if let ModelVariant::Discrepancy(e) = variant {
            prior += extra_gram(Some(e), xstar, xstar)?.unwrap();
        }
    }

    // Prior mean at the prediction points.
    let mu_star = match channel {
        Channel::U => DVector::from_iterator(m, xstar.iter().map(|p| mean_u.eval(p))),
        Channel::F => {
            let mu_f = mean_f(mean_u, &bk.op, &bk.phi)?;
            DVector::from_iterator(m, xstar.iter().map(|p| mu_f.eval(p)))
        }
    };

    let resid = obs.stacked_y() - &joint.mean;
    let alpha = chol.solve(&resid);
    let mean = mu_star + v.transpose() * alpha;
    let w = chol.solve_mat(&v);
    let cov = prior - v.transpose() * w;
    Ok((mean, cov))
}

/// Posterior of `u` at new points; latent-function uncertainty, no
/// observation noise added.
pub fn predict_u(
    bk: &BlockKernel,
    mean_u: &MeanFn,
    variant: &ModelVariant,
    noise: &NoiseParams,
    obs: &ObservationSet,
    xstar: &Inputs,
) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    predict(bk, mean_u, variant, noise, obs, xstar, Channel::U)
}

/// Posterior of `f` at new points.
pub fn predict_f(
    bk: &BlockKernel,
    mean_u: &MeanFn,
    variant: &ModelVariant,
    noise: &NoiseParams,
    obs: &ObservationSet,
    xstar: &Inputs,
) -> Result<(DVector<f64>, DMatrix<f64>), ModelError> {
    predict(bk, mean_u, variant, noise, obs, xstar, Channel::F)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;
    use crate::physics::{wk2_operator, PhysParams};
    use approx::assert_relative_eq;

    fn wk2_bk(r: f64, c: f64, sigma: f64, ell: f64) -> BlockKernel {
        let op = wk2_operator();
        let phi = PhysParams::new(&op, vec![r, c]).unwrap();
        BlockKernel::new(
            KernelSpec::new(KernelFamily::Se1d),
            HyperParams::se(sigma, ell),
            op,
            phi,
        )
        .unwrap()
    }

    fn toy_obs() -> ObservationSet {
        ObservationSet::single_group(
            Inputs::from_1d(vec![0.0, 0.35, 0.8]),
            vec![1.2, -0.4, 0.9],
            Inputs::from_1d(vec![0.1, 0.6]),
            vec![0.3, -0.2],
        )
        .unwrap()
    }

    #[test]
    fn scalar_log_marginal_closed_form() {
        let obs = ObservationSet::single_group(
            Inputs::from_1d(vec![0.3]),
            vec![0.7],
            Inputs::from_1d(vec![]),
            vec![],
        )
        .unwrap();
        let bk = wk2_bk(1.0, 1.0, 1.5, 0.5);
        let noise = NoiseParams {
            sigma_u: vec![0.4],
            sigma_f: 1.0,
        };
        let joint = assemble_joint(&bk, &MeanFn::Const(0.0), &ModelVariant::Plain, &noise, &obs)
            .unwrap();
        let got = log_marginal(&joint, &obs.stacked_y()).unwrap();
        let v = 1.5_f64.powi(2) + 0.4_f64.powi(2) + joint.cov[(0, 0)] - (2.25 + 0.16);
        // jitter is part of the factorized matrix
        let veff = v + crate::linalg::JITTER_REL_START * joint.cov[(0, 0)];
        let expect = -0.5 * 0.7_f64.powi(2) / veff
            - 0.5 * (2.0 * std::f64::consts::PI * veff).ln();
        assert_relative_eq!(got, expect, max_relative = 1e-9);
    }

    #[test]
    fn covariance_matches_blockwise_oracle() {
        let bk = wk2_bk(1.25, 0.9, 1.3, 0.45);
        let obs = toy_obs();
        let noise = NoiseParams {
            sigma_u: vec![0.2],
            sigma_f: 0.3,
        };
        let joint = assemble_joint(&bk, &MeanFn::Const(0.5), &ModelVariant::Plain, &noise, &obs)
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut e = bk
                    .block_eval(Block::UU, obs.x_u.point(i), obs.x_u.point(j))
                    .unwrap();
                if i == j {
                    e += 0.04;
                }
                assert_relative_eq!(joint.cov[(i, j)], e, max_relative = 1e-13);
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let e = bk
                    .block_eval(Block::UF, obs.x_u.point(i), obs.x_f.point(j))
                    .unwrap();
                assert_relative_eq!(joint.cov[(i, 3 + j)], e, max_relative = 1e-13);
                let e2 = bk
                    .block_eval(Block::FU, obs.x_f.point(j), obs.x_u.point(i))
                    .unwrap();
                assert_relative_eq!(joint.cov[(3 + j, i)], e2, max_relative = 1e-13);
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let mut e = bk
                    .block_eval(Block::FF, obs.x_f.point(i), obs.x_f.point(j))
                    .unwrap();
                if i == j {
                    e += 0.09;
                }
                assert_relative_eq!(joint.cov[(3 + i, 3 + j)], e, max_relative = 1e-13);
            }
        }
        // mean is [mu_P, mu_P, mu_P, mu_P/R, mu_P/R]
        assert_relative_eq!(joint.mean[1], 0.5);
        assert_relative_eq!(joint.mean[4], 0.5 / 1.25);
    }

    #[test]
    fn no_f_observations_reduce_to_single_output_gp() {
        let bk = wk2_bk(1.0, 1.1, 1.2, 0.5);
        let obs = ObservationSet::single_group(
            Inputs::from_1d(vec![0.0, 0.4, 1.1]),
            vec![0.3, -0.1, 0.8],
            Inputs::from_1d(vec![]),
            vec![],
        )
        .unwrap();
        let noise = NoiseParams {
            sigma_u: vec![0.3],
            sigma_f: 2.0,
        };
        let joint = assemble_joint(&bk, &MeanFn::Const(0.0), &ModelVariant::Plain, &noise, &obs)
            .unwrap();
        // One-output oracle assembled directly from the base kernel.
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.2, 0.5);
        let mut k = gram(&spec, &hp, &DerivOrder::zero(), &obs.x_u, &obs.x_u).unwrap();
        for i in 0..3 {
            k[(i, i)] += 0.09;
        }
        assert_relative_eq!(
            log_marginal(&joint, &obs.stacked_y()).unwrap(),
            mvn_logpdf(
                &obs.stacked_y(),
                &DVector::zeros(3),
                &cholesky_with_jitter(&k).unwrap()
            )
            .unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn vanishing_discrepancy_matches_plain_variant() {
        let bk = wk2_bk(1.0, 1.1, 1.2, 0.5);
        let obs = toy_obs();
        let noise = NoiseParams {
            sigma_u: vec![0.2],
            sigma_f: 0.4,
        };
        let tiny = ModelVariant::Discrepancy(ExtraKernel {
            spec: KernelSpec::new(KernelFamily::Se1d),
            hp: HyperParams::se(1e-12, 0.3),
        });
        let a = assemble_joint(&bk, &MeanFn::Const(0.0), &tiny, &noise, &obs).unwrap();
        let b = assemble_joint(&bk, &MeanFn::Const(0.0), &ModelVariant::Plain, &noise, &obs)
            .unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(a.cov[(i, j)], b.cov[(i, j)], epsilon = 1e-18, max_relative = 1e-10);
            }
        }
        let xs = Inputs::from_1d(vec![0.2, 0.9]);
        let (mu_a, cov_a) = predict_u(&bk, &MeanFn::Const(0.0), &tiny, &noise, &obs, &xs).unwrap();
        let (mu_b, cov_b) =
            predict_u(&bk, &MeanFn::Const(0.0), &ModelVariant::Plain, &noise, &obs, &xs).unwrap();
        for i in 0..2 {
            assert_relative_eq!(mu_a[i], mu_b[i], max_relative = 1e-8, epsilon = 1e-12);
            assert_relative_eq!(cov_a[(i, i)], cov_b[(i, i)], max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn duplicated_inputs_stay_finite_through_jitter() {
        let bk = wk2_bk(1.0, 1.1, 1.0, 0.5);
        let obs = ObservationSet::single_group(
            Inputs::from_1d(vec![0.4, 0.4, 0.4]),
            vec![0.2, 0.2, 0.2],
            Inputs::from_1d(vec![]),
            vec![],
        )
        .unwrap();
        let noise = NoiseParams {
            sigma_u: vec![0.0],
            sigma_f: 1.0,
        };
        let joint = assemble_joint(&bk, &MeanFn::Const(0.0), &ModelVariant::Plain, &noise, &obs)
            .unwrap();
        let ll = log_marginal(&joint, &obs.stacked_y()).unwrap();
        assert!(ll.is_finite());
    }

    #[test]
    fn interpolation_at_training_points_with_tiny_noise() {
        let bk = wk2_bk(1.0, 1.1, 1.5, 0.6);
        let obs = toy_obs();
        let noise = NoiseParams {
            sigma_u: vec![1e-5],
            sigma_f: 1e-5,
        };
        let (mu, _) = predict_u(
            &bk,
            &MeanFn::Const(0.0),
            &ModelVariant::Plain,
            &noise,
            &obs,
            &obs.x_u.clone(),
        )
        .unwrap();
        for i in 0..obs.n_u() {
            assert_relative_eq!(mu[i], obs.y_u[i], max_relative = 1e-3, epsilon = 1e-4);
        }
    }

    #[test]
    fn zero_noise_group_is_floored() {
        let noise = NoiseParams {
            sigma_u: vec![0.0, 3.0],
            sigma_f: 0.0,
        };
        assert_relative_eq!(noise.sigma_u_at(0, 2.0), 2e-6);
        assert_relative_eq!(noise.sigma_u_at(1, 2.0), 3.0);
        assert_relative_eq!(noise.sigma_f_eff(2.0), 2e-6);
    }
}
