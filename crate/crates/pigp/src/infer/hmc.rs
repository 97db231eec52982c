//! Adaptive Hamiltonian Monte Carlo.
//!
//! Fixed-length leapfrog trajectories with jittered path length, dual
//! averaging of the step size toward a target acceptance rate, and diagonal
//! mass-matrix adaptation over expanding warmup windows. Chains run
//! concurrently; each draws from its own counter-based RNG stream, so the
//! results do not depend on scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::infer::posterior::LogDensity;
use crate::infer::InferError;

/// Sampler configuration.
#[derive(Clone, Debug)]
pub struct HmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub iters: usize,
    pub target_accept: f64,
    /// Base leapfrog path length; each trajectory uses a uniform fraction
    /// in [0.8, 1.0] of it.
    pub leapfrog: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            chains: 3,
            warmup: 1000,
            iters: 1000,
            target_accept: 0.8,
            leapfrog: 32,
            seed: 0,
        }
    }
}

impl HmcConfig {
    fn validate(&self) -> Result<(), InferError> {
        if self.warmup < 100 || self.iters < 100 {
            return Err(InferError::BadConfig(format!(
                "warmup ({}) and iters ({}) must both be at least 100",
                self.warmup, self.iters
            )));
        }
        if self.chains == 0 || self.leapfrog == 0 {
            return Err(InferError::BadConfig("chains and leapfrog must be positive".into()));
        }
        if !(0.0 < self.target_accept && self.target_accept < 1.0) {
            return Err(InferError::BadConfig("target_accept must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Posterior draws on the constrained scale, with sampler statistics.
#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: usize,
    pub iters: usize,
    /// Row-major `[chain][iter][param]`.
    pub data: Vec<f64>,
    pub accept_rate: Vec<f64>,
    pub divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub numerical_rejects: u64,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.data[(chain * self.iters + iter) * self.dim() + param]
    }

    /// All draws of one parameter from one chain.
    pub fn chain_param(&self, chain: usize, param: usize) -> Vec<f64> {
        (0..self.iters).map(|i| self.get(chain, i, param)).collect()
    }

    /// All draws of one parameter, chains concatenated.
    pub fn param_draws(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.chains * self.iters);
        for c in 0..self.chains {
            for i in 0..self.iters {
                out.push(self.get(c, i, param));
            }
        }
        out
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn mean(&self, param: usize) -> f64 {
        let d = self.param_draws(param);
        d.iter().sum::<f64>() / d.len() as f64
    }

    pub fn sd(&self, param: usize) -> f64 {
        crate::linalg::sample_sd(&self.param_draws(param))
    }

    /// Linear-interpolation quantile of one parameter's pooled draws.
    pub fn quantile(&self, param: usize, q: f64) -> f64 {
        let mut d = self.param_draws(param);
        quantile_sorted_mut(&mut d, q)
    }

    /// Central interval `[ (1-mass)/2, 1 - (1-mass)/2 ]`.
    pub fn credible_interval(&self, param: usize, mass: f64) -> (f64, f64) {
        let tail = (1.0 - mass) / 2.0;
        let mut d = self.param_draws(param);
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (
            quantile_presorted(&d, tail),
            quantile_presorted(&d, 1.0 - tail),
        )
    }
}

pub(crate) fn quantile_sorted_mut(xs: &mut [f64], q: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_presorted(xs, q)
}

fn quantile_presorted(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        xs[lo]
    } else {
        let w = pos - lo as f64;
        xs[lo] * (1.0 - w) + xs[hi] * w
    }
}

/// Per-chain initial position on the unconstrained scale.
#[derive(Clone, Debug)]
pub enum ChainInit {
    /// Explicit position per chain (cycled if fewer than chains).
    Points(Vec<Vec<f64>>),
    /// A common point with per-chain Gaussian jitter of the given scale.
    Jittered(Vec<f64>, f64),
}

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.m += 1.0;
        let frac = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let w = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn restart(&mut self, eps: f64) {
        *self = DualAveraging::new(eps, self.target);
    }
}

struct ChainOut {
    draws_z: Vec<f64>,
    accept_rate: f64,
    divergences: usize,
    step_size: f64,
    any_accept: bool,
}

const DIVERGENCE_ENERGY: f64 = 1000.0;

fn leapfrog(
    target: &dyn LogDensity,
    z: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    inv_mass: &[f64],
    eps: f64,
    steps: usize,
) -> f64 {
    let dim = z.len();
    let mut logp = 0.0;
    for step in 0..steps {
        for i in 0..dim {
            p[i] += 0.5 * eps * grad[i];
        }
        for i in 0..dim {
            z[i] += eps * inv_mass[i] * p[i];
        }
        logp = target.logp_grad(z, grad);
        if !logp.is_finite() {
            return f64::NEG_INFINITY;
        }
        for i in 0..dim {
            p[i] += 0.5 * eps * grad[i];
        }
        let _ = step;
    }
    logp
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(inv_mass)
        .map(|(pi, mi)| pi * pi * mi)
        .sum::<f64>()
}

/// A reasonable initial step size: halve or double until the one-step
/// acceptance probability crosses one half.
fn find_initial_step(
    target: &dyn LogDensity,
    z0: &[f64],
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = z0.len();
    let mut eps = 0.1;
    let mut grad0 = vec![0.0; dim];
    let logp0 = target.logp_grad(z0, &mut grad0);
    if !logp0.is_finite() {
        return eps;
    }
    let p0: Vec<f64> = inv_mass
        .iter()
        .map(|mi| {
            let n: f64 = StandardNormal.sample(rng);
            n / mi.sqrt()
        })
        .collect();
    let h0 = -logp0 + kinetic(&p0, inv_mass);
    let ratio_at = |eps: f64| -> f64 {
        let mut z = z0.to_vec();
        let mut p = p0.clone();
        let mut grad = grad0.clone();
        let logp = leapfrog(target, &mut z, &mut p, &mut grad, inv_mass, eps, 1);
        if !logp.is_finite() {
            return f64::NEG_INFINITY;
        }
        -(-logp + kinetic(&p, inv_mass)) + h0
    };
    let dir: f64 = if ratio_at(eps) > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..40 {
        let next = eps * 2.0f64.powf(dir);
        let r = ratio_at(next);
        let keep_going = if dir > 0.0 {
            r > (0.5f64).ln()
        } else {
            !(r > (0.5f64).ln())
        };
        if keep_going && next.is_finite() && next > 1e-10 && next < 1e3 {
            eps = next;
        } else {
            if dir < 0.0 {
                eps = next;
            }
            break;
        }
    }
    eps.clamp(1e-8, 1e2)
}

fn run_chain(
    target: &dyn LogDensity,
    cfg: &HmcConfig,
    chain: usize,
    z0: Vec<f64>,
) -> ChainOut {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);

    let mut z = z0;
    let mut grad = vec![0.0; dim];
    let mut logp = target.logp_grad(&z, &mut grad);
    let mut inv_mass = vec![1.0; dim];

    let mut eps = find_initial_step(target, &z, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);

    // Warmup schedule: step-size-only head and tail around expanding
    // variance-estimation windows. The last window merges into the remainder
    // so the tail runs with a frozen mass matrix, and the step size that
    // ships is the average adapted value over the late tail, which is robust
    // when the tail is short.
    let head = (cfg.warmup as f64 * 0.15) as usize;
    let tail = ((cfg.warmup as f64 * 0.20) as usize).max(20);
    let adapt_end = cfg.warmup.saturating_sub(tail);
    let mut window = 25usize.min(adapt_end.saturating_sub(head).max(1));
    let mut window_end = (head + window).min(adapt_end);
    let mut window_sum = vec![0.0; dim];
    let mut window_sq = vec![0.0; dim];
    let mut window_n = 0usize;
    let late_tail = (tail / 2).max(10);
    let mut tail_log_eps: Vec<f64> = Vec::with_capacity(tail);

    let mut divergences = 0usize;
    let mut accepted = 0usize;
    let mut accept_acc = 0.0;
    let mut draws_z = Vec::with_capacity(cfg.iters * dim);

    let total = cfg.warmup + cfg.iters;
    for it in 0..total {
        let warming = it < cfg.warmup;
        // Momentum refresh.
        let p0: Vec<f64> = inv_mass
            .iter()
            .map(|mi| {
                let n: f64 = StandardNormal.sample(&mut rng);
                n / mi.sqrt()
            })
            .collect();
        let h0 = -logp + kinetic(&p0, &inv_mass);

        let frac: f64 = rng.gen_range(0.8..1.0);
        let steps = ((cfg.leapfrog as f64 * frac).round() as usize).max(1);
        let mut z_new = z.clone();
        let mut p_new = p0.clone();
        let mut grad_new = grad.clone();
        let logp_new = leapfrog(target, &mut z_new, &mut p_new, &mut grad_new, &inv_mass, eps, steps);

        let (accept_prob, divergent) = if logp_new.is_finite() {
            let h1 = -logp_new + kinetic(&p_new, &inv_mass);
            let de = h1 - h0;
            if de.abs() > DIVERGENCE_ENERGY || !de.is_finite() {
                (0.0, true)
            } else {
                ((-de).exp().min(1.0), false)
            }
        } else {
            (0.0, true)
        };
        if divergent && !warming {
            divergences += 1;
        }
        let u: f64 = rng.gen_range(0.0..1.0);
        if u < accept_prob {
            z = z_new;
            grad = grad_new;
            logp = logp_new;
            if !warming {
                accepted += 1;
            }
        }

        if warming {
            da.update(accept_prob);
            eps = da.current();
            // Accumulate posterior variance estimates inside windows.
            if it >= head && it < adapt_end {
                for i in 0..dim {
                    window_sum[i] += z[i];
                    window_sq[i] += z[i] * z[i];
                }
                window_n += 1;
                if it + 1 == window_end {
                    if window_n >= 10 {
                        let nf = window_n as f64;
                        for i in 0..dim {
                            let mean = window_sum[i] / nf;
                            let var = (window_sq[i] / nf - mean * mean).max(0.0);
                            // Regularize toward unit scale as Stan does.
                            inv_mass[i] = (nf / (nf + 5.0)) * var + (5.0 / (nf + 5.0)) * 1e-3;
                            inv_mass[i] = inv_mass[i].max(1e-8);
                        }
                        eps = find_initial_step(target, &z, &inv_mass, &mut rng);
                        da.restart(eps);
                    }
                    window_sum.iter_mut().for_each(|v| *v = 0.0);
                    window_sq.iter_mut().for_each(|v| *v = 0.0);
                    window_n = 0;
                    window *= 2;
                    window_end = (it + 1 + window).min(adapt_end);
                    // Too-short trailing windows merge into this one.
                    if adapt_end - window_end < window / 2 {
                        window_end = adapt_end;
                    }
                }
            }
            if it >= adapt_end {
                tail_log_eps.push(eps.ln());
            }
            if it + 1 == cfg.warmup {
                let k = late_tail.min(tail_log_eps.len()).max(1);
                let recent = &tail_log_eps[tail_log_eps.len() - k..];
                eps = (recent.iter().sum::<f64>() / k as f64).exp();
            }
        } else {
            accept_acc += accept_prob;
            draws_z.extend_from_slice(&z);
        }
    }

    ChainOut {
        draws_z,
        accept_rate: accept_acc / cfg.iters as f64,
        divergences,
        step_size: eps,
        any_accept: accepted > 0,
    }
}

/// Run adaptive HMC over any differentiable target. Draws are returned on
/// the unconstrained scale in `[chain][iter][param]` order.
pub fn sample_unconstrained(
    target: &dyn LogDensity,
    cfg: &HmcConfig,
    init: &ChainInit,
) -> Result<(Vec<Vec<f64>>, Vec<ChainStats>), InferError> {
    cfg.validate()?;
    let dim = target.dim();
    let inits: Vec<Vec<f64>> = (0..cfg.chains)
        .map(|c| match init {
            ChainInit::Points(pts) => pts[c % pts.len()].clone(),
            ChainInit::Jittered(center, scale) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
                rng.set_stream(c as u64 + 1);
                center
                    .iter()
                    .map(|v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + scale * n
                    })
                    .collect()
            }
        })
        .collect();

    let outs: Vec<ChainOut> = inits
        .into_par_iter()
        .enumerate()
        .map(|(c, z0)| run_chain(target, cfg, c, z0))
        .collect();

    if outs.iter().all(|o| !o.any_accept) {
        return Err(InferError::AllChainsDiverged {
            step_size: outs.last().map_or(f64::NAN, |o| o.step_size),
        });
    }

    let stats = outs
        .iter()
        .map(|o| ChainStats {
            accept_rate: o.accept_rate,
            divergences: o.divergences,
            step_size: o.step_size,
        })
        .collect();
    let draws = outs
        .into_iter()
        .map(|o| {
            debug_assert_eq!(o.draws_z.len(), cfg.iters * dim);
            o.draws_z
        })
        .collect();
    Ok((draws, stats))
}

/// Per-chain sampler statistics.
#[derive(Clone, Copy, Debug)]
pub struct ChainStats {
    pub accept_rate: f64,
    pub divergences: usize,
    pub step_size: f64,
}

/// Sample a model posterior and return draws on the constrained scale.
pub fn sample_posterior(
    posterior: &crate::infer::posterior::Posterior<'_>,
    cfg: &HmcConfig,
    init: &ChainInit,
) -> Result<PosteriorDraws, InferError> {
    let (draws_z, stats) = sample_unconstrained(posterior, cfg, init)?;
    let dim = posterior.dim();
    let mut data = Vec::with_capacity(cfg.chains * cfg.iters * dim);
    for chain in &draws_z {
        for row in chain.chunks(dim) {
            data.extend(posterior.layout.constrain(row));
        }
    }
    Ok(PosteriorDraws {
        names: posterior.layout.names(),
        chains: cfg.chains,
        iters: cfg.iters,
        data,
        accept_rate: stats.iter().map(|s| s.accept_rate).collect(),
        divergences: stats.iter().map(|s| s.divergences).collect(),
        step_sizes: stats.iter().map(|s| s.step_size).collect(),
        numerical_rejects: posterior.numerical_rejects(),
    })
}

/// Fit the exact model with HMC.
///
/// Chains start jittered around a short multi-start MAP estimate; GP
/// hyperposteriors have far-away degenerate local modes (signal scale or
/// lengthscale collapsed to zero) that trap prior-initialized chains, and
/// the optimizer reliably lands in the dominant basin. If the optimizer
/// fails the chains fall back to prior draws.
pub fn hmc_sample(
    model: &crate::infer::PiModel,
    obs: &crate::model::ObservationSet,
    cfg: &HmcConfig,
) -> Result<PosteriorDraws, InferError> {
    model.validate()?;
    let posterior = crate::infer::posterior::Posterior::exact(model, obs);
    let map_cfg = crate::infer::map::MapConfig {
        starts: 4,
        seed: cfg.seed,
        ..Default::default()
    };
    let init = match crate::infer::map::map_estimate(model, obs, &map_cfg) {
        Ok(m) => ChainInit::Jittered(m.unconstrained, 0.2),
        Err(_) => prior_init(&posterior.layout, cfg),
    };
    sample_posterior(&posterior, cfg, &init)
}

/// Independent prior draws as chain starting points.
pub fn prior_init(layout: &crate::infer::ParamLayout, cfg: &HmcConfig) -> ChainInit {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let pts = (0..cfg.chains)
        .map(|_| layout.unconstrain(&layout.sample_prior(&mut rng)))
        .collect();
    ChainInit::Points(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard normal in `dim` dimensions.
    struct StdNormal {
        dim: usize,
    }

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.dim
        }
        fn logp_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..self.dim {
                lp -= 0.5 * z[i] * z[i];
                grad[i] = -z[i];
            }
            lp
        }
    }

    #[test]
    fn recovers_standard_normal_moments() {
        let target = StdNormal { dim: 2 };
        let cfg = HmcConfig {
            chains: 4,
            warmup: 500,
            iters: 2000,
            seed: 42,
            leapfrog: 16,
            ..HmcConfig::default()
        };
        let (draws, stats) = sample_unconstrained(
            &target,
            &cfg,
            &ChainInit::Points(vec![vec![0.5, -0.5]]),
        )
        .unwrap();
        let n = cfg.chains * cfg.iters;
        for p in 0..2 {
            let all: Vec<f64> = draws
                .iter()
                .flat_map(|c| c.chunks(2).map(move |row| row[p]))
                .collect();
            assert_eq!(all.len(), n);
            let mean = all.iter().sum::<f64>() / n as f64;
            let sd = crate::linalg::sample_sd(&all);
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
        }
        for s in stats {
            assert!(s.accept_rate > 0.6, "acceptance {}", s.accept_rate);
            assert_eq!(s.divergences, 0);
        }
    }

    #[test]
    fn fixed_seed_reproduces_bit_identical_draws() {
        let target = StdNormal { dim: 3 };
        let cfg = HmcConfig {
            chains: 2,
            warmup: 150,
            iters: 150,
            seed: 7,
            leapfrog: 8,
            ..HmcConfig::default()
        };
        let init = ChainInit::Jittered(vec![0.0; 3], 1.0);
        let (a, _) = sample_unconstrained(&target, &cfg, &init).unwrap();
        let (b, _) = sample_unconstrained(&target, &cfg, &init).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_sanity_is_enforced() {
        let target = StdNormal { dim: 1 };
        let cfg = HmcConfig {
            warmup: 10,
            ..HmcConfig::default()
        };
        assert!(matches!(
            sample_unconstrained(&target, &cfg, &ChainInit::Points(vec![vec![0.0]])),
            Err(InferError::BadConfig(_))
        ));
    }

    #[test]
    fn quantiles_interpolate() {
        let mut xs = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_sorted_mut(&mut xs, 0.5), 2.5);
        assert_eq!(quantile_sorted_mut(&mut xs, 0.0), 1.0);
        assert_eq!(quantile_sorted_mut(&mut xs, 1.0), 4.0);
    }
}
