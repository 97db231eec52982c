//! MAP estimation: multi-start limited-memory BFGS on the log posterior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::infer::posterior::{LogDensity, Posterior};
use crate::infer::priors::ParamVector;
use crate::infer::{InferError, PiModel};
use crate::model::ObservationSet;

/// Options for the L-BFGS maximizer.
#[derive(Clone, Debug)]
pub struct LbfgsOpts {
    pub max_iters: usize,
    pub memory: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOpts {
    fn default() -> Self {
        LbfgsOpts {
            max_iters: 300,
            memory: 8,
            grad_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Maximize `f` (which also writes its gradient) from `x0`.
///
/// Two-loop recursion with Armijo backtracking; non-finite evaluations
/// shrink the step. Returns the best point seen rather than failing.
pub fn lbfgs_max<F: FnMut(&[f64], &mut [f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &LbfgsOpts,
) -> LbfgsResult {
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; dim];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return LbfgsResult {
            x,
            value: fx,
            grad_norm: f64::NAN,
            iters: 0,
            converged: false,
        };
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut iters = 0;
    let mut converged = false;

    for it in 0..opts.max_iters {
        iters = it + 1;
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < opts.grad_tol {
            converged = true;
            break;
        }

        // Ascent direction from the two-loop recursion on -grad of -f.
        let mut q: Vec<f64> = g.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rho_hist[i]
                * s_hist[i].iter().zip(&q).map(|(s, q)| s * q).sum::<f64>();
            alphas[i] = a;
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= a * yj;
            }
        }
        let gamma = if k > 0 {
            let sy: f64 = s_hist[k - 1].iter().zip(&y_hist[k - 1]).map(|(s, y)| s * y).sum();
            let yy: f64 = y_hist[k - 1].iter().map(|y| y * y).sum();
            if yy > 0.0 {
                (sy / yy).abs().max(1e-10)
            } else {
                1.0
            }
        } else {
            1.0
        };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..k {
            let b = rho_hist[i]
                * y_hist[i].iter().zip(&q).map(|(y, q)| y * q).sum::<f64>();
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alphas[i] - b) * sj;
            }
        }
        let mut dir = q;
        let descent: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if !(descent > 0.0) || !descent.is_finite() {
            dir = g.clone();
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }
        let slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();

        // Backtracking line search on the ascent objective.
        let mut step = 1.0;
        let mut x_new = vec![0.0; dim];
        let mut g_new = vec![0.0; dim];
        let mut f_new = f64::NEG_INFINITY;
        let mut ok = false;
        for _ in 0..50 {
            for i in 0..dim {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new >= fx + 1e-4 * step * slope {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if !ok {
            break;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // Gradient of the minimized objective is -g; y = -(g_new - g).
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| -(a - b)).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        x = x_new.clone();
        g = g_new.clone();
        fx = f_new;
    }

    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    LbfgsResult {
        x,
        value: fx,
        grad_norm,
        iters,
        converged,
    }
}

/// MAP estimation configuration.
#[derive(Clone, Debug)]
pub struct MapConfig {
    pub starts: usize,
    pub seed: u64,
    pub lbfgs: LbfgsOpts,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            starts: 5,
            seed: 0,
            lbfgs: LbfgsOpts::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub params: ParamVector,
    pub unconstrained: Vec<f64>,
    pub log_posterior: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Point estimate of all parameters by maximizing the log posterior from
/// multiple prior-drawn starts.
pub fn map_estimate(
    model: &PiModel,
    obs: &ObservationSet,
    cfg: &MapConfig,
) -> Result<MapResult, InferError> {
    model.validate()?;
    let posterior = Posterior::exact(model, obs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa076_1d64_78bd_642f);
    let mut best: Option<LbfgsResult> = None;
    for _ in 0..cfg.starts.max(1) {
        let x0 = posterior.layout.sample_prior(&mut rng);
        let z0 = posterior.layout.unconstrain(&x0);
        let r = lbfgs_max(
            |z, g| posterior.logp_grad(z, g),
            &z0,
            &cfg.lbfgs,
        );
        if r.value.is_finite() && best.as_ref().map_or(true, |b| r.value > b.value) {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| {
        InferError::OptimFailed("no start produced a finite log posterior".into())
    })?;
    let x = posterior.layout.constrain(&best.x);
    Ok(MapResult {
        params: ParamVector {
            names: posterior.layout.names(),
            values: x,
        },
        unconstrained: best.x,
        log_posterior: best.value,
        grad_norm: best.grad_norm,
        converged: best.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_recovers_closed_form_maximum() {
        // f(x) = -(x0-1)^2 - 2(x1+0.5)^2 - 0.5(x0 x1)
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (x[0] - 1.0) - 0.5 * x[1];
            g[1] = -4.0 * (x[1] + 0.5) - 0.5 * x[0];
            -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 0.5).powi(2) - 0.5 * x[0] * x[1]
        };
        // Stationary point solves 2x0 + 0.5x1 = 2; 0.5x0 + 4x1 = -2.
        let det: f64 = 2.0 * 4.0 - 0.25;
        let x0 = (2.0 * 4.0 - 0.5 * -2.0) / det;
        let x1 = (2.0 * -2.0 - 0.5 * 2.0) / det;
        let r = lbfgs_max(f, &[5.0, -7.0], &LbfgsOpts::default());
        assert!(r.converged);
        assert_relative_eq!(r.x[0], x0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], x1, epsilon = 1e-6);
    }

    #[test]
    fn restart_from_optimum_does_not_improve() {
        let f = |x: &[f64], g: &mut [f64]| {
            for i in 0..x.len() {
                g[i] = -2.0 * x[i];
            }
            -x.iter().map(|v| v * v).sum::<f64>()
        };
        let first = lbfgs_max(f, &[3.0, -2.0, 1.0], &LbfgsOpts::default());
        let second = lbfgs_max(f, &first.x, &LbfgsOpts::default());
        assert!(second.value - first.value <= 1e-6);
    }
}
