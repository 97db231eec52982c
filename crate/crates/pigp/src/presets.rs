//! Ready-made models and data generators for the Windkessel and heat
//! studies, with the priors the studies use.

use crate::infer::{NoiseSpec, PiModel, Prior, VariantSpec};
use crate::kernel::{Inputs, KernelFamily, KernelSpec};
use crate::model::ObservationSet;
use crate::physics::{heat_operator, wk2_operator};
use crate::sim::{
    add_noise, sample_heat, simulate_wk2, simulate_wk3, synchronize_cycles, add_bias,
    InflowWaveform, SimError, DEFAULT_WARM_CYCLES,
};

/// The Windkessel calibration model: GP prior over pressure with the
/// two-parameter operator, optionally with an additive discrepancy process.
///
/// Priors: R, C uniform on (0.5, 3); signal scale half-normal(50); pressure
/// and inflow noise half-normal(15); lengthscale half-normal(1/3) except the
/// periodic kernel's half-normal(1); RQ shape uniform(0, 10); period
/// uniform(0.8, 1.2). The discrepancy kernel is squared exponential for the
/// SE and RQ bases and periodic (sharing the base period) for the periodic
/// base. The constant pressure mean gets a half-normal(100) prior.
pub fn wk2_model(family: KernelFamily, discrepancy: bool) -> PiModel {
    assert!(
        family != KernelFamily::AnisoSe2d,
        "the Windkessel model is one-dimensional"
    );
    let ell_prior = |f: KernelFamily| match f {
        KernelFamily::Periodic1d => Prior::half_normal(1.0),
        _ => Prior::half_normal(1.0 / 3.0),
    };
    let mut base_priors = vec![Prior::half_normal(50.0), ell_prior(family)];
    match family {
        KernelFamily::Rq1d => base_priors.push(Prior::uniform(0.0 + 1e-12, 10.0)),
        KernelFamily::Periodic1d => base_priors.push(Prior::uniform(0.8, 1.2)),
        _ => {}
    }
    let (variant, extra_priors) = if discrepancy {
        let extra_family = match family {
            KernelFamily::Periodic1d => KernelFamily::Periodic1d,
            _ => KernelFamily::Se1d,
        };
        (
            VariantSpec::Discrepancy(extra_family),
            vec![Prior::half_normal(50.0), ell_prior(extra_family)],
        )
    } else {
        (VariantSpec::Plain, vec![])
    };
    PiModel {
        base: KernelSpec::new(family),
        op: wk2_operator(),
        variant,
        mean_prior: Some(Prior::half_normal(100.0)),
        phi_priors: vec![Prior::uniform(0.5, 3.0), Prior::uniform(0.5, 3.0)],
        base_priors,
        extra_priors,
        noise_u: vec![NoiseSpec::Sampled(Prior::half_normal(15.0))],
        noise_f: NoiseSpec::Sampled(Prior::half_normal(15.0)),
    }
}

/// The heat-equation calibration model over (t, x), optionally accounting
/// for sensor bias with a second anisotropic kernel.
pub fn heat_model(bias: bool) -> PiModel {
    let base_priors = vec![
        Prior::half_normal(1.0 / 3.0),
        Prior::half_normal(1.0),
        Prior::half_normal(1.0 / 3.0),
    ];
    let (variant, extra_priors) = if bias {
        (
            VariantSpec::Bias(KernelFamily::AnisoSe2d),
            base_priors.clone(),
        )
    } else {
        (VariantSpec::Plain, vec![])
    };
    PiModel {
        base: KernelSpec::new(KernelFamily::AnisoSe2d),
        op: heat_operator(),
        variant,
        mean_prior: Some(Prior::half_normal(1.0)),
        phi_priors: vec![Prior::uniform(1e-12, 10.0)],
        base_priors,
        extra_priors,
        noise_u: vec![NoiseSpec::Sampled(Prior::uniform(1e-12, 0.5))],
        noise_f: NoiseSpec::Sampled(Prior::uniform(1e-12, 3.0)),
    }
}

/// Ground truth of a Windkessel study.
#[derive(Clone, Copy, Debug)]
pub enum WkTruth {
    Wk2 { r: f64, c: f64 },
    Wk3 { r1: f64, r2: f64, c: f64 },
}

impl WkTruth {
    /// The resistance and compliance the calibration should recover.
    pub fn target_r_c(&self) -> (f64, f64) {
        match *self {
            WkTruth::Wk2 { r, c } => (r, c),
            WkTruth::Wk3 { r1, r2, c } => (r1 + r2, c),
        }
    }
}

/// Configuration of a synthetic Windkessel data set.
#[derive(Clone, Debug)]
pub struct WkStudy {
    pub truth: WkTruth,
    pub inflow: InflowWaveform,
    pub n_per_cycle: usize,
    pub cycles: usize,
    pub sigma_p: f64,
    pub sigma_q: f64,
    /// Fold all cycles onto one period, producing replicates.
    pub fold: bool,
    pub seed: u64,
}

impl WkStudy {
    /// The paper-style setup: three folded cycles with pressure noise 4 and
    /// inflow noise 10.
    pub fn standard(truth: WkTruth, seed: u64) -> Self {
        WkStudy {
            truth,
            inflow: InflowWaveform::canonical(),
            n_per_cycle: 11,
            cycles: 3,
            sigma_p: 4.0,
            sigma_q: 10.0,
            fold: true,
            seed,
        }
    }
}

/// A simulated study data set plus the noiseless truth on a dense grid.
#[derive(Clone, Debug)]
pub struct WkStudyData {
    pub obs: ObservationSet,
    pub grid: Vec<f64>,
    pub p_true: Vec<f64>,
    pub q_true: Vec<f64>,
}

/// Simulate noisy pressure/inflow observations from the configured truth.
pub fn simulate_wk_study(cfg: &WkStudy) -> Result<WkStudyData, SimError> {
    let period = cfg.inflow.period;
    let n = cfg.n_per_cycle;
    let mut times = Vec::with_capacity(n * cfg.cycles);
    for j in 0..cfg.cycles {
        for i in 0..n {
            times.push((i as f64 + 0.5) / n as f64 * period + j as f64 * period);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let p0 = 80.0;
    let p_clean = match cfg.truth {
        WkTruth::Wk2 { r, c } => simulate_wk2(&cfg.inflow, r, c, &times, p0, DEFAULT_WARM_CYCLES)?,
        WkTruth::Wk3 { r1, r2, c } => {
            simulate_wk3(&cfg.inflow, r1, r2, c, &times, p0, DEFAULT_WARM_CYCLES)?
        }
    };
    let q_clean: Vec<f64> = times.iter().map(|&t| crate::sim::Inflow::q(&cfg.inflow, t)).collect();

    let y_p = add_noise(&p_clean, cfg.sigma_p, cfg.seed.wrapping_mul(2).wrapping_add(1));
    let y_q = add_noise(&q_clean, cfg.sigma_q, cfg.seed.wrapping_mul(2).wrapping_add(2));

    let (t_p, y_p) = if cfg.fold {
        synchronize_cycles(&times, &y_p, period)
    } else {
        (times.clone(), y_p)
    };
    let (t_q, y_q) = if cfg.fold {
        synchronize_cycles(&times, &y_q, period)
    } else {
        (times.clone(), y_q)
    };

    let obs = ObservationSet::single_group(
        Inputs::from_1d(t_p),
        y_p,
        Inputs::from_1d(t_q),
        y_q,
    )?;

    let m = 200;
    let grid: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64 * period).collect();
    let p_true = match cfg.truth {
        WkTruth::Wk2 { r, c } => simulate_wk2(&cfg.inflow, r, c, &grid, p0, DEFAULT_WARM_CYCLES)?,
        WkTruth::Wk3 { r1, r2, c } => {
            simulate_wk3(&cfg.inflow, r1, r2, c, &grid, p0, DEFAULT_WARM_CYCLES)?
        }
    };
    let q_true: Vec<f64> = grid.iter().map(|&t| crate::sim::Inflow::q(&cfg.inflow, t)).collect();
    Ok(WkStudyData {
        obs,
        grid,
        p_true,
        q_true,
    })
}

/// Configuration of a synthetic heat-equation data set.
#[derive(Clone, Debug)]
pub struct HeatStudy {
    pub n_u: usize,
    pub n_f: usize,
    pub sigma_u: f64,
    pub sigma_f: f64,
    pub biased: bool,
    pub seed: u64,
}

impl HeatStudy {
    /// The study setup: 35 heat and 20 forcing observations with noise
    /// standard deviations 0.2 and 1.
    pub fn standard(biased: bool, seed: u64) -> Self {
        HeatStudy {
            n_u: 35,
            n_f: 20,
            sigma_u: 0.2,
            sigma_f: 1.0,
            biased,
            seed,
        }
    }
}

/// Simulate noisy (optionally bias-corrupted) heat observations.
pub fn simulate_heat_study(cfg: &HeatStudy) -> Result<ObservationSet, SimError> {
    let clean = sample_heat(cfg.n_u, cfg.n_f, cfg.seed)?;
    let y_u = add_noise(&clean.y_u, cfg.sigma_u, cfg.seed.wrapping_mul(2).wrapping_add(11));
    let y_f = add_noise(&clean.y_f, cfg.sigma_f, cfg.seed.wrapping_mul(2).wrapping_add(12));
    let noisy = ObservationSet::new(
        clean.x_u.clone(),
        y_u,
        clean.x_f.clone(),
        y_f,
        clean.noise_group_u.clone(),
    )?;
    if cfg.biased {
        Ok(add_bias(&noisy)?)
    } else {
        Ok(noisy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wk2_model_layouts() {
        let m = wk2_model(KernelFamily::Se1d, false);
        m.validate().unwrap();
        assert_eq!(
            m.layout().names(),
            vec!["R", "C", "mu", "sigma", "ell", "sigma_u", "sigma_f"]
        );
        let m = wk2_model(KernelFamily::Rq1d, true);
        m.validate().unwrap();
        assert_eq!(m.layout().dim(), 10);
        let m = wk2_model(KernelFamily::Periodic1d, true);
        m.validate().unwrap();
        // Shared period: one period parameter only.
        assert_eq!(m.layout().dim(), 10);
        assert!(m.period_tied());
    }

    #[test]
    fn heat_model_layouts() {
        let m = heat_model(false);
        m.validate().unwrap();
        assert_eq!(
            m.layout().names(),
            vec!["alpha", "mu", "sigma", "ell_t", "ell_x", "sigma_u", "sigma_f"]
        );
        let m = heat_model(true);
        m.validate().unwrap();
        assert_eq!(m.layout().dim(), 10);
    }

    #[test]
    fn folded_study_has_replicated_inputs() {
        let cfg = WkStudy::standard(WkTruth::Wk2 { r: 1.0, c: 1.1 }, 5);
        let data = simulate_wk_study(&cfg).unwrap();
        assert_eq!(data.obs.n_u(), 33);
        assert_eq!(data.obs.n_f(), 33);
        // Three replicates fold onto each within-cycle time.
        let t0 = data.obs.x_u.point(0)[0];
        let count = data
            .obs
            .x_u
            .iter()
            .filter(|p| (p[0] - t0).abs() < 1e-9)
            .count();
        assert_eq!(count, 3);
    }

    #[test]
    fn study_data_is_seed_deterministic() {
        let cfg = WkStudy::standard(WkTruth::Wk3 { r1: 0.05, r2: 1.0, c: 1.1 }, 9);
        let a = simulate_wk_study(&cfg).unwrap();
        let b = simulate_wk_study(&cfg).unwrap();
        assert_eq!(a.obs.y_u, b.obs.y_u);
        assert_eq!(a.p_true, b.p_true);
    }
}
