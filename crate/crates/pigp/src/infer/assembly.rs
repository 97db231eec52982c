//! Fused covariance assembly with analytic parameter derivatives.
//!
//! Covariance blocks are linear combinations of base-kernel derivative Gram
//! matrices with operator-coefficient weights. One pass per point pair fills
//! every needed derivative order at once (sharing the transcendental
//! evaluations), after which each model parameter's `dK` follows from:
//!
//!  - physical parameters: re-weighting with differentiated coefficients,
//!  - the signal scale: `dK/dsigma = (2/sigma) K` for the affected part,
//!  - remaining kernel hyperparameters: a dual-number pass per parameter,
//!  - noise standard deviations: diagonal indicators,
//!  - the constant mean: mean-vector derivatives only.
//!
//! Everything here is exact differentiation; finite differences appear only
//! in tests.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::infer::priors::{ParamKind, ParamLayout};
use crate::infer::{PiModel, Unpacked};
use crate::kernel::{
    eval_orders, hp_view_dual, hp_view_f64, DerivOrder, Inputs, KernelFamily,
};
use crate::model::ObservationSet;
use crate::physics::{block_pieces, Block, Coeff};
use crate::real::{Dual, Real};

/// Channel of a point set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Chan {
    U,
    F,
}

fn block_of(rows: Chan, cols: Chan) -> Block {
    match (rows, cols) {
        (Chan::U, Chan::U) => Block::UU,
        (Chan::U, Chan::F) => Block::UF,
        (Chan::F, Chan::U) => Block::FU,
        (Chan::F, Chan::F) => Block::FF,
    }
}

fn axpy_mat(y: &mut DMatrix<f64>, a: f64, x: &DMatrix<f64>) {
    for (yi, xi) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yi += a * xi;
    }
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Gram matrices for several derivative orders in one pass. When `symm` is
/// set only the upper triangle (including the diagonal) is filled; callers
/// mirror the *assembled* outputs, which are symmetric even when the
/// individual order matrices are not.
fn gram_set<S: Real, E: Fn(S) -> f64>(
    family: KernelFamily,
    view: &crate::kernel::HpView<S>,
    orders: &[DerivOrder],
    rows: &Inputs,
    cols: &Inputs,
    symm: bool,
    extract: E,
) -> Vec<DMatrix<f64>> {
    let (n, m) = (rows.len(), cols.len());
    let mut mats: Vec<DMatrix<f64>> = (0..orders.len()).map(|_| DMatrix::zeros(n, m)).collect();
    let mut buf = vec![S::lift(0.0); orders.len()];
    for j in 0..m {
        let qj = cols.point(j);
        let i_max = if symm { j + 1 } else { n };
        for i in 0..i_max {
            eval_orders(family, view, orders, rows.point(i), qj, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                mats[k][(i, j)] = extract(*v);
            }
        }
    }
    mats
}

/// A covariance block with per-parameter derivative matrices.
pub(crate) struct CrossCov {
    pub m: DMatrix<f64>,
    /// Indexed by layout parameter; `None` means identically zero.
    pub dm: Vec<Option<DMatrix<f64>>>,
}

/// Assemble one covariance block between channel-tagged point sets.
///
/// `with_extra` controls whether the variant's extra kernel contributes to
/// U-by-U pairs (training paths always include it; bias-variant prediction
/// cross terms exclude it). `symm` must only be set when `rows` and `cols`
/// are the same point set and channel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cross_cov(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    rows_chan: Chan,
    rows: &Inputs,
    cols_chan: Chan,
    cols: &Inputs,
    with_extra: bool,
    symm: bool,
    grads: bool,
) -> CrossCov {
    let family = model.base.family;
    let block = block_of(rows_chan, cols_chan);
    let pieces = block_pieces(&model.op, block);
    let phi = &u.phi;

    // Unique derivative orders across the pieces.
    let mut orders: Vec<DerivOrder> = Vec::new();
    let piece_order: Vec<usize> = pieces
        .iter()
        .map(|(_, o)| {
            if let Some(k) = orders.iter().position(|x| x == o) {
                k
            } else {
                orders.push(*o);
                orders.len() - 1
            }
        })
        .collect();

    let view = hp_view_f64(family, &u.hp);
    let base_grams = gram_set(family, &view, &orders, rows, cols, symm, |s| s);

    let combine = |weights: &dyn Fn(&Coeff) -> f64, grams: &[DMatrix<f64>]| -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(rows.len(), cols.len());
        for (p, (coeff, _)) in pieces.iter().enumerate() {
            let w = weights(coeff);
            if w != 0.0 {
                axpy_mat(&mut acc, w, &grams[piece_order[p]]);
            }
        }
        acc
    };

    let m_phys = combine(&|c| c.value(phi), &base_grams);

    // Extra (discrepancy/bias) kernel on u-by-u pairs.
    let extra_active = with_extra && rows_chan == Chan::U && cols_chan == Chan::U;
    let extra = if extra_active {
        u.extra_hp.as_ref().map(|ehp| {
            let fam = model.variant.extra_family().unwrap();
            let ev = hp_view_f64(fam, ehp);
            gram_set(fam, &ev, &[DerivOrder::zero()], rows, cols, symm, |s| s).pop().unwrap()
        })
    } else {
        None
    };

    let mut m = m_phys.clone();
    if let Some(e) = &extra {
        axpy_mat(&mut m, 1.0, e);
    }

    let mut dm: Vec<Option<DMatrix<f64>>> = vec![None; layout.dim()];
    if grads {
        let mut dual_cache: HashMap<usize, Vec<DMatrix<f64>>> = HashMap::new();
        let extra_names = model.extra_hyper_names();
        let extra_family = model.variant.extra_family();
        // Base-family slot of the period when it is shared with the extra kernel.
        let tied_slot = if model.period_tied() {
            family.hyper_names().iter().position(|n| *n == "period")
        } else {
            None
        };

        for (k, def) in layout.defs.iter().enumerate() {
            let g = match def.kind {
                ParamKind::Phi(i) => {
                    if pieces.iter().all(|(c, _)| c.dvalue(phi, i) == 0.0) {
                        None
                    } else {
                        Some(combine(&|c| c.dvalue(phi, i), &base_grams))
                    }
                }
                ParamKind::Mean | ParamKind::NoiseU(_) | ParamKind::NoiseF => None,
                ParamKind::BaseHyper(0) => Some(&m_phys * (2.0 / u.hp.sigma)),
                ParamKind::BaseHyper(j) => {
                    let duals = dual_cache.entry(j).or_insert_with(|| {
                        let dv = hp_view_dual(family, &u.hp, j);
                        gram_set(family, &dv, &orders, rows, cols, symm, |s: Dual| s.d)
                    });
                    let mut g = combine(&|c| c.value(phi), duals);
                    // A shared period also moves the extra kernel.
                    if Some(j) == tied_slot && extra.is_some() {
                        let ehp = u.extra_hp.as_ref().unwrap();
                        let fam = extra_family.unwrap();
                        let slot = fam.hyper_names().iter().position(|n| *n == "period").unwrap();
                        let ev = hp_view_dual(fam, ehp, slot);
                        let de = gram_set(fam, &ev, &[DerivOrder::zero()], rows, cols, symm, |s: Dual| s.d)
                            .pop()
                            .unwrap();
                        axpy_mat(&mut g, 1.0, &de);
                    }
                    Some(g)
                }
                ParamKind::ExtraHyper(j) => match (&extra, u.extra_hp.as_ref()) {
                    (Some(e), Some(ehp)) => {
                        let fam = extra_family.unwrap();
                        let name = extra_names[j];
                        let slot = fam.hyper_names().iter().position(|n| *n == name).unwrap();
                        if slot == 0 {
                            Some(e * (2.0 / ehp.sigma))
                        } else {
                            let ev = hp_view_dual(fam, ehp, slot);
                            Some(
                                gram_set(fam, &ev, &[DerivOrder::zero()], rows, cols, symm, |s: Dual| s.d)
                                    .pop()
                                    .unwrap(),
                            )
                        }
                    }
                    _ => None,
                },
            };
            dm[k] = g;
        }
    }

    if symm {
        mirror_upper(&mut m);
        for g in dm.iter_mut().flatten() {
            mirror_upper(g);
        }
    }

    CrossCov { m, dm }
}

/// Diagonal of a channel's own covariance (physics plus extra kernel on u),
/// with per-parameter derivatives. Used by the sparse approximations.
pub(crate) fn diag_parts(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    chan: Chan,
    pts: &Inputs,
    grads: bool,
) -> (DVector<f64>, Vec<Option<DVector<f64>>>) {
    let family = model.base.family;
    let block = block_of(chan, chan);
    let pieces = block_pieces(&model.op, block);
    let phi = &u.phi;
    let n = pts.len();

    let mut orders: Vec<DerivOrder> = Vec::new();
    let piece_order: Vec<usize> = pieces
        .iter()
        .map(|(_, o)| {
            if let Some(k) = orders.iter().position(|x| x == o) {
                k
            } else {
                orders.push(*o);
                orders.len() - 1
            }
        })
        .collect();

    let view = hp_view_f64(family, &u.hp);
    let mut base_cols: Vec<DVector<f64>> = (0..orders.len()).map(|_| DVector::zeros(n)).collect();
    let mut buf = vec![0.0f64; orders.len()];
    for i in 0..n {
        let p = pts.point(i);
        eval_orders(family, &view, &orders, p, p, &mut buf);
        for (k, v) in buf.iter().enumerate() {
            base_cols[k][i] = *v;
        }
    }

    let combine = |weights: &dyn Fn(&Coeff) -> f64, cols: &[DVector<f64>]| -> DVector<f64> {
        let mut acc = DVector::zeros(n);
        for (p, (coeff, _)) in pieces.iter().enumerate() {
            let w = weights(coeff);
            if w != 0.0 {
                acc.axpy(w, &cols[piece_order[p]], 1.0);
            }
        }
        acc
    };

    let d_phys = combine(&|c| c.value(phi), &base_cols);
    let extra_active = chan == Chan::U && u.extra_hp.is_some();
    // The extra kernel's zero-lag diagonal is sigma_e^2 for every family.
    let extra_diag = if extra_active {
        Some(u.extra_hp.as_ref().unwrap().sigma.powi(2))
    } else {
        None
    };
    let mut d = d_phys.clone();
    if let Some(e2) = extra_diag {
        d.add_scalar_mut(e2);
    }

    let mut dd: Vec<Option<DVector<f64>>> = vec![None; layout.dim()];
    if grads {
        let extra_names = model.extra_hyper_names();
        for (k, def) in layout.defs.iter().enumerate() {
            dd[k] = match def.kind {
                ParamKind::Phi(i) => {
                    if pieces.iter().all(|(c, _)| c.dvalue(phi, i) == 0.0) {
                        None
                    } else {
                        Some(combine(&|c| c.dvalue(phi, i), &base_cols))
                    }
                }
                ParamKind::Mean | ParamKind::NoiseU(_) | ParamKind::NoiseF => None,
                ParamKind::BaseHyper(0) => Some(&d_phys * (2.0 / u.hp.sigma)),
                ParamKind::BaseHyper(j) => {
                    let dv = hp_view_dual(family, &u.hp, j);
                    let mut dual_cols: Vec<DVector<f64>> =
                        (0..orders.len()).map(|_| DVector::zeros(n)).collect();
                    let mut dbuf = vec![Dual::con(0.0); orders.len()];
                    for i in 0..n {
                        let p = pts.point(i);
                        eval_orders(family, &dv, &orders, p, p, &mut dbuf);
                        for (c, v) in dbuf.iter().enumerate() {
                            dual_cols[c][i] = v.d;
                        }
                    }
                    // The extra kernel's zero-lag value does not depend on
                    // lengthscales or the period, so a tied period adds nothing.
                    Some(combine(&|c| c.value(phi), &dual_cols))
                }
                ParamKind::ExtraHyper(j) => {
                    if !extra_active {
                        None
                    } else {
                        let ehp = u.extra_hp.as_ref().unwrap();
                        if extra_names[j] == "sigma" {
                            Some(DVector::from_element(n, 2.0 * ehp.sigma))
                        } else {
                            None
                        }
                    }
                }
            };
        }
    }
    (d, dd)
}

/// Mean vector of a channel at given points, with parameter derivatives.
pub(crate) fn mean_parts(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    chan: Chan,
    pts: &Inputs,
    grads: bool,
) -> (DVector<f64>, Vec<Option<DVector<f64>>>) {
    let n = pts.len();
    let mean_c = match u.mean_u {
        crate::physics::MeanFn::Const(c) => c,
        _ => unreachable!("sampled means are constant"),
    };
    let c0 = model.op.constant_action(&u.phi);
    let value = match chan {
        Chan::U => DVector::from_element(n, mean_c),
        Chan::F => DVector::from_element(n, c0 * mean_c),
    };
    let mut dv: Vec<Option<DVector<f64>>> = vec![None; layout.dim()];
    if grads {
        for (k, def) in layout.defs.iter().enumerate() {
            dv[k] = match (def.kind, chan) {
                (ParamKind::Mean, Chan::U) => Some(DVector::from_element(n, 1.0)),
                (ParamKind::Mean, Chan::F) => Some(DVector::from_element(n, c0)),
                (ParamKind::Phi(i), Chan::F) => {
                    let dc0: f64 = model
                        .op
                        .terms
                        .iter()
                        .filter(|t| t.order == [0, 0])
                        .map(|t| t.coeff.dvalue(&u.phi, i))
                        .sum();
                    if dc0 == 0.0 || mean_c == 0.0 {
                        None
                    } else {
                        Some(DVector::from_element(n, dc0 * mean_c))
                    }
                }
                _ => None,
            };
        }
    }
    (value, dv)
}

/// Noise variance diagonal over the stacked observations, with derivatives
/// of the variances with respect to the sampled noise parameters.
pub(crate) fn noise_parts(
    layout: &ParamLayout,
    u: &Unpacked,
    obs: &ObservationSet,
    grads: bool,
) -> (DVector<f64>, Vec<Option<DVector<f64>>>) {
    let (n_u, n_f) = (obs.n_u(), obs.n_f());
    let n = n_u + n_f;
    let scale = obs.u_scale();
    let mut var = DVector::zeros(n);
    for (i, &g) in obs.noise_group_u.iter().enumerate() {
        var[i] = u.noise.sigma_u_at(g, scale).powi(2);
    }
    let sf = u.noise.sigma_f_eff(scale);
    for i in n_u..n {
        var[i] = sf * sf;
    }
    let mut dv: Vec<Option<DVector<f64>>> = vec![None; layout.dim()];
    if grads {
        for (k, def) in layout.defs.iter().enumerate() {
            dv[k] = match def.kind {
                ParamKind::NoiseU(g) => {
                    let s = u.noise.sigma_u[g];
                    if s <= crate::model::NOISE_FLOOR_REL * scale {
                        None
                    } else {
                        let mut d = DVector::zeros(n);
                        for (i, &gi) in obs.noise_group_u.iter().enumerate() {
                            if gi == g {
                                d[i] = 2.0 * s;
                            }
                        }
                        Some(d)
                    }
                }
                ParamKind::NoiseF => {
                    let s = u.noise.sigma_f;
                    if s <= crate::model::NOISE_FLOOR_REL * scale {
                        None
                    } else {
                        let mut d = DVector::zeros(n);
                        for di in d.iter_mut().skip(n_u) {
                            *di = 2.0 * s;
                        }
                        Some(d)
                    }
                }
                _ => None,
            };
        }
    }
    (var, dv)
}

/// The exact model's joint pieces: mean, kernel matrix (without noise),
/// noise variances, and all parameter derivatives.
pub(crate) struct ExactJoint {
    pub mean: DVector<f64>,
    pub dmean: Vec<Option<DVector<f64>>>,
    /// K + diag(noise variances).
    pub a: DMatrix<f64>,
    pub dk: Vec<Option<DMatrix<f64>>>,
    pub dnoise: Vec<Option<DVector<f64>>>,
}

pub(crate) fn exact_joint(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    obs: &ObservationSet,
    grads: bool,
) -> ExactJoint {
    let (n_u, n_f) = (obs.n_u(), obs.n_f());
    let n = n_u + n_f;
    let dim = layout.dim();

    let uu = cross_cov(model, layout, u, Chan::U, &obs.x_u, Chan::U, &obs.x_u, true, true, grads);
    let uf = cross_cov(model, layout, u, Chan::U, &obs.x_u, Chan::F, &obs.x_f, true, false, grads);
    let ff = cross_cov(model, layout, u, Chan::F, &obs.x_f, Chan::F, &obs.x_f, true, true, grads);

    let embed = |uu: Option<&DMatrix<f64>>,
                 uf: Option<&DMatrix<f64>>,
                 ff: Option<&DMatrix<f64>>|
     -> DMatrix<f64> {
        let mut full = DMatrix::zeros(n, n);
        if let Some(b) = uu {
            full.view_mut((0, 0), (n_u, n_u)).copy_from(b);
        }
        if let Some(b) = uf {
            full.view_mut((0, n_u), (n_u, n_f)).copy_from(b);
            full.view_mut((n_u, 0), (n_f, n_u)).copy_from(&b.transpose());
        }
        if let Some(b) = ff {
            full.view_mut((n_u, n_u), (n_f, n_f)).copy_from(b);
        }
        full
    };

    let mut a = embed(Some(&uu.m), Some(&uf.m), Some(&ff.m));
    let (var, dnoise) = noise_parts(layout, u, obs, grads);
    for i in 0..n {
        a[(i, i)] += var[i];
    }

    let mut dk: Vec<Option<DMatrix<f64>>> = vec![None; dim];
    if grads {
        for k in 0..dim {
            let (guu, guf, gff) = (uu.dm[k].as_ref(), uf.dm[k].as_ref(), ff.dm[k].as_ref());
            if guu.is_some() || guf.is_some() || gff.is_some() {
                dk[k] = Some(embed(guu, guf, gff));
            }
        }
    }

    let (mu_u, dmu_u) = mean_parts(model, layout, u, Chan::U, &obs.x_u, grads);
    let (mu_f, dmu_f) = mean_parts(model, layout, u, Chan::F, &obs.x_f, grads);
    let mut mean = DVector::zeros(n);
    mean.rows_mut(0, n_u).copy_from(&mu_u);
    mean.rows_mut(n_u, n_f).copy_from(&mu_f);
    let mut dmean: Vec<Option<DVector<f64>>> = vec![None; dim];
    if grads {
        for k in 0..dim {
            if dmu_u[k].is_some() || dmu_f[k].is_some() {
                let mut d = DVector::zeros(n);
                if let Some(v) = &dmu_u[k] {
                    d.rows_mut(0, n_u).copy_from(v);
                }
                if let Some(v) = &dmu_f[k] {
                    d.rows_mut(n_u, n_f).copy_from(v);
                }
                dmean[k] = Some(d);
            }
        }
    }

    ExactJoint {
        mean,
        dmean,
        a,
        dk,
        dnoise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::priors::Prior;
    use crate::infer::{NoiseSpec, VariantSpec};
    use crate::kernel::KernelSpec;
    use crate::model::{assemble_joint, ObservationSet};
    use crate::physics::wk2_operator;
    use approx::assert_relative_eq;

    fn model() -> PiModel {
        PiModel {
            base: KernelSpec::new(KernelFamily::Se1d),
            op: wk2_operator(),
            variant: VariantSpec::Discrepancy(KernelFamily::Se1d),
            mean_prior: Some(Prior::half_normal(100.0)),
            phi_priors: vec![Prior::uniform(0.5, 3.0), Prior::uniform(0.5, 3.0)],
            base_priors: vec![Prior::half_normal(50.0), Prior::half_normal(1.0)],
            extra_priors: vec![Prior::half_normal(50.0), Prior::half_normal(1.0)],
            noise_u: vec![NoiseSpec::Sampled(Prior::half_normal(15.0))],
            noise_f: NoiseSpec::Sampled(Prior::half_normal(15.0)),
        }
    }

    fn obs() -> ObservationSet {
        ObservationSet::single_group(
            Inputs::from_1d(vec![0.0, 0.3, 0.7, 0.9]),
            vec![1.0, 0.5, -0.3, 0.8],
            Inputs::from_1d(vec![0.1, 0.5, 0.85]),
            vec![0.2, -0.1, 0.4],
        )
        .unwrap()
    }

    #[test]
    fn fast_assembly_matches_reference_model_path() {
        let m = model();
        let layout = m.layout();
        let x = vec![1.2, 0.9, 0.6, 1.4, 0.5, 0.8, 0.35, 0.25, 0.45];
        let u = m.unpack(&layout, &x);
        let o = obs();
        let joint = exact_joint(&m, &layout, &u, &o, false);

        let (bk, mean_u, variant, noise) = m.concrete(&layout, &x).unwrap();
        let reference = assemble_joint(&bk, &mean_u, &variant, &noise, &o).unwrap();
        assert_relative_eq!(joint.a, reference.cov, max_relative = 1e-13);
        assert_relative_eq!(joint.mean, reference.mean, max_relative = 1e-13);
    }

    #[test]
    fn assembled_derivatives_match_finite_differences() {
        let m = model();
        let layout = m.layout();
        let x = vec![1.2, 0.9, 0.6, 1.4, 0.5, 0.8, 0.35, 0.25, 0.45];
        let u = m.unpack(&layout, &x);
        let o = obs();
        let joint = exact_joint(&m, &layout, &u, &o, true);

        let h = 1e-6;
        for k in 0..layout.dim() {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[k] += h;
            lo[k] -= h;
            let a_hi = exact_joint(&m, &layout, &m.unpack(&layout, &hi), &o, false);
            let a_lo = exact_joint(&m, &layout, &m.unpack(&layout, &lo), &o, false);
            let n = a_hi.a.nrows();
            for i in 0..n {
                for j in 0..n {
                    let fd = (a_hi.a[(i, j)] - a_lo.a[(i, j)]) / (2.0 * h);
                    let mut got = joint.dk[k].as_ref().map_or(0.0, |g| g[(i, j)]);
                    if i == j {
                        got += joint.dnoise[k].as_ref().map_or(0.0, |g| g[i]);
                    }
                    assert_relative_eq!(got, fd, max_relative = 2e-5, epsilon = 1e-7);
                }
                let fd_m = (a_hi.mean[i] - a_lo.mean[i]) / (2.0 * h);
                let got_m = joint.dmean[k].as_ref().map_or(0.0, |g| g[i]);
                assert_relative_eq!(got_m, fd_m, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }
}
