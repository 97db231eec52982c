//! FITC and VFE approximations of the physics-informed models.
//!
//! Both replace the dense joint covariance `K_gg` with the low-rank
//! `Q = K_gw K_ww^-1 K_wg` built from inducing variables at `Z`, differing in
//! the diagonal correction:
//!
//! ```text
//! FITC: Lambda = diag(K_gg - Q) + S,   trace penalty 0
//! VFE:  Lambda = S,                    penalty -1/2 tr(S^-1 (K_gg - Q))
//! ```
//!
//! The marginal likelihood is `log N(y; mu, Q + Lambda)` plus the penalty,
//! evaluated with the Woodbury identity and Cholesky factors of the m-by-m
//! system only, so the cost is O(N m^2). Discrepancy and bias kernels enter
//! every u-by-u block, including those over inducing inputs.

use nalgebra::{DMatrix, DVector};

use crate::infer::assembly::{cross_cov, diag_parts, mean_parts, noise_parts, Chan};
use crate::infer::hmc::{sample_posterior, ChainInit, HmcConfig, PosteriorDraws};
use crate::infer::map::{lbfgs_max, LbfgsOpts};
use crate::infer::posterior::{Likelihood, Posterior};
use crate::infer::priors::{ParamLayout, ParamVector, Transform};
use crate::infer::{InferError, PiModel, Unpacked, VariantSpec};
use crate::kernel::Inputs;
use crate::linalg::{cholesky_with_jitter, JitteredCholesky};
use crate::model::{NoiseParams, ObservationSet};

/// Inducing inputs for the two channels.
#[derive(Clone, Debug)]
pub struct InducingSet {
    pub z_u: Inputs,
    pub z_f: Inputs,
}

impl InducingSet {
    pub fn new(z_u: Inputs, z_f: Inputs) -> Result<Self, InferError> {
        if z_u.len() + z_f.len() == 0 {
            return Err(InferError::BadConfig("need at least one inducing point".into()));
        }
        Ok(InducingSet { z_u, z_f })
    }

    pub fn m_u(&self) -> usize {
        self.z_u.len()
    }

    pub fn m_f(&self) -> usize {
        self.z_f.len()
    }

    pub fn m(&self) -> usize {
        self.m_u() + self.m_f()
    }

    /// Advisory warnings; more inducing points than data is legal but wasteful.
    pub fn warnings(&self, obs: &ObservationSet) -> Vec<String> {
        let mut w = Vec::new();
        if self.m_u() > obs.n_u() {
            w.push(format!(
                "m_u = {} exceeds n_u = {}; the approximation cannot help",
                self.m_u(),
                obs.n_u()
            ));
        }
        if self.m_f() > obs.n_f() {
            w.push(format!(
                "m_f = {} exceeds n_f = {}; the approximation cannot help",
                self.m_f(),
                obs.n_f()
            ));
        }
        w
    }

    /// Inducing inputs at per-dimension data quantiles.
    pub fn from_quantiles(obs: &ObservationSet, m_u: usize, m_f: usize) -> Self {
        InducingSet {
            z_u: quantile_points(&obs.x_u, m_u),
            z_f: quantile_points(&obs.x_f, m_f),
        }
    }
}

fn quantile_points(x: &Inputs, m: usize) -> Inputs {
    let dim = x.dim();
    if m == 0 || x.is_empty() {
        return Inputs::empty(dim);
    }
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|d| x.column(d)).collect();
    for c in cols.iter_mut() {
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let mut rows = Vec::with_capacity(m * dim);
    for i in 0..m {
        let q = (i as f64 + 0.5) / m as f64;
        for c in &cols {
            let pos = q * (c.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let w = pos - lo as f64;
            let v = if lo + 1 < c.len() {
                c[lo] * (1.0 - w) + c[lo + 1] * w
            } else {
                c[lo]
            };
            rows.push(v);
        }
    }
    Inputs::from_rows(dim, rows)
}

/// Sparse approximation family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparseMethod {
    Fitc,
    Vfe,
}

/// Assembled sparse pieces with optional per-parameter derivatives.
struct Pieces {
    u: DMatrix<f64>,
    du: Vec<Option<DMatrix<f64>>>,
    w: DMatrix<f64>,
    dw: Vec<Option<DMatrix<f64>>>,
    k_diag: DVector<f64>,
    dk_diag: Vec<Option<DVector<f64>>>,
    var: DVector<f64>,
    dvar: Vec<Option<DVector<f64>>>,
    mu: DVector<f64>,
    dmu: Vec<Option<DVector<f64>>>,
}

fn embed_cross(
    n_u: usize,
    n_f: usize,
    m_u: usize,
    m_f: usize,
    uu: Option<&DMatrix<f64>>,
    uf: Option<&DMatrix<f64>>,
    fu: Option<&DMatrix<f64>>,
    ff: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(n_u + n_f, m_u + m_f);
    if let Some(b) = uu {
        full.view_mut((0, 0), (n_u, m_u)).copy_from(b);
    }
    if let Some(b) = uf {
        full.view_mut((0, m_u), (n_u, m_f)).copy_from(b);
    }
    if let Some(b) = fu {
        full.view_mut((n_u, 0), (n_f, m_u)).copy_from(b);
    }
    if let Some(b) = ff {
        full.view_mut((n_u, m_u), (n_f, m_f)).copy_from(b);
    }
    full
}

fn assemble_pieces(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    obs: &ObservationSet,
    z: &InducingSet,
    grads: bool,
) -> Pieces {
    let dim = layout.dim();
    let (n_u, n_f) = (obs.n_u(), obs.n_f());
    let (m_u, m_f) = (z.m_u(), z.m_f());

    // K_gw blocks: observations (rows) by inducing inputs (columns).
    let guu = cross_cov(model, layout, u, Chan::U, &obs.x_u, Chan::U, &z.z_u, true, false, grads);
    let guf = cross_cov(model, layout, u, Chan::U, &obs.x_u, Chan::F, &z.z_f, true, false, grads);
    let gfu = cross_cov(model, layout, u, Chan::F, &obs.x_f, Chan::U, &z.z_u, true, false, grads);
    let gff = cross_cov(model, layout, u, Chan::F, &obs.x_f, Chan::F, &z.z_f, true, false, grads);
    let big_u = embed_cross(n_u, n_f, m_u, m_f, Some(&guu.m), Some(&guf.m), Some(&gfu.m), Some(&gff.m));
    let mut du: Vec<Option<DMatrix<f64>>> = vec![None; dim];
    if grads {
        for k in 0..dim {
            if guu.dm[k].is_some() || guf.dm[k].is_some() || gfu.dm[k].is_some() || gff.dm[k].is_some() {
                du[k] = Some(embed_cross(
                    n_u,
                    n_f,
                    m_u,
                    m_f,
                    guu.dm[k].as_ref(),
                    guf.dm[k].as_ref(),
                    gfu.dm[k].as_ref(),
                    gff.dm[k].as_ref(),
                ));
            }
        }
    }

    // K_ww blocks over inducing inputs.
    let wuu = cross_cov(model, layout, u, Chan::U, &z.z_u, Chan::U, &z.z_u, true, true, grads);
    let wuf = cross_cov(model, layout, u, Chan::U, &z.z_u, Chan::F, &z.z_f, true, false, grads);
    let wff = cross_cov(model, layout, u, Chan::F, &z.z_f, Chan::F, &z.z_f, true, true, grads);
    let embed_w = |uu: Option<&DMatrix<f64>>, uf: Option<&DMatrix<f64>>, ff: Option<&DMatrix<f64>>| {
        let mut full = DMatrix::zeros(m_u + m_f, m_u + m_f);
        if let Some(b) = uu {
            full.view_mut((0, 0), (m_u, m_u)).copy_from(b);
        }
        if let Some(b) = uf {
            full.view_mut((0, m_u), (m_u, m_f)).copy_from(b);
            full.view_mut((m_u, 0), (m_f, m_u)).copy_from(&b.transpose());
        }
        if let Some(b) = ff {
            full.view_mut((m_u, m_u), (m_f, m_f)).copy_from(b);
        }
        full
    };
    let big_w = embed_w(Some(&wuu.m), Some(&wuf.m), Some(&wff.m));
    let mut dw: Vec<Option<DMatrix<f64>>> = vec![None; dim];
    if grads {
        for k in 0..dim {
            if wuu.dm[k].is_some() || wuf.dm[k].is_some() || wff.dm[k].is_some() {
                dw[k] = Some(embed_w(wuu.dm[k].as_ref(), wuf.dm[k].as_ref(), wff.dm[k].as_ref()));
            }
        }
    }

    // diag(K_gg), noise variances, and means over the stacked observations.
    let (d_u, dd_u) = diag_parts(model, layout, u, Chan::U, &obs.x_u, grads);
    let (d_f, dd_f) = diag_parts(model, layout, u, Chan::F, &obs.x_f, grads);
    let mut k_diag = DVector::zeros(n_u + n_f);
    k_diag.rows_mut(0, n_u).copy_from(&d_u);
    k_diag.rows_mut(n_u, n_f).copy_from(&d_f);
    let mut dk_diag: Vec<Option<DVector<f64>>> = vec![None; dim];
    let (var, dvar) = noise_parts(layout, u, obs, grads);
    let (mu_u, dmu_u) = mean_parts(model, layout, u, Chan::U, &obs.x_u, grads);
    let (mu_f, dmu_f) = mean_parts(model, layout, u, Chan::F, &obs.x_f, grads);
    let mut mu = DVector::zeros(n_u + n_f);
    mu.rows_mut(0, n_u).copy_from(&mu_u);
    mu.rows_mut(n_u, n_f).copy_from(&mu_f);
    let mut dmu: Vec<Option<DVector<f64>>> = vec![None; dim];
    if grads {
        let stack = |a: Option<&DVector<f64>>, b: Option<&DVector<f64>>| -> Option<DVector<f64>> {
            if a.is_none() && b.is_none() {
                return None;
            }
            let mut v = DVector::zeros(n_u + n_f);
            if let Some(x) = a {
                v.rows_mut(0, n_u).copy_from(x);
            }
            if let Some(x) = b {
                v.rows_mut(n_u, n_f).copy_from(x);
            }
            Some(v)
        };
        for k in 0..dim {
            dk_diag[k] = stack(dd_u[k].as_ref(), dd_f[k].as_ref());
            dmu[k] = stack(dmu_u[k].as_ref(), dmu_f[k].as_ref());
        }
    }

    Pieces {
        u: big_u,
        du,
        w: big_w,
        dw,
        k_diag,
        dk_diag,
        var,
        dvar,
        mu,
        dmu,
    }
}

/// Row-wise dot products `out_i = sum_j a_ij b_ij`.
fn row_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.nrows());
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            out[i] += a[(i, j)] * b[(i, j)];
        }
    }
    out
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Sparse marginal log likelihood, optionally with gradients; `None` on a
/// numerical failure (the caller rejects the proposal).
pub(crate) fn loglik_grads(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    obs: &ObservationSet,
    method: SparseMethod,
    z: &InducingSet,
    grads: bool,
) -> Option<(f64, Vec<f64>)> {
    let p = assemble_pieces(model, layout, u, obs, z, grads);
    let n = obs.n_u() + obs.n_f();
    let m = z.m();
    let y = obs.stacked_y();
    let r = &y - &p.mu;

    let w_chol = cholesky_with_jitter(&p.w).ok()?;
    // q_d = diag(U W^-1 U') via the triangular factor.
    let l_inv_ut = w_chol
        .chol
        .l_dirty()
        .solve_lower_triangular(&p.u.transpose())?;
    let mut q_d = DVector::zeros(n);
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..m {
            s += l_inv_ut[(i, j)] * l_inv_ut[(i, j)];
        }
        q_d[j] = s;
    }

    // Non-negative residual diagonal; round-off can push it slightly below zero.
    let t_diag = DVector::from_iterator(n, (0..n).map(|i| (p.k_diag[i] - q_d[i]).max(0.0)));
    let lambda = match method {
        SparseMethod::Fitc => &t_diag + &p.var,
        SparseMethod::Vfe => p.var.clone(),
    };
    if lambda.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let ilam = lambda.map(|v| 1.0 / v);

    // B = W + U' Lambda^-1 U, with W carrying its factorization jitter so the
    // determinant identity stays consistent.
    let mut p0 = p.u.clone();
    for j in 0..m {
        for i in 0..n {
            p0[(i, j)] *= ilam[i];
        }
    }
    let utp0 = p.u.transpose() * &p0;
    let mut b = &p.w + &utp0;
    for i in 0..m {
        b[(i, i)] += w_chol.jitter;
    }
    let b_chol = cholesky_with_jitter(&b).ok()?;

    let c = p0.transpose() * &r;
    let bc = b_chol.solve(&c);
    let r_ilam = DVector::from_iterator(n, (0..n).map(|i| r[i] * ilam[i]));
    let quad = r.dot(&r_ilam) - c.dot(&bc);
    let logdet = b_chol.log_det() - w_chol.log_det() + lambda.iter().map(|v| v.ln()).sum::<f64>();
    let mut ll = -0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
    if method == SparseMethod::Vfe {
        ll -= 0.5 * (0..n).map(|i| t_diag[i] / p.var[i]).sum::<f64>();
    }
    if !ll.is_finite() {
        return None;
    }
    if !grads {
        return Some((ll, Vec::new()));
    }

    // Shared factors for the gradient identities.
    let a_vec = &r_ilam - &p0 * &bc; // A^-1 r
    let r0 = w_chol.solve_mat(&p.u.transpose()).transpose(); // U W^-1
    let wa = r0.transpose() * &a_vec;
    let bi = b_chol.inverse();
    let m_mat = &p0 - &p0 * (&bi * &utp0); // A^-1 U
    let g1 = w_chol.solve_mat(&m_mat.transpose()).transpose(); // A^-1 U W^-1
    let h = r0.transpose() * &g1;
    let pb = &p0 * &bi;
    let diag_ainv = DVector::from_iterator(n, (0..n).map(|i| {
        let mut s = 0.0;
        for j in 0..m {
            s += pb[(i, j)] * p0[(i, j)];
        }
        ilam[i] - s
    }));

    let needs_qd_grad = method == SparseMethod::Vfe || method == SparseMethod::Fitc;
    let mut g = vec![0.0; layout.dim()];
    for (k, gk) in g.iter_mut().enumerate() {
        let du = p.du[k].as_ref();
        let dw = p.dw[k].as_ref();
        let dkd = p.dk_diag[k].as_ref();
        let dvar = p.dvar[k].as_ref();
        let dmu = p.dmu[k].as_ref();
        if du.is_none() && dw.is_none() && dkd.is_none() && dvar.is_none() && dmu.is_none() {
            continue;
        }

        // dq_d = 2 rowsum(R0 . dU) - rowsum(R0 . (R0 dW))
        let dq_d: Option<DVector<f64>> = if needs_qd_grad && (du.is_some() || dw.is_some()) {
            let mut v = DVector::zeros(n);
            if let Some(du) = du {
                v += row_dots(&r0, du) * 2.0;
            }
            if let Some(dw) = dw {
                v -= row_dots(&r0, &(&r0 * dw));
            }
            Some(v)
        } else {
            None
        };
        // dT: derivative of the clamped residual diagonal.
        let dt = |i: usize| -> f64 {
            if t_diag[i] == 0.0 && p.k_diag[i] - q_d[i] < 0.0 {
                0.0
            } else {
                dkd.map_or(0.0, |d| d[i]) - dq_d.as_ref().map_or(0.0, |d| d[i])
            }
        };
        let dlam = |i: usize| -> f64 {
            match method {
                SparseMethod::Fitc => dt(i) + dvar.map_or(0.0, |d| d[i]),
                SparseMethod::Vfe => dvar.map_or(0.0, |d| d[i]),
            }
        };

        let mut acc = 0.0;
        // Quadratic part: 1/2 a' dA a + dmu' a.
        if let Some(du) = du {
            acc += a_vec.dot(&(du * &wa));
        }
        if let Some(dw) = dw {
            acc -= 0.5 * wa.dot(&(dw * &wa));
        }
        for i in 0..n {
            acc += 0.5 * a_vec[i] * a_vec[i] * dlam(i);
        }
        if let Some(dmu) = dmu {
            acc += dmu.dot(&a_vec);
        }
        // Log-determinant part: -1/2 tr(A^-1 dA).
        if let Some(du) = du {
            acc -= frob(&g1, du);
        }
        if let Some(dw) = dw {
            acc += 0.5 * frob(&h, dw);
        }
        for i in 0..n {
            acc -= 0.5 * diag_ainv[i] * dlam(i);
        }
        // VFE trace penalty: -1/2 sum T_i / var_i.
        if method == SparseMethod::Vfe {
            for i in 0..n {
                let dv = dvar.map_or(0.0, |d| d[i]);
                acc -= 0.5 * (dt(i) / p.var[i] - t_diag[i] * dv / (p.var[i] * p.var[i]));
            }
        }
        *gk = acc;
    }
    Some((ll, g))
}

/// Sparse marginal log likelihood at constrained parameters `x`.
pub fn sparse_log_marginal(
    method: SparseMethod,
    model: &PiModel,
    obs: &ObservationSet,
    z: &InducingSet,
    x: &[f64],
) -> Result<f64, InferError> {
    model.validate()?;
    let layout = model.layout();
    let u = model.unpack(&layout, x);
    loglik_grads(model, &layout, &u, obs, method, z, false)
        .map(|(ll, _)| ll)
        .ok_or_else(|| {
            InferError::OptimFailed(
                "sparse likelihood: covariance not positive definite after jitter".into(),
            )
        })
}

struct PredictCtx {
    ilam: DVector<f64>,
    bc: DVector<f64>,
    w_chol: JitteredCholesky,
    b_chol: JitteredCholesky,
}

fn predict_ctx(
    model: &PiModel,
    layout: &ParamLayout,
    u: &Unpacked,
    obs: &ObservationSet,
    method: SparseMethod,
    z: &InducingSet,
) -> Option<PredictCtx> {
    let p = assemble_pieces(model, layout, u, obs, z, false);
    let n = obs.n_u() + obs.n_f();
    let m = z.m();
    let y = obs.stacked_y();
    let r = &y - &p.mu;
    let w_chol = cholesky_with_jitter(&p.w).ok()?;
    let l_inv_ut = w_chol
        .chol
        .l_dirty()
        .solve_lower_triangular(&p.u.transpose())?;
    let mut q_d = DVector::zeros(n);
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..m {
            s += l_inv_ut[(i, j)] * l_inv_ut[(i, j)];
        }
        q_d[j] = s;
    }
    let lambda = match method {
        SparseMethod::Fitc => {
            DVector::from_iterator(n, (0..n).map(|i| (p.k_diag[i] - q_d[i]).max(0.0) + p.var[i]))
        }
        SparseMethod::Vfe => p.var.clone(),
    };
    if lambda.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let ilam = lambda.map(|v| 1.0 / v);
    let mut p0 = p.u.clone();
    for j in 0..m {
        for i in 0..n {
            p0[(i, j)] *= ilam[i];
        }
    }
    let mut b = &p.w + p.u.transpose() * &p0;
    for i in 0..m {
        b[(i, i)] += w_chol.jitter;
    }
    let b_chol = cholesky_with_jitter(&b).ok()?;
    let c = p0.transpose() * &r;
    let bc = b_chol.solve(&c);
    Some(PredictCtx {
        ilam,
        bc,
        w_chol,
        b_chol,
    })
}

fn sparse_predict(
    method: SparseMethod,
    model: &PiModel,
    obs: &ObservationSet,
    z: &InducingSet,
    x: &[f64],
    xstar: &Inputs,
    chan: Chan,
    noise_override: Option<&NoiseParams>,
) -> Result<(DVector<f64>, DMatrix<f64>), InferError> {
    model.validate()?;
    let layout = model.layout();
    let mut u = model.unpack(&layout, x);
    if let Some(no) = noise_override {
        u.noise = no.clone();
    }
    let ctx = predict_ctx(model, &layout, &u, obs, method, z).ok_or_else(|| {
        InferError::OptimFailed("sparse prediction: covariance not positive definite".into())
    })?;

    // Cross covariance between inducing variables (rows) and targets
    // (columns). The discrepancy process is part of the predicted signal;
    // the bias process is removed here.
    let with_extra = matches!(model.variant, VariantSpec::Discrepancy(_));
    let v_top = cross_cov(model, &layout, &u, Chan::U, &z.z_u, chan, xstar, with_extra, false, false);
    let v_bot = cross_cov(model, &layout, &u, Chan::F, &z.z_f, chan, xstar, with_extra, false, false);
    let mut v = DMatrix::zeros(z.m(), xstar.len());
    v.view_mut((0, 0), (z.m_u(), xstar.len())).copy_from(&v_top.m);
    v.view_mut((z.m_u(), 0), (z.m_f(), xstar.len())).copy_from(&v_bot.m);

    let prior = cross_cov(model, &layout, &u, chan, xstar, chan, xstar, with_extra, true, false).m;
    let (mu_star, _) = mean_parts(model, &layout, &u, chan, xstar, false);

    let mean = &mu_star + v.transpose() * &ctx.bc;
    let wv = ctx.w_chol.solve_mat(&v);
    let bv = ctx.b_chol.solve_mat(&v);
    let cov = prior - v.transpose() * wv + v.transpose() * bv;
    let _ = &ctx.ilam;
    Ok((mean, cov))
}

/// Sparse posterior of `u` at new points.
pub fn sparse_predict_u(
    method: SparseMethod,
    model: &PiModel,
    obs: &ObservationSet,
    z: &InducingSet,
    x: &[f64],
    xstar: &Inputs,
    noise_override: Option<&NoiseParams>,
) -> Result<(DVector<f64>, DMatrix<f64>), InferError> {
    sparse_predict(method, model, obs, z, x, xstar, Chan::U, noise_override)
}

/// Sparse posterior of `f` at new points.
pub fn sparse_predict_f(
    method: SparseMethod,
    model: &PiModel,
    obs: &ObservationSet,
    z: &InducingSet,
    x: &[f64],
    xstar: &Inputs,
    noise_override: Option<&NoiseParams>,
) -> Result<(DVector<f64>, DMatrix<f64>), InferError> {
    sparse_predict(method, model, obs, z, x, xstar, Chan::F, noise_override)
}

/// Result of the joint (hyperparameters, inducing inputs) optimization.
#[derive(Clone, Debug)]
pub struct InducingOptResult {
    pub z: InducingSet,
    pub params: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Per-coordinate box bounds for inducing inputs from the data range.
fn data_boxes(x: &Inputs) -> Vec<(f64, f64)> {
    (0..x.dim())
        .map(|d| {
            let col = x.column(d);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo < hi {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        })
        .collect()
}

/// Maximize the sparse marginal likelihood jointly over unconstrained
/// hyperparameters and box-constrained inducing locations, with
/// finite-difference gradients. Stagnation returns the best point seen with
/// `converged = false` rather than an error.
pub fn optimize_inducing(
    method: SparseMethod,
    model: &PiModel,
    obs: &ObservationSet,
    z0: &InducingSet,
    x0: &[f64],
    max_iters: usize,
) -> Result<InducingOptResult, InferError> {
    model.validate()?;
    let layout = model.layout();
    let boxes_u = data_boxes(&obs.x_u);
    let boxes_f = data_boxes(&obs.x_f);
    let (m_u, m_f) = (z0.m_u(), z0.m_f());
    let (du, df) = (z0.z_u.dim(), z0.z_f.dim());

    let z_transforms: Vec<Transform> = (0..m_u)
        .flat_map(|_| boxes_u.iter().map(|&(lo, hi)| Transform::Logit { lo, hi }))
        .chain((0..m_f).flat_map(|_| boxes_f.iter().map(|&(lo, hi)| Transform::Logit { lo, hi })))
        .collect();

    let pack = |x: &[f64], z: &InducingSet| -> Vec<f64> {
        let mut v = layout.unconstrain(x);
        let coords = z
            .z_u
            .iter()
            .flatten()
            .chain(z.z_f.iter().flatten())
            .copied()
            .collect::<Vec<f64>>();
        for (t, c) in z_transforms.iter().zip(coords) {
            // Clamp strictly inside the box before the logit.
            let (lo, hi) = match t {
                Transform::Logit { lo, hi } => (*lo, *hi),
                _ => unreachable!(),
            };
            let w = (hi - lo) * 1e-6;
            v.push(t.unconstrain(c.clamp(lo + w, hi - w)));
        }
        v
    };
    let unpack = |v: &[f64]| -> (Vec<f64>, InducingSet) {
        let x = layout.constrain(&v[..layout.dim()]);
        let coords: Vec<f64> = v[layout.dim()..]
            .iter()
            .zip(&z_transforms)
            .map(|(&w, t)| t.constrain(w))
            .collect();
        let (cu, cf) = coords.split_at(m_u * du);
        (
            x,
            InducingSet {
                z_u: Inputs::from_rows(du, cu.to_vec()),
                z_f: Inputs::from_rows(df, cf.to_vec()),
            },
        )
    };

    let objective = |v: &[f64]| -> f64 {
        let (x, z) = unpack(v);
        let u = model.unpack(&layout, &x);
        loglik_grads(model, &layout, &u, obs, method, &z, false)
            .map(|(ll, _)| ll)
            .unwrap_or(f64::NEG_INFINITY)
    };

    let v0 = pack(x0, z0);
    let f0 = objective(&v0);
    if !f0.is_finite() {
        return Err(InferError::OptimFailed(
            "sparse objective not finite at the initial point".into(),
        ));
    }

    let fd = move |v: &[f64], g: &mut [f64]| -> f64 {
        let fv = objective(v);
        if !fv.is_finite() {
            return fv;
        }
        let mut vv = v.to_vec();
        for i in 0..v.len() {
            let h = 1e-5 * v[i].abs().max(1.0);
            vv[i] = v[i] + h;
            let hi = objective(&vv);
            vv[i] = v[i] - h;
            let lo = objective(&vv);
            vv[i] = v[i];
            g[i] = if hi.is_finite() && lo.is_finite() {
                (hi - lo) / (2.0 * h)
            } else {
                0.0
            };
        }
        fv
    };

    let opts = LbfgsOpts {
        max_iters,
        grad_tol: 1e-5,
        ..LbfgsOpts::default()
    };
    let r = lbfgs_max(fd, &v0, &opts);
    // Monotone contract: never return something worse than the start.
    let (v_best, f_best) = if r.value.is_finite() && r.value >= f0 {
        (r.x.clone(), r.value)
    } else {
        (v0, f0)
    };
    let (params, z_best) = unpack(&v_best);
    let mut warnings = z_best.warnings(obs);
    if !r.converged {
        warnings.push(format!(
            "inducing optimization stopped after {} iterations without meeting the gradient \
             tolerance; returning the best point seen",
            r.iters
        ));
    }
    Ok(InducingOptResult {
        z: z_best,
        params,
        objective: f_best,
        converged: r.converged,
        warnings,
    })
}

/// Output of the two-stage modular fit.
#[derive(Clone, Debug)]
pub struct ModularFit {
    pub draws: PosteriorDraws,
    pub inducing: InducingSet,
    pub stage1: ParamVector,
    pub stage1_objective: f64,
    pub warnings: Vec<String>,
}

/// Two-stage fit: optimize (hyperparameters, inducing locations) by sparse
/// marginal likelihood, then freeze the inducing locations and sample all
/// parameters with HMC. `fixed_noise` in the model removes those noise
/// parameters from both stages.
pub fn modular_fit(
    method: SparseMethod,
    model: &PiModel,
    obs: &ObservationSet,
    m_u: usize,
    m_f: usize,
    cfg: &HmcConfig,
) -> Result<ModularFit, InferError> {
    model.validate()?;
    let layout = model.layout();
    let z0 = InducingSet::from_quantiles(obs, m_u, m_f);

    // A couple of prior starts for stage one; the objective is multimodal in
    // the lengthscales.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x243f_6a88_85a3_08d3);
    let mut best: Option<InducingOptResult> = None;
    for _ in 0..2 {
        let x0 = layout.sample_prior(&mut rng);
        match optimize_inducing(method, model, obs, &z0, &x0, 120) {
            Ok(r) => {
                if best.as_ref().map_or(true, |b| r.objective > b.objective) {
                    best = Some(r);
                }
            }
            Err(_) => continue,
        }
    }
    let stage1 = best.ok_or_else(|| {
        InferError::OptimFailed("no stage-one start produced a finite sparse objective".into())
    })?;

    let posterior = Posterior::new(
        model,
        obs,
        Likelihood::Sparse {
            method,
            inducing: &stage1.z,
        },
    );
    let z_center = posterior.layout.unconstrain(&stage1.params);
    let init = ChainInit::Jittered(z_center, 0.2);
    let draws = sample_posterior(&posterior, cfg, &init)?;
    Ok(ModularFit {
        draws,
        inducing: stage1.z.clone(),
        stage1: ParamVector {
            names: layout.names(),
            values: stage1.params.clone(),
        },
        stage1_objective: stage1.objective,
        warnings: stage1.warnings.clone(),
    })
}

/// Point estimate of the observation noise of one series by maximum
/// likelihood of an independent single-output GP on a subsample. Used as the
/// plug-in value when predicting with the VFE approximation.
pub fn gp_noise_point_estimate(x: &Inputs, y: &[f64]) -> f64 {
    use crate::kernel::{gram, DerivOrder, HyperParams, KernelFamily, KernelSpec};
    let n = y.len();
    if n < 4 {
        return crate::linalg::sample_sd(y).max(1e-6);
    }
    // Deterministic subsample by stride.
    let keep = 50.min(n);
    let stride = n as f64 / keep as f64;
    let idx: Vec<usize> = (0..keep).map(|i| (i as f64 * stride) as usize).collect();
    let xs = Inputs::from_rows(
        x.dim(),
        idx.iter().flat_map(|&i| x.point(i).to_vec()).collect(),
    );
    let ybar = idx.iter().map(|&i| y[i]).sum::<f64>() / keep as f64;
    let yc = DVector::from_iterator(keep, idx.iter().map(|&i| y[i] - ybar));

    let ranges: Vec<f64> = (0..x.dim())
        .map(|d| {
            let c = xs.column(d);
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo).max(1e-3)
        })
        .collect();
    let sd = crate::linalg::sample_sd(y).max(1e-6);

    let spec = if x.dim() == 1 {
        KernelSpec::new(KernelFamily::Se1d)
    } else {
        KernelSpec::new(KernelFamily::AnisoSe2d)
    };
    let obj = |v: &[f64]| -> f64 {
        let sigma = v[0].exp();
        let sn = v[v.len() - 1].exp();
        let hp = if x.dim() == 1 {
            HyperParams::se(sigma, v[1].exp())
        } else {
            HyperParams::aniso_se(sigma, v[1].exp(), v[2].exp())
        };
        let mut k = match gram(&spec, &hp, &DerivOrder::zero(), &xs, &xs) {
            Ok(k) => k,
            Err(_) => return f64::NEG_INFINITY,
        };
        for i in 0..keep {
            k[(i, i)] += sn * sn;
        }
        match cholesky_with_jitter(&k) {
            Ok(chol) => crate::linalg::mvn_logpdf(&yc, &DVector::zeros(keep), &chol)
                .unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let fd = |v: &[f64], g: &mut [f64]| -> f64 {
        let f0 = obj(v);
        if !f0.is_finite() {
            return f0;
        }
        let mut vv = v.to_vec();
        for i in 0..v.len() {
            let h = 1e-5;
            vv[i] = v[i] + h;
            let hi = obj(&vv);
            vv[i] = v[i] - h;
            let lo = obj(&vv);
            vv[i] = v[i];
            g[i] = if hi.is_finite() && lo.is_finite() {
                (hi - lo) / (2.0 * h)
            } else {
                0.0
            };
        }
        f0
    };
    let mut v0 = vec![sd.ln()];
    for r in &ranges {
        v0.push((0.2 * r).ln());
    }
    v0.push((0.3 * sd).ln());
    let r = lbfgs_max(fd, &v0, &LbfgsOpts { max_iters: 120, grad_tol: 1e-6, ..Default::default() });
    r.x.last().copied().map(f64::exp).unwrap_or(sd)
}
