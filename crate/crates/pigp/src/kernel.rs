//! Base covariance families and their input derivatives.
//!
//! Four families are supported: squared exponential, rational quadratic and
//! periodic in one dimension, and an anisotropic squared exponential over
//! (t, x). Every partial derivative needed by the differential operators is
//! hand-derived in closed form and written without divisions by the lag, so
//! the expressions stay stable at zero lag. Finite differences are used only
//! as a test oracle.
//!
//! The 1D families are stationary, `K(t, t') = kappa(t - t')`, so
//! `d^a/dt d^b/dt' K = (-1)^b kappa^(a+b)(r)`. The anisotropic family
//! factorises into Gaussians in the t-lag and x-lag, and every mixed partial
//! is a signed product of one-dimensional Gaussian derivatives.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::real::{Dual, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Se1d,
    Rq1d,
    Periodic1d,
    AnisoSe2d,
}

impl KernelFamily {
    pub fn input_dim(self) -> usize {
        match self {
            KernelFamily::AnisoSe2d => 2,
            _ => 1,
        }
    }

    /// Ordered hyperparameter names for this family.
    pub fn hyper_names(self) -> &'static [&'static str] {
        match self {
            KernelFamily::Se1d => &["sigma", "ell"],
            KernelFamily::Rq1d => &["sigma", "ell", "alpha_rq"],
            KernelFamily::Periodic1d => &["sigma", "ell", "period"],
            KernelFamily::AnisoSe2d => &["sigma", "ell_t", "ell_x"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub input_dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec {
            family,
            input_dim: family.input_dim(),
        }
    }
}

/// Strictly positive kernel hyperparameters; field presence matches the family.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub sigma: f64,
    pub lengthscales: Vec<f64>,
    pub alpha_rq: Option<f64>,
    pub period: Option<f64>,
}

impl HyperParams {
    pub fn se(sigma: f64, ell: f64) -> Self {
        HyperParams {
            sigma,
            lengthscales: vec![ell],
            alpha_rq: None,
            period: None,
        }
    }

    pub fn rq(sigma: f64, ell: f64, alpha: f64) -> Self {
        HyperParams {
            sigma,
            lengthscales: vec![ell],
            alpha_rq: Some(alpha),
            period: None,
        }
    }

    pub fn periodic(sigma: f64, ell: f64, period: f64) -> Self {
        HyperParams {
            sigma,
            lengthscales: vec![ell],
            alpha_rq: None,
            period: Some(period),
        }
    }

    pub fn aniso_se(sigma: f64, ell_t: f64, ell_x: f64) -> Self {
        HyperParams {
            sigma,
            lengthscales: vec![ell_t, ell_x],
            alpha_rq: None,
            period: None,
        }
    }

    /// Flat view in the family's hyperparameter order.
    pub fn flat(&self, family: KernelFamily) -> Vec<f64> {
        match family {
            KernelFamily::Se1d => vec![self.sigma, self.lengthscales[0]],
            KernelFamily::Rq1d => vec![self.sigma, self.lengthscales[0], self.alpha_rq.unwrap()],
            KernelFamily::Periodic1d => {
                vec![self.sigma, self.lengthscales[0], self.period.unwrap()]
            }
            KernelFamily::AnisoSe2d => {
                vec![self.sigma, self.lengthscales[0], self.lengthscales[1]]
            }
        }
    }

    /// Rebuild from the flat order produced by [`HyperParams::flat`].
    pub fn from_flat(family: KernelFamily, v: &[f64]) -> Self {
        match family {
            KernelFamily::Se1d => HyperParams::se(v[0], v[1]),
            KernelFamily::Rq1d => HyperParams::rq(v[0], v[1], v[2]),
            KernelFamily::Periodic1d => HyperParams::periodic(v[0], v[1], v[2]),
            KernelFamily::AnisoSe2d => HyperParams::aniso_se(v[0], v[1], v[2]),
        }
    }

    pub fn validate(&self, family: KernelFamily) -> Result<(), KernelError> {
        let err = |m: String| Err(KernelError::InvalidHyper(m));
        let expect_ls = if family == KernelFamily::AnisoSe2d { 2 } else { 1 };
        if self.lengthscales.len() != expect_ls {
            return err(format!(
                "{family:?} expects {expect_ls} lengthscale(s), got {}",
                self.lengthscales.len()
            ));
        }
        if self.alpha_rq.is_some() != (family == KernelFamily::Rq1d) {
            return err(format!("alpha_rq presence does not match {family:?}"));
        }
        if self.period.is_some() != (family == KernelFamily::Periodic1d) {
            return err(format!("period presence does not match {family:?}"));
        }
        let mut all = self.flat(family);
        all.push(self.sigma);
        if all.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return err(format!("all hyperparameters must be strictly positive, got {self:?}"));
        }
        Ok(())
    }
}

/// Partial-derivative orders per input dimension for each kernel argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DerivOrder {
    pub left: [u8; 2],
    pub right: [u8; 2],
}

impl DerivOrder {
    pub fn zero() -> Self {
        DerivOrder {
            left: [0, 0],
            right: [0, 0],
        }
    }

    /// 1D order: `l`-th derivative in the first argument, `r`-th in the second.
    pub fn d1(l: u8, r: u8) -> Self {
        DerivOrder {
            left: [l, 0],
            right: [r, 0],
        }
    }

    /// 2D order over (t, x) on each side.
    pub fn d2(lt: u8, lx: u8, rt: u8, rx: u8) -> Self {
        DerivOrder {
            left: [lt, lx],
            right: [rt, rx],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.left == [0, 0] && self.right == [0, 0]
    }

    /// The order with both sides swapped; `D_swapped(q, p) = D(p, q)`.
    pub fn swapped(&self) -> Self {
        DerivOrder {
            left: self.right,
            right: self.left,
        }
    }
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("input dimension mismatch: kernel expects {expected}, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("derivative order {order:?} is not supported by {family:?}")]
    UnsupportedOrder {
        family: KernelFamily,
        order: DerivOrder,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
}

/// Whether `order` is within the family's implemented derivative set.
pub fn supports(family: KernelFamily, order: &DerivOrder) -> bool {
    match family {
        KernelFamily::Se1d | KernelFamily::Rq1d | KernelFamily::Periodic1d => {
            order.left[1] == 0 && order.right[1] == 0 && order.left[0] <= 1 && order.right[0] <= 1
        }
        KernelFamily::AnisoSe2d => {
            order.left[0] <= 1 && order.right[0] <= 1 && order.left[1] <= 2 && order.right[1] <= 2
        }
    }
}

/// A flat, row-major set of input points with a fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    dim: usize,
    data: Vec<f64>,
}

impl Inputs {
    pub fn empty(dim: usize) -> Self {
        Inputs { dim, data: Vec::new() }
    }

    pub fn from_1d(ts: impl Into<Vec<f64>>) -> Self {
        Inputs {
            dim: 1,
            data: ts.into(),
        }
    }

    pub fn from_2d(points: &[[f64; 2]]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 2);
        for p in points {
            data.extend_from_slice(p);
        }
        Inputs { dim: 2, data }
    }

    pub fn from_rows(dim: usize, rows: Vec<f64>) -> Self {
        assert_eq!(rows.len() % dim.max(1), 0, "row data not divisible by dim");
        Inputs { dim, data: rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.dim);
        self.data.extend_from_slice(p);
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Values of coordinate `d` across all points.
    pub fn column(&self, d: usize) -> Vec<f64> {
        self.iter().map(|p| p[d]).collect()
    }

    /// Concatenation of two point sets of equal dimension.
    pub fn concat(&self, other: &Inputs) -> Inputs {
        assert_eq!(self.dim, other.dim);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Inputs { dim: self.dim, data }
    }
}

/// Lifted hyperparameter slots used by the generic evaluators.
/// `a` is the (first) lengthscale; `b` is the family-specific third slot
/// (RQ shape, period, or second lengthscale).
#[derive(Clone, Copy)]
pub(crate) struct HpView<S: Real> {
    pub sigma: S,
    pub a: S,
    pub b: S,
}

pub(crate) fn hp_view_f64(family: KernelFamily, hp: &HyperParams) -> HpView<f64> {
    let flat = hp.flat(family);
    HpView {
        sigma: flat[0],
        a: flat[1],
        b: *flat.get(2).unwrap_or(&1.0),
    }
}

/// Dual view with the tangent seeded on hyperparameter slot `seed`
/// (index into [`KernelFamily::hyper_names`]).
pub(crate) fn hp_view_dual(family: KernelFamily, hp: &HyperParams, seed: usize) -> HpView<Dual> {
    let flat = hp.flat(family);
    let lift = |i: usize| {
        let v = *flat.get(i).unwrap_or(&1.0);
        if i == seed {
            Dual::var(v)
        } else {
            Dual::con(v)
        }
    };
    HpView {
        sigma: lift(0),
        a: lift(1),
        b: lift(2),
    }
}

/// Derivatives 0..=`upto` of `exp(-z^2 / (2 ell^2))` with respect to `z`,
/// sharing a single exponential evaluation. `upto` <= 4.
#[inline]
fn gauss_all<S: Real>(z: f64, ell: S, upto: u8) -> [S; 5] {
    let z = S::lift(z);
    let il2 = S::lift(1.0) / (ell * ell);
    let e = (S::lift(-0.5) * z * z * il2).exp();
    let zero = S::lift(0.0);
    let mut out = [e, zero, zero, zero, zero];
    if upto >= 1 {
        out[1] = -z * il2 * e;
    }
    if upto >= 2 {
        out[2] = (z * z * il2 * il2 - il2) * e;
    }
    if upto >= 3 {
        out[3] = (S::lift(3.0) * z * il2 * il2 - z * z * z * il2 * il2 * il2) * e;
    }
    if upto >= 4 {
        let il4 = il2 * il2;
        out[4] =
            (S::lift(3.0) * il4 - S::lift(6.0) * z * z * il4 * il2 + z * z * z * z * il4 * il4) * e;
    }
    out
}

/// Derivatives `kappa^(n)(r)` for n = 0..=`upto` of the stationary 1D
/// families, sharing the transcendental evaluations. `upto` <= 2.
#[inline]
fn kappa_all<S: Real>(family: KernelFamily, hp: &HpView<S>, r: f64, upto: u8) -> [S; 3] {
    let s2 = hp.sigma * hp.sigma;
    let zero = S::lift(0.0);
    match family {
        KernelFamily::Se1d => {
            let g = gauss_all(r, hp.a, upto);
            [s2 * g[0], s2 * g[1], s2 * g[2]]
        }
        KernelFamily::Rq1d => {
            let (ell, alpha) = (hp.a, hp.b);
            let il2 = S::lift(1.0) / (ell * ell);
            let r_ = S::lift(r);
            let base = S::lift(1.0) + r_ * r_ * il2 / (S::lift(2.0) * alpha);
            let pow_ma = base.powf(-alpha);
            let mut out = [s2 * pow_ma, zero, zero];
            if upto >= 1 {
                let pow_ma1 = pow_ma / base;
                out[1] = -s2 * r_ * il2 * pow_ma1;
                if upto >= 2 {
                    let pow_ma2 = pow_ma1 / base;
                    let inner = base - (alpha + S::lift(1.0)) * r_ * r_ * il2 / alpha;
                    out[2] = -s2 * il2 * pow_ma2 * inner;
                }
            }
            out
        }
        KernelFamily::Periodic1d => {
            let (ell, period) = (hp.a, hp.b);
            let il2 = S::lift(1.0) / (ell * ell);
            let w = S::lift(std::f64::consts::PI) / period;
            let wr = w * S::lift(r);
            let s = wr.sin();
            let k0 = s2 * (S::lift(-2.0) * s * s * il2).exp();
            let mut out = [k0, zero, zero];
            if upto >= 1 {
                let s2w = (S::lift(2.0) * wr).sin();
                let a = -S::lift(2.0) * w * il2;
                out[1] = a * s2w * k0;
                if upto >= 2 {
                    let c2w = (S::lift(2.0) * wr).cos();
                    out[2] = (a * a * s2w * s2w + S::lift(2.0) * w * a * c2w) * k0;
                }
            }
            out
        }
        KernelFamily::AnisoSe2d => unreachable!("kappa_all is for 1D families"),
    }
}

/// Evaluate several derivative orders at one point pair, sharing the
/// transcendental computations. Callers must have validated the orders.
#[inline]
pub(crate) fn eval_orders<S: Real>(
    family: KernelFamily,
    hp: &HpView<S>,
    orders: &[DerivOrder],
    p: &[f64],
    q: &[f64],
    out: &mut [S],
) {
    match family {
        KernelFamily::Se1d | KernelFamily::Rq1d | KernelFamily::Periodic1d => {
            let r = p[0] - q[0];
            let upto = orders
                .iter()
                .map(|o| o.left[0] + o.right[0])
                .max()
                .unwrap_or(0);
            let ks = kappa_all(family, hp, r, upto);
            for (slot, o) in out.iter_mut().zip(orders) {
                let k = ks[(o.left[0] + o.right[0]) as usize];
                *slot = if o.right[0] % 2 == 1 { -k } else { k };
            }
        }
        KernelFamily::AnisoSe2d => {
            let tau = p[0] - q[0];
            let chi = p[1] - q[1];
            let upto_t = orders
                .iter()
                .map(|o| o.left[0] + o.right[0])
                .max()
                .unwrap_or(0);
            let upto_x = orders
                .iter()
                .map(|o| o.left[1] + o.right[1])
                .max()
                .unwrap_or(0);
            let s2 = hp.sigma * hp.sigma;
            let gs = gauss_all(tau, hp.a, upto_t);
            let hs = gauss_all(chi, hp.b, upto_x);
            for (slot, o) in out.iter_mut().zip(orders) {
                let v = s2 * gs[(o.left[0] + o.right[0]) as usize]
                    * hs[(o.left[1] + o.right[1]) as usize];
                *slot = if (o.right[0] + o.right[1]) % 2 == 1 {
                    -v
                } else {
                    v
                };
            }
        }
    }
}

/// Generic derivative evaluation; callers must have validated the order.
#[inline]
pub(crate) fn eval_generic<S: Real>(
    family: KernelFamily,
    hp: &HpView<S>,
    order: &DerivOrder,
    p: &[f64],
    q: &[f64],
) -> S {
    let mut out = [S::lift(0.0)];
    eval_orders(family, hp, std::slice::from_ref(order), p, q, &mut out);
    out[0]
}

fn check_point(spec: &KernelSpec, p: &[f64]) -> Result<(), KernelError> {
    if p.len() != spec.input_dim {
        return Err(KernelError::DimensionMismatch {
            expected: spec.input_dim,
            got: p.len(),
        });
    }
    Ok(())
}

/// Covariance `K(p, q)`.
pub fn eval_kernel(
    spec: &KernelSpec,
    hp: &HyperParams,
    p: &[f64],
    q: &[f64],
) -> Result<f64, KernelError> {
    eval_kernel_derivative(spec, hp, &DerivOrder::zero(), p, q)
}

/// Partial derivative of the covariance at the given order.
pub fn eval_kernel_derivative(
    spec: &KernelSpec,
    hp: &HyperParams,
    order: &DerivOrder,
    p: &[f64],
    q: &[f64],
) -> Result<f64, KernelError> {
    check_point(spec, p)?;
    check_point(spec, q)?;
    hp.validate(spec.family)?;
    if !supports(spec.family, order) {
        return Err(KernelError::UnsupportedOrder {
            family: spec.family,
            order: *order,
        });
    }
    let view = hp_view_f64(spec.family, hp);
    Ok(eval_generic(spec.family, &view, order, p, q))
}

/// Gram matrix of derivative entries, `out[i][j] = D(P_i, Q_j)`.
///
/// Rows are computed in parallel for large products; the result is
/// bit-identical to the serial loop because each entry is evaluated
/// independently.
pub fn gram(
    spec: &KernelSpec,
    hp: &HyperParams,
    order: &DerivOrder,
    pts_p: &Inputs,
    pts_q: &Inputs,
) -> Result<DMatrix<f64>, KernelError> {
    hp.validate(spec.family)?;
    if !supports(spec.family, order) {
        return Err(KernelError::UnsupportedOrder {
            family: spec.family,
            order: *order,
        });
    }
    for pts in [pts_p, pts_q] {
        if !pts.is_empty() {
            check_point(spec, pts.point(0))?;
        }
        if pts.dim() != spec.input_dim {
            return Err(KernelError::DimensionMismatch {
                expected: spec.input_dim,
                got: pts.dim(),
            });
        }
    }
    let (n, m) = (pts_p.len(), pts_q.len());
    let view = hp_view_f64(spec.family, hp);
    let mut data = vec![0.0; n * m];
    let fill_col = |j: usize, col: &mut [f64]| {
        let qj = pts_q.point(j);
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = eval_generic(spec.family, &view, order, pts_p.point(i), qj);
        }
    };
    if n * m >= 16_384 {
        data.par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(j, col)| fill_col(j, col));
    } else {
        for (j, col) in data.chunks_mut(n.max(1)).enumerate() {
            if m > 0 {
                fill_col(j, col);
            }
        }
    }
    Ok(DMatrix::from_vec(n, m, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn se_at_zero_lag_is_signal_variance() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.0, 1.0);
        let v = eval_kernel(&spec, &hp, &[0.3], &[0.3]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn se_unit_lag_value() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(2.0, 0.5);
        let v = eval_kernel(&spec, &hp, &[1.0], &[0.0]).unwrap();
        assert_relative_eq!(v, 4.0 * (-2.0_f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn periodic_full_period_equals_signal_variance() {
        let spec = KernelSpec::new(KernelFamily::Periodic1d);
        let hp = HyperParams::periodic(1.0, 1.0, 1.0);
        let v = eval_kernel(&spec, &hp, &[1.3], &[0.3]).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn symmetry_and_zero_lag_variance_across_families() {
        let cases = [
            (KernelFamily::Se1d, HyperParams::se(1.7, 0.4)),
            (KernelFamily::Rq1d, HyperParams::rq(1.7, 0.4, 2.3)),
            (KernelFamily::Periodic1d, HyperParams::periodic(1.7, 0.4, 0.9)),
        ];
        for (fam, hp) in cases {
            let spec = KernelSpec::new(fam);
            let a = eval_kernel(&spec, &hp, &[0.2], &[1.5]).unwrap();
            let b = eval_kernel(&spec, &hp, &[1.5], &[0.2]).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-14);
            let d = eval_kernel(&spec, &hp, &[0.7], &[0.7]).unwrap();
            assert_relative_eq!(d, 1.7 * 1.7, max_relative = 1e-14);
        }
        let spec = KernelSpec::new(KernelFamily::AnisoSe2d);
        let hp = HyperParams::aniso_se(1.7, 0.4, 0.8);
        let a = eval_kernel(&spec, &hp, &[0.2, 0.9], &[1.5, 0.1]).unwrap();
        let b = eval_kernel(&spec, &hp, &[1.5, 0.1], &[0.2, 0.9]).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-14);
    }

    #[test]
    fn se_first_derivative_vanishes_at_zero_lag() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.3, 0.7);
        let v = eval_kernel_derivative(&spec, &hp, &DerivOrder::d1(1, 0), &[0.4], &[0.4]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn se_mixed_derivative_at_zero_lag() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.0, 1.0);
        let v = eval_kernel_derivative(&spec, &hp, &DerivOrder::d1(1, 1), &[0.4], &[0.4]).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn aniso_second_x_derivative_at_zero_lag() {
        let spec = KernelSpec::new(KernelFamily::AnisoSe2d);
        let hp = HyperParams::aniso_se(1.4, 0.5, 0.3);
        let v = eval_kernel_derivative(&spec, &hp, &DerivOrder::d2(0, 2, 0, 0), &[0.1, 0.2], &[0.1, 0.2])
            .unwrap();
        assert_relative_eq!(v, -1.4 * 1.4 / (0.3 * 0.3), max_relative = 1e-14);
    }

    #[test]
    fn unsupported_order_is_a_capability_error() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.0, 1.0);
        let r = eval_kernel_derivative(&spec, &hp, &DerivOrder::d1(2, 0), &[0.0], &[1.0]);
        assert!(matches!(r, Err(KernelError::UnsupportedOrder { .. })));
        let r = eval_kernel_derivative(&spec, &hp, &DerivOrder::d2(0, 1, 0, 0), &[0.0], &[1.0]);
        assert!(matches!(r, Err(KernelError::UnsupportedOrder { .. })));
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.0, 1.0);
        let r = eval_kernel(&spec, &hp, &[0.0, 1.0], &[1.0]);
        assert!(matches!(r, Err(KernelError::DimensionMismatch { .. })));
    }

    #[test]
    fn hyperparam_presence_is_validated() {
        let mut hp = HyperParams::se(1.0, 1.0);
        hp.alpha_rq = Some(2.0);
        assert!(hp.validate(KernelFamily::Se1d).is_err());
        let hp = HyperParams::rq(1.0, 1.0, -2.0);
        assert!(hp.validate(KernelFamily::Rq1d).is_err());
        let hp = HyperParams::se(0.0, 1.0);
        assert!(hp.validate(KernelFamily::Se1d).is_err());
    }

    #[test]
    fn gram_single_point_is_signal_variance() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(2.0, 1.0);
        let pts = Inputs::from_1d(vec![0.7]);
        let g = gram(&spec, &hp, &DerivOrder::zero(), &pts, &pts).unwrap();
        assert_eq!(g.nrows(), 1);
        assert_relative_eq!(g[(0, 0)], 4.0, max_relative = 1e-14);
    }

    #[test]
    fn gram_matches_elementwise_eval() {
        let spec = KernelSpec::new(KernelFamily::Se1d);
        let hp = HyperParams::se(1.2, 0.6);
        let pts = Inputs::from_1d(vec![0.0, 0.5, 1.0]);
        let g = gram(&spec, &hp, &DerivOrder::d1(1, 1), &pts, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = eval_kernel_derivative(
                    &spec,
                    &hp,
                    &DerivOrder::d1(1, 1),
                    pts.point(i),
                    pts.point(j),
                )
                .unwrap();
                assert_eq!(g[(i, j)], e);
            }
        }
    }

    #[test]
    fn stationarity_identity_left_right_derivatives() {
        // For stationary 1D families dK/dp = -dK/dq at any pair.
        let cases = [
            (KernelFamily::Se1d, HyperParams::se(1.1, 0.45)),
            (KernelFamily::Rq1d, HyperParams::rq(0.8, 0.6, 1.9)),
            (KernelFamily::Periodic1d, HyperParams::periodic(1.3, 0.7, 1.05)),
        ];
        for (fam, hp) in cases {
            let spec = KernelSpec::new(fam);
            for k in 0..20 {
                let p = [0.13 * k as f64 - 1.0];
                let q = [0.31 * k as f64 - 2.0];
                let dl =
                    eval_kernel_derivative(&spec, &hp, &DerivOrder::d1(1, 0), &p, &q).unwrap();
                let dr =
                    eval_kernel_derivative(&spec, &hp, &DerivOrder::d1(0, 1), &p, &q).unwrap();
                assert_eq!(dl, -dr);
            }
        }
    }

    #[test]
    fn dual_hyper_derivative_matches_finite_difference() {
        let fam = KernelFamily::Rq1d;
        let hp = HyperParams::rq(1.3, 0.5, 2.1);
        let order = DerivOrder::d1(1, 1);
        let p = [0.4];
        let q = [-0.2];
        for hyper in 0..3 {
            let view = hp_view_dual(fam, &hp, hyper);
            let d = eval_generic(fam, &view, &order, &p, &q).d;
            let h = 1e-6;
            let mut flat_hi = hp.flat(fam);
            let mut flat_lo = flat_hi.clone();
            flat_hi[hyper] += h;
            flat_lo[hyper] -= h;
            let spec = KernelSpec::new(fam);
            let hi = eval_kernel_derivative(&spec, &HyperParams::from_flat(fam, &flat_hi), &order, &p, &q)
                .unwrap();
            let lo = eval_kernel_derivative(&spec, &HyperParams::from_flat(fam, &flat_lo), &order, &p, &q)
                .unwrap();
            let fd = (hi - lo) / (2.0 * h);
            assert_relative_eq!(d, fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }
}
