//! Linear differential operators applied to base kernels.
//!
//! For an operator `L` with terms `sum_k c_k(phi) D^(a_k)`, the four block
//! kernels of the joint process (u, f = L u) are bilinear combinations of
//! base-kernel derivatives:
//!
//! ```text
//! K_uu(p,q) = K(p,q)
//! K_uf(p,q) = sum_b c_b D^(0|b) K(p,q)          (operator on the 2nd arg)
//! K_fu(p,q) = sum_a c_a D^(a|0) K(p,q)          (operator on the 1st arg)
//! K_ff(p,q) = sum_{a,b} c_a c_b D^(a|b) K(p,q)
//! ```
//!
//! The full product expansion is kept, including cross terms that happen to
//! cancel for stationary bases; the simplified stationary forms serve as a
//! test oracle, not as the shipped path.
//!
//! Coefficients are stored symbolically as `const * prod phi_k^p` so that
//! their exact derivatives with respect to the physical parameters are
//! available to the likelihood gradients.

use thiserror::Error;

use crate::kernel::{
    eval_kernel_derivative, supports, DerivOrder, HyperParams, KernelError, KernelSpec,
};

/// Named, strictly positive physical parameters of an operator.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysParams {
    names: Vec<&'static str>,
    values: Vec<f64>,
}

impl PhysParams {
    pub fn new(op: &LinearOperatorSpec, values: Vec<f64>) -> Result<Self, PhysicsError> {
        if values.len() != op.param_names.len() {
            return Err(PhysicsError::ParamMismatch {
                expected: op.param_names.join(","),
                got: format!("{} value(s)", values.len()),
            });
        }
        if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(PhysicsError::NonPositiveParam(format!("{values:?}")));
        }
        Ok(PhysParams {
            names: op.param_names.clone(),
            values,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values[i])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }
}

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("physical parameters do not match operator (expected {expected}, got {got})")]
    ParamMismatch { expected: String, got: String },
    #[error("physical parameters must be strictly positive: {0}")]
    NonPositiveParam(String),
    #[error("operator needs derivative orders the kernel family does not support: {0}")]
    UnsupportedComposition(String),
    #[error("unsupported mean function for this operation: {0}")]
    UnsupportedMean(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Symbolic coefficient `constant * prod_k phi_k^pow`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coeff {
    pub constant: f64,
    pub powers: Vec<(usize, i32)>,
}

impl Coeff {
    pub fn constant(c: f64) -> Self {
        Coeff {
            constant: c,
            powers: Vec::new(),
        }
    }

    /// `c * phi_k^pow`.
    pub fn scaled_power(c: f64, k: usize, pow: i32) -> Self {
        Coeff {
            constant: c,
            powers: vec![(k, pow)],
        }
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        self.powers
            .iter()
            .fold(self.constant, |acc, &(k, p)| acc * phi[k].powi(p))
    }

    /// Exact derivative with respect to `phi[k]`.
    pub fn dvalue(&self, phi: &[f64], k: usize) -> f64 {
        let total: i32 = self
            .powers
            .iter()
            .filter(|(i, _)| *i == k)
            .map(|(_, p)| *p)
            .sum();
        if total == 0 {
            0.0
        } else {
            f64::from(total) / phi[k] * self.value(phi)
        }
    }

    pub fn product(&self, other: &Coeff) -> Coeff {
        let mut powers = self.powers.clone();
        for &(k, p) in &other.powers {
            if let Some(slot) = powers.iter_mut().find(|(i, _)| *i == k) {
                slot.1 += p;
            } else {
                powers.push((k, p));
            }
        }
        powers.retain(|(_, p)| *p != 0);
        Coeff {
            constant: self.constant * other.constant,
            powers,
        }
    }
}

/// One operator term: coefficient times a derivative multi-index per input dim.
#[derive(Clone, Debug, PartialEq)]
pub struct OpTerm {
    pub coeff: Coeff,
    pub order: [u8; 2],
}

/// A linear differential operator `L = sum_k c_k(phi) D^(a_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperatorSpec {
    pub input_dim: usize,
    pub param_names: Vec<&'static str>,
    pub terms: Vec<OpTerm>,
}

impl LinearOperatorSpec {
    /// Sum of zero-order coefficients; the action of `L` on a constant mean.
    pub fn constant_action(&self, phi: &[f64]) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.order == [0, 0])
            .map(|t| t.coeff.value(phi))
            .sum()
    }
}

/// Two-parameter Windkessel operator: `Q = R^-1 P + C dP/dt`.
pub fn wk2_operator() -> LinearOperatorSpec {
    LinearOperatorSpec {
        input_dim: 1,
        param_names: vec!["R", "C"],
        terms: vec![
            OpTerm {
                coeff: Coeff::scaled_power(1.0, 0, -1),
                order: [0, 0],
            },
            OpTerm {
                coeff: Coeff::scaled_power(1.0, 1, 1),
                order: [1, 0],
            },
        ],
    }
}

/// Heat operator: `f = du/dt - alpha d2u/dx2` over inputs (t, x).
pub fn heat_operator() -> LinearOperatorSpec {
    LinearOperatorSpec {
        input_dim: 2,
        param_names: vec!["alpha"],
        terms: vec![
            OpTerm {
                coeff: Coeff::constant(1.0),
                order: [1, 0],
            },
            OpTerm {
                coeff: Coeff::scaled_power(-1.0, 0, 1),
                order: [0, 2],
            },
        ],
    }
}

/// The four covariance blocks of the joint (u, f) process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    UU,
    UF,
    FU,
    FF,
}

/// Piece decomposition of a block: `sum_p coeff_p(phi) * D^(order_p) K`.
pub(crate) fn block_pieces(op: &LinearOperatorSpec, block: Block) -> Vec<(Coeff, DerivOrder)> {
    let zero = [0u8, 0u8];
    match block {
        Block::UU => vec![(Coeff::constant(1.0), DerivOrder::zero())],
        Block::UF => op
            .terms
            .iter()
            .map(|t| {
                (
                    t.coeff.clone(),
                    DerivOrder {
                        left: zero,
                        right: t.order,
                    },
                )
            })
            .collect(),
        Block::FU => op
            .terms
            .iter()
            .map(|t| {
                (
                    t.coeff.clone(),
                    DerivOrder {
                        left: t.order,
                        right: zero,
                    },
                )
            })
            .collect(),
        Block::FF => {
            let mut pieces = Vec::with_capacity(op.terms.len() * op.terms.len());
            for a in &op.terms {
                for b in &op.terms {
                    pieces.push((
                        a.coeff.product(&b.coeff),
                        DerivOrder {
                            left: a.order,
                            right: b.order,
                        },
                    ));
                }
            }
            pieces
        }
    }
}

/// A base kernel paired with an operator and concrete physical parameters.
#[derive(Clone, Debug)]
pub struct BlockKernel {
    pub spec: KernelSpec,
    pub hp: HyperParams,
    pub op: LinearOperatorSpec,
    pub phi: PhysParams,
}

impl BlockKernel {
    pub fn new(
        spec: KernelSpec,
        hp: HyperParams,
        op: LinearOperatorSpec,
        phi: PhysParams,
    ) -> Result<Self, PhysicsError> {
        hp.validate(spec.family)?;
        if op.input_dim != spec.input_dim {
            return Err(PhysicsError::UnsupportedComposition(format!(
                "operator input dim {} vs kernel dim {}",
                op.input_dim, spec.input_dim
            )));
        }
        if op.terms.is_empty() {
            return Err(PhysicsError::UnsupportedComposition(
                "operator has no terms".into(),
            ));
        }
        // Every composed left|right order must exist in the kernel family.
        for (_, order) in block_pieces(&op, Block::FF) {
            if !supports(spec.family, &order) {
                return Err(PhysicsError::UnsupportedComposition(format!(
                    "composed order {order:?} unsupported by {:?}",
                    spec.family
                )));
            }
        }
        Ok(BlockKernel { spec, hp, op, phi })
    }

    /// Evaluate one block kernel entry.
    pub fn block_eval(&self, block: Block, p: &[f64], q: &[f64]) -> Result<f64, PhysicsError> {
        let phi = self.phi.values();
        let mut acc = 0.0;
        for (coeff, order) in block_pieces(&self.op, block) {
            let d = eval_kernel_derivative(&self.spec, &self.hp, &order, p, q)?;
            acc += coeff.value(phi) * d;
        }
        Ok(acc)
    }
}

/// Mean functions the operators can act on.
#[derive(Clone, Debug, PartialEq)]
pub enum MeanFn {
    Const(f64),
    /// 1D polynomial, ascending coefficients.
    Poly1d(Vec<f64>),
}

impl MeanFn {
    pub fn eval(&self, p: &[f64]) -> f64 {
        match self {
            MeanFn::Const(c) => *c,
            MeanFn::Poly1d(coeffs) => {
                let t = p[0];
                coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
        }
    }

    fn derivative(&self, order: [u8; 2]) -> Result<MeanFn, PhysicsError> {
        match self {
            MeanFn::Const(c) => {
                if order == [0, 0] {
                    Ok(MeanFn::Const(*c))
                } else {
                    Ok(MeanFn::Const(0.0))
                }
            }
            MeanFn::Poly1d(coeffs) => {
                if order[1] != 0 {
                    return Err(PhysicsError::UnsupportedMean(
                        "1D polynomial mean differentiated in a second dimension".into(),
                    ));
                }
                let mut c = coeffs.clone();
                for _ in 0..order[0] {
                    c = c
                        .iter()
                        .enumerate()
                        .skip(1)
                        .map(|(k, v)| k as f64 * v)
                        .collect();
                }
                Ok(MeanFn::Poly1d(if c.is_empty() { vec![0.0] } else { c }))
            }
        }
    }

    fn add_scaled(&self, other: &MeanFn, s: f64) -> Result<MeanFn, PhysicsError> {
        match (self, other) {
            (MeanFn::Const(a), MeanFn::Const(b)) => Ok(MeanFn::Const(a + s * b)),
            (MeanFn::Poly1d(a), MeanFn::Poly1d(b)) => {
                let n = a.len().max(b.len());
                let mut c = vec![0.0; n];
                for (i, slot) in c.iter_mut().enumerate() {
                    *slot = a.get(i).copied().unwrap_or(0.0) + s * b.get(i).copied().unwrap_or(0.0);
                }
                Ok(MeanFn::Poly1d(c))
            }
            (MeanFn::Poly1d(a), MeanFn::Const(b)) => {
                let mut c = a.clone();
                c[0] += s * b;
                Ok(MeanFn::Poly1d(c))
            }
            (MeanFn::Const(a), MeanFn::Poly1d(b)) => {
                let mut c: Vec<f64> = b.iter().map(|v| s * v).collect();
                c[0] += a;
                Ok(MeanFn::Poly1d(c))
            }
        }
    }
}

/// Induced mean of the f channel: `mu_f = L mu_u`.
pub fn mean_f(
    mu_u: &MeanFn,
    op: &LinearOperatorSpec,
    phi: &PhysParams,
) -> Result<MeanFn, PhysicsError> {
    let values = phi.values();
    let mut acc = MeanFn::Const(0.0);
    for term in &op.terms {
        let d = mu_u.derivative(term.order)?;
        acc = acc.add_scaled(&d, term.coeff.value(values))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;
    use approx::assert_relative_eq;

    fn wk2_block(r: f64, c: f64, sigma: f64, ell: f64) -> BlockKernel {
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

    #[test]
    fn coeff_values_and_derivatives() {
        let phi = [1.25, 2.0];
        let r_inv = Coeff::scaled_power(1.0, 0, -1);
        assert_relative_eq!(r_inv.value(&phi), 0.8);
        assert_relative_eq!(r_inv.dvalue(&phi, 0), -1.0 / (1.25 * 1.25));
        assert_eq!(r_inv.dvalue(&phi, 1), 0.0);
        let prod = r_inv.product(&Coeff::scaled_power(1.0, 1, 1));
        assert_relative_eq!(prod.value(&phi), 2.0 / 1.25);
        assert_relative_eq!(prod.dvalue(&phi, 1), 1.0 / 1.25);
    }

    #[test]
    fn wk2_degenerates_to_scaling_when_compliance_is_tiny() {
        // With C ~ 0 the cross block reduces to R^-1 K_PP pointwise.
        let bk = wk2_block(2.0, 1e-300, 1.3, 0.5);
        for k in 0..10 {
            let p = [0.1 * k as f64];
            let q = [0.37 * k as f64 - 1.0];
            let uf = bk.block_eval(Block::UF, &p, &q).unwrap();
            let uu = bk.block_eval(Block::UU, &p, &q).unwrap();
            assert_relative_eq!(uf, 0.5 * uu, max_relative = 1e-12);
        }
    }

    #[test]
    fn wk2_ff_zero_lag_value() {
        let (sigma, ell) = (1.7, 0.6);
        let bk = wk2_block(1.0, 1.1, sigma, ell);
        let v = bk.block_eval(Block::FF, &[0.3], &[0.3]).unwrap();
        let expect = sigma * sigma * (1.0 + 1.1 * 1.1 / (ell * ell));
        assert_relative_eq!(v, expect, max_relative = 1e-12);
    }

    #[test]
    fn wk2_uf_zero_lag_drops_derivative_term() {
        let bk = wk2_block(1.25, 0.9, 2.0, 0.5);
        let v = bk.block_eval(Block::UF, &[0.2], &[0.2]).unwrap();
        assert_relative_eq!(v, 4.0 / 1.25, max_relative = 1e-12);
    }

    #[test]
    fn uu_ignores_physical_parameters() {
        let a = wk2_block(1.0, 1.1, 1.0, 0.4);
        let b = wk2_block(2.7, 0.2, 1.0, 0.4);
        let p = [0.3];
        let q = [0.9];
        assert_eq!(
            a.block_eval(Block::UU, &p, &q).unwrap(),
            b.block_eval(Block::UU, &p, &q).unwrap()
        );
    }

    #[test]
    fn adjoint_symmetry_fu_equals_uf_swapped() {
        let bk = wk2_block(1.4, 0.8, 1.1, 0.5);
        for k in 0..25 {
            let p = [0.17 * k as f64 - 2.0];
            let q = [0.07 * k as f64];
            let fu = bk.block_eval(Block::FU, &p, &q).unwrap();
            let uf = bk.block_eval(Block::UF, &q, &p).unwrap();
            assert_relative_eq!(fu, uf, max_relative = 1e-13, epsilon = 1e-15);
        }
    }

    #[test]
    fn heat_ff_zero_lag_value() {
        let op = heat_operator();
        let phi = PhysParams::new(&op, vec![1.0]).unwrap();
        let (lt, lx) = (0.7, 0.4);
        let bk = BlockKernel::new(
            KernelSpec::new(KernelFamily::AnisoSe2d),
            HyperParams::aniso_se(1.0, lt, lx),
            op,
            phi,
        )
        .unwrap();
        let p = [0.3, 0.6];
        let v = bk.block_eval(Block::FF, &p, &p).unwrap();
        let expect = 1.0 / (lt * lt) + 3.0 / (lx * lx * lx * lx);
        assert_relative_eq!(v, expect, max_relative = 1e-12);
    }

    #[test]
    fn heat_with_zero_alpha_reduces_to_time_derivative_block() {
        let op = heat_operator();
        let phi = PhysParams::new(&op, vec![1e-300]).unwrap();
        let spec = KernelSpec::new(KernelFamily::AnisoSe2d);
        let hp = HyperParams::aniso_se(1.2, 0.5, 0.3);
        let bk = BlockKernel::new(spec, hp.clone(), op, phi).unwrap();
        let p = [0.1, 0.8];
        let q = [0.7, 0.2];
        let ff = bk.block_eval(Block::FF, &p, &q).unwrap();
        let dtdt = eval_kernel_derivative(&spec, &hp, &DerivOrder::d2(1, 0, 1, 0), &p, &q).unwrap();
        assert_relative_eq!(ff, dtdt, max_relative = 1e-10, epsilon = 1e-280);
    }

    #[test]
    fn constant_mean_maps_through_wk2() {
        let op = wk2_operator();
        let phi = PhysParams::new(&op, vec![1.25, 0.77]).unwrap();
        let mu = mean_f(&MeanFn::Const(100.0), &op, &phi).unwrap();
        assert_relative_eq!(mu.eval(&[0.5]), 80.0, max_relative = 1e-14);
        let zero = mean_f(&MeanFn::Const(0.0), &op, &phi).unwrap();
        assert_eq!(zero.eval(&[1.0]), 0.0);
    }

    #[test]
    fn constant_mean_maps_to_zero_through_heat() {
        let op = heat_operator();
        let phi = PhysParams::new(&op, vec![2.0]).unwrap();
        let mu = mean_f(&MeanFn::Const(0.5), &op, &phi).unwrap();
        assert_eq!(mu.eval(&[0.3, 0.4]), 0.0);
    }

    #[test]
    fn polynomial_mean_maps_through_wk2() {
        // mu_P(t) = 2 + 3t; L mu = R^-1 (2 + 3t) + 3C.
        let op = wk2_operator();
        let phi = PhysParams::new(&op, vec![2.0, 0.5]).unwrap();
        let mu = mean_f(&MeanFn::Poly1d(vec![2.0, 3.0]), &op, &phi).unwrap();
        let t = 0.7;
        assert_relative_eq!(
            mu.eval(&[t]),
            0.5 * (2.0 + 3.0 * t) + 3.0 * 0.5,
            max_relative = 1e-14
        );
    }

    #[test]
    fn mean_capability_error_for_poly_in_second_dim() {
        let op = heat_operator();
        let phi = PhysParams::new(&op, vec![1.0]).unwrap();
        let r = mean_f(&MeanFn::Poly1d(vec![0.0, 1.0]), &op, &phi);
        assert!(matches!(r, Err(PhysicsError::UnsupportedMean(_))));
    }

    #[test]
    fn phys_params_validated_against_operator() {
        let op = wk2_operator();
        assert!(PhysParams::new(&op, vec![1.0]).is_err());
        assert!(PhysParams::new(&op, vec![1.0, -0.1]).is_err());
        let ok = PhysParams::new(&op, vec![1.0, 1.1]).unwrap();
        assert_eq!(ok.get("C"), Some(1.1));
    }
}
