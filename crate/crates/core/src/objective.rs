//! Penalized subspace objective
//!
//! ```text
//! F(V, α) = ½ { R_S(Vα) + υ|α|² + (η/2) |V'DV|_F² },   D = Σ_T − Σ_S
//! ```
//!
//! its inner ridge solution `α_V`, the reduced objective `Φ(V) = F(V, α_V)`,
//! and the Riemannian gradient of `Φ` on the Stiefel manifold.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scm::{CovariateMoments, EnvironmentMoments};
use crate::stiefel::{StiefelPoint, TangentVector};

/// Ridge weight `upsilon > 0` and stability weight `eta >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    upsilon: f64,
    eta: f64,
}

impl RegParams {
    pub fn new(upsilon: f64, eta: f64) -> Result<Self> {
        if !(upsilon.is_finite() && upsilon > 0.0) {
            return Err(Error::param(
                "upsilon",
                format!("must be positive, got {upsilon}"),
            ));
        }
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::param(
                "eta",
                format!("must be nonnegative, got {eta}"),
            ));
        }
        Ok(Self { upsilon, eta })
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// Labeled source moments, target covariate moments, and the cached shift
/// `D = Σ_T − Σ_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    source: EnvironmentMoments,
    target: CovariateMoments,
    shift: DMatrix<f64>,
}

impl MomentPair {
    pub fn new(source: EnvironmentMoments, target: CovariateMoments) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::dim("moment pair", source.dim(), target.dim()));
        }
        let shift = target.sigma() - source.sigma();
        Ok(Self {
            source,
            target,
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source(&self) -> &EnvironmentMoments {
        &self.source
    }

    pub fn target(&self) -> &CovariateMoments {
        &self.target
    }

    pub fn shift(&self) -> &DMatrix<f64> {
        &self.shift
    }
}

fn check_frame(v: &StiefelPoint, d: usize) -> Result<()> {
    if v.d() != d {
        return Err(Error::dim("subspace frame rows", d, v.d()));
    }
    Ok(())
}

/// `α_V = (V'Σ_S V + υI)^{-1} V' E_S[XY]` via a Cholesky solve.
pub fn inner_ridge(
    v: &StiefelPoint,
    source: &EnvironmentMoments,
    upsilon: f64,
) -> Result<DVector<f64>> {
    check_frame(v, source.dim())?;
    if !(upsilon.is_finite() && upsilon > 0.0) {
        return Err(Error::param(
            "upsilon",
            format!("must be positive, got {upsilon}"),
        ));
    }
    Ok(inner_ridge_unchecked(v.matrix(), source, upsilon))
}

fn inner_ridge_unchecked(
    v: &DMatrix<f64>,
    source: &EnvironmentMoments,
    upsilon: f64,
) -> DVector<f64> {
    let ell = v.ncols();
    let sv = source.sigma() * v;
    let gram = linalg::symmetrize(&v.tr_mul(&sv)) + DMatrix::identity(ell, ell) * upsilon;
    let rhs = v.tr_mul(source.xy());
    linalg::solve_spd(&gram, &rhs).expect("V'ΣV + υI is positive definite for υ > 0")
}

/// `‖V'DV‖_F`.
pub fn stability_penalty(v: &StiefelPoint, m: &MomentPair) -> Result<f64> {
    check_frame(v, m.dim())?;
    Ok(projected_shift(v.matrix(), m).norm())
}

fn projected_shift(v: &DMatrix<f64>, m: &MomentPair) -> DMatrix<f64> {
    v.transpose() * (&m.shift * v)
}

/// `F(V, α)`.
pub fn objective_value(
    v: &StiefelPoint,
    alpha: &DVector<f64>,
    m: &MomentPair,
    reg: &RegParams,
) -> Result<f64> {
    check_frame(v, m.dim())?;
    if alpha.len() != v.ell() {
        return Err(Error::dim("objective alpha", v.ell(), alpha.len()));
    }
    let beta = v.matrix() * alpha;
    let penalty = projected_shift(v.matrix(), m).norm_squared();
    Ok(
        0.5 * (m.source.risk(&beta)?
            + reg.upsilon * alpha.norm_squared()
            + 0.5 * reg.eta * penalty),
    )
}

/// Everything needed at one point of the reduced problem.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub alpha: DVector<f64>,
    pub value: f64,
    /// `‖V'DV‖_F`
    pub penalty: f64,
    /// `R_S(Vα)`
    pub source_risk: f64,
}

/// Evaluates `Φ(V)` together with `α_V`.
pub fn evaluate(v: &StiefelPoint, m: &MomentPair, reg: &RegParams) -> Result<Evaluation> {
    check_frame(v, m.dim())?;
    Ok(evaluate_unchecked(v.matrix(), m, reg))
}

pub(crate) fn evaluate_unchecked(v: &DMatrix<f64>, m: &MomentPair, reg: &RegParams) -> Evaluation {
    let alpha = inner_ridge_unchecked(v, &m.source, reg.upsilon);
    let beta = v * &alpha;
    let source_risk = m.source.risk(&beta).expect("dimensions checked");
    let penalty = projected_shift(v, m).norm();
    let value = 0.5
        * (source_risk + reg.upsilon * alpha.norm_squared() + 0.5 * reg.eta * penalty * penalty);
    Evaluation {
        alpha,
        value,
        penalty,
        source_risk,
    }
}

/// `Φ(V) = min_α F(V, α)`.
pub fn reduced_objective(v: &StiefelPoint, m: &MomentPair, reg: &RegParams) -> Result<f64> {
    evaluate(v, m, reg).map(|e| e.value)
}

/// Euclidean gradient of `Φ` at `V` (envelope in `α`):
/// `(Σ_S V α − E_S[XY]) α' + η D V V'DV`.
pub fn euclidean_gradient(
    v: &StiefelPoint,
    m: &MomentPair,
    reg: &RegParams,
    alpha: &DVector<f64>,
) -> DMatrix<f64> {
    let vm = v.matrix();
    let residual = m.source.sigma() * (vm * alpha) - m.source.xy();
    let dv = &m.shift * vm;
    residual * alpha.transpose() + (&dv * (vm.transpose() * &dv)) * reg.eta
}

/// Riemannian gradient `(I − VV') [(Σ_S V α_V − E_S[XY]) α_V' + η D V V'DV]`.
///
/// `V'` times the bracket is symmetric, so the skew part of the generic
/// tangent projection vanishes and `(I − VV')` alone is the projector.
pub fn riemannian_gradient<'a>(
    v: &'a StiefelPoint,
    m: &MomentPair,
    reg: &RegParams,
) -> Result<TangentVector<'a>> {
    check_frame(v, m.dim())?;
    let alpha = inner_ridge_unchecked(v.matrix(), &m.source, reg.upsilon);
    Ok(gradient_at(v, m, reg, &alpha))
}

pub(crate) fn gradient_at<'a>(
    v: &'a StiefelPoint,
    m: &MomentPair,
    reg: &RegParams,
    alpha: &DVector<f64>,
) -> TangentVector<'a> {
    let egrad = euclidean_gradient(v, m, reg, alpha);
    let vm = v.matrix();
    let grad = &egrad - vm * vm.tr_mul(&egrad);
    #[cfg(debug_assertions)]
    {
        let generic = crate::stiefel::project_tangent(v, &egrad).expect("shapes agree");
        let scale = 1e-8 * (1.0 + egrad.norm());
        debug_assert!(
            (generic.matrix() - &grad).norm() <= scale,
            "projected gradient disagrees with the generic tangent projection"
        );
    }
    TangentVector::new_unchecked(v, grad)
}
