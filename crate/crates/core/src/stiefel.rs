//! Geometry of the Stiefel manifold `St(d, ℓ) = {V ∈ R^{d×ℓ} : V'V = I}`
//! embedded in `R^{d×ℓ}` with the trace inner product.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Feasibility tolerance on `|V'V − I|_F`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// An orthonormal `d × ℓ` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    v: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(v, FEASIBILITY_TOL)
    }

    pub fn with_tolerance(v: DMatrix<f64>, tol: f64) -> Result<Self> {
        if v.ncols() == 0 || v.ncols() > v.nrows() {
            return Err(Error::dim(
                "stiefel frame",
                "1 <= l <= d",
                format!("{}x{}", v.nrows(), v.ncols()),
            ));
        }
        let residual = linalg::orthonormality_residual(&v);
        if !(residual <= tol) {
            return Err(Error::Infeasible { residual });
        }
        Ok(Self { v })
    }

    /// Wraps a matrix the caller already knows is orthonormal.
    pub(crate) fn new_unchecked(v: DMatrix<f64>) -> Self {
        Self { v }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.v
    }

    pub fn d(&self) -> usize {
        self.v.nrows()
    }

    pub fn ell(&self) -> usize {
        self.v.ncols()
    }

    pub fn feasibility_residual(&self) -> f64 {
        linalg::orthonormality_residual(&self.v)
    }
}

/// A tangent vector together with the point it is tangent at.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<'a> {
    base: &'a StiefelPoint,
    xi: DMatrix<f64>,
}

impl<'a> TangentVector<'a> {
    /// Checks `V'ξ + ξ'V = 0` up to `tol · (1 + |ξ|_F)`.
    pub fn new(base: &'a StiefelPoint, xi: DMatrix<f64>, tol: f64) -> Result<Self> {
        check_shape(base, &xi)?;
        let vt_xi = base.v.tr_mul(&xi);
        let residual = (&vt_xi + vt_xi.transpose()).norm();
        if residual > tol * (1.0 + xi.norm()) {
            return Err(Error::Parameter {
                field: "xi".into(),
                reason: format!("not tangent at base point (residual {residual:e})"),
            });
        }
        Ok(Self { base, xi })
    }

    pub(crate) fn new_unchecked(base: &'a StiefelPoint, xi: DMatrix<f64>) -> Self {
        Self { base, xi }
    }

    pub fn base(&self) -> &'a StiefelPoint {
        self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.xi
    }

    pub fn norm(&self) -> f64 {
        self.xi.norm()
    }

    /// Frobenius inner product `tr(ξ'η)`.
    pub fn inner(&self, other: &DMatrix<f64>) -> f64 {
        self.xi.dot(other)
    }

    pub fn scaled(&self, t: f64) -> TangentVector<'a> {
        Self {
            base: self.base,
            xi: &self.xi * t,
        }
    }
}

fn check_shape(p: &StiefelPoint, xi: &DMatrix<f64>) -> Result<()> {
    if xi.shape() != p.v.shape() {
        return Err(Error::dim(
            "tangent vector",
            format!("{}x{}", p.d(), p.ell()),
            format!("{}x{}", xi.nrows(), xi.ncols()),
        ));
    }
    Ok(())
}

fn skew(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a - a.transpose()) * 0.5
}

/// Orthogonal projection onto `T_V St`: `(I − VV')ξ + V skew(V'ξ)`.
pub fn project_tangent<'a>(p: &'a StiefelPoint, xi: &DMatrix<f64>) -> Result<TangentVector<'a>> {
    check_shape(p, xi)?;
    let vt_xi = p.v.tr_mul(xi);
    let normal_free = xi - &p.v * &vt_xi;
    let projected = normal_free + &p.v * skew(&vt_xi);
    Ok(TangentVector::new_unchecked(p, projected))
}

/// Polar retraction `R_V(ξ) = (V + ξ)(I + ξ'ξ)^{-1/2}`.
pub fn retract_polar(p: &StiefelPoint, xi: &TangentVector<'_>) -> Result<StiefelPoint> {
    if !std::ptr::eq(xi.base, p) && xi.base != p {
        return Err(Error::Parameter {
            field: "xi".into(),
            reason: "tangent vector belongs to a different base point".into(),
        });
    }
    Ok(retract_polar_unchecked(p, &xi.xi))
}

/// Retraction without checking that `xi` is tangent at `p`. Computed as the
/// polar factor `Y (Y'Y)^{-1/2}` of `Y = V + ξ`, which equals the form above
/// for tangent `ξ` and does not let rounding in `V'V` accumulate over
/// iterations.
pub fn retract_polar_unchecked(p: &StiefelPoint, xi: &DMatrix<f64>) -> StiefelPoint {
    let y = &p.v + xi;
    let gram = linalg::symmetrize(&y.tr_mul(&y));
    let inv_sqrt = linalg::spd_inv_sqrt(&gram);
    StiefelPoint::new_unchecked(y * inv_sqrt)
}

/// Seeded point: orthonormalized Gaussian `d × ℓ` matrix.
pub fn random_point(d: usize, ell: usize, seed: u64) -> Result<StiefelPoint> {
    if ell == 0 || ell > d {
        return Err(Error::param(
            "ell",
            format!("need 1 <= ell <= d, got ell={ell}, d={d}"),
        ));
    }
    let mut rng = linalg::seeded_rng(seed);
    let g = linalg::gaussian_matrix(d, ell, &mut rng);
    Ok(StiefelPoint::new_unchecked(linalg::orthonormalize(&g)))
}

pub fn check_feasible(v: &DMatrix<f64>, tol: f64) -> bool {
    linalg::orthonormality_residual(v) <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1() -> StiefelPoint {
        StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap()
    }

    #[test]
    fn projection_hand_example() {
        let p = e1();
        let xi = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let t = project_tangent(&p, &xi).unwrap();
        assert!((t.matrix() - DMatrix::from_column_slice(2, 1, &[0.0, 4.0])).norm() < 1e-15);
    }

    #[test]
    fn projection_annihilates_normal_space() {
        let p = random_point(5, 3, 2).unwrap();
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.5, 2.0, -1.0, 0.3, 0.5, 0.3, 4.0]);
        let normal = p.matrix() * s;
        let t = project_tangent(&p, &normal).unwrap();
        assert!(t.norm() < 1e-12);
    }

    #[test]
    fn tangent_input_is_unchanged() {
        let p = random_point(6, 2, 9).unwrap();
        let mut rng = linalg::seeded_rng(4);
        let raw = linalg::gaussian_matrix(6, 2, &mut rng);
        let t = project_tangent(&p, &raw).unwrap();
        let again = project_tangent(&p, t.matrix()).unwrap();
        assert!((again.matrix() - t.matrix()).norm() < 1e-12);
        assert!(TangentVector::new(&p, t.matrix().clone(), 1e-10).is_ok());
        assert!(TangentVector::new(&p, p.matrix().clone(), 1e-10).is_err());
    }

    #[test]
    fn retraction_examples() {
        let p = e1();
        let zero = TangentVector::new(&p, DMatrix::zeros(2, 1), 1e-12).unwrap();
        assert_eq!(retract_polar(&p, &zero).unwrap(), p);

        let up =
            TangentVector::new(&p, DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), 1e-12).unwrap();
        let r = retract_polar(&p, &up).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.matrix() - DMatrix::from_column_slice(2, 1, &[h, h])).norm() < 1e-15);
    }

    #[test]
    fn retraction_stays_feasible() {
        let p = random_point(6, 3, 5).unwrap();
        let mut rng = linalg::seeded_rng(8);
        let t = project_tangent(&p, &linalg::gaussian_matrix(6, 3, &mut rng)).unwrap();
        let r = retract_polar(&p, &t).unwrap();
        assert!(r.feasibility_residual() < 1e-10);
        assert!(check_feasible(r.matrix(), 1e-10));
    }

    #[test]
    fn retraction_rejects_foreign_tangent() {
        let p = random_point(4, 2, 1).unwrap();
        let q = random_point(4, 2, 2).unwrap();
        let t = project_tangent(&q, &DMatrix::from_element(4, 2, 1.0)).unwrap();
        assert!(retract_polar(&p, &t).is_err());
    }

    #[test]
    fn random_point_contract() {
        let q = random_point(3, 3, 1).unwrap();
        assert!((q.matrix().transpose() * q.matrix() - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert!((q.matrix() * q.matrix().transpose() - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert_eq!(
            random_point(7, 6, 4).unwrap(),
            random_point(7, 6, 4).unwrap()
        );
        assert!(check_feasible(
            random_point(7, 6, 4).unwrap().matrix(),
            1e-8
        ));
        assert!(random_point(2, 3, 0).is_err());
    }

    #[test]
    fn feasibility_check() {
        let mut v = DMatrix::<f64>::identity(4, 2);
        assert!(check_feasible(&v, 1e-8));
        v.column_mut(1).scale_mut(1.1);
        assert!(!check_feasible(&v, 1e-8));
        assert!(StiefelPoint::new(v).is_err());
    }
}
