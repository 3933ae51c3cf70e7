//! Numerical checks of the target-risk surrogate bound, the Loewner
//! eigenvalue bounds, the alignment bound and the stability bound.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{self, MomentPair, RegParams};
use crate::optimizer::FitResult;
use crate::scm::{Environment, ScmParams};
use crate::stiefel::StiefelPoint;

/// Lower bound on the admissible-set margin `δ` used by the alignment and
/// stability checks.
pub const DEFAULT_DELTA_FLOOR: f64 = 0.05;

/// Relative stationarity threshold: `‖grad‖_F <= STATIONARITY_REL · (1 + |Φ|)`.
pub const STATIONARITY_REL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// False when an assumption of the bound could not be verified for the
    /// inputs; the inequality is still evaluated.
    pub hypotheses_hold: bool,
    pub warnings: Vec<String>,
    pub inputs: BTreeMap<String, f64>,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            satisfied: holds(lhs, rhs),
            hypotheses_hold: true,
            warnings: Vec::new(),
            inputs: BTreeMap::new(),
        }
    }

    fn input(mut self, key: &str, value: f64) -> Self {
        self.inputs.insert(key.to_string(), value);
        self
    }

    fn warn(&mut self, message: String) {
        self.hypotheses_hold = false;
        self.warnings.push(message);
    }

    /// A failure that the theorem rules out: the inequality is violated even
    /// though every hypothesis was verified.
    pub fn is_violation(&self) -> bool {
        !self.satisfied && self.hypotheses_hold
    }
}

/// `lhs <= rhs + 1e-10 (1 + |rhs|)`; an infinite `rhs` always holds.
pub fn holds(lhs: f64, rhs: f64) -> bool {
    if rhs == f64::INFINITY {
        return !lhs.is_nan();
    }
    lhs <= rhs + 1e-10 * (1.0 + rhs.abs())
}

fn population_pair(params: &ScmParams) -> MomentPair {
    MomentPair::new(
        params.population_moments(Environment::Source),
        params.population_moments(Environment::Target).covariates(),
    )
    .expect("population moments share a dimension")
}

/// `R_S(Vα) <= R_T(Vα) <= R_S(Vα) + ((1+ξ)ζ/2)‖α‖⁴ + ((1+ξ)/(2ζ))‖V'DV‖_F²
/// + (1 + 1/ξ)<c, Dc>` with `c = β⋆ + Δγ`.
pub fn surrogate_bound_check(
    params: &ScmParams,
    v: &StiefelPoint,
    alpha: &DVector<f64>,
    xi: f64,
    zeta: f64,
) -> Result<BoundReport> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::param("xi", "must be positive"));
    }
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::param("zeta", "must be positive"));
    }
    if v.d() != params.d() || alpha.len() != v.ell() {
        return Err(Error::dim(
            "surrogate bound inputs",
            format!("V {}x{}, alpha {}", params.d(), v.ell(), v.ell()),
            format!("V {}x{}, alpha {}", v.d(), v.ell(), alpha.len()),
        ));
    }
    let lambda_shift = params.lambda(Environment::Target) - params.lambda(Environment::Source);
    let min_shift = linalg::min_eigenvalue(&lambda_shift);
    if min_shift < -params.tolerance() {
        return Err(Error::Hypothesis(format!(
            "covariance shift is not PSD on span(delta) (min eigenvalue {min_shift:e})"
        )));
    }

    let source = params.population_moments(Environment::Source);
    let target = params.population_moments(Environment::Target);
    let beta = v.matrix() * alpha;
    let risk_source = source.risk(&beta)?;
    let risk_target = target.risk(&beta)?;
    let shift = params.covariance_shift();
    let center = params.endogenous_center();
    let penalty_sq = (v.matrix().transpose() * &shift * v.matrix()).norm_squared();
    let alpha_term = (1.0 + xi) * zeta / 2.0 * alpha.norm_squared().powi(2);
    let penalty_term = (1.0 + xi) / (2.0 * zeta) * penalty_sq;
    let oracle_term = (1.0 + 1.0 / xi) * center.dot(&(&shift * &center));
    let rhs = risk_source + alpha_term + penalty_term + oracle_term;

    let lower_ok = holds(risk_source, risk_target);
    let mut report = BoundReport::new("surrogate_target_bound", risk_target, rhs)
        .input("xi", xi)
        .input("zeta", zeta)
        .input("risk_source", risk_source)
        .input("alpha_term", alpha_term)
        .input("penalty_term", penalty_term)
        .input("oracle_term", oracle_term)
        .input("lower_bound_holds", if lower_ok { 1.0 } else { 0.0 });
    report.satisfied &= lower_ok;
    if min_shift <= 0.0 {
        report.warn("target is not strictly richer than source".into());
    }
    Ok(report)
}

/// Spectra of the two matrices in the Loewner eigenvalue lemma and the three
/// inequalities checked on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    /// Eigenvalue range of `I − Σ^{1/2}V(V'ΣV + υI)^{-1}V'Σ^{1/2}`.
    pub first_min: f64,
    pub first_max: f64,
    /// Largest eigenvalue of `Σ^{1/2}V(V'ΣV + υI)^{-2}V'Σ^{1/2}`.
    pub second_max: f64,
    pub checks: Vec<BoundReport>,
}

impl LemmaReport {
    pub fn satisfied(&self) -> bool {
        self.checks.iter().all(|c| c.satisfied)
    }
}

pub fn eigenvalue_lemma_check(
    sigma: &DMatrix<f64>,
    v: &StiefelPoint,
    upsilon: f64,
) -> Result<LemmaReport> {
    if !(upsilon > 0.0 && upsilon.is_finite()) {
        return Err(Error::param("upsilon", "must be positive"));
    }
    if sigma.nrows() != v.d() || !sigma.is_square() {
        return Err(Error::dim("lemma sigma", v.d(), sigma.nrows()));
    }
    let root = linalg::psd_sqrt(sigma, "sigma")?;
    let d = v.d();
    let ell = v.ell();
    let vm = v.matrix();
    let a = &root * vm;
    let gram =
        linalg::symmetrize(&(vm.transpose() * sigma * vm)) + DMatrix::identity(ell, ell) * upsilon;
    let inv = linalg::spectral_map(&gram, |x| 1.0 / x);
    let first = DMatrix::identity(d, d) - &a * &inv * a.transpose();
    let second = &a * (&inv * &inv) * a.transpose();

    let (first_eigs, _) = linalg::sym_eigen(&first);
    let first_min = first_eigs[0];
    let first_max = first_eigs[d - 1];
    let second_max = linalg::max_eigenvalue(&second);
    let lambda_max = linalg::max_eigenvalue(sigma).max(0.0);
    let lower = upsilon / (upsilon + lambda_max);

    let checks = vec![
        BoundReport::new("lemma_first_lower", lower, first_min)
            .input("lambda_max_sigma", lambda_max),
        BoundReport::new("lemma_first_upper", first_max, 1.0),
        BoundReport::new("lemma_second_upper", second_max, 1.0 / (4.0 * upsilon))
            .input("upsilon", upsilon),
    ];
    Ok(LemmaReport {
        first_min,
        first_max,
        second_max,
        checks,
    })
}

/// Population constants shared by the alignment and stability bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub lambda_max_sigma_source: f64,
    /// `‖Σ_S^{-1/2} E_S[XY]‖²`
    pub whitened_signal_sq: f64,
    pub lambda_min_shift: f64,
    pub lambda_max_shift: f64,
    /// `<β⋆ + Δγ, D(β⋆ + Δγ)>`
    pub oracle_term: f64,
}

impl BoundConstants {
    pub fn from_params(params: &ScmParams) -> Self {
        let source = params.population_moments(Environment::Source);
        let shift = params.covariance_shift();
        let restricted = params.delta().transpose() * &shift * params.delta();
        let whitened = linalg::solve_spd(source.sigma(), source.xy())
            .expect("population Σ_S is positive definite");
        let center = params.endogenous_center();
        let (lambda_min_shift, lambda_max_shift) = if params.r() == 0 {
            (0.0, 0.0)
        } else {
            (
                linalg::min_eigenvalue(&restricted),
                linalg::max_eigenvalue(&restricted),
            )
        };
        Self {
            lambda_max_sigma_source: linalg::max_eigenvalue(source.sigma()),
            whitened_signal_sq: source.xy().dot(&whitened),
            lambda_min_shift,
            lambda_max_shift,
            oracle_term: center.dot(&(&shift * &center)),
        }
    }

    /// `δ^{-1} λ_max(Σ_S) ‖Σ_S^{-1/2}E_S[XY]‖⁴ / (λ_min(Δ'DΔ)⁴ · 4υη²)`.
    pub fn alignment_rhs(&self, delta: f64, reg: &RegParams) -> f64 {
        let denom = self.lambda_min_shift.powi(4) * 4.0 * reg.upsilon() * reg.eta().powi(2);
        if denom <= 0.0 {
            return f64::INFINITY;
        }
        self.lambda_max_sigma_source * self.whitened_signal_sq.powi(2) / (delta * denom)
    }

    /// `S_{ε,δ} = (1 + 1/ε) δ^{-1/3} λ_max(Σ_S)^{1/3} λ_max(Δ'DΔ) /
    /// λ_min(Δ'DΔ)^{4/3} · ‖Σ_S^{-1/2}E_S[XY]‖^{10/3}`.
    pub fn stability_constant(&self, delta: f64, epsilon: f64) -> f64 {
        if self.lambda_min_shift <= 0.0 {
            return f64::INFINITY;
        }
        (1.0 + 1.0 / epsilon)
            * delta.powf(-1.0 / 3.0)
            * self.lambda_max_sigma_source.cbrt()
            * self.lambda_max_shift
            / self.lambda_min_shift.powf(4.0 / 3.0)
            * self.whitened_signal_sq.powf(5.0 / 3.0)
    }
}

/// Hypothesis bookkeeping shared by the alignment and stability checks.
struct Admissibility {
    delta_used: f64,
    delta_hat: f64,
    cosine: f64,
    residual: f64,
    warnings: Vec<String>,
}

fn admissibility(
    params: &ScmParams,
    v: &StiefelPoint,
    reg: &RegParams,
    delta_floor: f64,
) -> Result<Admissibility> {
    if v.d() != params.d() {
        return Err(Error::dim("bound frame rows", params.d(), v.d()));
    }
    if !(delta_floor > 0.0 && delta_floor < 1.0) {
        return Err(Error::param("delta_floor", "must lie in (0, 1)"));
    }
    let pair = population_pair(params);
    let eval = objective::evaluate(v, &pair, reg)?;
    let residual = objective::riemannian_gradient(v, &pair, reg)?.norm();
    let cosine = linalg::op_norm(&(v.matrix().transpose() * params.delta()));
    let delta_hat = 1.0 - cosine * cosine;

    let mut warnings = Vec::new();
    if residual > STATIONARITY_REL * (1.0 + eval.value.abs()) {
        warnings.push(format!("not stationary: |grad| = {residual:e}"));
    }
    let delta_used = if delta_hat >= delta_floor {
        delta_hat
    } else {
        warnings.push(format!(
            "outside admissible set: 1 - |V'Δ|² = {delta_hat:.3e} below floor {delta_floor}"
        ));
        delta_floor
    };
    let delta_residual = linalg::orthonormality_residual(params.delta());
    if delta_residual > params.tolerance() {
        warnings.push(format!("Δ'Δ != I (residual {delta_residual:e})"));
    }
    if !params.is_richer_target() {
        warnings.push("Λ_T - Λ_S is not positive definite".into());
    }
    Ok(Admissibility {
        delta_used,
        delta_hat,
        cosine,
        residual,
        warnings,
    })
}

/// `‖V'Δ‖_op⁶ <= δ^{-1} λ_max(Σ_S) ‖Σ_S^{-1/2}E_S[XY]‖⁴ / λ_min(Δ'DΔ)⁴ · 1/(4υη²)`
/// at a stationary `V`, with `δ = max(1 − ‖V'Δ‖²_op, delta_floor)`.
pub fn alignment_bound_check(
    params: &ScmParams,
    v: &StiefelPoint,
    reg: &RegParams,
    delta_floor: f64,
) -> Result<BoundReport> {
    let adm = admissibility(params, v, reg, delta_floor)?;
    let constants = BoundConstants::from_params(params);
    let rhs = constants.alignment_rhs(adm.delta_used, reg);
    let mut report = BoundReport::new("alignment", adm.cosine.powi(6), rhs);
    finish(&mut report, &adm, reg);
    Ok(report
        .input("canonical_cosine", adm.cosine)
        .input("lambda_min_shift", constants.lambda_min_shift)
        .input("whitened_signal_sq", constants.whitened_signal_sq))
}

/// `R_T(β) − R_S(β) <= (1 + ε)<c, Dc> + S_{ε,δ} / ((4υ)^{4/3} η^{2/3})` for the
/// fitted `β = Vα`.
pub fn stability_bound_check(
    params: &ScmParams,
    fit: &FitResult,
    reg: &RegParams,
    delta_floor: f64,
    epsilon: f64,
) -> Result<BoundReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::param("epsilon", "must be positive"));
    }
    let adm = admissibility(params, &fit.v, reg, delta_floor)?;
    let constants = BoundConstants::from_params(params);
    let gap = params.risk_gap_identity(&fit.beta)?.gap;
    let oracle_part = (1.0 + epsilon) * constants.oracle_term;
    let s_const = constants.stability_constant(adm.delta_used, epsilon);
    let decay = (4.0 * reg.upsilon()).powf(4.0 / 3.0) * reg.eta().powf(2.0 / 3.0);
    let decay_part = if decay > 0.0 {
        s_const / decay
    } else {
        f64::INFINITY
    };
    let mut report = BoundReport::new("stability", gap, oracle_part + decay_part);
    finish(&mut report, &adm, reg);
    Ok(report
        .input("epsilon", epsilon)
        .input("oracle_part", oracle_part)
        .input("decay_part", decay_part)
        .input("stability_constant", s_const))
}

fn finish(report: &mut BoundReport, adm: &Admissibility, reg: &RegParams) {
    for w in &adm.warnings {
        report.warn(w.clone());
    }
    report.inputs.insert("delta".into(), adm.delta_used);
    report.inputs.insert("delta_hat".into(), adm.delta_hat);
    report.inputs.insert(
        "delta_from_floor".into(),
        if adm.delta_used > adm.delta_hat {
            1.0
        } else {
            0.0
        },
    );
    report
        .inputs
        .insert("stationarity_residual".into(), adm.residual);
    report.inputs.insert("upsilon".into(), reg.upsilon());
    report.inputs.insert("eta".into(), reg.eta());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::ScmParts;

    fn diag(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(values))
    }

    fn e(d: usize, i: usize) -> StiefelPoint {
        let mut m = DMatrix::zeros(d, 1);
        m[(i, 0)] = 1.0;
        StiefelPoint::new(m).unwrap()
    }

    fn t1() -> ScmParams {
        ScmParams::new(ScmParts {
            beta_star: DVector::from_vec(vec![1.0, 0.0]),
            gamma: DVector::from_vec(vec![1.0]),
            theta: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            delta: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            cov_z: DMatrix::from_element(1, 1, 1.0),
            lambda_source: DMatrix::from_element(1, 1, 1.0),
            lambda_target: DMatrix::from_element(1, 1, 4.0),
            tau_sq: 1.0,
            sigma_u_sq: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn lemma_tight_case() {
        let report = eigenvalue_lemma_check(&diag(&[2.0, 2.0]), &e(2, 0), 2.0).unwrap();
        assert!((report.first_min - 0.5).abs() < 1e-12);
        assert!((report.first_max - 1.0).abs() < 1e-12);
        assert!((report.second_max - 0.125).abs() < 1e-12);
        assert!(report.satisfied());
    }

    #[test]
    fn lemma_zero_sigma() {
        let report = eigenvalue_lemma_check(&DMatrix::zeros(3, 3), &e(3, 1), 0.7).unwrap();
        assert!((report.first_min - 1.0).abs() < 1e-12);
        assert!((report.first_max - 1.0).abs() < 1e-12);
        assert!(report.second_max.abs() < 1e-12);
    }

    #[test]
    fn surrogate_with_zero_alpha() {
        let p = t1();
        let r = surrogate_bound_check(&p, &e(2, 1), &DVector::zeros(1), 0.5, 1.0).unwrap();
        assert!(r.satisfied);
        assert_eq!(r.inputs["alpha_term"], 0.0);
        let expected = r.inputs["risk_source"] + r.inputs["oracle_term"] + r.inputs["penalty_term"];
        assert!((r.rhs - expected).abs() < 1e-12);
        assert!(r.lhs >= r.inputs["risk_source"]);
    }

    #[test]
    fn surrogate_penalty_vanishes_on_invariant_axis() {
        let r = surrogate_bound_check(&t1(), &e(2, 0), &DVector::from_element(1, 0.7), 2.0, 0.1)
            .unwrap();
        assert_eq!(r.inputs["penalty_term"], 0.0);
        assert!(r.satisfied);
    }

    #[test]
    fn surrogate_rejects_poorer_target() {
        let mut parts = t1().to_parts();
        parts.lambda_target = DMatrix::from_element(1, 1, 0.5);
        let p = ScmParams::new(parts).unwrap();
        assert!(matches!(
            surrogate_bound_check(&p, &e(2, 0), &DVector::zeros(1), 1.0, 1.0),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn alignment_orthogonal_frame_has_zero_lhs() {
        let p = t1();
        let reg = RegParams::new(1.0, 10.0).unwrap();
        let r = alignment_bound_check(&p, &e(2, 0), &reg, DEFAULT_DELTA_FLOOR).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.satisfied);
        assert_eq!(r.inputs["delta"], 1.0);
    }

    #[test]
    fn stability_constant_monotone_in_epsilon() {
        let p = crate::scm::random_params(5, 2, 2, 4).unwrap();
        let c = BoundConstants::from_params(&p);
        let eps = [0.1, 1.0, 10.0];
        let first: Vec<f64> = eps.iter().map(|e| (1.0 + e) * c.oracle_term).collect();
        let s: Vec<f64> = eps.iter().map(|&e| c.stability_constant(0.5, e)).collect();
        assert!(first.windows(2).all(|w| w[1] > w[0]));
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        let core = c.stability_constant(0.5, f64::MAX);
        assert!(s[2] > core && s[2] < 1.2 * core);
    }

    #[test]
    fn holds_tolerance() {
        assert!(holds(1.0, 1.0));
        assert!(holds(1.0 + 1e-11, 1.0));
        assert!(!holds(1.0 + 1e-8, 1.0));
        assert!(holds(5.0, f64::INFINITY));
    }
}
