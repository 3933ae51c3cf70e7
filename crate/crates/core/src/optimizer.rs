//! Riemannian gradient descent on `St(d, ℓ)` with Armijo backtracking and the
//! polar retraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{self, Evaluation, MomentPair, RegParams};
use crate::stiefel::{self, StiefelPoint, TangentVector, FEASIBILITY_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Stop once `‖grad‖_F <= grad_tol`.
    pub grad_tol: f64,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    /// Seed of the random initial frame; restart `i` uses `seed + i`.
    pub seed: u64,
    /// Number of random starts for [`minimize_multistart`].
    pub restarts: usize,
    pub step_rule: StepRule,
}

/// First trial step of each line search after the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Previous accepted step divided by the backtracking factor.
    Expand,
    /// Barzilai-Borwein `<s, s> / |<s, y>|` from the last two iterates and
    /// gradients, as ambient matrices.
    #[default]
    BarzilaiBorwein,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            grad_tol: 1e-8,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            armijo_c: 1e-4,
            max_backtracks: 50,
            seed: 0,
            restarts: 1,
            step_rule: StepRule::default(),
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol.is_finite() && self.grad_tol > 0.0) {
            return Err(Error::param("grad_tol", "must be positive"));
        }
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return Err(Error::param("initial_step", "must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::param("backtrack_factor", "must lie in (0, 1)"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::param("armijo_c", "must lie in (0, 1)"));
        }
        if self.restarts == 0 {
            return Err(Error::param("restarts", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub v: StiefelPoint,
    pub alpha: DVector<f64>,
    /// `V α`
    pub beta: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a line search ran out of backtracks before convergence.
    pub line_search_failed: bool,
    pub trace: Vec<TraceEntry>,
}

/// Outcome of one backtracking line search.
#[derive(Debug, Clone)]
pub struct LineSearch {
    pub t: f64,
    pub v_next: StiefelPoint,
    pub phi_next: f64,
    pub backtracks: usize,
    pub accepted: bool,
}

/// Largest `t ∈ {t₀ ρ^k}` with `Φ(R_V(t·dir)) <= Φ(V) + c·t·<grad, dir>`, up to
/// a rounding slack of a few ulps of `Φ(V)`.
/// On exhaustion the last trial is returned with `accepted = false`.
pub fn armijo_step(
    v: &StiefelPoint,
    direction: &TangentVector<'_>,
    phi_at_v: f64,
    grad_dot_dir: f64,
    m: &MomentPair,
    reg: &RegParams,
    opts: &OptimizerOptions,
) -> Result<LineSearch> {
    armijo_from(
        v,
        direction,
        phi_at_v,
        grad_dot_dir,
        m,
        reg,
        opts,
        opts.initial_step,
    )
}

/// Objective differences below a few ulps of `|Φ|` are rounding noise; without
/// this slack the search stalls once `t·‖grad‖²` drops under `ε|Φ|`.
fn rounding_slack(phi: f64) -> f64 {
    8.0 * f64::EPSILON * (1.0 + phi.abs())
}

#[allow(clippy::too_many_arguments)]
fn armijo_from(
    v: &StiefelPoint,
    direction: &TangentVector<'_>,
    phi_at_v: f64,
    grad_dot_dir: f64,
    m: &MomentPair,
    reg: &RegParams,
    opts: &OptimizerOptions,
    t0: f64,
) -> Result<LineSearch> {
    if !(grad_dot_dir < 0.0) {
        return Err(Error::NotDescent(grad_dot_dir));
    }
    let mut t = t0;
    let mut backtracks = 0;
    loop {
        let candidate = stiefel::retract_polar_unchecked(v, &(direction.matrix() * t));
        let phi = objective::evaluate_unchecked(candidate.matrix(), m, reg).value;
        if phi <= phi_at_v + opts.armijo_c * t * grad_dot_dir + rounding_slack(phi_at_v) {
            return Ok(LineSearch {
                t,
                v_next: candidate,
                phi_next: phi,
                backtracks,
                accepted: true,
            });
        }
        if backtracks >= opts.max_backtracks {
            return Ok(LineSearch {
                t,
                v_next: candidate,
                phi_next: phi,
                backtracks,
                accepted: false,
            });
        }
        t *= opts.backtrack_factor;
        backtracks += 1;
    }
}

/// `‖grad Φ(V)‖_F`.
pub fn stationarity_residual(v: &StiefelPoint, m: &MomentPair, reg: &RegParams) -> Result<f64> {
    Ok(objective::riemannian_gradient(v, m, reg)?.norm())
}

/// Runs descent `V_{k+1} = R_{V_k}(−t_k G_k)` from `init`, or from
/// `random_point(d, ell, opts.seed)` when no start is given.
pub fn minimize(
    m: &MomentPair,
    reg: &RegParams,
    ell: usize,
    init: Option<&StiefelPoint>,
    opts: &OptimizerOptions,
) -> Result<FitResult> {
    opts.validate()?;
    let d = m.dim();
    if ell == 0 || ell > d {
        return Err(Error::param(
            "ell",
            format!("need 1 <= ell <= d, got ell={ell}, d={d}"),
        ));
    }
    let mut v = match init {
        Some(p) => {
            if p.d() != d || p.ell() != ell {
                return Err(Error::dim(
                    "initial frame",
                    format!("{d}x{ell}"),
                    format!("{}x{}", p.d(), p.ell()),
                ));
            }
            let residual = p.feasibility_residual();
            if !(residual <= FEASIBILITY_TOL) {
                return Err(Error::Infeasible { residual });
            }
            p.clone()
        }
        None => stiefel::random_point(d, ell, opts.seed)?,
    };

    let mut eval: Evaluation = objective::evaluate(&v, m, reg)?;
    let mut trace = Vec::new();
    let mut step = opts.initial_step;
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut previous: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

    let (grad_norm, converged) = loop {
        let grad = objective::gradient_at(&v, m, reg, &eval.alpha);
        let grad_norm = grad.norm();
        trace.push(TraceEntry {
            iteration: iterations,
            objective: eval.value,
            grad_norm,
            step: if iterations == 0 { 0.0 } else { step },
        });
        if grad_norm <= opts.grad_tol {
            break (grad_norm, true);
        }
        if iterations >= opts.max_iters || line_search_failed {
            break (grad_norm, false);
        }

        let direction = grad.scaled(-1.0);
        let t0 = match (&previous, opts.step_rule) {
            (None, _) => opts.initial_step,
            (Some(_), StepRule::Expand) => step / opts.backtrack_factor,
            (Some((v_prev, g_prev)), StepRule::BarzilaiBorwein) => {
                let s = v.matrix() - v_prev;
                let y = grad.matrix() - g_prev;
                let sy = s.dot(&y).abs();
                if sy > 0.0 {
                    (s.norm_squared() / sy).clamp(1e-12, 1e12)
                } else {
                    step / opts.backtrack_factor
                }
            }
        };
        previous = Some((v.matrix().clone(), grad.matrix().clone()));
        let search = armijo_from(
            &v,
            &direction,
            eval.value,
            -grad_norm * grad_norm,
            m,
            reg,
            opts,
            t0,
        )?;
        if !search.accepted {
            line_search_failed = true;
            if search.phi_next >= eval.value {
                break (grad_norm, false);
            }
        }
        step = search.t;
        v = search.v_next;
        eval = objective::evaluate_unchecked(v.matrix(), m, reg);
        iterations += 1;
    };

    let beta = v.matrix() * &eval.alpha;
    Ok(FitResult {
        v,
        alpha: eval.alpha,
        beta,
        objective: eval.value,
        grad_norm,
        iterations,
        converged,
        line_search_failed: line_search_failed && !converged,
        trace,
    })
}

/// Best-of-`opts.restarts` random starts (seeds `opts.seed + i`), plus any
/// extra warm starts; the lowest objective wins, ties go to the earliest.
pub fn minimize_multistart(
    m: &MomentPair,
    reg: &RegParams,
    ell: usize,
    warm_starts: &[StiefelPoint],
    opts: &OptimizerOptions,
) -> Result<FitResult> {
    opts.validate()?;
    let mut best: Option<FitResult> = None;
    let mut consider = |fit: FitResult| {
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    };
    for start in warm_starts {
        consider(minimize(m, reg, ell, Some(start), opts)?);
    }
    for i in 0..opts.restarts {
        let run_opts = OptimizerOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        consider(minimize(m, reg, ell, None, &run_opts)?);
    }
    Ok(best.expect("at least one start"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{Environment, ScmParams, ScmParts};
    use nalgebra::DMatrix;

    fn t1_pair(gamma: f64) -> MomentPair {
        let p = ScmParams::new(ScmParts {
            beta_star: DVector::from_vec(vec![1.0, 0.0]),
            gamma: DVector::from_vec(vec![gamma]),
            theta: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            delta: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            cov_z: DMatrix::from_element(1, 1, 1.0),
            lambda_source: DMatrix::from_element(1, 1, 1.0),
            lambda_target: DMatrix::from_element(1, 1, 4.0),
            tau_sq: 1.0,
            sigma_u_sq: 1.0,
        })
        .unwrap();
        MomentPair::new(
            p.population_moments(Environment::Source),
            p.population_moments(Environment::Target).covariates(),
        )
        .unwrap()
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let m = t1_pair(0.0);
        let reg = RegParams::new(1.0, 5.0).unwrap();
        let e1 = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let fit = minimize(&m, &reg, 1, Some(&e1), &OptimizerOptions::default()).unwrap();
        assert_eq!(fit.iterations, 0);
        assert!(fit.converged);
        assert_eq!(fit.trace.len(), 1);
    }

    #[test]
    fn armijo_rejects_ascent_direction() {
        let m = t1_pair(1.0);
        let reg = RegParams::new(1.0, 1.0).unwrap();
        let v = stiefel::random_point(2, 1, 3).unwrap();
        let g = objective::riemannian_gradient(&v, &m, &reg).unwrap();
        let phi = objective::reduced_objective(&v, &m, &reg).unwrap();
        let err = armijo_step(&v, &g, phi, 1.0, &m, &reg, &OptimizerOptions::default());
        assert!(matches!(err, Err(Error::NotDescent(_))));
    }

    #[test]
    fn armijo_accepts_and_decreases() {
        let m = t1_pair(1.0);
        let reg = RegParams::new(0.5, 2.0).unwrap();
        let v = stiefel::random_point(2, 1, 11).unwrap();
        let g = objective::riemannian_gradient(&v, &m, &reg).unwrap();
        let phi = objective::reduced_objective(&v, &m, &reg).unwrap();
        let dir = g.scaled(-1.0);
        let gd = -g.norm() * g.norm();
        let ls = armijo_step(&v, &dir, phi, gd, &m, &reg, &OptimizerOptions::default()).unwrap();
        assert!(ls.accepted);
        assert!(ls.phi_next < phi);

        // A tiny initial step already satisfies sufficient decrease.
        let opts = OptimizerOptions {
            initial_step: 1e-6,
            ..Default::default()
        };
        let ls = armijo_step(&v, &dir, phi, gd, &m, &reg, &opts).unwrap();
        assert_eq!(ls.backtracks, 0);
        assert_eq!(ls.t, 1e-6);
    }

    #[test]
    fn ols_limit_with_full_frame() {
        let m = t1_pair(1.0);
        let reg = RegParams::new(1e-8, 0.0).unwrap();
        let fit = minimize(&m, &reg, 2, None, &OptimizerOptions::default()).unwrap();
        let ols = m.source().best_linear().unwrap();
        assert!((&fit.beta - &ols).norm() < 1e-4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = t1_pair(1.0);
        let reg = RegParams::new(1.0, 1.0).unwrap();
        let opts = OptimizerOptions::default();
        assert!(minimize(&m, &reg, 3, None, &opts).is_err());
        let bad = OptimizerOptions {
            backtrack_factor: 1.5,
            ..opts
        };
        assert!(minimize(&m, &reg, 1, None, &bad).is_err());
    }

    #[test]
    fn trace_is_monotone_and_iterates_feasible() {
        let m = t1_pair(1.0);
        let reg = RegParams::new(0.3, 7.0).unwrap();
        let fit = minimize(&m, &reg, 1, None, &OptimizerOptions::default()).unwrap();
        assert!(fit
            .trace
            .windows(2)
            .all(|w| w[1].objective <= w[0].objective));
        assert!(fit.v.feasibility_residual() < 1e-8);
        assert_eq!(fit.beta, fit.v.matrix() * &fit.alpha);
        if fit.converged {
            assert!(fit.grad_norm <= 1e-8);
        }
    }
}
