//! Self-generating verification suite: exact identities, gradient and
//! optimizer checks, and every bound checker on seeded random instances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bounds::{self, BoundReport, DEFAULT_DELTA_FLOOR};
use super::region;
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{self, MomentPair, RegParams};
use crate::optimizer::{self, FitResult, OptimizerOptions};
use crate::scm::{self, Environment, ScmParams};
use crate::stiefel::{self, StiefelPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances per randomized check.
    pub instances: usize,
    pub upsilon: f64,
    pub etas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub delta_floor: f64,
    /// Moves each fitted frame this far along a random tangent direction
    /// before the alignment and stability checks. Used to exercise the
    /// non-stationary warning path.
    pub perturb: f64,
    pub optimizer: OptimizerOptions,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            upsilon: 0.1,
            etas: vec![10.0, 100.0, 1000.0, 10000.0],
            epsilons: vec![0.1, 1.0, 10.0],
            delta_floor: DEFAULT_DELTA_FLOOR,
            perturb: 0.0,
            optimizer: canonical_options(),
        }
    }
}

/// Optimizer settings for the bound checks on the canonical instance.
pub fn canonical_options() -> OptimizerOptions {
    OptimizerOptions {
        max_iters: 20_000,
        grad_tol: 1e-9,
        restarts: 8,
        ..OptimizerOptions::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Failures of gating checks make `verify` exit nonzero.
    pub gating: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<BoundReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
    /// Bound reports that failed with hypotheses unverified.
    pub flagged: usize,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| c.gating && !c.passed)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn vec_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1.0)
}

/// Random richer-target instance with `k, r >= 1`, `k + r <= d`.
fn random_instance<R: Rng>(rng: &mut R, max_d: usize) -> Result<ScmParams> {
    let d = rng.random_range(2..=max_d);
    let r = rng.random_range(1..d);
    let k = rng.random_range(1..=d - r);
    scm::random_params(d, k, r, rng.random())
}

fn population_pair(p: &ScmParams) -> MomentPair {
    MomentPair::new(
        p.population_moments(Environment::Source),
        p.population_moments(Environment::Target).covariates(),
    )
    .expect("population moments share a dimension")
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityStats {
    pub instances: usize,
    /// Risk gap against `<β − c, D(β − c)>`.
    pub risk_gap: f64,
    /// Source vs target best predictor on `span(Θ)`, and against `ΘΘ'β⋆`.
    pub subspace: f64,
    /// `Σ_E^{-1} E_E[XY]` vs its closed form.
    pub closed_form: f64,
}

/// Largest relative errors of the exact identities over random instances,
/// `betas` random predictors each. Relative errors use `max(|a|, |b|, 1)`.
pub fn identity_suite(instances: usize, betas: usize, seed: u64) -> Result<IdentityStats> {
    let mut rng = linalg::seeded_rng(seed);
    let mut stats = IdentityStats {
        instances,
        risk_gap: 0.0,
        subspace: 0.0,
        closed_form: 0.0,
    };
    for _ in 0..instances {
        let p = random_instance(&mut rng, 10)?;
        for _ in 0..betas {
            let beta = linalg::gaussian_vector(p.d(), &mut rng) * 2.0;
            let g = p.risk_gap_identity(&beta)?;
            stats.risk_gap = stats.risk_gap.max(rel_err(g.gap, g.quadratic_form));
        }
        let oracle = p.subspace_oracle();
        for env in [Environment::Source, Environment::Target] {
            let m = p.population_moments(env);
            let restricted = m.subspace_minimizer(p.theta())?;
            stats.subspace = stats.subspace.max(vec_rel_err(&restricted, &oracle));
            let best = m.best_linear()?;
            stats.closed_form = stats
                .closed_form
                .max(vec_rel_err(&best, &p.best_linear_closed_form(env)));
        }
    }
    Ok(stats)
}

/// Largest relative error between `<grad Φ(V), ξ>` and the fourth-order
/// central difference of `t ↦ Φ(R_V(tξ))` over random instances and unit
/// tangent directions. Frames have `ℓ < d`; at `ℓ = d` the objective is
/// rotation invariant and the gradient vanishes identically.
pub fn gradient_check(instances: usize, directions: usize, seed: u64) -> Result<f64> {
    const H: f64 = 1e-3;
    let mut rng = linalg::seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = random_instance(&mut rng, 10)?;
        let m = population_pair(&p);
        let reg = RegParams::new(
            log_uniform(&mut rng, 0.05, 5.0),
            log_uniform(&mut rng, 0.1, 100.0),
        )?;
        let ell = rng.random_range(1..p.d());
        let v = stiefel::random_point(p.d(), ell, rng.random())?;
        let grad = objective::riemannian_gradient(&v, &m, &reg)?;
        let phi = objective::reduced_objective(&v, &m, &reg)?;
        for _ in 0..directions {
            let raw = linalg::gaussian_matrix(p.d(), ell, &mut rng);
            let xi = stiefel::project_tangent(&v, &raw)?;
            let xi = xi.scaled(1.0 / xi.norm());
            let at = |t: f64| -> Result<f64> {
                let moved = stiefel::retract_polar(&v, &xi.scaled(t))?;
                objective::reduced_objective(&moved, &m, &reg)
            };
            let fd = (8.0 * (at(H)? - at(-H)?) - (at(2.0 * H)? - at(-2.0 * H)?)) / (12.0 * H);
            let analytic = grad.inner(xi.matrix());
            worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-8 * (1.0 + phi.abs())));
        }
    }
    Ok(worst)
}

/// Brute force on `St(2, 1)`: for random 2-D instances, how far multi-start
/// descent ends above the minimum of `Φ` over `grid` angles in `[0, π)`.
/// Returns the largest excess (negative when descent beats the grid).
pub fn circle_oracle_check(
    instances: usize,
    grid: usize,
    opts: &OptimizerOptions,
    seed: u64,
) -> Result<f64> {
    let mut rng = linalg::seeded_rng(seed);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..instances {
        let p = scm::random_params(2, 1, 1, rng.random())?;
        let m = population_pair(&p);
        let reg = RegParams::new(
            log_uniform(&mut rng, 0.01, 10.0),
            log_uniform(&mut rng, 0.01, 100.0),
        )?;
        let mut grid_min = f64::INFINITY;
        for j in 0..grid {
            let angle = std::f64::consts::PI * j as f64 / grid as f64;
            let v = StiefelPoint::new(DMatrix::from_column_slice(
                2,
                1,
                &[angle.cos(), angle.sin()],
            ))?;
            grid_min = grid_min.min(objective::reduced_objective(&v, &m, &reg)?);
        }
        let run = OptimizerOptions {
            seed: opts.seed.wrapping_add(1000 * i as u64),
            ..*opts
        };
        let fit = optimizer::minimize_multistart(&m, &reg, 1, &[], &run)?;
        worst = worst.max(fit.objective - grid_min);
    }
    Ok(worst)
}

/// Random richer-target instances with random `(V, α, ξ, ζ)`.
pub fn surrogate_suite(instances: usize, seed: u64) -> Result<Vec<BoundReport>> {
    let mut rng = linalg::seeded_rng(seed);
    (0..instances)
        .map(|_| {
            let p = random_instance(&mut rng, 8)?;
            let ell = rng.random_range(1..=p.d());
            let v = stiefel::random_point(p.d(), ell, rng.random())?;
            let alpha = linalg::gaussian_vector(ell, &mut rng) * log_uniform(&mut rng, 0.1, 10.0);
            let xi = log_uniform(&mut rng, 0.01, 100.0);
            let zeta = log_uniform(&mut rng, 0.01, 100.0);
            bounds::surrogate_bound_check(&p, &v, &alpha, xi, zeta)
        })
        .collect()
}

/// Random PSD (possibly singular) `Σ`, random frames and `υ`, plus the tight
/// case `Σ = diag(2, 2)`, `V = e₁`, `υ = 2` as the last entry.
pub fn lemma_suite(instances: usize, seed: u64) -> Result<Vec<bounds::LemmaReport>> {
    let mut rng = linalg::seeded_rng(seed);
    let mut out = Vec::with_capacity(instances + 1);
    for _ in 0..instances {
        let d = rng.random_range(1..=8);
        let rank = rng.random_range(0..=d);
        let factor = linalg::gaussian_matrix(d, rank, &mut rng) * log_uniform(&mut rng, 0.1, 10.0);
        let sigma = linalg::symmetrize(&(&factor * factor.transpose()));
        let v = stiefel::random_point(d, rng.random_range(1..=d), rng.random())?;
        out.push(bounds::eigenvalue_lemma_check(
            &sigma,
            &v,
            log_uniform(&mut rng, 1e-3, 1e2),
        )?);
    }
    out.push(tight_lemma_case()?);
    Ok(out)
}

pub fn tight_lemma_case() -> Result<bounds::LemmaReport> {
    let sigma = DMatrix::from_diagonal_element(2, 2, 2.0);
    let v = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]))?;
    bounds::eigenvalue_lemma_check(&sigma, &v, 2.0)
}

/// One fitted `η` on the canonical instance with its two bound reports.
#[derive(Debug, Clone)]
pub struct CanonicalRun {
    pub eta: f64,
    pub fit: FitResult,
    pub gap: f64,
    pub cosine: f64,
    pub alignment: BoundReport,
    pub stability: Vec<BoundReport>,
}

/// Fits the canonical instance at `cfg.upsilon` for each `cfg.etas` (ascending,
/// warm-started along `η`) and runs the alignment and stability checks.
pub fn canonical_runs(cfg: &VerifyConfig) -> Result<Vec<CanonicalRun>> {
    let p = super::canonical_instance();
    let m = population_pair(&p);
    let mut etas = cfg.etas.clone();
    etas.sort_by(f64::total_cmp);
    let result = super::sweep(
        &m,
        super::CANONICAL_ELL,
        &[cfg.upsilon],
        &etas,
        &cfg.optimizer,
        None,
    )?;
    let mut rng = linalg::seeded_rng(cfg.seed);
    let mut runs = Vec::new();
    for cell in result.iter_cells() {
        let mut fit = match (&cell.fit, &cell.error) {
            (Some(f), _) => f.clone(),
            (None, e) => return Err(Error::Config(format!("canonical fit failed: {e:?}"))),
        };
        let reg = RegParams::new(cell.upsilon, cell.eta)?;
        if cfg.perturb > 0.0 {
            let raw = linalg::gaussian_matrix(p.d(), fit.v.ell(), &mut rng);
            let xi = stiefel::project_tangent(&fit.v, &raw)?;
            let xi = xi.scaled(cfg.perturb / xi.norm());
            let moved = stiefel::retract_polar(&fit.v, &xi)?;
            let eval = objective::evaluate(&moved, &m, &reg)?;
            fit.beta = moved.matrix() * &eval.alpha;
            fit.alpha = eval.alpha;
            fit.objective = eval.value;
            fit.grad_norm = optimizer::stationarity_residual(&moved, &m, &reg)?;
            fit.v = moved;
        }
        let alignment = bounds::alignment_bound_check(&p, &fit.v, &reg, cfg.delta_floor)?;
        let stability = cfg
            .epsilons
            .iter()
            .map(|&eps| bounds::stability_bound_check(&p, &fit, &reg, cfg.delta_floor, eps))
            .collect::<Result<Vec<_>>>()?;
        runs.push(CanonicalRun {
            eta: cell.eta,
            gap: p.risk_gap_identity(&fit.beta)?.gap,
            cosine: alignment.inputs["canonical_cosine"],
            fit,
            alignment,
            stability,
        });
    }
    Ok(runs)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn bound_outcome(name: &str, reports: Vec<BoundReport>) -> CheckOutcome {
    let violations = reports.iter().filter(|r| r.is_violation()).count();
    let flagged = reports
        .iter()
        .filter(|r| !r.satisfied && !r.hypotheses_hold)
        .count();
    let unverified = reports.iter().filter(|r| !r.hypotheses_hold).count();
    CheckOutcome {
        name: name.to_string(),
        passed: violations == 0,
        gating: true,
        detail: format!(
            "{} reports, {violations} violations, {flagged} flagged, {unverified} with unverified hypotheses",
            reports.len()
        ),
        reports,
    }
}

fn threshold_outcome(name: &str, value: f64, limit: f64, gating: bool) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed: value <= limit,
        gating,
        detail: format!("{value:.3e} (limit {limit:e})"),
        reports: Vec::new(),
    }
}

pub fn run_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.instances == 0 {
        return Err(Error::param("instances", "must be at least 1"));
    }
    if cfg.etas.is_empty() {
        return Err(Error::param("etas", "must not be empty"));
    }
    cfg.optimizer.validate()?;
    let seed = cfg.seed;
    let mut checks = Vec::new();

    let ids = identity_suite(cfg.instances, 10, seed)?;
    checks.push(threshold_outcome(
        "risk_gap_identity",
        ids.risk_gap,
        1e-10,
        true,
    ));
    checks.push(threshold_outcome(
        "subspace_invariance",
        ids.subspace,
        1e-10,
        true,
    ));
    checks.push(threshold_outcome(
        "best_linear_closed_form",
        ids.closed_form,
        1e-10,
        true,
    ));

    let n_small = cfg.instances.div_ceil(5);
    checks.push(threshold_outcome(
        "riemannian_gradient",
        gradient_check(n_small, n_small, seed.wrapping_add(1))?,
        1e-5,
        true,
    ));
    let circle_opts = OptimizerOptions {
        restarts: 4,
        ..OptimizerOptions::default()
    };
    checks.push(threshold_outcome(
        "circle_brute_force",
        circle_oracle_check(n_small, 10_000, &circle_opts, seed.wrapping_add(2))?,
        1e-6,
        true,
    ));

    checks.push(bound_outcome(
        "surrogate_bound",
        surrogate_suite(cfg.instances, seed.wrapping_add(3))?,
    ));
    let lemma = lemma_suite(cfg.instances, seed.wrapping_add(4))?;
    let tight = lemma.last().expect("tight case appended");
    let tight_gap = (tight.second_max - 0.125).abs();
    checks.push(bound_outcome(
        "eigenvalue_lemma",
        lemma
            .iter()
            .flat_map(|l| l.checks.iter().cloned())
            .collect(),
    ));
    checks.push(threshold_outcome(
        "eigenvalue_lemma_tight",
        tight_gap,
        1e-10,
        true,
    ));

    let runs = canonical_runs(cfg)?;
    checks.push(bound_outcome(
        "alignment_bound",
        runs.iter().map(|r| r.alignment.clone()).collect(),
    ));
    checks.push(bound_outcome(
        "stability_bound",
        runs.iter()
            .flat_map(|r| r.stability.iter().cloned())
            .collect(),
    ));
    let max_increase = runs
        .windows(2)
        .map(|w| w[1].gap - w[0].gap)
        .fold(0.0, f64::max);
    checks.push(threshold_outcome(
        "gap_monotone_in_eta",
        max_increase,
        1e-6,
        false,
    ));
    if runs.len() >= 2 {
        let etas: Vec<f64> = runs.iter().map(|r| r.eta).collect();
        let cosines: Vec<f64> = runs.iter().map(|r| r.cosine).collect();
        let slope = log_log_slope(&etas, &cosines);
        checks.push(CheckOutcome {
            name: "alignment_decay_slope".into(),
            passed: (-0.6..=-0.05).contains(&slope),
            gating: false,
            detail: format!("slope of log ‖V'Δ‖ vs log η = {slope:.3}"),
            reports: Vec::new(),
        });
    }

    let fine = super::linspace(-2.0, 1.0, 3001);
    for (name, s, t, tau) in [
        ("improvement_region_target_rich", 2.0, 10.0, 10.0),
        ("improvement_region_source_rich", 10.0, 2.0, 10.0),
    ] {
        let scan = region::improvement_region_scan(s, t, tau, &fine)?;
        let err = match (scan.scanned, scan.analytic) {
            (Some(a), Some(b)) => (a.0 - b.0).abs().max((a.1 - b.1).abs()),
            _ => f64::INFINITY,
        };
        checks.push(threshold_outcome(name, err, scan.resolution, true));
    }

    let flagged = checks
        .iter()
        .flat_map(|c| &c.reports)
        .filter(|r| !r.satisfied && !r.hypotheses_hold)
        .count();
    Ok(VerifyReport {
        seed,
        checks,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_small() {
        let s = identity_suite(5, 3, 9).unwrap();
        assert!(
            s.risk_gap < 1e-10 && s.subspace < 1e-10 && s.closed_form < 1e-10,
            "{s:?}"
        );
    }

    #[test]
    fn gradient_small() {
        assert!(gradient_check(3, 3, 1).unwrap() < 1e-5);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 10.0, 100.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y) + 0.5).abs() < 1e-12);
    }
}
