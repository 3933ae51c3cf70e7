//! Linear structural causal model with an unobserved, environment-dependent
//! confounder `E`:
//!
//! ```text
//! X = Θ Z + Δ E + W
//! Y = <β⋆, X> + <γ, E> + U
//! ```
//!
//! `Z`, `W`, `U` are exogenous and shared by both environments; only the
//! second moment `Λ_E = E[E E']` of the confounder changes between source and
//! target. All population quantities here are closed forms in these moments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default absolute tolerance for orthonormality and symmetry checks.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Source,
    Target,
}

impl std::fmt::Display for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Environment::Source => f.write_str("source"),
            Environment::Target => f.write_str("target"),
        }
    }
}

/// Raw model parameters before validation.
#[derive(Debug, Clone)]
pub struct ScmParts {
    pub beta_star: DVector<f64>,
    pub gamma: DVector<f64>,
    pub theta: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub cov_z: DMatrix<f64>,
    pub lambda_source: DMatrix<f64>,
    pub lambda_target: DMatrix<f64>,
    pub tau_sq: f64,
    pub sigma_u_sq: f64,
}

/// Validated parameters of the structural causal model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmParams {
    beta_star: DVector<f64>,
    gamma: DVector<f64>,
    theta: DMatrix<f64>,
    delta: DMatrix<f64>,
    cov_z: DMatrix<f64>,
    lambda_source: DMatrix<f64>,
    lambda_target: DMatrix<f64>,
    tau_sq: f64,
    sigma_u_sq: f64,
    tol: f64,
}

impl ScmParams {
    pub fn new(parts: ScmParts) -> Result<Self> {
        Self::with_tolerance(parts, DEFAULT_TOL)
    }

    pub fn with_tolerance(parts: ScmParts, tol: f64) -> Result<Self> {
        let ScmParts {
            beta_star,
            gamma,
            theta,
            delta,
            cov_z,
            lambda_source,
            lambda_target,
            tau_sq,
            sigma_u_sq,
        } = parts;
        let d = beta_star.len();
        let k = theta.ncols();
        let r = gamma.len();

        if d == 0 {
            return Err(Error::param(
                "beta_star",
                "ambient dimension must be positive",
            ));
        }
        if theta.nrows() != d {
            return Err(Error::dim("theta rows", d, theta.nrows()));
        }
        if delta.nrows() != d || delta.ncols() != r {
            return Err(Error::dim(
                "delta",
                format!("{d}x{r}"),
                format!("{}x{}", delta.nrows(), delta.ncols()),
            ));
        }
        if k + r > d {
            return Err(Error::param(
                "theta/delta",
                format!("k + r = {} exceeds d = {d}", k + r),
            ));
        }
        for (name, m, n) in [
            ("cov_z", &cov_z, k),
            ("lambda_source", &lambda_source, r),
            ("lambda_target", &lambda_target, r),
        ] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::dim(
                    "covariance block",
                    format!("{name} {n}x{n}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            if !m.iter().all(|x| x.is_finite()) {
                return Err(Error::param(name, "non-finite entry"));
            }
            if linalg::asymmetry(m) > tol {
                return Err(Error::param(name, "not symmetric"));
            }
            if n > 0 && linalg::min_eigenvalue(m) < -linalg::PSD_CLAMP {
                return Err(Error::param(name, "not positive semi-definite"));
            }
        }
        if !(tau_sq.is_finite() && tau_sq > 0.0) {
            return Err(Error::param(
                "tau_sq",
                format!("must be positive, got {tau_sq}"),
            ));
        }
        if !(sigma_u_sq.is_finite() && sigma_u_sq >= 0.0) {
            return Err(Error::param(
                "sigma_u_sq",
                format!("must be nonnegative, got {sigma_u_sq}"),
            ));
        }
        if !beta_star.iter().chain(gamma.iter()).all(|x| x.is_finite()) {
            return Err(Error::param("beta_star/gamma", "non-finite entry"));
        }
        let frame = DMatrix::from_fn(d, k + r, |i, j| {
            if j < k {
                theta[(i, j)]
            } else {
                delta[(i, j - k)]
            }
        });
        let residual = linalg::orthonormality_residual(&frame);
        if residual > tol {
            return Err(Error::param(
                "theta/delta",
                format!("[theta, delta] columns are not orthonormal (residual {residual:e})"),
            ));
        }

        Ok(Self {
            beta_star,
            gamma,
            theta,
            delta,
            cov_z,
            lambda_source,
            lambda_target,
            tau_sq,
            sigma_u_sq,
            tol,
        })
    }

    pub fn d(&self) -> usize {
        self.beta_star.len()
    }

    pub fn k(&self) -> usize {
        self.theta.ncols()
    }

    pub fn r(&self) -> usize {
        self.gamma.len()
    }

    pub fn beta_star(&self) -> &DVector<f64> {
        &self.beta_star
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn cov_z(&self) -> &DMatrix<f64> {
        &self.cov_z
    }

    pub fn lambda(&self, env: Environment) -> &DMatrix<f64> {
        match env {
            Environment::Source => &self.lambda_source,
            Environment::Target => &self.lambda_target,
        }
    }

    pub fn tau_sq(&self) -> f64 {
        self.tau_sq
    }

    pub fn sigma_u_sq(&self) -> f64 {
        self.sigma_u_sq
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn to_parts(&self) -> ScmParts {
        ScmParts {
            beta_star: self.beta_star.clone(),
            gamma: self.gamma.clone(),
            theta: self.theta.clone(),
            delta: self.delta.clone(),
            cov_z: self.cov_z.clone(),
            lambda_source: self.lambda_source.clone(),
            lambda_target: self.lambda_target.clone(),
            tau_sq: self.tau_sq,
            sigma_u_sq: self.sigma_u_sq,
        }
    }

    /// Whether `Λ_T - Λ_S` is positive definite.
    pub fn is_richer_target(&self) -> bool {
        self.r() > 0 && linalg::min_eigenvalue(&(&self.lambda_target - &self.lambda_source)) > 0.0
    }

    /// `β⋆ + Δγ`, the center of the risk-gap quadratic.
    pub fn endogenous_center(&self) -> DVector<f64> {
        &self.beta_star + &self.delta * &self.gamma
    }

    /// Population covariate shift `D = Σ_T - Σ_S = Δ (Λ_T - Λ_S) Δ'`.
    pub fn covariance_shift(&self) -> DMatrix<f64> {
        &self.delta * (&self.lambda_target - &self.lambda_source) * self.delta.transpose()
    }

    /// Closed-form second moments of `(X, Y)` in one environment.
    pub fn population_moments(&self, env: Environment) -> EnvironmentMoments {
        let lambda = self.lambda(env);
        let d = self.d();
        let sigma = &self.theta * &self.cov_z * self.theta.transpose()
            + &self.delta * lambda * self.delta.transpose()
            + DMatrix::identity(d, d) * self.tau_sq;
        let sigma = linalg::symmetrize(&sigma);
        let cross = &self.delta * (lambda * &self.gamma);
        let xy = &sigma * &self.beta_star + &cross;
        let y_sq = self.beta_star.dot(&(&sigma * &self.beta_star))
            + self.gamma.dot(&(lambda * &self.gamma))
            + 2.0 * self.beta_star.dot(&cross)
            + self.sigma_u_sq;
        EnvironmentMoments {
            sigma,
            xy,
            y_sq,
            n: None,
        }
    }

    /// `β⋆ + Δγ − τ² Δ (Λ_E + τ² I)^{-1} γ`, the best linear predictor in
    /// closed form (requires orthonormal `[Θ, Δ]`).
    pub fn best_linear_closed_form(&self, env: Environment) -> DVector<f64> {
        let r = self.r();
        let shifted = self.lambda(env) + DMatrix::identity(r, r) * self.tau_sq;
        let solved =
            linalg::solve_spd(&shifted, &self.gamma).expect("Λ + τ²I is positive definite");
        &self.beta_star + &self.delta * &self.gamma - (&self.delta * solved) * self.tau_sq
    }

    /// Best predictor restricted to `span(Θ)`: `Θ Θ' β⋆`, the same in both
    /// environments.
    pub fn subspace_oracle(&self) -> DVector<f64> {
        &self.theta * (self.theta.tr_mul(&self.beta_star))
    }

    /// Target-minus-source risk of `beta` from the moments, next to the
    /// quadratic form `<β − c, D (β − c)>` with `c = β⋆ + Δγ`.
    pub fn risk_gap_identity(&self, beta: &DVector<f64>) -> Result<RiskGap> {
        self.require_delta_orthonormal()?;
        if beta.len() != self.d() {
            return Err(Error::dim("risk_gap_identity beta", self.d(), beta.len()));
        }
        let source = self.population_moments(Environment::Source);
        let target = self.population_moments(Environment::Target);
        let gap = target.risk(beta)? - source.risk(beta)?;
        let offset = beta - self.endogenous_center();
        let quadratic_form = offset.dot(&(self.covariance_shift() * &offset));
        Ok(RiskGap {
            gap,
            quadratic_form,
        })
    }

    /// Weighted-norm condition under which the invariant-subspace predictor
    /// beats the source risk minimizer on the target. Needs `k + r = d`.
    pub fn improvement_condition(&self) -> Result<Improvement> {
        if self.k() + self.r() != self.d() {
            return Err(Error::Hypothesis(format!(
                "improvement condition requires k + r = d (got k={}, r={}, d={})",
                self.k(),
                self.r(),
                self.d()
            )));
        }
        let r = self.r();
        let eye = DMatrix::identity(r, r);
        let weight = &self.lambda_target + &eye * self.tau_sq;
        let shrink = |lambda: &DMatrix<f64>| -> DVector<f64> {
            let rhs = lambda * &self.gamma;
            linalg::solve_spd(&(lambda + &eye * self.tau_sq), &rhs)
                .expect("Λ + τ²I is positive definite")
        };
        let target_shrink = shrink(&self.lambda_target);
        let source_shrink = shrink(&self.lambda_source);
        let lhs_vec = self.delta.tr_mul(&self.beta_star) + &target_shrink;
        let rhs_vec = &source_shrink - &target_shrink;
        let lhs = lhs_vec.dot(&(&weight * &lhs_vec));
        let rhs = rhs_vec.dot(&(&weight * &rhs_vec));
        Ok(Improvement {
            improves: lhs < rhs,
            lhs,
            rhs,
        })
    }

    /// Draws `n` i.i.d. Gaussian rows from one environment.
    pub fn sample(&self, env: Environment, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::param("n", "must be at least 1"));
        }
        let (d, k, r) = (self.d(), self.k(), self.r());
        let z_factor = linalg::psd_factor(&self.cov_z, "cov_z")?;
        let e_factor = linalg::psd_factor(self.lambda(env), "lambda")?;
        let tau = self.tau_sq.sqrt();
        let sigma_u = self.sigma_u_sq.sqrt();
        let mut rng = linalg::seeded_rng(seed);

        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        let mut z_raw = DVector::zeros(k);
        let mut e_raw = DVector::zeros(r);
        for i in 0..n {
            z_raw
                .iter_mut()
                .for_each(|v| *v = rng.sample(StandardNormal));
            e_raw
                .iter_mut()
                .for_each(|v| *v = rng.sample(StandardNormal));
            let z = &z_factor * &z_raw;
            let e = &e_factor * &e_raw;
            let mut row = &self.theta * &z + &self.delta * &e;
            for v in row.iter_mut() {
                *v += tau * rng.sample::<f64, _>(StandardNormal);
            }
            let u = sigma_u * rng.sample::<f64, _>(StandardNormal);
            y[i] = self.beta_star.dot(&row) + self.gamma.dot(&e) + u;
            x.set_row(i, &row.transpose());
        }
        let feature_names = (0..d).map(|j| format!("x{j}")).collect();
        Dataset::new(x, y, env, feature_names)
    }

    fn require_delta_orthonormal(&self) -> Result<()> {
        let residual = linalg::orthonormality_residual(&self.delta);
        if residual > self.tol {
            return Err(Error::Hypothesis(format!(
                "delta'delta != I (residual {residual:e})"
            )));
        }
        Ok(())
    }
}

/// Seeded random instance: `[Θ, Δ]` from an orthonormalized Gaussian matrix,
/// random PSD blocks, and `Λ_T = Λ_S + (positive-definite bump)`.
pub fn random_params(d: usize, k: usize, r: usize, seed: u64) -> Result<ScmParams> {
    if k + r > d {
        return Err(Error::param("k + r", format!("{} exceeds d = {d}", k + r)));
    }
    let mut rng = linalg::seeded_rng(seed);
    let frame = linalg::orthonormalize(&linalg::gaussian_matrix(d, k + r, &mut rng));
    let theta = frame.columns(0, k).into_owned();
    let delta = frame.columns(k, r).into_owned();
    let random_psd = |n: usize, floor: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let a = linalg::gaussian_matrix(n, n, rng);
        linalg::symmetrize(
            &(&a * a.transpose() / n.max(1) as f64 + DMatrix::identity(n, n) * floor),
        )
    };
    let cov_z = random_psd(k, 0.5, &mut rng);
    let lambda_source = random_psd(r, 0.1, &mut rng);
    let bump = random_psd(r, 0.5, &mut rng);
    let lambda_target = linalg::symmetrize(&(&lambda_source + bump));
    let beta_star = linalg::gaussian_vector(d, &mut rng);
    let gamma = linalg::gaussian_vector(r, &mut rng);
    let tau_sq = rng.random_range(0.25..2.0);
    let sigma_u_sq = rng.random_range(0.1..1.0);
    ScmParams::new(ScmParts {
        beta_star,
        gamma,
        theta,
        delta,
        cov_z,
        lambda_source,
        lambda_target,
        tau_sq,
        sigma_u_sq,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskGap {
    pub gap: f64,
    pub quadratic_form: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Improvement {
    pub improves: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// Uncentered second moments `(Σ, E[XY], E[Y²])` of one environment. These
/// determine the squared-error risk of every linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMoments {
    sigma: DMatrix<f64>,
    xy: DVector<f64>,
    y_sq: f64,
    n: Option<usize>,
}

impl EnvironmentMoments {
    pub fn new(sigma: DMatrix<f64>, xy: DVector<f64>, y_sq: f64, n: Option<usize>) -> Result<Self> {
        let covariates = CovariateMoments::new(sigma, n)?;
        if xy.len() != covariates.dim() {
            return Err(Error::dim("moments xy", covariates.dim(), xy.len()));
        }
        if !xy.iter().all(|v| v.is_finite()) || !y_sq.is_finite() {
            return Err(Error::param("moments", "non-finite entry"));
        }
        if y_sq < -DEFAULT_TOL {
            return Err(Error::param(
                "y_sq",
                format!("negative second moment {y_sq}"),
            ));
        }
        Ok(Self {
            sigma: covariates.sigma,
            xy,
            y_sq: y_sq.max(0.0),
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.xy.len()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn xy(&self) -> &DVector<f64> {
        &self.xy
    }

    pub fn y_sq(&self) -> f64 {
        self.y_sq
    }

    pub fn n(&self) -> Option<usize> {
        self.n
    }

    /// Covariate-only view; the response moments are dropped.
    pub fn covariates(&self) -> CovariateMoments {
        CovariateMoments {
            sigma: self.sigma.clone(),
            n: self.n,
        }
    }

    /// Squared-error risk `β'Σβ − 2β'xy + E[Y²]`.
    pub fn risk(&self, beta: &DVector<f64>) -> Result<f64> {
        if beta.len() != self.dim() {
            return Err(Error::dim("risk beta", self.dim(), beta.len()));
        }
        let value = beta.dot(&(&self.sigma * beta)) - 2.0 * beta.dot(&self.xy) + self.y_sq;
        let tol = 1e-10 * (1.0 + self.y_sq + beta.norm_squared() * self.sigma.norm());
        Ok(if value < 0.0 && value.abs() < tol {
            0.0
        } else {
            value
        })
    }

    /// Unique risk minimizer `Σ^{-1} E[XY]`.
    pub fn best_linear(&self) -> Result<DVector<f64>> {
        match linalg::solve_spd(&self.sigma, &self.xy) {
            Some(beta) if beta.iter().all(|v| v.is_finite()) && self.is_well_conditioned() => {
                Ok(beta)
            }
            _ => Err(Error::RankDeficient {
                rank: linalg::numerical_rank(&self.sigma, 1e-12),
                dim: self.dim(),
            }),
        }
    }

    /// Risk minimizer over `span(basis)`: `B (B'ΣB)^{-1} B'xy`.
    pub fn subspace_minimizer(&self, basis: &DMatrix<f64>) -> Result<DVector<f64>> {
        if basis.nrows() != self.dim() {
            return Err(Error::dim("subspace basis rows", self.dim(), basis.nrows()));
        }
        let gram = linalg::symmetrize(&(basis.transpose() * &self.sigma * basis));
        let rhs = basis.tr_mul(&self.xy);
        let coef = linalg::solve_spd(&gram, &rhs).ok_or(Error::RankDeficient {
            rank: linalg::numerical_rank(&gram, 1e-12),
            dim: gram.nrows(),
        })?;
        Ok(basis * coef)
    }

    fn is_well_conditioned(&self) -> bool {
        linalg::numerical_rank(&self.sigma, 1e-12) == self.dim()
    }
}

/// Second moment `Σ = E[XX']` of the covariates alone. This is all the
/// learner may see of the target environment.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMoments {
    sigma: DMatrix<f64>,
    n: Option<usize>,
}

impl CovariateMoments {
    pub fn new(sigma: DMatrix<f64>, n: Option<usize>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::dim(
                "moments sigma",
                "square",
                format!("{}x{}", sigma.nrows(), sigma.ncols()),
            ));
        }
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::param("sigma", "non-finite entry"));
        }
        let scale = 1.0 + sigma.norm();
        if linalg::asymmetry(&sigma) > DEFAULT_TOL * scale {
            return Err(Error::param("sigma", "not symmetric"));
        }
        if sigma.nrows() > 0 && linalg::min_eigenvalue(&sigma) < -DEFAULT_TOL * scale {
            return Err(Error::param("sigma", "not positive semi-definite"));
        }
        Ok(Self { sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn n(&self) -> Option<usize> {
        self.n
    }
}

/// Labeled sample from one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    environment: Environment,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        environment: Environment,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if y.len() != x.nrows() {
            return Err(Error::dim("dataset responses", x.nrows(), y.len()));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::dim(
                "dataset feature names",
                x.ncols(),
                feature_names.len(),
            ));
        }
        for i in 0..x.nrows() {
            if let Some(j) = (0..x.ncols()).find(|&j| !x[(i, j)].is_finite()) {
                return Err(Error::NonFinite { row: i, column: j });
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i,
                column: x.ncols(),
            });
        }
        Ok(Self {
            x,
            y,
            environment,
            feature_names,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn environment(&self) -> Environment {
        self.environment
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Appends a constant-one feature column named `intercept`.
    pub fn with_intercept(&self) -> Self {
        let x = self.x.clone().insert_column(self.dim(), 1.0);
        let mut names = self.feature_names.clone();
        names.push("intercept".to_string());
        Self {
            x,
            y: self.y.clone(),
            environment: self.environment,
            feature_names: names,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(gamma: f64) -> ScmParams {
        ScmParams::new(ScmParts {
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
        .unwrap()
    }

    fn close(a: &DVector<f64>, b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn t1_population_moments() {
        let p = t1(1.0);
        let s = p.population_moments(Environment::Source);
        assert!(
            (s.sigma() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]))).norm() < 1e-14
        );
        assert!(close(s.xy(), &[2.0, 1.0], 1e-14));
        assert!((s.y_sq() - 4.0).abs() < 1e-14);

        let t = p.population_moments(Environment::Target);
        assert!(
            (t.sigma() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 5.0]))).norm() < 1e-14
        );
        assert!(close(t.xy(), &[2.0, 4.0], 1e-14));
        assert!((t.y_sq() - 7.0).abs() < 1e-14);
    }

    #[test]
    fn no_signal_leaves_only_exogenous_noise() {
        let mut parts = t1(0.0).to_parts();
        parts.beta_star = DVector::zeros(2);
        let p = ScmParams::new(parts).unwrap();
        for env in [Environment::Source, Environment::Target] {
            let m = p.population_moments(env);
            assert_eq!(m.xy(), &DVector::zeros(2));
            assert_eq!(m.y_sq(), p.sigma_u_sq());
        }
    }

    #[test]
    fn t1_risks() {
        let p = t1(1.0);
        let s = p.population_moments(Environment::Source);
        let t = p.population_moments(Environment::Target);
        let beta = DVector::from_vec(vec![1.0, 0.5]);
        assert!((s.risk(&DVector::zeros(2)).unwrap() - 4.0).abs() < 1e-14);
        assert!((s.risk(&beta).unwrap() - 1.5).abs() < 1e-14);
        assert!((t.risk(&beta).unwrap() - 2.25).abs() < 1e-14);
        assert!(s.risk(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn t1_best_linear_shifts() {
        let p = t1(1.0);
        let bs = p
            .population_moments(Environment::Source)
            .best_linear()
            .unwrap();
        let bt = p
            .population_moments(Environment::Target)
            .best_linear()
            .unwrap();
        assert!(close(&bs, &[1.0, 0.5], 1e-14));
        assert!(close(&bt, &[1.0, 0.8], 1e-14));
        assert!(close(
            &p.best_linear_closed_form(Environment::Source),
            &[1.0, 0.5],
            1e-14
        ));
        assert!(close(
            &p.best_linear_closed_form(Environment::Target),
            &[1.0, 0.8],
            1e-14
        ));

        let unconfounded = t1(0.0);
        for env in [Environment::Source, Environment::Target] {
            let b = unconfounded.population_moments(env).best_linear().unwrap();
            assert!(close(&b, &[1.0, 0.0], 1e-14));
        }
    }

    #[test]
    fn best_linear_reports_rank_deficiency() {
        let m = EnvironmentMoments::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            1.0,
            Some(1),
        )
        .unwrap();
        match m.best_linear() {
            Err(Error::RankDeficient { rank, dim }) => assert_eq!((rank, dim), (1, 2)),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn subspace_oracle_projects_beta_star() {
        let p = t1(1.0);
        assert!(close(&p.subspace_oracle(), &[1.0, 0.0], 1e-15));

        let mut parts = t1(1.0).to_parts();
        parts.beta_star = DVector::from_vec(vec![2.5, 0.0]);
        let inside = ScmParams::new(parts).unwrap();
        assert!(close(&inside.subspace_oracle(), &[2.5, 0.0], 1e-15));
    }

    #[test]
    fn subspace_oracle_matches_constrained_normal_equations() {
        let p = random_params(5, 2, 3, 11).unwrap();
        let oracle = p.subspace_oracle();
        for env in [Environment::Source, Environment::Target] {
            let restricted = p
                .population_moments(env)
                .subspace_minimizer(p.theta())
                .unwrap();
            assert!((&restricted - &oracle).norm() < 1e-10 * (1.0 + oracle.norm()));
        }
    }

    #[test]
    fn t1_risk_gap_identity() {
        let p = t1(1.0);
        let g = p.risk_gap_identity(&DVector::zeros(2)).unwrap();
        assert!((g.gap - 3.0).abs() < 1e-13);
        assert!((g.quadratic_form - 3.0).abs() < 1e-13);
        let at_center = p
            .risk_gap_identity(&DVector::from_vec(vec![1.0, 1.0]))
            .unwrap();
        assert!(at_center.gap.abs() < 1e-13);
        assert!(at_center.quadratic_form.abs() < 1e-13);
    }

    #[test]
    fn t1_improvement_condition() {
        let imp = t1(1.0).improvement_condition().unwrap();
        assert!((imp.lhs - 3.2).abs() < 1e-12);
        assert!((imp.rhs - 0.45).abs() < 1e-12);
        assert!(!imp.improves);

        let mut parts = t1(1.0).to_parts();
        parts.lambda_target = parts.lambda_source.clone();
        let no_shift = ScmParams::new(parts).unwrap();
        let imp = no_shift.improvement_condition().unwrap();
        assert_eq!(imp.rhs, 0.0);
        assert!(!imp.improves);
    }

    #[test]
    fn improvement_condition_requires_full_split() {
        let p = random_params(5, 2, 2, 1).unwrap();
        assert!(matches!(
            p.improvement_condition(),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn rejects_nonpositive_noise_and_bad_frames() {
        let mut parts = t1(1.0).to_parts();
        parts.tau_sq = 0.0;
        match ScmParams::new(parts) {
            Err(Error::Parameter { field, .. }) => assert_eq!(field, "tau_sq"),
            other => panic!("unexpected {other:?}"),
        }
        let mut parts = t1(1.0).to_parts();
        parts.theta = DMatrix::from_column_slice(2, 1, &[1.0, 0.1]);
        assert!(ScmParams::new(parts).is_err());
    }

    #[test]
    fn random_params_contract() {
        let p = random_params(5, 2, 2, 7).unwrap();
        let frame = DMatrix::from_fn(5, 4, |i, j| {
            if j < 2 {
                p.theta()[(i, j)]
            } else {
                p.delta()[(i, j - 2)]
            }
        });
        assert!(linalg::orthonormality_residual(&frame) < 1e-12);
        assert!(p.is_richer_target());
        assert_eq!(p, random_params(5, 2, 2, 7).unwrap());
        assert!(random_params(3, 2, 2, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = t1(1.0);
        let a = p.sample(Environment::Source, 1, 42).unwrap();
        let b = p.sample(Environment::Source, 1, 42).unwrap();
        assert_eq!(a, b);
        let c = p.sample(Environment::Source, 1, 43).unwrap();
        assert_ne!(a, c);
        assert!(p.sample(Environment::Source, 0, 1).is_err());
    }

    #[test]
    fn dataset_rejects_non_finite() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            Dataset::new(x, y, Environment::Source, vec!["a".into()]),
            Err(Error::NonFinite { row: 1, column: 0 })
        ));
    }
}
