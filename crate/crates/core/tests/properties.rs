use nalgebra::DMatrix;
use proptest::prelude::*;
use subspace_adapt::linalg;
use subspace_adapt::objective::{self, MomentPair, RegParams};
use subspace_adapt::scm::{self, Environment};
use subspace_adapt::stiefel::{self, StiefelPoint};

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (2usize..=8).prop_flat_map(|d| (Just(d), 1..=d, any::<u64>()))
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (2usize..=7)
        .prop_flat_map(|d| (Just(d), 1..d))
        .prop_flat_map(|(d, r)| (Just(d), 1..=d - r, Just(r), any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_tangent((d, ell, seed) in dims()) {
        let v = stiefel::random_point(d, ell, seed).unwrap();
        let mut rng = linalg::seeded_rng(seed ^ 1);
        let raw = linalg::gaussian_matrix(d, ell, &mut rng);
        let once = stiefel::project_tangent(&v, &raw).unwrap();
        let twice = stiefel::project_tangent(&v, once.matrix()).unwrap();
        prop_assert!((once.matrix() - twice.matrix()).norm() <= 1e-12 * (1.0 + raw.norm()));
        let sym = v.matrix().tr_mul(once.matrix()) + once.matrix().tr_mul(v.matrix());
        prop_assert!(sym.norm() <= 1e-12 * (1.0 + raw.norm()));
    }

    #[test]
    fn retraction_is_second_order((d, ell, seed) in dims()) {
        let v = stiefel::random_point(d, ell, seed).unwrap();
        let mut rng = linalg::seeded_rng(seed ^ 2);
        let xi = stiefel::project_tangent(&v, &linalg::gaussian_matrix(d, ell, &mut rng)).unwrap();
        let xi = xi.scaled(1.0 / xi.norm());
        let err = |t: f64| {
            let moved = stiefel::retract_polar(&v, &xi.scaled(t)).unwrap();
            prop_assert!(moved.feasibility_residual() < 1e-12);
            Ok((moved.matrix() - (v.matrix() + xi.matrix() * t)).norm())
        };
        let (e1, e2) = (err(1e-2)?, err(1e-3)?);
        let slope = (e1 / e2).log10();
        prop_assert!(slope >= 1.9, "slope {slope}");
    }

    #[test]
    fn objective_is_rotation_invariant((d, k, r, seed) in instance(), upsilon in 0.01f64..10.0, eta in 0.0f64..100.0) {
        let p = scm::random_params(d, k, r, seed).unwrap();
        let m = MomentPair::new(
            p.population_moments(Environment::Source),
            p.population_moments(Environment::Target).covariates(),
        ).unwrap();
        let reg = RegParams::new(upsilon, eta).unwrap();
        let ell = 1 + (seed as usize) % d;
        let v = stiefel::random_point(d, ell, seed ^ 3).unwrap();
        let q = stiefel::random_point(ell, ell, seed ^ 4).unwrap();
        let rotated = StiefelPoint::new(v.matrix() * q.matrix()).unwrap();
        let a = objective::evaluate(&v, &m, &reg).unwrap();
        let b = objective::evaluate(&rotated, &m, &reg).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-10 * (1.0 + a.value.abs()));
        let beta_a = v.matrix() * &a.alpha;
        let beta_b = rotated.matrix() * &b.alpha;
        prop_assert!((beta_a - beta_b).norm() <= 1e-9 * (1.0 + a.alpha.norm()));
    }

    #[test]
    fn inner_ridge_is_first_order_optimal((d, k, r, seed) in instance(), upsilon in 0.01f64..10.0) {
        let p = scm::random_params(d, k, r, seed).unwrap();
        let source = p.population_moments(Environment::Source);
        let v = stiefel::random_point(d, 1 + (seed as usize) % d, seed ^ 5).unwrap();
        let alpha = objective::inner_ridge(&v, &source, upsilon).unwrap();
        let vm = v.matrix();
        let grad = vm.transpose() * (source.sigma() * (vm * &alpha) - source.xy()) + &alpha * upsilon;
        prop_assert!(grad.norm() <= 1e-9 * (1.0 + source.xy().norm()));
    }

    #[test]
    fn riemannian_gradient_is_tangent((d, k, r, seed) in instance(), eta in 0.0f64..1000.0) {
        let p = scm::random_params(d, k, r, seed).unwrap();
        let m = MomentPair::new(
            p.population_moments(Environment::Source),
            p.population_moments(Environment::Target).covariates(),
        ).unwrap();
        let reg = RegParams::new(0.5, eta).unwrap();
        let v = stiefel::random_point(d, 1 + (seed as usize) % d, seed ^ 6).unwrap();
        let g = objective::riemannian_gradient(&v, &m, &reg).unwrap();
        let vtg = v.matrix().tr_mul(g.matrix());
        prop_assert!((&vtg + vtg.transpose()).norm() <= 1e-9 * (1.0 + g.norm()));
    }

    #[test]
    fn risk_gap_quadratic_is_nonnegative_on_richer_target((d, k, r, seed) in instance()) {
        let p = scm::random_params(d, k, r, seed).unwrap();
        let mut rng = linalg::seeded_rng(seed ^ 7);
        let beta = linalg::gaussian_vector(d, &mut rng);
        let g = p.risk_gap_identity(&beta).unwrap();
        prop_assert!(g.quadratic_form >= -1e-12);
        prop_assert!((g.gap - g.quadratic_form).abs() <= 1e-10 * (1.0 + g.gap.abs()));
    }
}

#[test]
fn ell_equal_d_has_zero_gradient() {
    let p = scm::random_params(4, 2, 2, 11).unwrap();
    let m = MomentPair::new(
        p.population_moments(Environment::Source),
        p.population_moments(Environment::Target).covariates(),
    )
    .unwrap();
    let v = StiefelPoint::new(DMatrix::identity(4, 4)).unwrap();
    let g = objective::riemannian_gradient(&v, &m, &RegParams::new(1.0, 5.0).unwrap()).unwrap();
    assert!(g.norm() < 1e-12);
}
