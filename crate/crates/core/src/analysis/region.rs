//! Where does the invariant-subspace predictor beat the source minimizer?
//!
//! Scalar instance: `d = 2`, `Θ = e₁`, `Δ = e₂`, `γ = 1`, `β⋆ = (1, x)`, so
//! `Δ'β⋆ = x γ`. The target risk difference `R_T(β_S^Θ) − R_T(β_S)` is scanned
//! over `x`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scm::{Environment, ScmParams, ScmParts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    TargetRich,
    SourceRich,
    NoShift,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionScan {
    pub regime: Regime,
    /// Sign-change interval of the scanned difference, endpoints linearly
    /// interpolated between grid points. `None` if no grid point improves.
    pub scanned: Option<(f64, f64)>,
    /// `−σ_t²/(σ_t²+τ²) ± |σ_s²/(σ_s²+τ²) − σ_t²/(σ_t²+τ²)|`
    pub analytic: Option<(f64, f64)>,
    /// Largest spacing of the supplied grid.
    pub resolution: f64,
}

pub fn scalar_instance(sigma_s_sq: f64, sigma_t_sq: f64, tau_sq: f64, x: f64) -> Result<ScmParams> {
    ScmParams::new(ScmParts {
        beta_star: DVector::from_vec(vec![1.0, x]),
        gamma: DVector::from_element(1, 1.0),
        theta: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        delta: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        cov_z: DMatrix::from_element(1, 1, 1.0),
        lambda_source: DMatrix::from_element(1, 1, sigma_s_sq),
        lambda_target: DMatrix::from_element(1, 1, sigma_t_sq),
        tau_sq,
        sigma_u_sq: 1.0,
    })
}

/// `R_T(β_S^Θ) − R_T(β_S)`; negative means the subspace predictor improves.
pub fn target_risk_difference(
    sigma_s_sq: f64,
    sigma_t_sq: f64,
    tau_sq: f64,
    x: f64,
) -> Result<f64> {
    let params = scalar_instance(sigma_s_sq, sigma_t_sq, tau_sq, x)?;
    let source = params.population_moments(Environment::Source);
    let target = params.population_moments(Environment::Target);
    let restricted = source.subspace_minimizer(params.theta())?;
    let full = source.best_linear()?;
    Ok(target.risk(&restricted)? - target.risk(&full)?)
}

pub fn analytic_interval(sigma_s_sq: f64, sigma_t_sq: f64, tau_sq: f64) -> Option<(f64, f64)> {
    let s = sigma_s_sq / (sigma_s_sq + tau_sq);
    let t = sigma_t_sq / (sigma_t_sq + tau_sq);
    let radius = (s - t).abs();
    (radius > 0.0).then_some((-t - radius, -t + radius))
}

pub fn improvement_region_scan(
    sigma_s_sq: f64,
    sigma_t_sq: f64,
    tau_sq: f64,
    x_grid: &[f64],
) -> Result<RegionScan> {
    for (field, value) in [
        ("sigma_s_sq", sigma_s_sq),
        ("sigma_t_sq", sigma_t_sq),
        ("tau_sq", tau_sq),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::param(field, "must be positive and finite"));
        }
    }
    if x_grid.len() < 2 || x_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param(
            "x_grid",
            "need at least two strictly increasing points",
        ));
    }
    let values = x_grid
        .iter()
        .map(|&x| target_risk_difference(sigma_s_sq, sigma_t_sq, tau_sq, x))
        .collect::<Result<Vec<_>>>()?;
    // Tiny negatives at the analytic endpoints are rounding, not improvement.
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let improves = |v: f64| v < -1e-12 * scale.max(1.0);

    let first = values.iter().position(|&v| improves(v));
    let last = values.iter().rposition(|&v| improves(v));
    let scanned = first.zip(last).map(|(i, j)| {
        let left = if i == 0 {
            x_grid[0]
        } else {
            crossing(x_grid[i - 1], values[i - 1], x_grid[i], values[i])
        };
        let right = if j + 1 == x_grid.len() {
            x_grid[j]
        } else {
            crossing(x_grid[j], values[j], x_grid[j + 1], values[j + 1])
        };
        (left, right)
    });

    let regime = if sigma_t_sq > sigma_s_sq {
        Regime::TargetRich
    } else if sigma_t_sq < sigma_s_sq {
        Regime::SourceRich
    } else {
        Regime::NoShift
    };
    let resolution = x_grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    Ok(RegionScan {
        regime,
        scanned,
        analytic: analytic_interval(sigma_s_sq, sigma_t_sq, tau_sq),
        resolution,
    })
}

fn crossing(x0: f64, f0: f64, x1: f64, f1: f64) -> f64 {
    if f0 == f1 {
        return 0.5 * (x0 + x1);
    }
    x0 + (x1 - x0) * f0 / (f0 - f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::linspace;

    #[test]
    fn target_rich_interval() {
        let grid = linspace(-2.0, 1.0, 3001);
        let scan = improvement_region_scan(2.0, 10.0, 10.0, &grid).unwrap();
        assert_eq!(scan.regime, Regime::TargetRich);
        let (l, r) = scan.scanned.unwrap();
        assert!((l + 5.0 / 6.0).abs() < 1e-3, "{l}");
        assert!((r + 1.0 / 6.0).abs() < 1e-3, "{r}");
        let (al, ar) = scan.analytic.unwrap();
        assert!((al + 5.0 / 6.0).abs() < 1e-12 && (ar + 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn source_rich_left_endpoint() {
        let grid = linspace(-2.0, 1.0, 3001);
        let scan = improvement_region_scan(10.0, 2.0, 10.0, &grid).unwrap();
        assert_eq!(scan.regime, Regime::SourceRich);
        assert!((scan.scanned.unwrap().0 + 0.5).abs() < 1e-3);
    }

    #[test]
    fn equal_variances_empty() {
        let grid = linspace(-2.0, 1.0, 301);
        let scan = improvement_region_scan(3.0, 3.0, 1.0, &grid).unwrap();
        assert_eq!(scan.regime, Regime::NoShift);
        assert!(scan.scanned.is_none());
        assert!(scan.analytic.is_none());
    }

    #[test]
    fn difference_agrees_with_condition() {
        for &x in &[-1.0, -0.5, 0.0, 0.3] {
            let diff = target_risk_difference(2.0, 10.0, 10.0, x).unwrap();
            let cond = scalar_instance(2.0, 10.0, 10.0, x)
                .unwrap()
                .improvement_condition()
                .unwrap();
            assert_eq!(diff < 0.0, cond.improves, "x = {x}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(improvement_region_scan(0.0, 1.0, 1.0, &[0.0, 1.0]).is_err());
        assert!(improvement_region_scan(1.0, 1.0, 1.0, &[1.0, 0.0]).is_err());
    }
}
