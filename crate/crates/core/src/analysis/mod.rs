//! `(υ, η)` sweeps, bound checks and the improvement-region scan.

pub mod bounds;
pub mod region;
pub mod verify;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

pub use bounds::{
    alignment_bound_check, eigenvalue_lemma_check, stability_bound_check, surrogate_bound_check,
    BoundReport, LemmaReport,
};
pub use region::{improvement_region_scan, Regime, RegionScan};

use crate::error::{Error, Result};
use crate::files;
use crate::objective::{self, MomentPair, RegParams};
use crate::optimizer::{self, FitResult, OptimizerOptions};
use crate::scm::{EnvironmentMoments, ScmParams, ScmParts};
use crate::stiefel::StiefelPoint;

pub const CSV_COLUMNS: [&str; 10] = [
    "upsilon",
    "eta",
    "risk_source",
    "risk_target",
    "gap",
    "penalty_frobenius",
    "alpha_norm",
    "grad_norm",
    "iterations",
    "converged",
];

/// `n` evenly spaced points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// `n` log-spaced points from `start` to `end` inclusive (both positive).
pub fn logspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = linspace(start.log10(), end.log10(), n)
        .into_iter()
        .map(|e| 10f64.powf(e))
        .collect();
    // Pin the endpoints so decades come out exact.
    if let Some(first) = out.first_mut() {
        *first = start;
    }
    if n > 1 {
        out[n - 1] = end;
    }
    out
}

pub fn default_upsilon_grid() -> Vec<f64> {
    logspace(1e-3, 1e1, 9)
}

pub fn default_eta_grid() -> Vec<f64> {
    logspace(1e-2, 1e4, 13)
}

/// Richer-target synthetic instance used by the bound checks: `d = 4`,
/// `Θ = [e₁, e₂]`, `Δ = [e₃, e₄]`, `Λ_S = diag(1, 0.5)`, `Λ_T = diag(4, 3)`,
/// `τ² = 1` and `Δ'β⋆ = −0.8γ`. Fit with `ell = 2`.
pub fn canonical_instance() -> ScmParams {
    let e = |i: usize| DVector::from_fn(4, |j, _| if i == j { 1.0 } else { 0.0 });
    ScmParams::new(ScmParts {
        beta_star: DVector::from_vec(vec![1.0, -0.5, -0.8, 0.8]),
        gamma: DVector::from_vec(vec![1.0, -1.0]),
        theta: DMatrix::from_columns(&[e(0), e(1)]),
        delta: DMatrix::from_columns(&[e(2), e(3)]),
        cov_z: DMatrix::identity(2, 2),
        lambda_source: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5])),
        lambda_target: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 3.0])),
        tau_sq: 1.0,
        sigma_u_sq: 0.5,
    })
    .expect("canonical instance is valid")
}

pub const CANONICAL_ELL: usize = 2;

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub upsilon: f64,
    pub eta: f64,
    #[serde(skip)]
    pub fit: Option<FitResult>,
    /// Set when the fit for this cell failed; the numeric fields are then empty.
    pub error: Option<String>,
    pub risk_source: Option<f64>,
    pub risk_target: Option<f64>,
    /// `R_T(Vα) − R_S(Vα)`
    pub gap: Option<f64>,
    /// `‖V'(Σ_T − Σ_S)V‖_F`
    pub penalty_frobenius: Option<f64>,
    pub alpha_norm: Option<f64>,
    pub grad_norm: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub objective: Option<f64>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Baselines {
    /// `R_T(β_S)`, `β_S` the source risk minimizer.
    pub risk_target_of_source_minimizer: Option<f64>,
    /// `R_T(β_T)`; needs labeled target moments.
    pub risk_target_of_target_minimizer: Option<f64>,
    pub risk_source_of_source_minimizer: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub ell: usize,
    pub upsilon_grid: Vec<f64>,
    pub eta_grid: Vec<f64>,
    /// Row per `υ`, column per `η`.
    pub cells: Vec<Vec<SweepCell>>,
    pub baselines: Baselines,
    /// True when target risks come from held-out labeled data that the
    /// learner never saw.
    pub evaluation_only: bool,
}

fn check_grid(name: &'static str, grid: &[f64], allow_zero: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::param(name, "grid is empty"));
    }
    for &g in grid {
        let ok = g.is_finite() && if allow_zero { g >= 0.0 } else { g > 0.0 };
        if !ok {
            return Err(Error::param(name, format!("invalid grid value {g}")));
        }
    }
    Ok(())
}

fn sorted_unique(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Fits every `(υ, η)` cell. Rows run in parallel; within a row `η` ascends
/// and each cell also starts from the previous cell's frame, alongside the
/// random restarts in `opts`. Fit failures are recorded in the cell.
pub fn sweep(
    m: &MomentPair,
    ell: usize,
    upsilon_grid: &[f64],
    eta_grid: &[f64],
    opts: &OptimizerOptions,
    eval_target: Option<&EnvironmentMoments>,
) -> Result<SweepResult> {
    check_grid("upsilon_grid", upsilon_grid, false)?;
    check_grid("eta_grid", eta_grid, true)?;
    opts.validate()?;
    let d = m.dim();
    if ell == 0 || ell > d {
        return Err(Error::param(
            "ell",
            format!("need 1 <= ell <= d, got ell={ell}, d={d}"),
        ));
    }
    if let Some(t) = eval_target {
        if t.dim() != d {
            return Err(Error::dim("evaluation target moments", d, t.dim()));
        }
    }
    let upsilon_grid = sorted_unique(upsilon_grid);
    let eta_grid = sorted_unique(eta_grid);

    let cells: Vec<Vec<SweepCell>> = upsilon_grid
        .par_iter()
        .map(|&upsilon| sweep_row(m, ell, upsilon, &eta_grid, opts, eval_target))
        .collect();

    let mut baselines = Baselines::default();
    if let Ok(beta_s) = m.source().best_linear() {
        baselines.risk_source_of_source_minimizer = m.source().risk(&beta_s).ok();
        if let Some(t) = eval_target {
            baselines.risk_target_of_source_minimizer = t.risk(&beta_s).ok();
        }
    }
    if let Some(t) = eval_target {
        if let Ok(beta_t) = t.best_linear() {
            baselines.risk_target_of_target_minimizer = t.risk(&beta_t).ok();
        }
    }

    Ok(SweepResult {
        ell,
        upsilon_grid,
        eta_grid,
        cells,
        baselines,
        evaluation_only: eval_target.is_some(),
    })
}

fn sweep_row(
    m: &MomentPair,
    ell: usize,
    upsilon: f64,
    eta_grid: &[f64],
    opts: &OptimizerOptions,
    eval_target: Option<&EnvironmentMoments>,
) -> Vec<SweepCell> {
    let mut previous: Option<StiefelPoint> = None;
    eta_grid
        .iter()
        .map(|&eta| {
            let warm: Vec<StiefelPoint> = previous.iter().cloned().collect();
            let outcome = RegParams::new(upsilon, eta)
                .and_then(|reg| optimizer::minimize_multistart(m, &reg, ell, &warm, opts))
                .and_then(|fit| summarize(upsilon, eta, fit, m, eval_target));
            match outcome {
                Ok(cell) => {
                    previous = cell.fit.as_ref().map(|f| f.v.clone());
                    cell
                }
                Err(e) => failed_cell(upsilon, eta, e),
            }
        })
        .collect()
}

fn summarize(
    upsilon: f64,
    eta: f64,
    fit: FitResult,
    m: &MomentPair,
    eval_target: Option<&EnvironmentMoments>,
) -> Result<SweepCell> {
    let risk_source = m.source().risk(&fit.beta)?;
    let risk_target = eval_target.map(|t| t.risk(&fit.beta)).transpose()?;
    let penalty = objective::stability_penalty(&fit.v, m)?;
    Ok(SweepCell {
        upsilon,
        eta,
        error: None,
        risk_source: Some(risk_source),
        risk_target,
        gap: risk_target.map(|t| t - risk_source),
        penalty_frobenius: Some(penalty.sqrt()),
        alpha_norm: Some(fit.alpha.norm()),
        grad_norm: Some(fit.grad_norm),
        iterations: Some(fit.iterations),
        converged: Some(fit.converged),
        objective: Some(fit.objective),
        beta: Some(fit.beta.iter().copied().collect()),
        fit: Some(fit),
    })
}

fn failed_cell(upsilon: f64, eta: f64, e: Error) -> SweepCell {
    SweepCell {
        upsilon,
        eta,
        fit: None,
        error: Some(e.to_string()),
        risk_source: None,
        risk_target: None,
        gap: None,
        penalty_frobenius: None,
        alpha_norm: None,
        grad_norm: None,
        iterations: None,
        converged: None,
        objective: None,
        beta: None,
    }
}

impl SweepResult {
    pub fn iter_cells(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().flatten()
    }

    /// Largest increase of `gap` between consecutive `η` in any row (0 when
    /// every row is non-increasing). Rows with missing gaps are skipped.
    pub fn max_gap_increase(&self) -> f64 {
        self.cells
            .iter()
            .flat_map(|row| {
                row.windows(2).filter_map(|w| match (w[0].gap, w[1].gap) {
                    (Some(a), Some(b)) => Some(b - a),
                    _ => None,
                })
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for c in self.iter_cells() {
            w.write_record([
                fmt_f64(c.upsilon),
                fmt_f64(c.eta),
                opt(c.risk_source),
                opt(c.risk_target),
                opt(c.gap),
                opt(c.penalty_frobenius),
                opt(c.alpha_norm),
                opt(c.grad_norm),
                c.iterations.map(|i| i.to_string()).unwrap_or_default(),
                c.converged.map(|b| b.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn baselines_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["baseline", "risk_target"])?;
        let b = &self.baselines;
        for (name, value) in [
            ("source_minimizer", b.risk_target_of_source_minimizer),
            ("target_minimizer", b.risk_target_of_target_minimizer),
        ] {
            w.write_record([name.to_string(), value.map(fmt_f64).unwrap_or_default()])?;
        }
        w.into_inner().map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `sweep.csv`, `baselines.csv` and `sweep.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        files::write_atomic(&dir.join("sweep.csv"), &self.to_csv()?)?;
        files::write_atomic(&dir.join("baselines.csv"), &self.baselines_csv()?)?;
        files::write_json(&dir.join("sweep.json"), self)
    }
}

/// Shortest representation that round-trips.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::Environment;

    fn t1_pair() -> (MomentPair, EnvironmentMoments) {
        let p = ScmParams::new(ScmParts {
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
        .unwrap();
        let target = p.population_moments(Environment::Target);
        let pair = MomentPair::new(
            p.population_moments(Environment::Source),
            target.covariates(),
        )
        .unwrap();
        (pair, target)
    }

    #[test]
    fn grids() {
        let g = logspace(1e-3, 1e1, 9);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[8], 10.0);
        assert!((g[2] - 1e-2).abs() < 1e-15);
        assert_eq!(linspace(0.0, 1.0, 5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(default_eta_grid().len(), 13);
    }

    #[test]
    fn small_sweep_bookkeeping() {
        let (pair, target) = t1_pair();
        let opts = OptimizerOptions {
            restarts: 2,
            ..Default::default()
        };
        let res = sweep(
            &pair,
            1,
            &[1.0, 0.1, 0.01],
            &[0.0, 1.0, 10.0],
            &opts,
            Some(&target),
        )
        .unwrap();
        assert_eq!(res.upsilon_grid, vec![0.01, 0.1, 1.0]);
        assert_eq!(res.cells.len(), 3);
        assert!(res.cells.iter().all(|r| r.len() == 3));
        assert!(res.iter_cells().all(|c| c.converged == Some(true)));
        assert!(res.iter_cells().all(|c| c.risk_target.is_some()));
        assert!(res.baselines.risk_target_of_target_minimizer.is_some());
        let csv = String::from_utf8(res.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn eta_zero_is_plain_ridge() {
        let (pair, _) = t1_pair();
        let res = sweep(&pair, 1, &[0.5], &[0.0], &OptimizerOptions::default(), None).unwrap();
        let cell = &res.cells[0][0];
        let fit = cell.fit.as_ref().unwrap();
        let ridge = objective::inner_ridge(&fit.v, pair.source(), 0.5).unwrap();
        assert!((&ridge - &fit.alpha).norm() < 1e-12);
        assert!(cell.risk_target.is_none() && cell.gap.is_none());
    }

    #[test]
    fn empty_grid_rejected() {
        let (pair, _) = t1_pair();
        assert!(sweep(&pair, 1, &[], &[1.0], &OptimizerOptions::default(), None).is_err());
        assert!(sweep(
            &pair,
            1,
            &[1.0],
            &[-1.0],
            &OptimizerOptions::default(),
            None
        )
        .is_err());
    }

    #[test]
    fn canonical_instance_is_richer_target() {
        let p = canonical_instance();
        assert!(p.is_richer_target());
        let center = p.delta().tr_mul(p.beta_star());
        assert!((center + p.gamma() * 0.8).norm() < 1e-15);
    }
}
