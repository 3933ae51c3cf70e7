//! `subspace-adapt` subcommands. Every command reads one [`RunConfig`],
//! writes its outputs atomically under the output directory and leaves a
//! `<command>.provenance.json` next to them.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

use crate::analysis::{self, verify};
use crate::error::{Error, Result};
use crate::files;
use crate::linalg;
use crate::moments::{self, MomentsFile};
use crate::objective::{self, MomentPair, RegParams};
use crate::optimizer::{self, OptimizerOptions, TraceEntry};
use crate::scm::{Environment, EnvironmentMoments};

pub const SOURCE_FILE: &str = "source.moments.json";
pub const TARGET_FILE: &str = "target.moments.json";
pub const TARGET_EVAL_FILE: &str = "target_eval.moments.json";

#[derive(Debug, Parser)]
#[command(
    name = "subspace-adapt",
    version,
    about = "Stable-subspace ridge regression under confounded shift"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: config `out`, else `./out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed; overrides the config's top-level `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write source/target moment caches for a synthetic instance.
    Simulate,
    /// Read a dataset recipe's CSV files into moment caches.
    Ingest,
    /// Fit one `(υ, η)` pair.
    Fit,
    /// Fit a `(υ, η)` grid and write heatmap tables.
    Sweep,
    /// Run the verification suite; exits 2 if a gating check fails.
    Verify,
    /// Summarize the outputs found in the output directory.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ingest => "ingest",
            Command::Fit => "fit",
            Command::Sweep => "sweep",
            Command::Verify => "verify",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A gating verification check failed.
    ChecksFailed,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::ChecksFailed => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: files::sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

/// Resolved run context shared by all commands.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    hash: String,
    command: Command,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.out = Some(out.clone());
        }
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let hash = cfg.hash();
        Ok(Self {
            cfg,
            out,
            hash,
            command: cli.command,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn optimizer(&self, opts: &OptimizerOptions) -> OptimizerOptions {
        OptimizerOptions {
            seed: self.cfg.seed.wrapping_add(opts.seed),
            ..*opts
        }
    }

    fn provenance(
        &self,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        details: serde_json::Value,
    ) -> Result<()> {
        let record = Provenance {
            command: self.command.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            inputs: inputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_>>()?,
            outputs: outputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_>>()?,
            details,
        };
        files::write_json(
            &self.path(&format!("{}.provenance.json", self.command.name())),
            &record,
        )
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let ctx = Ctx::new(cli)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::Ingest => cmd_ingest(&ctx),
        Command::Fit => cmd_fit(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Verify => cmd_verify(&ctx),
        Command::Report => cmd_report(&ctx),
    }
}

fn write_moment_caches(
    ctx: &Ctx,
    source: &EnvironmentMoments,
    target: &EnvironmentMoments,
    names: &[String],
) -> Result<Vec<PathBuf>> {
    let paths = [
        ctx.path(SOURCE_FILE),
        ctx.path(TARGET_FILE),
        ctx.path(TARGET_EVAL_FILE),
    ];
    MomentsFile::labeled(source, Environment::Source, names).write(&paths[0])?;
    MomentsFile::unlabeled(&target.covariates(), Environment::Target, names).write(&paths[1])?;
    MomentsFile::labeled(target, Environment::Target, names).write(&paths[2])?;
    Ok(paths.to_vec())
}

fn cmd_simulate(ctx: &Ctx) -> Result<Outcome> {
    let sim = ctx.cfg.simulate.clone().unwrap_or_default();
    let params = sim.params(ctx.cfg.seed)?;
    let names: Vec<String> = (0..params.d()).map(|i| format!("x{i}")).collect();
    let (source, target) = match sim.mode {
        config::SimulateMode::Population => (
            params.population_moments(Environment::Source),
            params.population_moments(Environment::Target),
        ),
        config::SimulateMode::Sampled => {
            let n = sim
                .n
                .ok_or_else(|| Error::param("simulate.n", "required in sampled mode"))?;
            // Distinct streams per environment.
            let seed = ctx.cfg.seed.wrapping_mul(2);
            let s = params.sample(Environment::Source, n, seed)?;
            let t = params.sample(Environment::Target, n, seed.wrapping_add(1))?;
            (
                moments::estimate_moments(&s)?,
                moments::estimate_moments(&t)?,
            )
        }
    };
    let mut outputs = write_moment_caches(ctx, &source, &target, &names)?;
    let scm_path = ctx.path("scm.json");
    files::write_json(&scm_path, &config::ScmSpec::from_params(&params))?;
    outputs.push(scm_path);
    ctx.provenance(
        &[],
        &outputs,
        serde_json::json!({ "mode": sim.mode, "n": sim.n }),
    )?;
    println!(
        "simulate: wrote {} files to {}",
        outputs.len(),
        ctx.out.display()
    );
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct IngestCounts {
    environment: Environment,
    file: String,
    rows_read: usize,
    rows_filtered_out: usize,
    rows_dropped: usize,
    rows_used: usize,
}

fn cmd_ingest(ctx: &Ctx) -> Result<Outcome> {
    let ing = ctx
        .cfg
        .ingest
        .as_ref()
        .ok_or_else(|| Error::Config("missing [ingest] section".into()))?;
    let (recipe, default_dir) = match (&ing.recipe, &ing.recipe_file) {
        (_, Some(path)) => (
            moments::Recipe::from_file(path)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        (Some(name), None) => (moments::dataset_recipe(name)?, PathBuf::from(".")),
        (None, None) => {
            return Err(Error::Config(
                "ingest: set `recipe` or `recipe_file`".into(),
            ))
        }
    };
    let dir = ing.data_dir.clone().unwrap_or(default_dir);
    let source_path = dir.join(&recipe.source.file);
    let target_path = dir.join(&recipe.target.file);
    let source = moments::ingest_csv(&source_path, &recipe.source.schema, Environment::Source)?;
    let target = moments::ingest_csv(&target_path, &recipe.target.schema, Environment::Target)?;
    let (s, t, scaling) = moments::standardize(
        &source.dataset,
        &target.dataset,
        ing.standardize,
        ing.scale_response,
    )?;
    let sm = moments::estimate_moments(&s)?;
    let tm = moments::estimate_moments(&t)?;
    let mut outputs = write_moment_caches(ctx, &sm, &tm, s.feature_names())?;
    let scaling_path = ctx.path("scaling.json");
    files::write_json(&scaling_path, &scaling)?;
    outputs.push(scaling_path);

    let counts = |env, path: &Path, ing: &moments::Ingested| IngestCounts {
        environment: env,
        file: path.display().to_string(),
        rows_read: ing.rows_read,
        rows_filtered_out: ing.rows_filtered_out,
        rows_dropped: ing.rows_dropped,
        rows_used: ing.dataset.n(),
    };
    let details = serde_json::json!({
        "recipe": recipe.name,
        "ell": recipe.ell,
        "standardize": ing.standardize,
        "scale_response": ing.scale_response,
        "rows": [
            counts(Environment::Source, &source_path, &source),
            counts(Environment::Target, &target_path, &target),
        ],
    });
    let mut inputs = vec![source_path.clone()];
    if target_path != source_path {
        inputs.push(target_path);
    }
    ctx.provenance(&inputs, &outputs, details)?;
    println!(
        "ingest: {} (d = {}, source n = {}, target n = {})",
        recipe.name,
        recipe.dim(),
        sm.n().unwrap_or(0),
        tm.n().unwrap_or(0)
    );
    Ok(Outcome::Success)
}

/// Learner inputs plus optional evaluation moments. The target file is read
/// through [`MomentsFile::covariates`] only.
struct Inputs {
    pair: MomentPair,
    eval: Option<EnvironmentMoments>,
    feature_names: Vec<String>,
    paths: Vec<PathBuf>,
}

fn load_inputs(ctx: &Ctx, paths: &config::InputPaths) -> Result<Inputs> {
    let source_path = paths
        .source
        .clone()
        .unwrap_or_else(|| ctx.path(SOURCE_FILE));
    let target_path = paths
        .target
        .clone()
        .unwrap_or_else(|| ctx.path(TARGET_FILE));
    let source_file = MomentsFile::read(&source_path)?;
    let target_file = MomentsFile::read(&target_path)?;
    let pair = MomentPair::new(source_file.moments()?, target_file.covariates()?)?;
    let mut used = vec![source_path, target_path];
    let eval_path = match &paths.target_eval {
        Some(p) => Some(p.clone()),
        None => Some(ctx.path(TARGET_EVAL_FILE)).filter(|p| p.exists()),
    };
    let eval = match eval_path {
        Some(p) => {
            let m = MomentsFile::read(&p)?.moments()?;
            used.push(p);
            Some(m)
        }
        None => None,
    };
    Ok(Inputs {
        pair,
        eval,
        feature_names: source_file.feature_names,
        paths: used,
    })
}

#[derive(Serialize)]
struct FitRecord {
    config_hash: String,
    ell: usize,
    upsilon: f64,
    eta: f64,
    feature_names: Vec<String>,
    v: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    line_search_failed: bool,
    risk_source: f64,
    penalty_frobenius: f64,
    /// From held-out labeled target moments; never used in fitting.
    risk_target_eval: Option<f64>,
    trace: Vec<TraceEntry>,
}

fn cmd_fit(ctx: &Ctx) -> Result<Outcome> {
    let fc = ctx
        .cfg
        .fit
        .as_ref()
        .ok_or_else(|| Error::Config("missing [fit] section".into()))?;
    let inputs = load_inputs(ctx, &fc.inputs)?;
    let reg = RegParams::new(fc.upsilon, fc.eta)?;
    let opts = ctx.optimizer(&fc.optimizer);
    let fit = optimizer::minimize_multistart(&inputs.pair, &reg, fc.ell, &[], &opts)?;
    let record = FitRecord {
        config_hash: ctx.hash.clone(),
        ell: fc.ell,
        upsilon: fc.upsilon,
        eta: fc.eta,
        feature_names: inputs.feature_names.clone(),
        v: linalg::matrix_to_rows(fit.v.matrix()),
        alpha: fit.alpha.iter().copied().collect(),
        beta: fit.beta.iter().copied().collect(),
        objective: fit.objective,
        grad_norm: fit.grad_norm,
        iterations: fit.iterations,
        converged: fit.converged,
        line_search_failed: fit.line_search_failed,
        risk_source: inputs.pair.source().risk(&fit.beta)?,
        penalty_frobenius: objective::stability_penalty(&fit.v, &inputs.pair)?.sqrt(),
        risk_target_eval: inputs
            .eval
            .as_ref()
            .map(|t| t.risk(&fit.beta))
            .transpose()?,
        trace: fit.trace.clone(),
    };
    let path = ctx.path("fit.json");
    files::write_json(&path, &record)?;
    ctx.provenance(
        &inputs.paths,
        std::slice::from_ref(&path),
        serde_json::Value::Null,
    )?;
    println!(
        "fit: objective {:.6e}, |grad| {:.2e}, {} iterations, converged = {}",
        fit.objective, fit.grad_norm, fit.iterations, fit.converged
    );
    Ok(Outcome::Success)
}

fn cmd_sweep(ctx: &Ctx) -> Result<Outcome> {
    let sc = ctx
        .cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("missing [sweep] section".into()))?;
    let inputs = load_inputs(ctx, &sc.inputs)?;
    let opts = ctx.optimizer(&sc.optimizer);
    let result = analysis::sweep(
        &inputs.pair,
        sc.ell,
        &sc.upsilon_grid,
        &sc.eta_grid,
        &opts,
        inputs.eval.as_ref(),
    )?;
    result.write(&ctx.out)?;
    let outputs = ["sweep.csv", "baselines.csv", "sweep.json"].map(|n| ctx.path(n));
    let failed = result.iter_cells().filter(|c| c.error.is_some()).count();
    let unconverged = result
        .iter_cells()
        .filter(|c| c.converged == Some(false))
        .count();
    ctx.provenance(
        &inputs.paths,
        &outputs,
        serde_json::json!({ "cells": result.iter_cells().count(), "failed": failed, "unconverged": unconverged }),
    )?;
    println!(
        "sweep: {} x {} cells, {failed} failed, {unconverged} not converged",
        result.upsilon_grid.len(),
        result.eta_grid.len()
    );
    Ok(Outcome::Success)
}

fn cmd_verify(ctx: &Ctx) -> Result<Outcome> {
    let mut vc = ctx.cfg.verify.clone().unwrap_or_default();
    vc.seed = ctx.cfg.seed.wrapping_add(vc.seed);
    let report = verify::run_suite(&vc)?;
    let path = ctx.path("verify.json");
    files::write_json(&path, &report)?;
    ctx.provenance(&[], std::slice::from_ref(&path), serde_json::Value::Null)?;
    for c in &report.checks {
        let status = match (c.passed, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        println!("{status} {}: {}", c.name, c.detail);
    }
    if report.flagged > 0 {
        println!(
            "{} bound reports flagged with unverified hypotheses",
            report.flagged
        );
    }
    Ok(if report.passed() {
        Outcome::Success
    } else {
        Outcome::ChecksFailed
    })
}

#[derive(Debug, Deserialize)]
struct CsvCell {
    upsilon: f64,
    eta: f64,
    risk_source: Option<f64>,
    risk_target: Option<f64>,
    gap: Option<f64>,
    converged: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct CsvBaseline {
    baseline: String,
    risk_target: Option<f64>,
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn cmd_report(ctx: &Ctx) -> Result<Outcome> {
    let mut md = String::from("# subspace-adapt report\n");
    let mut inputs = Vec::new();

    let sweep_path = ctx.path("sweep.csv");
    if sweep_path.exists() {
        let cells: Vec<CsvCell> = read_csv(&sweep_path)?;
        let baselines: Vec<CsvBaseline> = read_csv(&ctx.path("baselines.csv"))?;
        inputs.push(sweep_path);
        inputs.push(ctx.path("baselines.csv"));
        md.push_str(&sweep_section(&cells, &baselines));
    }
    let fit_path = ctx.path("fit.json");
    if fit_path.exists() {
        let fit: serde_json::Value = serde_json::from_str(&files::read_to_string(&fit_path)?)?;
        md.push_str("\n## Fit\n\n");
        for key in [
            "ell",
            "upsilon",
            "eta",
            "objective",
            "grad_norm",
            "iterations",
            "converged",
            "risk_source",
            "risk_target_eval",
        ] {
            md.push_str(&format!("- {key}: {}\n", fit[key]));
        }
        inputs.push(fit_path);
    }
    let verify_path = ctx.path("verify.json");
    if verify_path.exists() {
        let v: serde_json::Value = serde_json::from_str(&files::read_to_string(&verify_path)?)?;
        md.push_str(
            "\n## Verification\n\n| check | passed | gating | detail |\n|---|---|---|---|\n",
        );
        for c in v["checks"].as_array().into_iter().flatten() {
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                c["name"].as_str().unwrap_or(""),
                c["passed"],
                c["gating"],
                c["detail"].as_str().unwrap_or("")
            ));
        }
        inputs.push(verify_path);
    }
    if inputs.is_empty() {
        return Err(Error::Config(format!(
            "report: no sweep.csv, fit.json or verify.json in {}",
            ctx.out.display()
        )));
    }
    let path = ctx.path("report.md");
    files::write_atomic(&path, md.as_bytes())?;
    ctx.provenance(
        &inputs,
        std::slice::from_ref(&path),
        serde_json::Value::Null,
    )?;
    println!("report: wrote {}", path.display());
    Ok(Outcome::Success)
}

fn sweep_section(cells: &[CsvCell], baselines: &[CsvBaseline]) -> String {
    let mut upsilons: Vec<f64> = cells.iter().map(|c| c.upsilon).collect();
    upsilons.sort_by(f64::total_cmp);
    upsilons.dedup();
    let mut etas: Vec<f64> = cells.iter().map(|c| c.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let lookup = |u: f64, e: f64| cells.iter().find(|c| c.upsilon == u && c.eta == e);
    let baseline = baselines
        .iter()
        .find(|b| b.baseline == "source_minimizer")
        .and_then(|b| b.risk_target);

    let mut md = String::from("\n## Sweep\n\n");
    if let Some(b) = baseline {
        md.push_str(&format!("Target risk of the source minimizer: {b:.6}\n\n"));
    }
    let table = |title: &str, get: &dyn Fn(&CsvCell) -> Option<f64>| {
        let mut t = format!("### {title}\n\n| υ \\ η |");
        for e in &etas {
            t.push_str(&format!(" {e:.3e} |"));
        }
        t.push_str("\n|---|");
        t.push_str(&"---|".repeat(etas.len()));
        t.push('\n');
        for &u in &upsilons {
            t.push_str(&format!("| {u:.3e} |"));
            for &e in &etas {
                let v = lookup(u, e).and_then(get);
                t.push_str(
                    &v.map(|x| format!(" {x:.4} |"))
                        .unwrap_or_else(|| " |".into()),
                );
            }
            t.push('\n');
        }
        t.push('\n');
        t
    };
    md.push_str(&table("Source risk", &|c| c.risk_source));
    if cells.iter().any(|c| c.risk_target.is_some()) {
        md.push_str(&table("Target risk", &|c| c.risk_target));
        md.push_str(&table("Gap", &|c| c.gap));
    }
    let total = cells.len();
    let converged = cells.iter().filter(|c| c.converged == Some(true)).count();
    md.push_str(&format!("{converged} of {total} cells converged.\n"));
    if let Some(b) = baseline {
        let better = cells
            .iter()
            .filter(|c| c.risk_target.is_some_and(|t| t < b))
            .count();
        md.push_str(&format!(
            "{better} of {total} cells beat the source minimizer on the target.\n"
        ));
    }
    md
}
