//! Versioned TOML run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analysis::verify::VerifyConfig;
use crate::error::{Error, Result};
use crate::files;
use crate::linalg;
use crate::moments::StandardizeMode;
use crate::optimizer::OptimizerOptions;
use crate::scm::{Environment, ScmParams, ScmParts};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub ingest: Option<IngestConfig>,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: None,
            simulate: None,
            ingest: None,
            fit: None,
            sweep: None,
            verify: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&files::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.out);
        if let Some(i) = &mut self.ingest {
            fix_opt(&mut i.recipe_file);
            fix_opt(&mut i.data_dir);
        }
        for inputs in [
            self.fit.as_mut().map(|f| &mut f.inputs),
            self.sweep.as_mut().map(|s| &mut s.inputs),
        ]
        .into_iter()
        .flatten()
        {
            fix_opt(&mut inputs.source);
            fix_opt(&mut inputs.target);
            fix_opt(&mut inputs.target_eval);
        }
    }

    /// SHA-256 of the canonical JSON form, after flag overrides.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        files::sha256_hex(&json)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    /// Closed-form population moments.
    #[default]
    Population,
    /// Moments of `n` Gaussian draws per environment.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomScm {
    pub d: usize,
    pub k: usize,
    pub r: usize,
}

/// Explicit parameters; matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub beta_star: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub cov_z: Vec<Vec<f64>>,
    pub lambda_source: Vec<Vec<f64>>,
    pub lambda_target: Vec<Vec<f64>>,
    pub tau_sq: f64,
    pub sigma_u_sq: f64,
}

impl ScmSpec {
    pub fn from_params(p: &ScmParams) -> Self {
        let rows = linalg::matrix_to_rows;
        Self {
            beta_star: p.beta_star().iter().copied().collect(),
            gamma: p.gamma().iter().copied().collect(),
            theta: rows(p.theta()),
            delta: rows(p.delta()),
            cov_z: rows(p.cov_z()),
            lambda_source: rows(p.lambda(Environment::Source)),
            lambda_target: rows(p.lambda(Environment::Target)),
            tau_sq: p.tau_sq(),
            sigma_u_sq: p.sigma_u_sq(),
        }
    }

    pub fn build(&self) -> Result<ScmParams> {
        ScmParams::new(ScmParts {
            beta_star: DVector::from_column_slice(&self.beta_star),
            gamma: DVector::from_column_slice(&self.gamma),
            theta: linalg::rows_to_matrix(&self.theta, "theta")?,
            delta: linalg::rows_to_matrix(&self.delta, "delta")?,
            cov_z: linalg::rows_to_matrix(&self.cov_z, "cov_z")?,
            lambda_source: linalg::rows_to_matrix(&self.lambda_source, "lambda_source")?,
            lambda_target: linalg::rows_to_matrix(&self.lambda_target, "lambda_target")?,
            tau_sq: self.tau_sq,
            sigma_u_sq: self.sigma_u_sq,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub mode: SimulateMode,
    /// Rows per environment in sampled mode.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub random: Option<RandomScm>,
    #[serde(default)]
    pub scm: Option<ScmSpec>,
}

impl SimulateConfig {
    /// Exactly one of `preset`, `random`, `scm`; none means the canonical
    /// instance.
    pub fn params(&self, seed: u64) -> Result<ScmParams> {
        match (&self.preset, &self.random, &self.scm) {
            (None, None, None) | (Some(Preset::Canonical), None, None) => {
                Ok(crate::analysis::canonical_instance())
            }
            (None, Some(r), None) => crate::scm::random_params(r.d, r.k, r.r, seed),
            (None, None, Some(s)) => s.build(),
            _ => Err(Error::Config(
                "simulate: give at most one of `preset`, `random`, `scm`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// Bundled recipe name.
    #[serde(default)]
    pub recipe: Option<String>,
    /// Recipe TOML; used instead of `recipe`.
    #[serde(default)]
    pub recipe_file: Option<PathBuf>,
    /// Directory holding the recipe's data files. Defaults to the recipe
    /// file's directory, or the working directory for bundled recipes.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_standardize")]
    pub standardize: StandardizeMode,
    #[serde(default = "default_true")]
    pub scale_response: bool,
}

fn default_standardize() -> StandardizeMode {
    StandardizeMode::SourceStats
}

fn default_true() -> bool {
    true
}

/// Moment cache locations; defaults are the files `simulate`/`ingest` write
/// into the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// Read for covariates only.
    #[serde(default)]
    pub target: Option<PathBuf>,
    /// Labeled target moments used only to report target risks.
    #[serde(default)]
    pub target_eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub ell: usize,
    pub upsilon: f64,
    pub eta: f64,
    #[serde(default)]
    pub inputs: InputPaths,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ell: usize,
    #[serde(default = "crate::analysis::default_upsilon_grid")]
    pub upsilon_grid: Vec<f64>,
    #[serde(default = "crate::analysis::default_eta_grid")]
    pub eta_grid: Vec<f64>,
    #[serde(default)]
    pub inputs: InputPaths,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let cfg = RunConfig::from_toml_str("version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(RunConfig::from_toml_str("version = 1\nbogus = 3\n").is_err());
        assert!(RunConfig::from_toml_str(
            "version = 1\n[fit]\nell = 1\nupsilon = 1.0\neta = 1.0\nextra = 1\n"
        )
        .is_err());
        assert!(RunConfig::from_toml_str(
            "version = 1\n[fit]\nell = 1\nupsilon = 1.0\neta = 1.0\n[fit.optimizer]\nfoo = 1\n"
        )
        .is_err());
        assert!(RunConfig::from_toml_str("version = 2\n").is_err());
        assert!(RunConfig::from_toml_str("seed = 1\n").is_err());
    }

    #[test]
    fn sweep_defaults() {
        let cfg = RunConfig::from_toml_str("version = 1\n[sweep]\nell = 2\n").unwrap();
        let s = cfg.sweep.unwrap();
        assert_eq!(s.upsilon_grid.len(), 9);
        assert_eq!(s.eta_grid.len(), 13);
    }

    #[test]
    fn tau_zero_names_field() {
        let text = r#"
version = 1
[simulate.scm]
beta_star = [1.0, 0.0]
gamma = [1.0]
theta = [[1.0], [0.0]]
delta = [[0.0], [1.0]]
cov_z = [[1.0]]
lambda_source = [[1.0]]
lambda_target = [[4.0]]
tau_sq = 0.0
sigma_u_sq = 1.0
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let err = cfg.simulate.unwrap().params(0).unwrap_err();
        assert!(err.to_string().contains("tau_sq"), "{err}");
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }
}
