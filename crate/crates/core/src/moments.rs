//! Empirical second moments, CSV ingestion with declarative schemas, the
//! bundled real-data recipes, and the on-disk moment cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files;
use crate::scm::{CovariateMoments, Dataset, Environment, EnvironmentMoments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseTransform {
    #[default]
    Identity,
    Log1p,
}

impl ResponseTransform {
    fn apply(self, y: f64) -> f64 {
        match self {
            ResponseTransform::Identity => y,
            ResponseTransform::Log1p => y.ln_1p(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOp {
    In,
    NotIn,
}

/// Keeps rows whose `column` value is (or is not) among `values`. Values
/// compare numerically when both sides parse as numbers, else as trimmed
/// strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowFilter {
    pub column: String,
    pub op: FilterOp,
    pub values: Vec<String>,
}

impl RowFilter {
    fn matches(&self, cell: &str) -> bool {
        let cell = cell.trim();
        let hit = self.values.iter().any(|v| {
            let v = v.trim();
            match (cell.parse::<f64>(), v.parse::<f64>()) {
                (Ok(a), Ok(b)) => a == b,
                _ => cell == v,
            }
        });
        match self.op {
            FilterOp::In => hit,
            FilterOp::NotIn => !hit,
        }
    }
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    #[serde(rename = "features")]
    pub feature_columns: Vec<String>,
    #[serde(rename = "response")]
    pub response_column: String,
    #[serde(default)]
    pub filters: Vec<RowFilter>,
    #[serde(default)]
    pub response_transform: ResponseTransform,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

impl DatasetSchema {
    pub fn new(feature_columns: Vec<String>, response_column: impl Into<String>) -> Result<Self> {
        let schema = Self {
            feature_columns,
            response_column: response_column.into(),
            filters: Vec::new(),
            response_transform: ResponseTransform::Identity,
            delimiter: ',',
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Config(
                "schema needs at least one feature column".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.feature_columns {
            if !seen.insert(f.as_str()) {
                return Err(Error::Config(format!("duplicate feature column `{f}`")));
            }
        }
        if seen.contains(self.response_column.as_str()) {
            return Err(Error::Config(format!(
                "response column `{}` is also listed as a feature",
                self.response_column
            )));
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::Config(
                "delimiter must be a single ASCII character".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.feature_columns.len()
    }
}

/// A file plus the schema used to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaFile {
    pub file: PathBuf,
    #[serde(flatten)]
    pub schema: DatasetSchema,
}

/// Source and target schemas for one real-data experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    /// Subspace dimension used for this dataset in the reference experiments.
    pub ell: usize,
    pub source: SchemaFile,
    pub target: SchemaFile,
}

impl Recipe {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let recipe: Recipe = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        recipe.source.schema.validate()?;
        recipe.target.schema.validate()?;
        if recipe.source.schema.dim() != recipe.target.schema.dim() {
            return Err(Error::Config(
                "source and target schemas have different feature counts".into(),
            ));
        }
        Ok(recipe)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&files::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.source.schema.dim()
    }
}

pub const RECIPE_NAMES: [&str; 3] = ["forestfires", "bike", "wine"];

/// Bundled recipe by name: `forestfires`, `bike` or `wine`.
pub fn dataset_recipe(name: &str) -> Result<Recipe> {
    let text = match name {
        "forestfires" => include_str!("../recipes/forestfires.toml"),
        "bike" => include_str!("../recipes/bike.toml"),
        "wine" => include_str!("../recipes/wine.toml"),
        other => return Err(Error::UnknownRecipe(other.to_string())),
    };
    Recipe::from_toml_str(text)
}

/// Ingestion result with row accounting.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rows_read: usize,
    pub rows_filtered_out: usize,
    pub rows_dropped: usize,
}

/// Reads a headered CSV, keeps rows passing all filters, and drops rows with
/// missing or non-numeric feature/response cells. Row order follows the file.
pub fn ingest_csv(path: &Path, schema: &DatasetSchema, env: Environment) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema, env)
}

pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    schema: &DatasetSchema,
    env: Environment,
) -> Result<Ingested> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|c| lookup(c))
        .collect::<Result<Vec<_>>>()?;
    let response_idx = lookup(&schema.response_column)?;
    let filter_idx = schema
        .filters
        .iter()
        .map(|f| lookup(&f.column).map(|i| (i, f)))
        .collect::<Result<Vec<_>>>()?;

    let d = feature_idx.len();
    let mut values: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let (mut rows_read, mut rows_filtered_out, mut rows_dropped) = (0, 0, 0);
    let mut row = Vec::with_capacity(d);
    for record in rdr.records() {
        let record = record?;
        rows_read += 1;
        if !filter_idx
            .iter()
            .all(|(i, f)| f.matches(record.get(*i).unwrap_or("")))
        {
            rows_filtered_out += 1;
            continue;
        }
        let parse = |i: usize| {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        row.clear();
        row.extend(feature_idx.iter().map(|&i| parse(i)));
        let y = parse(response_idx)
            .map(|y| schema.response_transform.apply(y))
            .filter(|v| v.is_finite());
        match (row.iter().all(Option::is_some), y) {
            (true, Some(y)) => {
                values.extend(row.iter().map(|v| v.unwrap()));
                ys.push(y);
            }
            _ => rows_dropped += 1,
        }
    }
    if ys.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = ys.len();
    let x = DMatrix::from_row_slice(n, d, &values);
    let dataset = Dataset::new(
        x,
        DVector::from_vec(ys),
        env,
        schema.feature_columns.clone(),
    )?;
    Ok(Ingested {
        dataset,
        rows_read,
        rows_filtered_out,
        rows_dropped,
    })
}

/// Plug-in moments `(1/n) Σ x xᵀ`, `(1/n) Σ x y`, `(1/n) Σ y²`. The upper
/// triangle is accumulated and mirrored, so `Σ̂` is exactly symmetric.
pub fn estimate_moments(data: &Dataset) -> Result<EnvironmentMoments> {
    let (n, d) = (data.n(), data.dim());
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let x = data.x();
    let y = data.y();
    let mut sigma = DMatrix::zeros(d, d);
    let mut xy = DVector::zeros(d);
    let mut y_sq = 0.0;
    for i in 0..n {
        let yi = y[i];
        for a in 0..d {
            let xa = x[(i, a)];
            xy[a] += xa * yi;
            for b in a..d {
                sigma[(a, b)] += xa * x[(i, b)];
            }
        }
        y_sq += yi * yi;
    }
    let scale = 1.0 / n as f64;
    for a in 0..d {
        for b in a..d {
            let v = sigma[(a, b)] * scale;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    EnvironmentMoments::new(sigma, xy * scale, y_sq * scale, Some(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    #[default]
    None,
    SourceStats,
}

/// Affine maps applied by [`standardize`]: `x' = (x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mode: StandardizeMode,
    pub feature_names: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub response_mean: f64,
    pub response_scale: f64,
}

impl Scaling {
    /// Maps a coefficient vector fitted on standardized features back to raw
    /// feature units (slopes only; the centering offset is not returned).
    pub fn unscale_coefficients(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            beta.len(),
            beta.iter()
                .zip(&self.feature_scale)
                .map(|(b, s)| b * self.response_scale / s),
        )
    }
}

/// Centers and rescales features (and the response when `scale_response`)
/// with source-sample statistics, applying the same map to the target.
pub fn standardize(
    source: &Dataset,
    target: &Dataset,
    mode: StandardizeMode,
    scale_response: bool,
) -> Result<(Dataset, Dataset, Scaling)> {
    let d = source.dim();
    if target.dim() != d {
        return Err(Error::dim("standardize target features", d, target.dim()));
    }
    let identity = Scaling {
        mode,
        feature_names: source.feature_names().to_vec(),
        feature_mean: vec![0.0; d],
        feature_scale: vec![1.0; d],
        response_mean: 0.0,
        response_scale: 1.0,
    };
    if mode == StandardizeMode::None {
        return Ok((source.clone(), target.clone(), identity));
    }

    let n = source.n() as f64;
    let mut scaling = identity;
    for j in 0..d {
        let col = source.x().column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::ZeroVariance(source.feature_names()[j].clone()));
        }
        scaling.feature_mean[j] = mean;
        scaling.feature_scale[j] = sd;
    }
    if scale_response {
        let y = source.y();
        let mean = y.sum() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::ZeroVariance("response".into()));
        }
        scaling.response_mean = mean;
        scaling.response_scale = sd;
    }
    let apply = |data: &Dataset| -> Result<Dataset> {
        let mut x = data.x().clone();
        for j in 0..d {
            let (m, s) = (scaling.feature_mean[j], scaling.feature_scale[j]);
            x.column_mut(j).apply(|v| *v = (*v - m) / s);
        }
        let y = data
            .y()
            .map(|v| (v - scaling.response_mean) / scaling.response_scale);
        Dataset::new(x, y, data.environment(), data.feature_names().to_vec())
    };
    Ok((apply(source)?, apply(target)?, scaling))
}

pub const MOMENTS_FORMAT: &str = "subspace-adapt/moments/v1";

/// Serialized moments: `sigma` row-major, response moments optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsFile {
    pub format: String,
    pub environment: Environment,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_names: Vec<String>,
    pub sigma: Vec<f64>,
    pub xy: Option<Vec<f64>>,
    pub y_sq: Option<f64>,
    pub n: Option<usize>,
}

impl MomentsFile {
    pub fn labeled(m: &EnvironmentMoments, env: Environment, feature_names: &[String]) -> Self {
        Self {
            format: MOMENTS_FORMAT.to_string(),
            environment: env,
            d: m.dim(),
            feature_names: feature_names.to_vec(),
            sigma: row_major(m.sigma()),
            xy: Some(m.xy().iter().copied().collect()),
            y_sq: Some(m.y_sq()),
            n: m.n(),
        }
    }

    pub fn unlabeled(m: &CovariateMoments, env: Environment, feature_names: &[String]) -> Self {
        Self {
            format: MOMENTS_FORMAT.to_string(),
            environment: env,
            d: m.dim(),
            feature_names: feature_names.to_vec(),
            sigma: row_major(m.sigma()),
            xy: None,
            y_sq: None,
            n: m.n(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file: MomentsFile = serde_json::from_str(&files::read_to_string(path)?)?;
        if file.format != MOMENTS_FORMAT {
            return Err(Error::Format {
                expected: MOMENTS_FORMAT.into(),
                found: file.format,
            });
        }
        if file.sigma.len() != file.d * file.d {
            return Err(Error::dim(
                "moments file sigma",
                file.d * file.d,
                file.sigma.len(),
            ));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        files::write_json(path, self)
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.sigma)
    }

    /// Covariate moments only; the response fields are never touched.
    pub fn covariates(&self) -> Result<CovariateMoments> {
        CovariateMoments::new(self.sigma_matrix(), self.n)
    }

    pub fn moments(&self) -> Result<EnvironmentMoments> {
        let (Some(xy), Some(y_sq)) = (&self.xy, self.y_sq) else {
            return Err(Error::Config(format!(
                "{} moments file carries no response moments",
                self.environment
            )));
        };
        if xy.len() != self.d {
            return Err(Error::dim("moments file xy", self.d, xy.len()));
        }
        EnvironmentMoments::new(
            self.sigma_matrix(),
            DVector::from_column_slice(xy),
            y_sq,
            self.n,
        )
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(features: &[&str], response: &str) -> DatasetSchema {
        DatasetSchema::new(features.iter().map(|s| s.to_string()).collect(), response).unwrap()
    }

    #[test]
    fn two_point_moments() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let data = Dataset::new(x, y, Environment::Source, vec!["a".into(), "b".into()]).unwrap();
        let m = estimate_moments(&data).unwrap();
        assert_eq!(
            m.sigma(),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.5]))
        );
        assert_eq!(m.xy(), &DVector::from_vec(vec![0.5, -0.5]));
        assert_eq!(m.y_sq(), 1.0);
        assert_eq!(m.n(), Some(2));
    }

    #[test]
    fn single_row_is_rank_one() {
        let data = Dataset::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DVector::from_vec(vec![3.0]),
            Environment::Source,
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let m = estimate_moments(&data).unwrap();
        assert!(matches!(
            m.best_linear(),
            Err(Error::RankDeficient { rank: 1, dim: 2 })
        ));
    }

    #[test]
    fn ingest_drops_bad_rows_and_filters() {
        let csv = "month,a,b,y\njan,1,2,3\njun,4,5,6\nfeb,,1,2\nmar,x,1,2\naug,7,8,9\napr,1,1,1\n";
        let mut s = schema(&["b", "a"], "y");
        s.filters.push(RowFilter {
            column: "month".into(),
            op: FilterOp::NotIn,
            values: vec!["jun".into(), "jul".into(), "aug".into()],
        });
        let out = ingest_reader(csv.as_bytes(), &s, Environment::Source).unwrap();
        assert_eq!(out.rows_read, 6);
        assert_eq!(out.rows_filtered_out, 2);
        assert_eq!(out.rows_dropped, 2);
        assert_eq!(
            out.dataset.x(),
            &DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0])
        );
        assert_eq!(
            out.dataset.feature_names(),
            &["b".to_string(), "a".to_string()]
        );

        s.filters[0].op = FilterOp::In;
        let summer = ingest_reader(csv.as_bytes(), &s, Environment::Target).unwrap();
        assert_eq!(summer.dataset.y().as_slice(), &[6.0, 9.0]);
    }

    #[test]
    fn ingest_reports_missing_column() {
        let csv = "a,y\n1,2\n";
        match ingest_reader(
            csv.as_bytes(),
            &schema(&["a", "zz"], "y"),
            Environment::Source,
        ) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "zz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn numeric_filter_values_compare_as_numbers() {
        let f = RowFilter {
            column: "w".into(),
            op: FilterOp::In,
            values: vec!["1".into()],
        };
        assert!(f.matches("1.0"));
        assert!(!f.matches("0"));
    }

    #[test]
    fn log1p_transform() {
        let csv = "a,area\n1,0\n2,1.718281828459045\n";
        let mut s = schema(&["a"], "area");
        s.response_transform = ResponseTransform::Log1p;
        let out = ingest_reader(csv.as_bytes(), &s, Environment::Source).unwrap();
        assert!((out.dataset.y()[1] - 1.0f64.exp().ln()).abs() < 1e-12);
        assert_eq!(out.dataset.y()[0], 0.0);
    }

    #[test]
    fn schema_validation() {
        assert!(DatasetSchema::new(vec![], "y").is_err());
        assert!(DatasetSchema::new(vec!["a".into(), "a".into()], "y").is_err());
        assert!(DatasetSchema::new(vec!["a".into(), "y".into()], "y").is_err());
    }

    #[test]
    fn recipes_have_reference_dimensions() {
        let dims: Vec<(usize, usize)> = RECIPE_NAMES
            .iter()
            .map(|n| {
                let r = dataset_recipe(n).unwrap();
                (r.dim(), r.ell)
            })
            .collect();
        assert_eq!(dims, vec![(7, 6), (5, 4), (11, 7)]);
        assert!(matches!(
            dataset_recipe("iris"),
            Err(Error::UnknownRecipe(_))
        ));

        let ff = dataset_recipe("forestfires").unwrap();
        assert_eq!(ff.target.schema.filters[0].op, FilterOp::In);
        assert_eq!(
            ff.target.schema.filters[0].values,
            vec!["jun", "jul", "aug"]
        );
        assert_eq!(ff.source.schema.filters[0].op, FilterOp::NotIn);

        let wine = dataset_recipe("wine").unwrap();
        assert_eq!(wine.source.file, PathBuf::from("winequality-white.csv"));
        assert_eq!(wine.target.file, PathBuf::from("winequality-red.csv"));
    }

    #[test]
    fn standardize_modes() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let src = Dataset::new(
            x,
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            Environment::Source,
            vec!["a".into(), "c".into()],
        )
        .unwrap();
        let (s, t, scaling) = standardize(&src, &src, StandardizeMode::None, false).unwrap();
        assert_eq!(s, src);
        assert_eq!(t, src);
        assert_eq!(scaling.feature_scale, vec![1.0, 1.0]);
        match standardize(&src, &src, StandardizeMode::SourceStats, false) {
            Err(Error::ZeroVariance(c)) => assert_eq!(c, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standardized_source_has_unit_diagonal() {
        let p = crate::scm::random_params(4, 2, 1, 5).unwrap();
        let src = p.sample(Environment::Source, 500, 1).unwrap();
        let tgt = p.sample(Environment::Target, 300, 2).unwrap();
        let (s, _, _) = standardize(&src, &tgt, StandardizeMode::SourceStats, true).unwrap();
        let m = estimate_moments(&s).unwrap();
        for j in 0..4 {
            assert!((m.sigma()[(j, j)] - 1.0).abs() < 1e-12);
        }
        assert!((m.y_sq() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn moments_file_hides_labels_from_covariate_reader() {
        let p = crate::scm::random_params(3, 1, 1, 2).unwrap();
        let m = p.population_moments(Environment::Target);
        let file = MomentsFile::labeled(&m, Environment::Target, &[]);
        let text = serde_json::to_string(&file).unwrap();
        let back: MomentsFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.moments().unwrap(), m);
        assert_eq!(back.covariates().unwrap(), m.covariates());
        let unlabeled = MomentsFile::unlabeled(&m.covariates(), Environment::Target, &[]);
        assert!(unlabeled.moments().is_err());
    }
}
