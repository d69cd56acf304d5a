//! CSV ingestion, recipes, model files and per-row reports.
//!
//! A recipe names the outcome columns, an optional time index, the feature
//! columns (each possibly a trailing average, and each with a box transform),
//! the train/test split and the stages to fit. Trailing averages of window `w`
//! at row `i` use rows `i−w..i−1` only, so a feature never sees its own row;
//! the first `w` rows have no value and are dropped.
//!
//! Model files are versioned JSON. Every floating point number is written with
//! 17 significant digits, which reproduces the stored `f64` exactly on load.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{fit_transform, Transform, TransformKind};
use crate::linalg::{LowerTriangular, Matrix};
use crate::objective::{MeanParams, RegressionParams};
use crate::whiteners::{EwmaStage, Pipeline, SmaStage, StageSpec, WhitenerStage};

pub const RECIPE_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "whitener-model";

/// A CSV file with a mandatory, unique header row.
#[derive(Clone, Debug)]
pub struct Table {
    headers: Vec<String>,
    records: Vec<csv::StringRecord>,
}

impl Table {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut seen = HashSet::new();
        for h in &headers {
            if !seen.insert(h.as_str()) {
                return Err(Error::Parse {
                    row: 0,
                    column: h.clone(),
                    message: "duplicate column name in header".into(),
                });
            }
        }
        let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { headers, records })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(File::open(path)?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
    }

    fn cell(&self, row: usize, col: usize) -> Result<&str> {
        let v = self.records[row].get(col).unwrap_or("").trim();
        if v.is_empty() {
            return Err(Error::Parse {
                row: row + 1,
                column: self.headers[col].clone(),
                message: "missing value".into(),
            });
        }
        Ok(v)
    }

    /// Numeric column; rows are reported counting data records from 1.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let col = self.position(name)?;
        (0..self.len())
            .map(|r| {
                let text = self.cell(r, col)?;
                match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Parse {
                        row: r + 1,
                        column: name.to_string(),
                        message: format!("`{text}` is not a finite decimal number"),
                    }),
                }
            })
            .collect()
    }

    /// Time index column: integers, or `YYYY-MM-DD` dates as days since 1970-01-01.
    pub fn time_index(&self, name: &str) -> Result<Vec<i64>> {
        let col = self.position(name)?;
        (0..self.len())
            .map(|r| {
                let text = self.cell(r, col)?;
                parse_time(text).ok_or_else(|| Error::Parse {
                    row: r + 1,
                    column: name.to_string(),
                    message: format!("`{text}` is neither an integer nor a YYYY-MM-DD date"),
                })
            })
            .collect()
    }
}

/// Parses an integer or an ISO date (as days since the Unix epoch).
pub fn parse_time(text: &str) -> Option<i64> {
    if let Ok(v) = text.parse::<i64>() {
        return Some(v);
    }
    let date = NaiveDate::parse_from_str(text, "%Y-%m-%d").ok()?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?;
    Some((date - epoch).num_days())
}

/// One feature column of a recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    /// Source column, used as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    /// Source is `Σ |v|` over these columns (e.g. the outcome columns).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_sum: Option<Vec<String>>,
    /// Average of the source over the previous `w` rows, excluding the current one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trailing: Option<usize>,
    #[serde(default = "default_transform")]
    pub transform: TransformKind,
}

fn default_transform() -> TransformKind {
    TransformKind::Clip
}

impl FeatureSpec {
    pub fn warmup(&self) -> usize {
        self.trailing.unwrap_or(0)
    }

    fn source_columns(&self) -> Vec<&str> {
        match (&self.column, &self.abs_sum) {
            (Some(c), _) => vec![c.as_str()],
            (None, Some(cols)) => cols.iter().map(String::as_str).collect(),
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Split {
    /// The first `⌊fraction · N⌋` rows of the file train; the rest test.
    Fraction(f64),
    /// Rows whose index is strictly before this value (integer or date) train.
    Before(String),
}

/// Versioned description of how to build datasets and which stages to fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub version: u32,
    pub outcomes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<String>,
    #[serde(default)]
    pub features: Vec<FeatureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    1
}

fn recipe_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Recipe {
        path: path.into(),
        message: message.into(),
    }
}

impl Recipe {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let recipe: Recipe = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            recipe_error(path, e.into_inner().to_string())
        })?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RECIPE_VERSION {
            return Err(recipe_error(
                "version",
                format!("unsupported recipe version {}, expected {RECIPE_VERSION}", self.version),
            ));
        }
        if self.outcomes.is_empty() {
            return Err(recipe_error("outcomes", "at least one outcome column is required"));
        }
        let mut names = HashSet::new();
        for (i, o) in self.outcomes.iter().enumerate() {
            if !names.insert(o.as_str()) {
                return Err(recipe_error(
                    format!("outcomes[{i}]"),
                    format!("duplicate outcome `{o}`"),
                ));
            }
        }
        let mut names = HashSet::new();
        for (i, f) in self.features.iter().enumerate() {
            let path = format!("features[{i}]");
            if !names.insert(f.name.as_str()) {
                return Err(recipe_error(
                    format!("{path}.name"),
                    format!("duplicate feature `{}`", f.name),
                ));
            }
            match (&f.column, &f.abs_sum) {
                (Some(_), None) => {}
                (None, Some(cols)) if !cols.is_empty() => {}
                _ => {
                    return Err(recipe_error(
                        path,
                        "exactly one of `column` or a non-empty `abs_sum` is required",
                    ))
                }
            }
            if f.trailing == Some(0) {
                return Err(recipe_error(format!("{path}.trailing"), "window must be at least 1"));
            }
        }
        match &self.split {
            Some(Split::Fraction(v)) if !(*v > 0.0 && *v < 1.0) => {
                return Err(recipe_error("split.fraction", format!("must lie in (0, 1), got {v}")));
            }
            Some(Split::Before(t)) if parse_time(t).is_none() => {
                return Err(recipe_error(
                    "split.before",
                    format!("`{t}` is neither an integer nor a date"),
                ));
            }
            _ => {}
        }
        if self.horizon == 0 {
            return Err(recipe_error("horizon", "must be at least 1"));
        }
        Ok(())
    }
}

/// A fitted feature: its recipe entry and the transform fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedFeature {
    pub spec: FeatureSpec,
    pub transform: Transform,
}

/// Rows of a table after feature construction and warm-up removal.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Position of each row in the source table (0-based).
    pub rows: Vec<usize>,
    pub index: Vec<i64>,
    pub features: Matrix<f64>,
    /// Absent when the table lacks the outcome columns.
    pub outcomes: Option<Matrix<f64>>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Frame> {
        let pick = |m: &Matrix<f64>| {
            let rows: Vec<Vec<f64>> = range.clone().map(|i| m.row(i).to_vec()).collect();
            Matrix::from_vec(rows.len(), m.cols(), rows.concat())
        };
        Ok(Frame {
            rows: self.rows[range.clone()].to_vec(),
            index: self.index[range.clone()].to_vec(),
            features: pick(&self.features)?,
            outcomes: self.outcomes.as_ref().map(pick).transpose()?,
        })
    }

    pub fn dataset(&self) -> Result<Dataset<f64>> {
        let outcomes = self
            .outcomes
            .clone()
            .ok_or_else(|| Error::InvalidConfig("data has no outcome columns".into()))?;
        Dataset::new(self.features.clone(), outcomes, Some(self.index.clone()))
    }
}

/// Raw (untransformed) feature columns over every table row, with `NaN`
/// where a trailing window is not yet full, plus the number of warm-up rows.
pub fn raw_features(table: &Table, specs: &[FeatureSpec]) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let sources = spec
            .source_columns()
            .into_iter()
            .map(|c| table.numeric(c))
            .collect::<Result<Vec<_>>>()?;
        let base: Vec<f64> = if spec.abs_sum.is_some() {
            (0..table.len())
                .map(|r| sources.iter().map(|c| c[r].abs()).sum())
                .collect()
        } else {
            sources.into_iter().next().unwrap_or_default()
        };
        let column = match spec.trailing {
            None => base,
            Some(w) => (0..table.len())
                .map(|i| {
                    if i < w {
                        f64::NAN
                    } else {
                        base[i - w..i].iter().sum::<f64>() / w as f64
                    }
                })
                .collect(),
        };
        out.push(column);
    }
    let warmup = specs.iter().map(FeatureSpec::warmup).max().unwrap_or(0);
    Ok((out, warmup))
}

fn build_frame(
    table: &Table,
    outcomes: &[String],
    index: Option<&str>,
    raw: &[Vec<f64>],
    transforms: &[Transform],
    rows: Range<usize>,
    require_outcomes: bool,
) -> Result<Frame> {
    if let Some(missing) = outcomes.iter().find(|o| !table.has_column(o)) {
        if require_outcomes {
            return Err(Error::Parse {
                row: 0,
                column: missing.clone(),
                message: "outcome column not found in header".into(),
            });
        }
    }
    let has_outcomes = outcomes.iter().all(|o| table.has_column(o));
    let index_values = match index {
        Some(name) => {
            let values = table.time_index(name)?;
            if let Some(w) = values.windows(2).position(|w| w[1] <= w[0]) {
                return Err(Error::Parse {
                    row: w + 2,
                    column: name.to_string(),
                    message: "time index must be strictly increasing".into(),
                });
            }
            values
        }
        None => (0..table.len() as i64).collect(),
    };
    let p = raw.len();
    let mut feats = Vec::with_capacity(rows.len() * p);
    for i in rows.clone() {
        feats.extend(raw.iter().zip(transforms).map(|(col, t)| t.apply_value(col[i])));
    }
    let outcome_matrix = if has_outcomes {
        let cols = outcomes.iter().map(|o| table.numeric(o)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<f64> = rows.clone().flat_map(|i| cols.iter().map(move |c| c[i])).collect();
        Some(Matrix::from_vec(rows.len(), outcomes.len(), vals)?)
    } else {
        None
    };
    Ok(Frame {
        index: index_values[rows.clone()].to_vec(),
        features: Matrix::from_vec(rows.len(), p, feats)?,
        rows: rows.collect(),
        outcomes: outcome_matrix,
    })
}

/// Training and test rows prepared from a table and a recipe.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// All rows past the feature warm-up, training rows first.
    pub frame: Frame,
    /// Number of leading rows of `frame` that belong to the training split.
    pub train_len: usize,
    pub features: Vec<FittedFeature>,
}

impl Prepared {
    pub fn train(&self) -> Result<Frame> {
        self.frame.slice(0..self.train_len)
    }

    pub fn test(&self) -> Result<Option<Frame>> {
        if self.train_len == self.frame.len() {
            return Ok(None);
        }
        self.frame.slice(self.train_len..self.frame.len()).map(Some)
    }
}

/// Builds features, splits rows and fits the feature transforms on the
/// training rows only.
pub fn load(table: &Table, recipe: &Recipe) -> Result<Prepared> {
    recipe.validate()?;
    for (i, o) in recipe.outcomes.iter().enumerate() {
        if !table.has_column(o) {
            return Err(recipe_error(
                format!("outcomes[{i}]"),
                format!("column `{o}` not found in data"),
            ));
        }
    }
    if let Some(idx) = &recipe.index {
        if !table.has_column(idx) {
            return Err(recipe_error("index", format!("column `{idx}` not found in data")));
        }
    }
    for (i, f) in recipe.features.iter().enumerate() {
        if let Some(c) = f.source_columns().into_iter().find(|c| !table.has_column(c)) {
            return Err(recipe_error(
                format!("features[{i}]"),
                format!("column `{c}` not found in data"),
            ));
        }
    }
    let total = table.len();
    let split_at = match &recipe.split {
        None => total,
        Some(Split::Fraction(f)) => (f * total as f64).floor() as usize,
        Some(Split::Before(t)) => {
            let name = recipe
                .index
                .as_deref()
                .ok_or_else(|| recipe_error("split.before", "a time split needs an `index` column"))?;
            let cut = parse_time(t).expect("validated");
            table.time_index(name)?.iter().take_while(|&&v| v < cut).count()
        }
    };
    let (raw, warmup) = raw_features(table, &recipe.features)?;
    if split_at <= warmup {
        return Err(recipe_error(
            "split",
            format!("no training rows remain: {split_at} rows before the split, {warmup} used for feature warm-up"),
        ));
    }
    if recipe.split.is_some() && split_at == total {
        return Err(recipe_error("split", "no test rows remain after the split"));
    }
    let features = recipe
        .features
        .iter()
        .zip(&raw)
        .map(|(spec, col)| {
            let transform = fit_transform(spec.transform, &col[warmup..split_at], &spec.name)?;
            Ok(FittedFeature {
                spec: spec.clone(),
                transform,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let transforms: Vec<Transform> = features.iter().map(|f| f.transform.clone()).collect();
    let frame = build_frame(
        table,
        &recipe.outcomes,
        recipe.index.as_deref(),
        &raw,
        &transforms,
        warmup..total,
        true,
    )?;
    log::info!(
        "loaded {total} rows: {warmup} warm-up, {} train, {} test",
        split_at - warmup,
        total - split_at
    );
    Ok(Prepared {
        frame,
        train_len: split_at - warmup,
        features,
    })
}

/// A fitted pipeline together with everything needed to rebuild its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub pipeline: Pipeline<f64>,
    pub outcomes: Vec<String>,
    pub index: Option<String>,
    pub features: Vec<FittedFeature>,
    pub horizon: usize,
}

impl Model {
    /// Rebuilds the model's features on a new table, dropping warm-up rows.
    pub fn frame(&self, table: &Table, require_outcomes: bool) -> Result<Frame> {
        let specs: Vec<FeatureSpec> = self.features.iter().map(|f| f.spec.clone()).collect();
        let transforms: Vec<Transform> = self.features.iter().map(|f| f.transform.clone()).collect();
        let (raw, warmup) = raw_features(table, &specs)?;
        if table.len() <= warmup {
            return Err(Error::InsufficientHistory {
                needed: warmup + 1,
                available: table.len(),
            });
        }
        build_frame(
            table,
            &self.outcomes,
            self.index.as_deref(),
            &raw,
            &transforms,
            warmup..table.len(),
            require_outcomes,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut root = Map::new();
        root.insert("format".into(), Value::String(MODEL_FORMAT.into()));
        root.insert("version".into(), Value::from(MODEL_VERSION));
        root.insert("n".into(), Value::from(self.pipeline.n()));
        root.insert("p".into(), Value::from(self.pipeline.p()));
        root.insert("outcomes".into(), serde_json::to_value(&self.outcomes)?);
        root.insert("index".into(), self.index.clone().map_or(Value::Null, Value::String));
        root.insert("horizon".into(), Value::from(self.horizon));
        let mut features = serde_json::to_value(&self.features)?;
        exact_floats(&mut features);
        root.insert("features".into(), features);
        let stages = self.pipeline.stages().iter().map(stage_to_value).collect();
        root.insert("stages".into(), Value::Array(stages));
        let mut text = serde_json::to_string_pretty(&Value::Object(root))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let root = Obj::new(&value, "model")?;
        let version = root.usize("version")?;
        if version != MODEL_VERSION as usize {
            return Err(Error::VersionMismatch {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: MODEL_VERSION,
            });
        }
        match root.get("format")? {
            Value::String(f) if f == MODEL_FORMAT => {}
            other => {
                return Err(Error::Schema(format!(
                    "model.format: expected \"{MODEL_FORMAT}\", found {other}"
                )))
            }
        }
        let n = root.usize("n")?;
        let p = root.usize("p")?;
        let outcomes: Vec<String> = root.parse("outcomes")?;
        let index: Option<String> = root.parse("index")?;
        let horizon = root.usize("horizon")?;
        let features: Vec<FittedFeature> = root.parse("features")?;
        root.finish(&[
            "format", "version", "n", "p", "outcomes", "index", "horizon", "features", "stages",
        ])?;
        if outcomes.len() != n {
            return Err(Error::Schema(format!(
                "model.outcomes: {} names for n = {n}",
                outcomes.len()
            )));
        }
        if features.len() != p {
            return Err(Error::Schema(format!(
                "model.features: {} features for p = {p}",
                features.len()
            )));
        }
        if horizon == 0 {
            return Err(Error::Schema("model.horizon must be at least 1".into()));
        }
        let Value::Array(items) = root.get("stages")? else {
            return Err(Error::Schema("model.stages must be an array".into()));
        };
        let mut pipeline = Pipeline::new(n, p);
        for (k, item) in items.iter().enumerate() {
            let stage = stage_from_value(item, n, p, &format!("model.stages[{k}]"))?;
            pipeline
                .push(stage)
                .map_err(|e| Error::Schema(format!("model.stages[{k}]: {e}")))?;
        }
        Ok(Model {
            pipeline,
            outcomes,
            index,
            features,
            horizon,
        })
    }
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Model::from_json(&std::fs::read_to_string(path)?)
}

fn num(v: f64) -> Value {
    Value::Number(Number::from_str(&format!("{v:.16e}")).expect("finite float formats as a JSON number"))
}

fn nums(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

fn matrix(m: &Matrix<f64>) -> Value {
    Value::Array(m.row_iter().map(nums).collect())
}

/// Rewrites every non-integer number with 17 significant digits.
fn exact_floats(v: &mut Value) {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(x) = n.as_f64() {
                *v = num(x);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(exact_floats),
        Value::Object(map) => map.values_mut().for_each(exact_floats),
        _ => {}
    }
}

fn stage_to_value(stage: &WhitenerStage<f64>) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), Value::String(stage.kind().name().into()));
    match stage {
        WhitenerStage::Constant(l) => {
            m.insert("diag".into(), nums(l.diag()));
            m.insert("offdiag".into(), nums(l.offdiag()));
        }
        WhitenerStage::Diagonal { a, b } => {
            m.insert("a".into(), matrix(a));
            m.insert("b".into(), nums(b));
        }
        WhitenerStage::Sma(s) => {
            m.insert("memory".into(), Value::from(s.memory));
            m.insert("loading".into(), num(s.loading));
        }
        WhitenerStage::Ewma(e) => {
            m.insert("half_life".into(), num(e.half_life));
            m.insert("loading".into(), num(e.loading));
        }
        WhitenerStage::Permutation(order) => {
            m.insert("order".into(), Value::from(order.clone()));
        }
        WhitenerStage::Regression(r) => {
            m.insert("a".into(), matrix(&r.a));
            m.insert("b".into(), nums(&r.b));
            m.insert("c".into(), matrix(&r.c));
            m.insert("d".into(), nums(&r.d));
            if let Some(mean) = &r.mean {
                m.insert("e".into(), matrix(&mean.e));
                m.insert("f".into(), nums(&mean.f));
            }
        }
    }
    Value::Object(m)
}

/// JSON object with a path for error messages.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Obj<'a> {
    fn new(v: &'a Value, path: &str) -> Result<Self> {
        match v {
            Value::Object(map) => Ok(Self {
                map,
                path: path.to_string(),
            }),
            _ => Err(Error::Schema(format!("{path} must be a JSON object"))),
        }
    }

    fn get(&self, key: &str) -> Result<&'a Value> {
        self.map
            .get(key)
            .ok_or_else(|| Error::Schema(format!("{}.{key} is missing", self.path)))
    }

    fn parse<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_value(self.get(key)?.clone()).map_err(|e| Error::Schema(format!("{}.{key}: {e}", self.path)))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    fn vector(&self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = self.parse(key)?;
        if v.len() != len {
            return Err(Error::Schema(format!(
                "{}.{key}: expected {len} values, found {}",
                self.path,
                v.len()
            )));
        }
        Ok(v)
    }

    fn matrix(&self, key: &str, rows: usize, cols: usize) -> Result<Matrix<f64>> {
        let v: Vec<Vec<f64>> = self.parse(key)?;
        if v.len() != rows || v.iter().any(|r| r.len() != cols) {
            return Err(Error::Schema(format!(
                "{}.{key}: expected a {rows}x{cols} matrix",
                self.path
            )));
        }
        Matrix::from_vec(rows, cols, v.concat())
    }

    fn finish(&self, allowed: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Schema(format!("{}: unexpected field `{k}`", self.path))),
            None => Ok(()),
        }
    }
}

fn stage_from_value(v: &Value, n: usize, p: usize, path: &str) -> Result<WhitenerStage<f64>> {
    let o = Obj::new(v, path)?;
    let kind: String = o.parse("kind")?;
    let k = crate::linalg::offdiag_len(n);
    let wrap = |e: Error| match e {
        Error::Schema(_) => e,
        other => Error::Schema(format!("{path}: {other}")),
    };
    let stage = match kind.as_str() {
        "constant" => {
            o.finish(&["kind", "diag", "offdiag"])?;
            let l = LowerTriangular::new(o.vector("diag", n)?, o.vector("offdiag", k)?).map_err(wrap)?;
            WhitenerStage::Constant(l)
        }
        "diagonal" => {
            o.finish(&["kind", "a", "b"])?;
            WhitenerStage::Diagonal {
                a: o.matrix("a", n, p)?,
                b: o.vector("b", n)?,
            }
        }
        "sma" => {
            o.finish(&["kind", "memory", "loading"])?;
            WhitenerStage::Sma(SmaStage {
                n,
                memory: o.usize("memory")?,
                loading: o.f64("loading")?,
            })
        }
        "ewma" => {
            o.finish(&["kind", "half_life", "loading"])?;
            WhitenerStage::Ewma(EwmaStage {
                n,
                half_life: o.f64("half_life")?,
                loading: o.f64("loading")?,
            })
        }
        "permutation" => {
            o.finish(&["kind", "order"])?;
            WhitenerStage::Permutation(o.parse("order")?)
        }
        "regression" => {
            o.finish(&["kind", "a", "b", "c", "d", "e", "f"])?;
            let mean = match (o.map.contains_key("e"), o.map.contains_key("f")) {
                (false, false) => None,
                (true, true) => Some(MeanParams {
                    e: o.matrix("e", n, p)?,
                    f: o.vector("f", n)?,
                }),
                _ => {
                    return Err(Error::Schema(format!(
                        "{path}: mean blocks `e` and `f` must appear together"
                    )))
                }
            };
            WhitenerStage::Regression(RegressionParams {
                a: o.matrix("a", n, p)?,
                b: o.vector("b", n)?,
                c: o.matrix("c", k, p)?,
                d: o.vector("d", k)?,
                mean,
            })
        }
        other => return Err(Error::Schema(format!("{path}: unknown stage kind `{other}`"))),
    };
    stage.validate().map_err(wrap)?;
    Ok(stage)
}

/// Label columns shared by the per-row CSV outputs.
fn label_header(has_index: bool) -> Vec<String> {
    let mut h = vec!["row".to_string()];
    if has_index {
        h.push("index".into());
    }
    h
}

fn label_fields(frame: &Frame, has_index: bool, r: usize) -> Vec<String> {
    let mut out = vec![frame.rows[r].to_string()];
    if has_index {
        out.push(frame.index[r].to_string());
    }
    out
}

fn write_csv<W: Write>(out: W, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    // Surface write failures as plain I/O errors so callers can tell a closed
    // pipe from malformed data.
    fn io(e: csv::Error) -> Error {
        match e.kind() {
            csv::ErrorKind::Io(inner) => Error::Io(std::io::Error::new(inner.kind(), e)),
            _ => Error::Csv(e),
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-row report: log-likelihood, `log det Σ̂`, entries of the composed
/// factor `L_i_j` (i ≥ j), volatilities `vol_j = √Σ̂_jj`, correlations
/// `corr_i_j` (i > j) and, for pipelines with a mean, `mean_j`.
pub fn write_report<W: Write>(pipeline: &Pipeline<f64>, frame: &Frame, has_index: bool, out: W) -> Result<()> {
    let w = pipeline.whiten(&frame.dataset()?, true)?;
    let n = pipeline.n();
    let mut header = label_header(has_index);
    header.extend(["loglik".to_string(), "logdet".to_string()]);
    for i in 0..n {
        for j in 0..=i {
            header.push(format!("L_{i}_{j}"));
        }
    }
    header.extend((0..n).map(|j| format!("vol_{j}")));
    for i in 1..n {
        for j in 0..i {
            header.push(format!("corr_{i}_{j}"));
        }
    }
    if w.means.is_some() {
        header.extend((0..n).map(|j| format!("mean_{j}")));
    }
    let rows = (0..w.rows.len()).map(|r| {
        let mut f = label_fields(frame, has_index, w.rows[r]);
        let l = &w.factors[r];
        let sigma = &w.covariances[r];
        f.push(w.loglik[r].to_string());
        f.push((-2.0 * l.log_det()).to_string());
        for i in 0..n {
            for j in 0..=i {
                f.push(l.get(i, j).to_string());
            }
        }
        let vol: Vec<f64> = (0..n).map(|j| sigma.get(j, j).sqrt()).collect();
        f.extend(vol.iter().map(f64::to_string));
        for i in 1..n {
            for j in 0..i {
                f.push((sigma.get(i, j) / (vol[i] * vol[j])).to_string());
            }
        }
        if let Some(means) = &w.means {
            f.extend(means[r].iter().map(f64::to_string));
        }
        f
    });
    write_csv(out, header, rows)
}

pub fn report(pipeline: &Pipeline<f64>, frame: &Frame, has_index: bool, path: impl AsRef<Path>) -> Result<()> {
    write_report(pipeline, frame, has_index, File::create(path)?)
}

/// Whitened outcomes `z_j` and the per-row log-likelihood.
pub fn write_whitened<W: Write>(pipeline: &Pipeline<f64>, frame: &Frame, has_index: bool, out: W) -> Result<()> {
    let w = pipeline.whiten(&frame.dataset()?, false)?;
    let n = pipeline.n();
    let mut header = label_header(has_index);
    header.extend((0..n).map(|j| format!("z_{j}")));
    header.push("loglik".into());
    let rows = (0..w.rows.len()).map(|r| {
        let mut f = label_fields(frame, has_index, w.rows[r]);
        f.extend(w.data.outcome(r).iter().map(f64::to_string));
        f.push(w.loglik[r].to_string());
        f
    });
    write_csv(out, header, rows)
}

/// Predicted covariance entries `cov_i_j` (i ≥ j) and, when modeled, means.
///
/// Pipelines with rolling stages need the outcome columns to build their
/// history; stateless pipelines only read features.
pub fn write_predictions<W: Write>(pipeline: &Pipeline<f64>, frame: &Frame, has_index: bool, out: W) -> Result<()> {
    let n = pipeline.n();
    let (rows, covs, means): (Vec<usize>, Vec<_>, Option<Vec<Vec<f64>>>) = if frame.outcomes.is_some() {
        let w = pipeline.whiten(&frame.dataset()?, true)?;
        (w.rows, w.covariances, w.means)
    } else {
        if !pipeline.is_stateless() {
            return Err(Error::MissingTimestamps(
                "prediction with rolling stages (outcome columns required)",
            ));
        }
        let mut covs = Vec::with_capacity(frame.len());
        let mut means = Vec::with_capacity(frame.len());
        for r in 0..frame.len() {
            let (l, mean) = pipeline.evaluate_at(frame.features.row(r))?;
            covs.push(crate::linalg::covariance_from_whitener(&l));
            means.push(mean.unwrap_or_default());
        }
        ((0..frame.len()).collect(), covs, pipeline.has_mean().then_some(means))
    };
    let mut header = label_header(has_index);
    if means.is_some() {
        header.extend((0..n).map(|j| format!("mean_{j}")));
    }
    for i in 0..n {
        for j in 0..=i {
            header.push(format!("cov_{i}_{j}"));
        }
    }
    let body = (0..rows.len()).map(|r| {
        let mut f = label_fields(frame, has_index, rows[r]);
        if let Some(m) = &means {
            f.extend(m[r].iter().map(f64::to_string));
        }
        for i in 0..n {
            for j in 0..=i {
                f.push(covs[r].get(i, j).to_string());
            }
        }
        f
    });
    write_csv(out, header, body)
}

/// Mean log-likelihood of the rows of `frame` at positions `< split` and
/// `≥ split`, computed in one causal pass so that rolling stages carry their
/// history from the training rows into the test rows.
pub fn split_scores(pipeline: &Pipeline<f64>, frame: &Frame, split: usize) -> Result<(f64, Option<f64>)> {
    let w = pipeline.whiten(&frame.dataset()?, false)?;
    let mut sums: BTreeMap<bool, (f64, usize)> = BTreeMap::new();
    for (&r, &ll) in w.rows.iter().zip(&w.loglik) {
        let e = sums.entry(r >= split).or_insert((0.0, 0));
        e.0 += ll;
        e.1 += 1;
    }
    let mean = |k: bool| sums.get(&k).map(|&(s, c)| s / c as f64);
    let train = mean(false).ok_or(Error::InsufficientHistory {
        needed: split + 1,
        available: split,
    })?;
    Ok((train, mean(true)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymmetricPD;

    fn table(text: &str) -> Table {
        Table::from_reader(text.as_bytes()).unwrap()
    }

    /// `t, x, y` with x = 1, 2, 3, ... and a deterministic wiggly outcome.
    fn sequence_csv(rows: usize) -> String {
        let mut s = String::from("t,x,y\n");
        for i in 0..rows {
            let y = ((i * 7919) % 13) as f64 / 6.0 - 1.0 + 0.05;
            s.push_str(&format!("{},{},{}\n", 100 + i, i + 1, y));
        }
        s
    }

    fn recipe(json: &str) -> Recipe {
        Recipe::from_json(json).unwrap()
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let err = Table::from_reader("a,b\n1,2\n3,\n".as_bytes())
            .unwrap()
            .numeric("b")
            .unwrap_err();
        assert!(
            matches!(err, Error::Parse { row: 2, ref column, .. } if column == "b"),
            "{err}"
        );
        let err = table("a\n1\nx\n").numeric("a").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }));
        let err = table("a\nNaN\n").numeric("a").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }));
        assert!(Table::from_reader("a,a\n1,2\n".as_bytes()).is_err());
        assert_eq!(table("d\n1970-01-11\n").time_index("d").unwrap(), vec![10]);
    }

    #[test]
    fn recipe_errors_carry_field_path() {
        let err = Recipe::from_json(
            r#"{"version":1,"outcomes":["y"],"stages":[{"kind":"constant"},{"kind":"sma","memroy":3}]}"#,
        )
        .unwrap_err();
        let Error::Recipe { path, message } = err else { panic!() };
        assert!(path.starts_with("stages[1]"), "{path}: {message}");
        assert!(message.contains("memroy"));
        let err = Recipe::from_json(r#"{"version":1,"outcomes":["y"],"split":{"fraction":1.5}}"#).unwrap_err();
        assert!(matches!(err, Error::Recipe { ref path, .. } if path == "split.fraction"));
        let err = Recipe::from_json(r#"{"version":1,"outcomes":["y"],"stages":[{"kind":"garch"}]}"#).unwrap_err();
        assert!(err.to_string().contains("garch"));
        let err = Recipe::from_json(r#"{"version":2,"outcomes":["y"]}"#).unwrap_err();
        assert!(matches!(err, Error::Recipe { ref path, .. } if path == "version"));
        let err =
            Recipe::from_json(r#"{"version":1,"outcomes":["y"],"features":[{"name":"a","trailing":0,"column":"x"}]}"#)
                .unwrap_err();
        assert!(matches!(err, Error::Recipe { ref path, .. } if path == "features[0].trailing"));
    }

    #[test]
    fn fraction_split_counts() {
        let t = table(&sequence_csv(10));
        let r = recipe(r#"{"version":1,"outcomes":["y"],"index":"t","split":{"fraction":0.8}}"#);
        let prep = load(&t, &r).unwrap();
        assert_eq!(prep.train_len, 8);
        assert_eq!(prep.test().unwrap().unwrap().len(), 2);
        let r = recipe(r#"{"version":1,"outcomes":["y"],"index":"t","split":{"before":"103"}}"#);
        assert_eq!(load(&t, &r).unwrap().train_len, 3);
    }

    #[test]
    fn trailing_window_is_causal_mean() {
        let t = table(&sequence_csv(10));
        let spec = FeatureSpec {
            name: "m".into(),
            column: Some("x".into()),
            abs_sum: None,
            trailing: Some(3),
            transform: TransformKind::Clip,
        };
        let (raw, warmup) = raw_features(&t, &[spec]).unwrap();
        assert_eq!(warmup, 3);
        assert!(raw[0][..3].iter().all(|v| v.is_nan()));
        // Row 4 (index 3) averages x = 1, 2, 3.
        assert_eq!(raw[0][3], 2.0);
        assert_eq!(raw[0][9], 8.0);
    }

    #[test]
    fn permuting_future_rows_leaves_past_features_unchanged() {
        let text = sequence_csv(40);
        let lines: Vec<&str> = text.lines().collect();
        let mut shuffled: Vec<&str> = lines[..26].to_vec();
        let mut tail = lines[26..].to_vec();
        tail.reverse();
        shuffled.extend(tail);
        let r = recipe(
            r#"{"version":1,"outcomes":["y"],"split":{"fraction":0.5},
               "features":[{"name":"v","abs_sum":["y"],"trailing":5,"transform":"quantile"},
                           {"name":"x","column":"x","trailing":2,"transform":"minmax"}]}"#,
        );
        let a = load(&table(&text), &r).unwrap();
        let b = load(&table(&(shuffled.join("\n") + "\n")), &r).unwrap();
        assert_eq!(a.features, b.features);
        // Data row 25 (0-based) is the last unpermuted one; frame rows start after 5 warm-up rows.
        for i in 0..=20 {
            assert_eq!(a.frame.features.row(i), b.frame.features.row(i));
        }
    }

    #[test]
    fn test_features_are_clipped_into_box() {
        let mut text = sequence_csv(30);
        text.push_str("130,1000,0.5\n131,-1000,0.5\n");
        let r = recipe(
            r#"{"version":1,"outcomes":["y"],"index":"t","split":{"fraction":0.9},
               "features":[{"name":"q","column":"x","transform":"quantile"},{"name":"m","column":"x","transform":"minmax"}]}"#,
        );
        let prep = load(&table(&text), &r).unwrap();
        let test = prep.test().unwrap().unwrap();
        assert!(test.features.as_slice().iter().all(|v| v.abs() <= 1.0));
        let last = test.features.row(test.len() - 1);
        assert_eq!(last, &[-1.0, -1.0]);
    }

    fn fitted_model(text: &str, recipe_json: &str) -> (Model, Prepared) {
        let r = recipe(recipe_json);
        let prep = load(&table(text), &r).unwrap();
        let (pipeline, _) = Pipeline::fit(&r.stages, &prep.train().unwrap().dataset().unwrap()).unwrap();
        let model = Model {
            pipeline,
            outcomes: r.outcomes.clone(),
            index: r.index.clone(),
            features: prep.features.clone(),
            horizon: r.horizon,
        };
        (model, prep)
    }

    fn two_outcome_csv(rows: usize) -> String {
        let mut s = String::from("t,x,y0,y1\n");
        for i in 0..rows {
            let u = ((i * 37) % 101) as f64 / 50.0 - 1.0;
            let v = ((i * 53) % 97) as f64 / 48.0 - 1.0;
            let scale = 1.0 + 0.8 * (i as f64 * 0.1).sin();
            s.push_str(&format!(
                "{i},{},{},{}\n",
                (i as f64 * 0.1).sin(),
                scale * u,
                scale * (0.5 * u + v)
            ));
        }
        s
    }

    const JOINT_RECIPE: &str = r#"{"version":1,"outcomes":["y0","y1"],"index":"t","split":{"fraction":0.7},
        "features":[{"name":"s","column":"x","transform":"minmax"},{"name":"v","abs_sum":["y0","y1"],"trailing":3,"transform":"quantile"}],
        "stages":[{"kind":"constant"},{"kind":"permutation","order":[1,0]},{"kind":"joint","lambda1":0.01},{"kind":"diagonal","lambda":0.1}]}"#;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let text = two_outcome_csv(300);
        let (model, prep) = fitted_model(&text, JOINT_RECIPE);
        let json = model.to_json().unwrap();
        let back = Model::from_json(&json).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), json);
        let data = prep.frame.dataset().unwrap();
        let s0 = model.pipeline.score(&data).unwrap();
        let s1 = back.pipeline.score(&data).unwrap();
        assert_eq!(s0.to_bits(), s1.to_bits());
        let rebuilt = back.frame(&table(&text), true).unwrap();
        assert_eq!(rebuilt, prep.frame);
    }

    #[test]
    fn model_schema_errors() {
        let empty = Model {
            pipeline: Pipeline::new(1, 0),
            outcomes: vec!["y".into()],
            index: None,
            features: Vec::new(),
            horizon: 1,
        };
        let json = empty.to_json().unwrap();
        assert_eq!(Model::from_json(&json).unwrap(), empty);
        let bad = json.replace("\"stages\": []", "\"stages\": [{\"kind\": \"garch\"}]");
        let err = Model::from_json(&bad).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("`garch`")), "{err}");
        let future = json.replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            Model::from_json(&future),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    fn report_rows(pipeline: &Pipeline<f64>, frame: &Frame) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut buf = Vec::new();
        write_report(pipeline, frame, false, &mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        let header = rdr.headers().unwrap().iter().map(String::from).collect();
        let rows = rdr
            .records()
            .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        (header, rows)
    }

    #[test]
    fn report_identity_and_constant() {
        let text = two_outcome_csv(20);
        let (model, prep) = fitted_model(&text, r#"{"version":1,"outcomes":["y0","y1"]}"#);
        let (header, rows) = report_rows(&model.pipeline, &prep.frame);
        let col = |name: &str| header.iter().position(|h| h == name).unwrap();
        for r in &rows {
            assert_eq!(
                (r[col("vol_0")], r[col("vol_1")], r[col("corr_1_0")], r[col("logdet")]),
                (1.0, 1.0, 0.0, 0.0)
            );
        }
        let sigma = SymmetricPD::new(Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]], 2).unwrap()).unwrap();
        let constant =
            Pipeline::with_stages(2, 0, vec![WhitenerStage::Constant(sigma.precision_whitener().unwrap())]).unwrap();
        let (header, rows) = report_rows(&constant, &prep.frame);
        let c = header.iter().position(|h| h == "corr_1_0").unwrap();
        assert!(rows.iter().all(|r| (r[c] - 0.5).abs() < 1e-12));
    }

    #[test]
    fn report_loglik_matches_score() {
        let (model, prep) = fitted_model(&two_outcome_csv(200), JOINT_RECIPE);
        let (header, rows) = report_rows(&model.pipeline, &prep.frame);
        let c = header.iter().position(|h| h == "loglik").unwrap();
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
        let score = model.pipeline.score(&prep.frame.dataset().unwrap()).unwrap();
        assert!((mean - score).abs() < 1e-12);
        assert!(header.contains(&"mean_1".to_string()));
    }

    #[test]
    fn refitting_transforms_on_all_rows_changes_test_score() {
        let text = two_outcome_csv(300);
        let (model, prep) = fitted_model(&text, JOINT_RECIPE);
        let (_, test) = split_scores(&model.pipeline, &prep.frame, prep.train_len).unwrap();
        // Leaky variant: transforms fitted on train and test together.
        let r = recipe(JOINT_RECIPE);
        let mut leaky_recipe = r.clone();
        leaky_recipe.split = None;
        let leaky = load(&table(&text), &leaky_recipe).unwrap();
        let mut leaky_model = model.clone();
        leaky_model.features = leaky.features;
        let leaky_frame = leaky_model.frame(&table(&text), true).unwrap();
        assert_ne!(leaky_frame.features, prep.frame.features);
        let (_, leaky_test) = split_scores(&model.pipeline, &leaky_frame, prep.train_len).unwrap();
        assert_ne!(test.unwrap(), leaky_test.unwrap());
    }

    #[test]
    fn predictions_without_outcomes() {
        let text = two_outcome_csv(100);
        let (model, prep) = fitted_model(
            &text,
            r#"{"version":1,"outcomes":["y0","y1"],"features":[{"name":"s","column":"x","transform":"minmax"}],
               "stages":[{"kind":"joint"}]}"#,
        );
        let features_only: String = text
            .lines()
            .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n");
        let frame = model.frame(&table(&features_only), false).unwrap();
        assert!(frame.outcomes.is_none());
        let mut a = Vec::new();
        write_predictions(&model.pipeline, &frame, false, &mut a).unwrap();
        let mut b = Vec::new();
        write_predictions(&model.pipeline, &prep.frame, false, &mut b).unwrap();
        assert_eq!(String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
    }
}
