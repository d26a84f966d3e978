//! Census-style tabular ingestion.
//!
//! A [`Schema`] names the feature columns, the income (label) column, the race
//! (group) column and the cleaning filters. Raw CSV extracts are parsed into a
//! [`RawTable`], cleaned with [`apply_income_filters`], and turned into a typed
//! [`Dataset`] per context (state). Contexts are gathered in a
//! [`ContextCollection`] from which the pooled global dataset is built.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Context id reserved for the pooled national dataset.
pub const GLOBAL_CONTEXT: &str = "US";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in numeric column `{column}`")]
    BadNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("unknown race category `{0}`")]
    UnknownRace(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("duplicate context `{0}`")]
    DuplicateContext(String),
    #[error("context id `US` is reserved for the global dataset")]
    ReservedContext,
    #[error("excluding {0:?} leaves no data for the global dataset")]
    EmptyGlobal(Vec<String>),
    #[error("no context files (*.csv) found in {0}")]
    NoContexts(PathBuf),
    #[error("context {context}: {source}")]
    InContext {
        context: String,
        #[source]
        source: Box<DataError>,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
        }
    }
}

/// Row filters applied during cleaning. Every bound is strict: a row is kept
/// only when `age > min_age`, `income > min_income` and `hours > min_hours`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub age_column: String,
    pub income_column: String,
    pub hours_column: String,
    #[serde(default = "FilterSpec::default_min_age")]
    pub min_age: f64,
    #[serde(default = "FilterSpec::default_min_income")]
    pub min_income: f64,
    #[serde(default)]
    pub min_hours: f64,
}

impl FilterSpec {
    fn default_min_age() -> f64 {
        16.0
    }

    fn default_min_income() -> f64 {
        100.0
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            age_column: "AGEP".into(),
            income_column: "PINCP".into(),
            hours_column: "WKHP".into(),
            min_age: 16.0,
            min_income: 100.0,
            min_hours: 0.0,
        }
    }
}

/// Column layout of a prediction task.
///
/// The schema file is TOML:
///
/// ```toml
/// label = "PINCP"
/// label_threshold = 50000
/// group = "RAC1P"
/// context = "ST"            # optional, informational
///
/// [filters]                 # optional
/// age_column = "AGEP"
/// income_column = "PINCP"
/// hours_column = "WKHP"
///
/// [[features]]
/// name = "AGEP"
/// kind = "numeric"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
    pub label: String,
    #[serde(default = "Schema::default_threshold")]
    pub label_threshold: f64,
    pub group: String,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub filters: Option<FilterSpec>,
}

impl Schema {
    fn default_threshold() -> f64 {
        50_000.0
    }

    /// The ACS income task: nine covariates plus RAC1P as the group source,
    /// labelled by PINCP > 50,000.
    pub fn income() -> Self {
        let features = vec![
            FeatureSpec::numeric("AGEP"),
            FeatureSpec::categorical("COW"),
            FeatureSpec::categorical("SCHL"),
            FeatureSpec::categorical("MAR"),
            FeatureSpec::categorical("OCCP"),
            FeatureSpec::categorical("POBP"),
            FeatureSpec::categorical("RELP"),
            FeatureSpec::numeric("WKHP"),
            FeatureSpec::categorical("SEX"),
        ];
        Self {
            features,
            label: "PINCP".into(),
            label_threshold: 50_000.0,
            group: "RAC1P".into(),
            context: Some("ST".into()),
            filters: Some(FilterSpec::default()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate feature `{}`", f.name)));
            }
        }
        let mut special = vec![("label", &self.label), ("group", &self.group)];
        if let Some(ctx) = &self.context {
            special.push(("context", ctx));
        }
        for (role, col) in &special {
            if names.contains(col.as_str()) {
                return Err(DataError::Schema(format!(
                    "{role} column `{col}` is also listed as a feature"
                )));
            }
        }
        if self.label == self.group {
            return Err(DataError::Schema("label and group columns coincide".into()));
        }
        if let Some(filters) = &self.filters {
            for col in [
                &filters.age_column,
                &filters.income_column,
                &filters.hours_column,
            ] {
                let categorical = self
                    .features
                    .iter()
                    .any(|f| &f.name == col && f.kind == FeatureKind::Categorical);
                if categorical || col == &self.group {
                    return Err(DataError::Schema(format!(
                        "filter column `{col}` must be numeric"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Columns read from the CSV, in table order, with their parse kind.
    fn selected_columns(&self) -> Vec<(String, ColumnKind)> {
        let mut out: Vec<(String, ColumnKind)> = Vec::new();
        let mut push = |name: &str, kind: ColumnKind| {
            if !out.iter().any(|(n, _)| n == name) {
                out.push((name.to_string(), kind));
            }
        };
        for f in &self.features {
            let kind = match f.kind {
                FeatureKind::Numeric => ColumnKind::Numeric,
                FeatureKind::Categorical => ColumnKind::Text,
            };
            push(&f.name, kind);
        }
        push(&self.label, ColumnKind::Numeric);
        push(&self.group, ColumnKind::Text);
        if let Some(filters) = &self.filters {
            push(&filters.age_column, ColumnKind::Numeric);
            push(&filters.income_column, ColumnKind::Numeric);
            push(&filters.hours_column, ColumnKind::Numeric);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Raw tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawCell {
    Missing,
    Num(f64),
    Text(Arc<str>),
}

/// Parsed CSV restricted to the schema-selected columns. Row order follows
/// the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub rows: Vec<Vec<RawCell>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }

    fn numeric(&self, row: usize, col: usize) -> Result<f64> {
        match &self.rows[row][col] {
            RawCell::Num(v) => Ok(*v),
            RawCell::Missing => Err(DataError::MissingValue {
                row,
                column: self.columns[col].clone(),
            }),
            RawCell::Text(t) => Err(DataError::BadNumeric {
                row,
                column: self.columns[col].clone(),
                value: t.to_string(),
            }),
        }
    }

    fn text(&self, row: usize, col: usize) -> Result<Arc<str>> {
        match &self.rows[row][col] {
            RawCell::Text(t) => Ok(t.clone()),
            RawCell::Num(v) => Ok(Arc::from(v.to_string())),
            RawCell::Missing => Err(DataError::MissingValue {
                row,
                column: self.columns[col].clone(),
            }),
        }
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_csv_reader(file, schema)
}

/// Parses comma-separated UTF-8 with a header row (RFC 4180 quoting).
/// Empty cells become [`RawCell::Missing`]; row indices in errors are 0-based
/// data rows.
pub fn load_csv_reader<R: Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let selected = schema.selected_columns();
    let mut positions = Vec::with_capacity(selected.len());
    for (name, _) in &selected {
        let pos = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))?;
        positions.push(pos);
    }

    let mut interners: Vec<HashMap<String, Arc<str>>> = vec![HashMap::new(); selected.len()];
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0usize;
    while rdr.read_record(&mut record)? {
        let mut cells = Vec::with_capacity(selected.len());
        for (j, ((name, kind), &pos)) in selected.iter().zip(&positions).enumerate() {
            let raw = record.get(pos).unwrap_or("").trim();
            let cell = if raw.is_empty() {
                RawCell::Missing
            } else {
                match kind {
                    ColumnKind::Numeric => {
                        RawCell::Num(raw.parse::<f64>().map_err(|_| DataError::BadNumeric {
                            row,
                            column: name.clone(),
                            value: raw.to_string(),
                        })?)
                    }
                    ColumnKind::Text => {
                        let interned = interners[j]
                            .entry(raw.to_string())
                            .or_insert_with(|| Arc::from(raw))
                            .clone();
                        RawCell::Text(interned)
                    }
                }
            };
            cells.push(cell);
        }
        rows.push(cells);
        row += 1;
    }

    Ok(RawTable {
        columns: selected.iter().map(|(n, _)| n.clone()).collect(),
        kinds: selected.iter().map(|(_, k)| *k).collect(),
        rows,
    })
}

/// Row accounting for one cleaning pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterTally {
    pub input: usize,
    pub dropped_missing: usize,
    pub dropped_filter: usize,
    pub kept: usize,
}

/// Keeps rows with no missing cell and `age > min_age`, `income > min_income`,
/// `hours > min_hours`.
pub fn apply_income_filters(
    table: &RawTable,
    filters: &FilterSpec,
) -> Result<(RawTable, FilterTally)> {
    let age = table.column_index(&filters.age_column)?;
    let income = table.column_index(&filters.income_column)?;
    let hours = table.column_index(&filters.hours_column)?;
    clean(table, |row| {
        let value = |col: usize| match &row[col] {
            RawCell::Num(v) => *v,
            _ => f64::NAN,
        };
        value(age) > filters.min_age
            && value(income) > filters.min_income
            && value(hours) > filters.min_hours
    })
}

/// Drops rows with missing cells and applies the schema's filters if it has any.
pub fn clean_table(table: &RawTable, schema: &Schema) -> Result<(RawTable, FilterTally)> {
    match &schema.filters {
        Some(filters) => apply_income_filters(table, filters),
        None => clean(table, |_| true),
    }
}

fn clean(table: &RawTable, keep: impl Fn(&[RawCell]) -> bool) -> Result<(RawTable, FilterTally)> {
    let mut tally = FilterTally {
        input: table.len(),
        ..FilterTally::default()
    };
    let mut rows = Vec::new();
    for row in &table.rows {
        if row.iter().any(|c| matches!(c, RawCell::Missing)) {
            tally.dropped_missing += 1;
        } else if keep(row) {
            rows.push(row.clone());
        } else {
            tally.dropped_filter += 1;
        }
    }
    tally.kept = rows.len();
    Ok((
        RawTable {
            columns: table.columns.clone(),
            kinds: table.kinds.clone(),
            rows,
        },
        tally,
    ))
}

/// `1` iff the income strictly exceeds `threshold`.
pub fn binarize_income(table: &RawTable, column: &str, threshold: f64) -> Result<Vec<u8>> {
    let col = table.column_index(column)?;
    (0..table.len())
        .map(|row| table.numeric(row, col).map(|v| u8::from(v > threshold)))
        .collect()
}

// ---------------------------------------------------------------------------
// Groups
// ---------------------------------------------------------------------------

/// Recoded race group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    W,
    B,
    O,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::W, Group::B, Group::O];

    pub fn index(self) -> usize {
        match self {
            Group::W => 0,
            Group::B => 1,
            Group::O => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Group::W => 'w',
            Group::B => 'b',
            Group::O => 'o',
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Group::W => "W",
            Group::B => "B",
            Group::O => "O",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Group {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "W" => Ok(Group::W),
            "B" => Ok(Group::B),
            "O" => Ok(Group::O),
            _ => Err(DataError::UnknownRace(s.to_string())),
        }
    }
}

/// RAC1P categories in code order (1..=9).
pub const RACE_CATEGORIES: [&str; 9] = [
    "White alone",
    "Black or African American alone",
    "American Indian alone",
    "Alaska Native alone",
    "American Indian and Alaska Native tribes specified, or American Indian or Alaska Native, not specified and no other races",
    "Asian alone",
    "Native Hawaiian and Other Pacific Islander alone",
    "Some Other Race alone",
    "Two or More Races",
];

/// Maps a RAC1P value (numeric code `1..=9` or its label) onto W/B/O.
pub fn recode_race_value(value: &str) -> Result<Group> {
    let v = value.trim();
    let code = match v.parse::<f64>() {
        Ok(c) if c.fract() == 0.0 && (1.0..=9.0).contains(&c) => c as usize,
        Ok(_) => return Err(DataError::UnknownRace(value.to_string())),
        Err(_) => match RACE_CATEGORIES
            .iter()
            .position(|c| c.eq_ignore_ascii_case(v))
        {
            Some(i) => i + 1,
            None => return Err(DataError::UnknownRace(value.to_string())),
        },
    };
    Ok(match code {
        1 => Group::W,
        2 => Group::B,
        _ => Group::O,
    })
}

pub fn recode_race(table: &RawTable, column: &str) -> Result<Vec<Group>> {
    let col = table.column_index(column)?;
    (0..table.len())
        .map(|row| recode_race_value(&table.text(row, col)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<Arc<str>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            Column::Numeric(_) => FeatureKind::Numeric,
            Column::Categorical(_) => FeatureKind::Categorical,
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => {
                Column::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

/// Records of one context. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    context: String,
    features: Vec<FeatureSpec>,
    columns: Vec<Column>,
    labels: Vec<u8>,
    groups: Vec<Group>,
    weights: Option<Vec<f64>>,
    source_rows: usize,
}

impl Dataset {
    pub fn new(
        context: &str,
        features: Vec<FeatureSpec>,
        columns: Vec<Column>,
        labels: Vec<u8>,
        groups: Vec<Group>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = labels.len();
        if features.len() != columns.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} feature specs for {} columns",
                features.len(),
                columns.len()
            )));
        }
        for (spec, col) in features.iter().zip(&columns) {
            if spec.kind != col.kind() {
                return Err(DataError::InvalidDataset(format!(
                    "column `{}` has the wrong kind",
                    spec.name
                )));
            }
            if col.len() != n {
                return Err(DataError::InvalidDataset(format!(
                    "column `{}` has {} rows, expected {n}",
                    spec.name,
                    col.len()
                )));
            }
        }
        if groups.len() != n {
            return Err(DataError::InvalidDataset(format!(
                "{} group values for {n} rows",
                groups.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(DataError::InvalidDataset("labels must be 0 or 1".into()));
        }
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(DataError::InvalidDataset(format!(
                    "{} weights for {n} rows",
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(DataError::InvalidDataset("weights must be positive".into()));
            }
        }
        Ok(Self {
            context: normalize_context_id(context),
            features,
            columns,
            labels,
            groups,
            weights,
            source_rows: n,
        })
    }

    /// Builds a dataset from a cleaned table.
    pub fn from_table(context: &str, table: &RawTable, schema: &Schema) -> Result<Self> {
        let labels = binarize_income(table, &schema.label, schema.label_threshold)?;
        let groups = recode_race(table, &schema.group)?;
        let mut columns = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            let col = table.column_index(&f.name)?;
            let column = match f.kind {
                FeatureKind::Numeric => Column::Numeric(
                    (0..table.len())
                        .map(|row| table.numeric(row, col))
                        .collect::<Result<_>>()?,
                ),
                FeatureKind::Categorical => Column::Categorical(
                    (0..table.len())
                        .map(|row| table.text(row, col))
                        .collect::<Result<_>>()?,
                ),
            };
            columns.push(column);
        }
        Self::new(
            context,
            schema.features.clone(),
            columns,
            labels,
            groups,
            None,
        )
    }

    pub fn with_source_rows(mut self, rows: usize) -> Self {
        self.source_rows = rows;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(DataError::InvalidDataset(
                "weights must be positive and one per row".into(),
            ));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Row weights, defaulting to 1.0.
    pub fn weights_or_unit(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.len()])
    }

    /// Row count before cleaning (equals `len()` for datasets not loaded from CSV).
    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            context: self.context.clone(),
            features: self.features.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            groups: rows.iter().map(|&i| self.groups[i]).collect(),
            weights: self
                .weights
                .as_ref()
                .map(|w| rows.iter().map(|&i| w[i]).collect()),
            source_rows: rows.len(),
        }
    }

    /// Row-wise concatenation. All parts must share one feature layout.
    pub fn concat(context: &str, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::InvalidDataset("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.features != first.features) {
            return Err(DataError::InvalidDataset(
                "cannot concatenate datasets with different features".into(),
            ));
        }
        let mut columns: Vec<Column> = first
            .features
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Numeric => Column::Numeric(Vec::new()),
                FeatureKind::Categorical => Column::Categorical(Vec::new()),
            })
            .collect();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        let any_weights = parts.iter().any(|p| p.weights.is_some());
        let mut weights = Vec::new();
        for part in parts {
            for (dst, src) in columns.iter_mut().zip(&part.columns) {
                match (dst, src) {
                    (Column::Numeric(d), Column::Numeric(s)) => d.extend_from_slice(s),
                    (Column::Categorical(d), Column::Categorical(s)) => d.extend_from_slice(s),
                    _ => unreachable!("feature kinds checked above"),
                }
            }
            labels.extend_from_slice(&part.labels);
            groups.extend_from_slice(&part.groups);
            if any_weights {
                weights.extend(part.weights_or_unit());
            }
        }
        Ok(Dataset {
            context: normalize_context_id(context),
            features: first.features.clone(),
            columns,
            labels,
            groups,
            weights: any_weights.then_some(weights),
            source_rows: parts.iter().map(|p| p.source_rows).sum(),
        })
    }
}

/// Upper-cases and trims a context id.
pub fn normalize_context_id(id: &str) -> String {
    id.trim().to_ascii_uppercase()
}

// ---------------------------------------------------------------------------
// Collections
// ---------------------------------------------------------------------------

/// Local datasets keyed by context id (iterated in lexicographic order), plus
/// an optional externally supplied global dataset.
#[derive(Debug, Clone, Default)]
pub struct ContextCollection {
    contexts: BTreeMap<String, Dataset>,
    global: Option<Dataset>,
}

impl ContextCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ds: Dataset) -> Result<()> {
        let id = ds.context().to_string();
        if id == GLOBAL_CONTEXT {
            return Err(DataError::ReservedContext);
        }
        if self.contexts.contains_key(&id) {
            return Err(DataError::DuplicateContext(id));
        }
        self.contexts.insert(id, ds);
        Ok(())
    }

    pub fn set_global(&mut self, ds: Dataset) {
        self.global = Some(ds);
    }

    pub fn global(&self) -> Option<&Dataset> {
        self.global.as_ref()
    }

    pub fn get(&self, id: &str) -> Option<&Dataset> {
        self.contexts.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.contexts.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Dataset)> {
        self.contexts.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Keeps only the listed contexts.
    pub fn restrict(&self, ids: &[String]) -> Result<ContextCollection> {
        let mut out = ContextCollection {
            contexts: BTreeMap::new(),
            global: self.global.clone(),
        };
        for id in ids {
            let id = normalize_context_id(id);
            let ds = self
                .contexts
                .get(&id)
                .ok_or_else(|| DataError::UnknownContext(id.clone()))?;
            out.contexts.insert(id, ds.clone());
        }
        Ok(out)
    }
}

/// Concatenates every local dataset except the excluded ones.
pub fn build_global(coll: &ContextCollection, exclude: &BTreeSet<String>) -> Result<Dataset> {
    for id in exclude {
        if !coll.contexts.contains_key(id) {
            return Err(DataError::UnknownContext(id.clone()));
        }
    }
    let parts: Vec<&Dataset> = coll
        .contexts
        .iter()
        .filter(|(id, _)| !exclude.contains(*id))
        .map(|(_, ds)| ds)
        .collect();
    if parts.is_empty() {
        return Err(DataError::EmptyGlobal(exclude.iter().cloned().collect()));
    }
    Dataset::concat(GLOBAL_CONTEXT, &parts)
}

/// Per-file ingestion accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub context: String,
    pub tally: FilterTally,
}

/// Loads, cleans and types one CSV file.
pub fn load_context(path: &Path, context: &str, schema: &Schema) -> Result<(Dataset, LoadReport)> {
    let wrap = |e: DataError| DataError::InContext {
        context: normalize_context_id(context),
        source: Box::new(e),
    };
    let raw = load_csv(path, schema).map_err(wrap)?;
    let (cleaned, tally) = clean_table(&raw, schema).map_err(wrap)?;
    let ds = Dataset::from_table(context, &cleaned, schema)
        .map_err(wrap)?
        .with_source_rows(raw.len());
    let report = LoadReport {
        context: ds.context().to_string(),
        tally,
    };
    Ok((ds, report))
}

/// Loads every `<STATE>.csv` in `dir`; `US.csv`, when present, becomes the
/// collection's global dataset. Files are loaded in parallel.
pub fn load_context_dir(
    dir: &Path,
    schema: &Schema,
) -> Result<(ContextCollection, Vec<LoadReport>)> {
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| DataError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if !is_csv || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            files.push((normalize_context_id(stem), path));
        }
    }
    if files.is_empty() {
        return Err(DataError::NoContexts(dir.to_path_buf()));
    }
    files.sort();

    let loaded: Vec<(Dataset, LoadReport)> = files
        .par_iter()
        .map(|(id, path)| load_context(path, id, schema))
        .collect::<Result<_>>()?;

    let mut coll = ContextCollection::new();
    let mut reports = Vec::with_capacity(loaded.len());
    for (ds, report) in loaded {
        if ds.context() == GLOBAL_CONTEXT {
            coll.set_global(ds);
        } else {
            coll.insert(ds)?;
        }
        reports.push(report);
    }
    Ok((coll, reports))
}

// ---------------------------------------------------------------------------
// Group statistics
// ---------------------------------------------------------------------------

/// Negatives per positive. `Infinite` when the dataset has no positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceRatio {
    Finite(f64),
    Infinite,
}

impl ImbalanceRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            ImbalanceRatio::Finite(v) => Some(v),
            ImbalanceRatio::Infinite => None,
        }
    }
}

impl fmt::Display for ImbalanceRatio {
    /// `+:-` notation, e.g. `1:1.52`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImbalanceRatio::Finite(v) => write!(f, "1:{v:.2}"),
            ImbalanceRatio::Infinite => f.write_str("1:inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub context: String,
    pub raw_count: usize,
    pub cleaned_count: usize,
    /// Indexed by [`Group::index`].
    pub group_counts: [usize; 3],
    pub group_rates: [f64; 3],
    pub positives: usize,
    pub negatives: usize,
    pub imbalance: ImbalanceRatio,
}

pub fn compute_group_stats(ds: &Dataset) -> Result<GroupStats> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset(ds.context().to_string()));
    }
    let mut counts = [0usize; 3];
    for g in ds.groups() {
        counts[g.index()] += 1;
    }
    let n = ds.len();
    let positives = ds.labels().iter().filter(|&&y| y == 1).count();
    let negatives = n - positives;
    let imbalance = if positives == 0 {
        ImbalanceRatio::Infinite
    } else {
        ImbalanceRatio::Finite(negatives as f64 / positives as f64)
    };
    Ok(GroupStats {
        context: ds.context().to_string(),
        raw_count: ds.source_rows(),
        cleaned_count: n,
        group_counts: counts,
        group_rates: counts.map(|c| c as f64 / n as f64),
        positives,
        negatives,
        imbalance,
    })
}
