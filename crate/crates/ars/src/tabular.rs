//! CSV tables encoded through a JSON column schema.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use ars_core::data::{one_hot_matrix, Dataset};
use ars_core::metrics::{ColumnGroup, GroupKind};
use ars_core::Matrix;
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    /// Min-max scaled to `[0, 1]`; `min == max` maps to 0.
    Numeric { min: f64, max: f64 },
    Categorical { values: Vec<String> },
    /// One-hot over `boundaries.len() + 1` bins; bin `i` holds values with
    /// exactly `i` boundaries at or below them.
    Bucketized { boundaries: Vec<f64> },
}

impl ColumnKind {
    pub fn width(&self) -> usize {
        match self {
            ColumnKind::Numeric { .. } => 1,
            ColumnKind::Categorical { values } => values.len(),
            ColumnKind::Bucketized { boundaries } => boundaries.len() + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// Columns present in the CSV but absent from the schema are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub label: String,
    #[serde(default)]
    pub private_attrs: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TabularError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error("column {0} is missing from the CSV header")]
    MissingColumn(String),
    #[error("row {row}: unknown value {value:?} in categorical column {column}")]
    UnknownCategory { row: usize, column: String, value: String },
    #[error("row {row}: cannot parse {value:?} in numeric column {column}")]
    BadNumber { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RowLength { row: usize, expected: usize, found: usize },
}

/// A loaded table plus the feature-column layout of each source column.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub dataset: Dataset,
    pub groups: Vec<ColumnGroup>,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self, TabularError> {
        let s: Schema = serde_json::from_str(text).map_err(|e| TabularError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, TabularError> {
        let text = std::fs::read_to_string(path).map_err(|source| TabularError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn column(&self, name: &str) -> Result<&ColumnSpec, TabularError> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| TabularError::Schema(format!("{name} is not a declared column")))
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        for (i, c) in self.columns.iter().enumerate() {
            if self.columns[..i].iter().any(|d| d.name == c.name) {
                return Err(TabularError::Schema(format!("duplicate column {}", c.name)));
            }
            match &c.kind {
                ColumnKind::Numeric { min, max } if !(min.is_finite() && max.is_finite() && min <= max) => {
                    return Err(TabularError::Schema(format!("{}: need finite min <= max", c.name)));
                }
                ColumnKind::Categorical { values } if values.is_empty() => {
                    return Err(TabularError::Schema(format!("{}: empty value list", c.name)));
                }
                ColumnKind::Bucketized { boundaries } if boundaries.windows(2).any(|w| w[0] >= w[1]) => {
                    return Err(TabularError::Schema(format!("{}: boundaries must increase", c.name)));
                }
                _ => {}
            }
        }
        for name in core::iter::once(&self.label).chain(&self.private_attrs) {
            if matches!(self.column(name)?.kind, ColumnKind::Numeric { .. }) {
                return Err(TabularError::Schema(format!("{name} must be categorical or bucketized")));
            }
        }
        if self.feature_columns().next().is_none() {
            return Err(TabularError::Schema("no feature columns".into()));
        }
        Ok(())
    }

    /// Every declared column except the label, in declaration order.
    pub fn feature_columns(&self) -> impl Iterator<Item = &ColumnSpec> + '_ {
        self.columns.iter().filter(move |c| c.name != self.label)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_columns().map(|c| c.kind.width()).sum()
    }

    pub fn groups(&self) -> Vec<ColumnGroup> {
        let mut at = 0;
        self.feature_columns()
            .map(|c| {
                let w = c.kind.width();
                let g = ColumnGroup {
                    name: c.name.clone(),
                    range: at..at + w,
                    kind: match c.kind {
                        ColumnKind::Numeric { .. } => GroupKind::Numeric,
                        _ => GroupKind::OneHot,
                    },
                };
                at += w;
                g
            })
            .collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.feature_dim());
        for c in self.feature_columns() {
            match &c.kind {
                ColumnKind::Numeric { .. } => names.push(c.name.clone()),
                ColumnKind::Categorical { values } => names.extend(values.iter().map(|v| format!("{}={v}", c.name))),
                ColumnKind::Bucketized { boundaries } => {
                    names.extend((0..=boundaries.len()).map(|b| format!("{}#{b}", c.name)))
                }
            }
        }
        names
    }
}

fn number(row: usize, column: &str, value: &str) -> Result<f64, TabularError> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| TabularError::BadNumber {
            row,
            column: column.to_string(),
            value: value.to_string(),
        })
}

/// Encodes one field, writing into `out` (which has `kind.width()` slots).
/// Returns the hot index for one-hot kinds.
fn encode(row: usize, spec: &ColumnSpec, value: &str, out: &mut [f64]) -> Result<Option<usize>, TabularError> {
    match &spec.kind {
        ColumnKind::Numeric { min, max } => {
            let v = number(row, &spec.name, value)?;
            out[0] = if max > min {
                ((v - min) / (max - min)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            Ok(None)
        }
        ColumnKind::Categorical { values } => {
            let i = values
                .iter()
                .position(|v| v == value.trim())
                .ok_or_else(|| TabularError::UnknownCategory {
                    row,
                    column: spec.name.clone(),
                    value: value.to_string(),
                })?;
            out[i] = 1.0;
            Ok(Some(i))
        }
        ColumnKind::Bucketized { boundaries } => {
            let v = number(row, &spec.name, value)?;
            let i = boundaries.iter().take_while(|b| **b <= v).count();
            out[i] = 1.0;
            Ok(Some(i))
        }
    }
}

/// Parses CSV text with a header row. Row numbers in errors count data rows
/// from 0.
pub fn parse_csv<R: Read>(reader: R, schema: &Schema) -> Result<Table, TabularError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let index_of = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TabularError::MissingColumn(name.to_string()))
    };
    let features: Vec<(usize, &ColumnSpec)> = schema
        .feature_columns()
        .map(|c| Ok((index_of(&c.name)?, c)))
        .collect::<Result<_, TabularError>>()?;
    let label = (index_of(&schema.label)?, schema.column(&schema.label)?);
    let attrs: Vec<(usize, &ColumnSpec)> = schema
        .private_attrs
        .iter()
        .map(|n| Ok((index_of(n)?, schema.column(n)?)))
        .collect::<Result<_, TabularError>>()?;

    let dim = schema.feature_dim();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut a: Vec<Vec<usize>> = vec![Vec::new(); attrs.len()];
    let mut scratch = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(TabularError::RowLength {
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let start = x.len();
        x.resize(start + dim, 0.0);
        let mut at = start;
        for (i, spec) in &features {
            let w = spec.kind.width();
            encode(row, spec, &rec[*i], &mut x[at..at + w])?;
            at += w;
        }
        let mut hot = |(i, spec): &(usize, &ColumnSpec)| -> Result<usize, TabularError> {
            scratch.clear();
            scratch.resize(spec.kind.width(), 0.0);
            Ok(encode(row, spec, &rec[*i], &mut scratch)?.expect("validated as one-hot"))
        };
        y.push(hot(&label)?);
        for (k, spec) in attrs.iter().enumerate() {
            a[k].push(hot(spec)?);
        }
    }
    let n = y.len();
    let labels = one_hot_matrix(&y, label.1.kind.width());
    let private = attrs
        .iter()
        .zip(&a)
        .map(|((_, spec), cls)| one_hot_matrix(cls, spec.kind.width()))
        .collect();
    let dataset = Dataset::new(Matrix::from_vec(n, dim, x), Some(labels), private, Some(schema.feature_names()))
        .map_err(|e| TabularError::Schema(e.to_string()))?;
    Ok(Table {
        dataset,
        groups: schema.groups(),
    })
}

/// Loads a `.csv` or `.csv.gz` file.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Table, TabularError> {
    let io = |source| TabularError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    if path.extension().is_some_and(|e| e == "gz") {
        parse_csv(GzDecoder::new(file), schema)
    } else {
        parse_csv(file, schema)
    }
}
