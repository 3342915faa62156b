//! Mixed-type tabular data: schema, storage, CSV ingestion, splitting,
//! one-hot encoding and target transforms.
//!
//! Missing cells are never imputed. Numeric columns store `NaN` for a missing
//! value and categorical columns store `None`; downstream learners decide how
//! to route them.

mod csv_io;
mod onehot;
mod split;
mod transform;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};

pub use csv_io::{load_csv, read_csv, read_feature_rows, write_csv};
pub use onehot::{one_hot_encode, one_hot_row, one_hot_width};
pub use split::{holdout_indices, kfold_indices, split_holdout, split_kfold, SplitManifest};
pub use transform::{TargetPipeline, TargetTransform};

/// Kind of a feature column. Categorical columns carry their dictionary; the
/// position of a label in `categories` is its dense id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    pub allows_missing: bool,
}

impl ColumnSchema {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            allows_missing: false,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
            allows_missing: false,
        }
    }

    /// Number of categories; `None` for numeric columns.
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            ColumnKind::Numeric => None,
            ColumnKind::Categorical { categories } => Some(categories.len()),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ColumnKind::Categorical { .. })
    }

    /// Dense id of a category label, if known.
    pub fn category_id(&self, label: &str) -> Option<u32> {
        match &self.kind {
            ColumnKind::Numeric => None,
            ColumnKind::Categorical { categories } => {
                categories.iter().position(|c| c == label).map(|i| i as u32)
            }
        }
    }
}

/// A single feature value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Numeric(f64),
    Category(u32),
    Missing,
}

impl Cell {
    /// Numeric encoding used by the tree learner: the value, the category id,
    /// or `NaN` for a missing cell.
    pub fn as_f64(self) -> f64 {
        match self {
            Cell::Numeric(v) => v,
            Cell::Category(id) => f64::from(id),
            Cell::Missing => f64::NAN,
        }
    }
}

/// Column storage. `NaN` marks a missing numeric cell.
#[derive(Debug, Clone)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<Option<u32>>),
}

/// Missing numeric cells compare equal to each other.
impl PartialEq for Column {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Column::Numeric(a), Column::Numeric(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|(x, y)| x == y || (x.is_nan() && y.is_nan()))
            }
            (Column::Categorical(a), Column::Categorical(b)) => a == b,
            _ => false,
        }
    }
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

    pub fn cell(&self, row: usize) -> Cell {
        match self {
            Column::Numeric(v) if v[row].is_nan() => Cell::Missing,
            Column::Numeric(v) => Cell::Numeric(v[row]),
            Column::Categorical(v) => v[row].map_or(Cell::Missing, Cell::Category),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

/// Columnar dataset with a feature schema and an `N x P` target block.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    schema: Vec<ColumnSchema>,
    columns: Vec<Column>,
    target_names: Vec<String>,
    /// Row-major `N x P`.
    targets: Vec<f64>,
    n_rows: usize,
}

impl DataTable {
    pub fn new(
        schema: Vec<ColumnSchema>,
        columns: Vec<Column>,
        target_names: Vec<String>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let p = target_names.len();
        if p == 0 {
            return Err(data_err!("at least one target column is required"));
        }
        if schema.len() != columns.len() {
            return Err(data_err!(
                "schema has {} columns but {} were supplied",
                schema.len(),
                columns.len()
            ));
        }
        if !targets.len().is_multiple_of(p) {
            return Err(data_err!(
                "target buffer length {} is not a multiple of P={p}",
                targets.len()
            ));
        }
        let n_rows = targets.len() / p;
        let mut seen = std::collections::HashSet::new();
        for name in schema.iter().map(|c| &c.name).chain(target_names.iter()) {
            if !seen.insert(name.as_str()) {
                return Err(data_err!("duplicate column name '{name}'"));
            }
        }
        for (col_schema, col) in schema.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(data_err!(
                    "column '{}' has {} rows, expected {n_rows}",
                    col_schema.name,
                    col.len()
                ));
            }
            match (&col_schema.kind, col) {
                (ColumnKind::Numeric, Column::Numeric(v)) => {
                    if !col_schema.allows_missing && v.iter().any(|x| x.is_nan()) {
                        return Err(data_err!(
                            "column '{}' has missing values but does not allow them",
                            col_schema.name
                        ));
                    }
                }
                (ColumnKind::Categorical { categories }, Column::Categorical(v)) => {
                    if categories.is_empty() {
                        return Err(data_err!(
                            "categorical column '{}' has an empty dictionary",
                            col_schema.name
                        ));
                    }
                    for id in v {
                        match id {
                            Some(id) if *id as usize >= categories.len() => {
                                return Err(data_err!(
                                    "category id {id} out of range in column '{}'",
                                    col_schema.name
                                ));
                            }
                            None if !col_schema.allows_missing => {
                                return Err(data_err!(
                                    "column '{}' has missing values but does not allow them",
                                    col_schema.name
                                ));
                            }
                            _ => {}
                        }
                    }
                }
                _ => {
                    return Err(data_err!(
                        "column '{}' storage does not match its kind",
                        col_schema.name
                    ))
                }
            }
        }
        if let Some(bad) = targets.iter().position(|y| !y.is_finite()) {
            return Err(data_err!(
                "target value at row {} is missing or non-finite",
                bad / p
            ));
        }
        Ok(Self {
            schema,
            columns,
            target_names,
            targets,
            n_rows,
        })
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_names.len()
    }

    /// Row-major `N x P` target matrix.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn target_row(&self, row: usize) -> &[f64] {
        let p = self.n_targets();
        &self.targets[row * p..(row + 1) * p]
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.columns[col].cell(row)
    }

    pub fn row(&self, row: usize) -> Vec<Cell> {
        self.columns.iter().map(|c| c.cell(row)).collect()
    }

    /// Subset of rows, in the given order. The schema (and thus every category
    /// dictionary) is shared with the parent table.
    pub fn select(&self, rows: &[usize]) -> DataTable {
        let p = self.n_targets();
        let mut targets = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            targets.extend_from_slice(self.target_row(r));
        }
        DataTable {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            target_names: self.target_names.clone(),
            targets,
            n_rows: rows.len(),
        }
    }

    /// Stack tables with identical schemas and target names, in order.
    pub fn concat(tables: &[&DataTable]) -> Result<DataTable> {
        let first = tables
            .first()
            .ok_or_else(|| data_err!("nothing to concatenate"))?;
        let mut columns = first.columns.clone();
        let mut targets = first.targets.clone();
        for t in &tables[1..] {
            if t.schema != first.schema || t.target_names != first.target_names {
                return Err(data_err!(
                    "cannot concatenate tables with different schemas"
                ));
            }
            for (dst, src) in columns.iter_mut().zip(&t.columns) {
                match (dst, src) {
                    (Column::Numeric(a), Column::Numeric(b)) => a.extend_from_slice(b),
                    (Column::Categorical(a), Column::Categorical(b)) => a.extend_from_slice(b),
                    _ => return Err(data_err!("column storage mismatch while concatenating")),
                }
            }
            targets.extend_from_slice(&t.targets);
        }
        DataTable::new(
            first.schema.clone(),
            columns,
            first.target_names.clone(),
            targets,
        )
    }

    /// Copy of the table with a replaced target block of the same shape.
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<DataTable> {
        if targets.len() != self.targets.len() {
            return Err(data_err!(
                "replacement targets have length {}, expected {}",
                targets.len(),
                self.targets.len()
            ));
        }
        DataTable::new(
            self.schema.clone(),
            self.columns.clone(),
            self.target_names.clone(),
            targets,
        )
    }
}

/// Check that a row agrees with a schema in arity and cell kinds.
pub fn check_row(schema: &[ColumnSchema], row: &[Cell]) -> Result<()> {
    if row.len() != schema.len() {
        return Err(Error::SchemaMismatch(format!(
            "row has {} cells, schema has {} columns",
            row.len(),
            schema.len()
        )));
    }
    for (col, cell) in schema.iter().zip(row) {
        match (&col.kind, cell) {
            (_, Cell::Missing) => {}
            (ColumnKind::Numeric, Cell::Numeric(_)) => {}
            (ColumnKind::Categorical { categories }, Cell::Category(id))
                if (*id as usize) < categories.len() => {}
            _ => {
                return Err(Error::SchemaMismatch(format!(
                    "cell {cell:?} does not fit column '{}'",
                    col.name
                )));
            }
        }
    }
    Ok(())
}
