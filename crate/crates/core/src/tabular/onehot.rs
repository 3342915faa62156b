use super::{Cell, Column, ColumnKind, ColumnSchema, DataTable};
use crate::error::{data_err, Result};

/// Width of the one-hot representation of a schema: numeric columns count
/// once, categorical columns count their cardinality.
pub fn one_hot_width(schema: &[ColumnSchema]) -> usize {
    schema.iter().map(|c| c.cardinality().unwrap_or(1)).sum()
}

/// One-hot encode a single row into a dense vector. Numeric values pass
/// through raw (missing becomes 0); a missing category is the all-zero block.
pub fn one_hot_row(schema: &[ColumnSchema], row: &[Cell], out: &mut Vec<f64>) {
    out.clear();
    for (col, cell) in schema.iter().zip(row) {
        match &col.kind {
            ColumnKind::Numeric => out.push(match cell {
                Cell::Numeric(v) => *v,
                _ => 0.0,
            }),
            ColumnKind::Categorical { categories } => {
                let start = out.len();
                out.resize(start + categories.len(), 0.0);
                if let Cell::Category(id) = cell {
                    out[start + *id as usize] = 1.0;
                }
            }
        }
    }
}

/// Replace every categorical column by `cardinality` binary numeric columns
/// named `column=label`.
pub fn one_hot_encode(table: &DataTable) -> Result<DataTable> {
    if !table.schema().iter().any(ColumnSchema::is_categorical) {
        return Err(data_err!(
            "one-hot encoding needs at least one categorical column"
        ));
    }
    let mut schema = Vec::new();
    let mut columns = Vec::new();
    for (col, data) in table.schema().iter().zip(table.columns()) {
        match (&col.kind, data) {
            (ColumnKind::Numeric, _) => {
                schema.push(col.clone());
                columns.push(data.clone());
            }
            (ColumnKind::Categorical { categories }, Column::Categorical(ids)) => {
                for (k, label) in categories.iter().enumerate() {
                    schema.push(ColumnSchema::numeric(format!("{}={label}", col.name)));
                    columns.push(Column::Numeric(
                        ids.iter()
                            .map(|id| if *id == Some(k as u32) { 1.0 } else { 0.0 })
                            .collect(),
                    ));
                }
            }
            _ => {
                return Err(data_err!(
                    "column '{}' storage does not match its kind",
                    col.name
                ))
            }
        }
    }
    DataTable::new(
        schema,
        columns,
        table.target_names().to_vec(),
        table.targets().to_vec(),
    )
}
