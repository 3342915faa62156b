use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Cell, Column, ColumnKind, ColumnSchema, DataTable};
use crate::error::{data_err, Result};

const MISSING_TOKENS: &[&str] = &["", "NA", "N/A", "NaN", "nan", "null", "NULL", "?"];

fn is_missing(s: &str) -> bool {
    MISSING_TOKENS.contains(&s.trim())
}

fn reader_builder() -> csv::ReaderBuilder {
    let mut b = csv::ReaderBuilder::new();
    b.has_headers(true).flexible(true).trim(csv::Trim::All);
    b
}

/// Load a CSV file with a header row.
///
/// Feature columns are every column not listed in `target_columns`. Kinds come
/// from `schema_hint` when it names the column, otherwise a column is numeric
/// when every non-missing cell parses as a number. Category ids follow the
/// hint's dictionary first, then order of first appearance.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema_hint: Option<&[ColumnSchema]>,
    target_columns: &[&str],
) -> Result<DataTable> {
    read_csv(File::open(path)?, schema_hint, target_columns)
}

pub fn read_csv<R: Read>(
    reader: R,
    schema_hint: Option<&[ColumnSchema]>,
    target_columns: &[&str],
) -> Result<DataTable> {
    let mut rdr = reader_builder().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if target_columns.is_empty() {
        return Err(data_err!("no target columns given"));
    }
    let mut target_pos = Vec::with_capacity(target_columns.len());
    for t in target_columns {
        let pos = headers
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| data_err!("unknown target column '{t}'"))?;
        target_pos.push(pos);
    }

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(data_err!(
                "malformed row arity at data row {}: expected {} fields, found {}",
                i + 1,
                headers.len(),
                rec.len()
            ));
        }
        records.push(rec);
    }

    let p = target_pos.len();
    let mut targets = vec![0.0; records.len() * p];
    for (r, rec) in records.iter().enumerate() {
        for (j, &pos) in target_pos.iter().enumerate() {
            let raw = &rec[pos];
            targets[r * p + j] = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    data_err!(
                        "non-numeric target '{raw}' in column '{}' at data row {}",
                        headers[pos],
                        r + 1
                    )
                })?;
        }
    }

    let mut schema = Vec::new();
    let mut columns = Vec::new();
    for (pos, name) in headers.iter().enumerate() {
        if target_pos.contains(&pos) {
            continue;
        }
        let hint = schema_hint.and_then(|h| h.iter().find(|c| &c.name == name));
        let cells: Vec<&str> = records.iter().map(|r| &r[pos]).collect();
        let numeric = match hint.map(|h| &h.kind) {
            Some(ColumnKind::Numeric) => true,
            Some(ColumnKind::Categorical { .. }) => false,
            None => cells
                .iter()
                .all(|c| is_missing(c) || c.parse::<f64>().is_ok()),
        };
        let any_missing = cells.iter().any(|c| is_missing(c));
        let allows_missing = any_missing || hint.is_some_and(|h| h.allows_missing);
        if numeric {
            let mut values = Vec::with_capacity(cells.len());
            for (r, c) in cells.iter().enumerate() {
                if is_missing(c) {
                    values.push(f64::NAN);
                } else {
                    values.push(c.parse::<f64>().map_err(|_| {
                        data_err!(
                            "non-numeric value '{c}' in numeric column '{name}' at data row {}",
                            r + 1
                        )
                    })?);
                }
            }
            schema.push(ColumnSchema {
                name: name.clone(),
                kind: ColumnKind::Numeric,
                allows_missing,
            });
            columns.push(Column::Numeric(values));
        } else {
            let mut categories: Vec<String> = match hint.map(|h| &h.kind) {
                Some(ColumnKind::Categorical { categories }) => categories.clone(),
                _ => Vec::new(),
            };
            let mut lookup: std::collections::HashMap<String, u32> = categories
                .iter()
                .enumerate()
                .map(|(i, c)| (c.clone(), i as u32))
                .collect();
            let mut ids = Vec::with_capacity(cells.len());
            for c in &cells {
                if is_missing(c) {
                    ids.push(None);
                    continue;
                }
                let id = *lookup.entry((*c).to_owned()).or_insert_with(|| {
                    categories.push((*c).to_owned());
                    (categories.len() - 1) as u32
                });
                ids.push(Some(id));
            }
            if categories.is_empty() {
                return Err(data_err!(
                    "categorical column '{name}' has no non-missing values"
                ));
            }
            schema.push(ColumnSchema {
                name: name.clone(),
                kind: ColumnKind::Categorical { categories },
                allows_missing,
            });
            columns.push(Column::Categorical(ids));
        }
    }

    DataTable::new(
        schema,
        columns,
        target_columns.iter().map(|s| (*s).to_owned()).collect(),
        targets,
    )
}

/// Read feature rows against a fixed schema (e.g. a trained model's).
///
/// Columns are matched by name; extra columns are ignored. Category labels not
/// present in the dictionary become [`Cell::Missing`].
pub fn read_feature_rows<R: Read>(reader: R, schema: &[ColumnSchema]) -> Result<Vec<Vec<Cell>>> {
    let mut rdr = reader_builder().from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut positions = Vec::with_capacity(schema.len());
    for col in schema {
        let pos = headers
            .iter()
            .position(|h| h == &col.name)
            .ok_or_else(|| data_err!("input is missing feature column '{}'", col.name))?;
        positions.push(pos);
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(data_err!("malformed row arity at data row {}", i + 1));
        }
        let mut row = Vec::with_capacity(schema.len());
        for (col, &pos) in schema.iter().zip(&positions) {
            let raw = &rec[pos];
            let cell = if is_missing(raw) {
                Cell::Missing
            } else {
                match &col.kind {
                    ColumnKind::Numeric => Cell::Numeric(raw.parse::<f64>().map_err(|_| {
                        data_err!(
                            "non-numeric value '{raw}' in numeric column '{}' at data row {}",
                            col.name,
                            i + 1
                        )
                    })?),
                    ColumnKind::Categorical { .. } => {
                        col.category_id(raw).map_or(Cell::Missing, Cell::Category)
                    }
                }
            };
            row.push(cell);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Write a table as CSV: feature columns then target columns. Missing cells are
/// written as empty fields; floats use shortest round-trip formatting.
pub fn write_csv<W: Write>(table: &DataTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<&str> = table
        .schema()
        .iter()
        .map(|c| c.name.as_str())
        .chain(table.target_names().iter().map(String::as_str))
        .collect();
    wtr.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for r in 0..table.n_rows() {
        fields.clear();
        for (c, col) in table.schema().iter().enumerate() {
            fields.push(match (table.cell(r, c), &col.kind) {
                (Cell::Missing, _) => String::new(),
                (Cell::Numeric(v), _) => format!("{v:?}"),
                (Cell::Category(id), ColumnKind::Categorical { categories }) => {
                    categories[id as usize].clone()
                }
                (Cell::Category(id), ColumnKind::Numeric) => id.to_string(),
            });
        }
        fields.extend(table.target_row(r).iter().map(|v| format!("{v:?}")));
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}
