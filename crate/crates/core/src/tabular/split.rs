use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataTable;
use crate::error::{invalid_arg, Result};
use crate::seed;

/// Exact index record of one split, for reproducibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fold: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SplitManifest {
    pub fn apply(&self, table: &DataTable) -> Result<(DataTable, DataTable, DataTable)> {
        let n = table.n_rows();
        if let Some(bad) = self
            .train_idx
            .iter()
            .chain(&self.val_idx)
            .chain(&self.test_idx)
            .find(|&&i| i >= n)
        {
            return Err(invalid_arg!(
                "manifest index {bad} out of range for a table of {n} rows"
            ));
        }
        Ok((
            table.select(&self.train_idx),
            table.select(&self.val_idx),
            table.select(&self.test_idx),
        ))
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(invalid_arg!("{name} must lie in (0, 1), got {f}"))
    }
}

fn partition(
    mut idx: Vec<usize>,
    test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
    fold: usize,
) -> Result<SplitManifest> {
    let n = idx.len();
    idx.shuffle(&mut seed::rng(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = ((n - n_test) as f64 * val_fraction_of_train).round() as usize;
    let n_train = n - n_test - n_val;
    if n_test == 0 || n_val == 0 || n_train == 0 {
        return Err(invalid_arg!(
            "split of {n} rows leaves an empty part (train {n_train}, val {n_val}, test {n_test})"
        ));
    }
    let test_idx = idx[..n_test].to_vec();
    let val_idx = idx[n_test..n_test + n_val].to_vec();
    let train_idx = idx[n_test + n_val..].to_vec();
    Ok(SplitManifest {
        seed,
        fold,
        train_idx,
        val_idx,
        test_idx,
    })
}

/// Random train/validation/test partition of `n` row indices.
pub fn holdout_indices(
    n: usize,
    test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
) -> Result<SplitManifest> {
    check_fraction("test_fraction", test_fraction)?;
    check_fraction("val_fraction_of_train", val_fraction_of_train)?;
    partition(
        (0..n).collect(),
        test_fraction,
        val_fraction_of_train,
        seed,
        0,
    )
}

/// `folds` independent random test sets, each with the remainder split into
/// train and validation.
pub fn kfold_indices(
    n: usize,
    folds: usize,
    fold_test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
) -> Result<Vec<SplitManifest>> {
    if folds == 0 {
        return Err(invalid_arg!("folds must be at least 1"));
    }
    check_fraction("fold_test_fraction", fold_test_fraction)?;
    check_fraction("val_fraction_of_train", val_fraction_of_train)?;
    (0..folds)
        .map(|k| {
            let fold_seed = seed::derive_seed(seed, "kfold", k as u64);
            let mut m = partition(
                (0..n).collect(),
                fold_test_fraction,
                val_fraction_of_train,
                fold_seed,
                k,
            )?;
            m.seed = seed;
            Ok(m)
        })
        .collect()
}

pub fn split_holdout(
    table: &DataTable,
    test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
) -> Result<(DataTable, DataTable, DataTable)> {
    holdout_indices(table.n_rows(), test_fraction, val_fraction_of_train, seed)?.apply(table)
}

/// Fold splits with an 80/20 train/validation division of each fold's
/// non-test rows.
pub fn split_kfold(
    table: &DataTable,
    folds: usize,
    fold_test_fraction: f64,
    seed: u64,
) -> Result<Vec<(DataTable, DataTable, DataTable)>> {
    kfold_indices(table.n_rows(), folds, fold_test_fraction, 0.2, seed)?
        .iter()
        .map(|m| m.apply(table))
        .collect()
}
