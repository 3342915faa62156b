use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, FeatureMatrix, GrowParams};
use super::{
    FitHistory, GaussianPrediction, Head, TreeEnsemble, ENSEMBLE_FORMAT_VERSION, LOG_SIGMA_CLAMP,
    SIGMA_FLOOR,
};
use crate::error::{invalid_arg, Error, Result};
use crate::tabular::DataTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbmParams {
    pub n_trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Newton damping added to every leaf hessian sum (Gaussian head).
    pub l2_regularization: f64,
    /// Growth is deterministic; the seed is carried for run bookkeeping.
    pub seed: u64,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            depth: 2,
            learning_rate: 0.1,
            min_samples_leaf: 1,
            l2_regularization: 1.0,
            seed: 0,
        }
    }
}

impl GbmParams {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(invalid_arg!("n_trees must be at least 1"));
        }
        if self.depth == 0 {
            return Err(invalid_arg!("depth must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid_arg!("learning_rate must be positive"));
        }
        if !(self.l2_regularization >= 0.0) {
            return Err(invalid_arg!("l2_regularization must be non-negative"));
        }
        Ok(())
    }
}

fn check_tables(train: &DataTable, val: &DataTable) -> Result<()> {
    if train.schema() != val.schema() || train.n_targets() != val.n_targets() {
        return Err(Error::SchemaMismatch(
            "train and validation tables have different schemas".into(),
        ));
    }
    if train.n_rows() == 0 || val.n_rows() == 0 {
        return Err(invalid_arg!("train and validation tables must be nonempty"));
    }
    Ok(())
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn add_tree_predictions(
    x: &FeatureMatrix,
    tree: &super::DecisionTree,
    lr: f64,
    raw: &mut [f64],
    v: usize,
) {
    for r in 0..x.n_rows() {
        let (_, value) = tree.leaf(|f| x.value(r, f));
        for k in 0..v {
            raw[r * v + k] += lr * value[k];
        }
    }
}

fn gaussian_mean_nll(raw: &[f64], y: &[f64]) -> f64 {
    let total: f64 = raw
        .chunks_exact(2)
        .zip(y)
        .map(|(p, &y)| GaussianPrediction::from_raw(p[0], p[1]).nll(y))
        .sum();
    total / y.len() as f64
}

/// Boost trees on the Gaussian negative log likelihood of a single target.
///
/// Per row, with `r = y - μ` and `s = log σ`:
/// `g_μ = -r/σ²`, `h_μ = 1/σ²`, `g_s = 1 - r²/σ²`, `h_s = 2r²/σ²`.
/// Leaf values are the damped Newton step `-G/(H + λ)` per coordinate. The
/// ensemble is truncated at the iteration with the lowest validation NLL.
pub fn fit_gaussian_gbm(
    train: &DataTable,
    val: &DataTable,
    params: &GbmParams,
) -> Result<TreeEnsemble> {
    params.validate()?;
    check_tables(train, val)?;
    if train.n_targets() != 1 {
        return Err(invalid_arg!(
            "the Gaussian head needs exactly one target, got {}",
            train.n_targets()
        ));
    }
    let x = FeatureMatrix::from_table(train);
    let xv = FeatureMatrix::from_table(val);
    let y = train.targets();
    let yv = val.targets();
    let n = y.len();

    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let log_sigma0 = var
        .sqrt()
        .max(SIGMA_FLOOR)
        .ln()
        .clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
    let base = vec![mean, log_sigma0];

    let mut raw: Vec<f64> = base.iter().copied().cycle().take(2 * n).collect();
    let mut raw_val: Vec<f64> = base.iter().copied().cycle().take(2 * yv.len()).collect();
    let mut history = FitHistory {
        train_loss: vec![gaussian_mean_nll(&raw, y)],
        val_loss: vec![gaussian_mean_nll(&raw_val, yv)],
        best_iteration: 0,
    };

    let grow = GrowParams {
        depth: params.depth,
        min_samples_leaf: params.min_samples_leaf,
        lambda: params.l2_regularization,
    };
    let mut grad = vec![0.0; 2 * n];
    let mut hess = vec![0.0; 2 * n];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for r in 0..n {
            let p = GaussianPrediction::from_raw(raw[2 * r], raw[2 * r + 1]);
            let res = y[r] - p.mu;
            let inv_var = 1.0 / (p.sigma * p.sigma);
            grad[2 * r] = -res * inv_var;
            hess[2 * r] = inv_var;
            grad[2 * r + 1] = 1.0 - res * res * inv_var;
            hess[2 * r + 1] = 2.0 * res * res * inv_var;
        }
        if grad.iter().chain(&hess).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "non-finite Gaussian gradients during boosting".into(),
            ));
        }
        let tree = grow_tree(&x, &grad, &hess, 2, (0..n).collect(), &grow);
        add_tree_predictions(&x, &tree, params.learning_rate, &mut raw, 2);
        add_tree_predictions(&xv, &tree, params.learning_rate, &mut raw_val, 2);
        history.train_loss.push(gaussian_mean_nll(&raw, y));
        history.val_loss.push(gaussian_mean_nll(&raw_val, yv));
        trees.push(tree);
    }

    history.best_iteration = argmin_first(&history.val_loss);
    trees.truncate(history.best_iteration);
    Ok(TreeEnsemble {
        version: ENSEMBLE_FORMAT_VERSION,
        head: Head::Gaussian,
        base_prediction: base,
        learning_rate: params.learning_rate,
        schema: train.schema().to_vec(),
        trees,
        history,
    })
}

fn rmse(raw: &[f64], y: &[f64]) -> f64 {
    (raw.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64)
        .sqrt()
}

/// Boost trees on multi-output squared error. Split gain is the summed
/// per-output reduction in squared error (proportional to its average over
/// outputs); leaves hold the mean residual vector. Truncated at the best
/// validation RMSE.
pub fn fit_multirmse_gbm(
    train: &DataTable,
    val: &DataTable,
    params: &GbmParams,
) -> Result<TreeEnsemble> {
    params.validate()?;
    check_tables(train, val)?;
    let p = train.n_targets();
    if p < 2 {
        return Err(invalid_arg!(
            "MultiRMSE needs at least two targets, got {p}"
        ));
    }
    let x = FeatureMatrix::from_table(train);
    let xv = FeatureMatrix::from_table(val);
    let y = train.targets();
    let yv = val.targets();
    let n = train.n_rows();

    let mut base = vec![0.0; p];
    for row in y.chunks_exact(p) {
        for (b, v) in base.iter_mut().zip(row) {
            *b += v;
        }
    }
    base.iter_mut().for_each(|b| *b /= n as f64);

    let mut raw: Vec<f64> = base.iter().copied().cycle().take(n * p).collect();
    let mut raw_val: Vec<f64> = base
        .iter()
        .copied()
        .cycle()
        .take(val.n_rows() * p)
        .collect();
    let mut history = FitHistory {
        train_loss: vec![rmse(&raw, y)],
        val_loss: vec![rmse(&raw_val, yv)],
        best_iteration: 0,
    };

    let grow = GrowParams {
        depth: params.depth,
        min_samples_leaf: params.min_samples_leaf,
        lambda: 0.0,
    };
    let mut grad = vec![0.0; n * p];
    let hess = vec![1.0; n * p];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for i in 0..n * p {
            grad[i] = raw[i] - y[i];
        }
        let tree = grow_tree(&x, &grad, &hess, p, (0..n).collect(), &grow);
        add_tree_predictions(&x, &tree, params.learning_rate, &mut raw, p);
        add_tree_predictions(&xv, &tree, params.learning_rate, &mut raw_val, p);
        history.train_loss.push(rmse(&raw, y));
        history.val_loss.push(rmse(&raw_val, yv));
        trees.push(tree);
    }

    history.best_iteration = argmin_first(&history.val_loss);
    trees.truncate(history.best_iteration);
    Ok(TreeEnsemble {
        version: ENSEMBLE_FORMAT_VERSION,
        head: Head::MultiRmse,
        base_prediction: base,
        learning_rate: params.learning_rate,
        schema: train.schema().to_vec(),
        trees,
        history,
    })
}

/// Mean per-row Gaussian negative log likelihood of a table.
pub fn nll_gaussian(ensemble: &TreeEnsemble, table: &DataTable) -> Result<f64> {
    if ensemble.head != Head::Gaussian {
        return Err(invalid_arg!("nll_gaussian needs a Gaussian-head ensemble"));
    }
    if table.schema() != ensemble.schema.as_slice() || table.n_targets() != 1 {
        return Err(Error::SchemaMismatch(
            "table does not match the ensemble schema".into(),
        ));
    }
    let x = FeatureMatrix::from_table(table);
    let total: f64 = (0..table.n_rows())
        .map(|r| {
            let raw = ensemble.raw_with(|f| x.value(r, f));
            GaussianPrediction::from_raw(raw[0], raw[1]).nll(table.targets()[r])
        })
        .sum();
    Ok(total / table.n_rows() as f64)
}
