//! The full TreeFlow model: a frozen tree ensemble turns a row into a sparse
//! leaf-occurrence vector, a shallow tanh layer compresses it to a context
//! `w`, and a conditional CNF models `p(y | w)` over transformed targets.

mod io;
mod sfe;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cnf::{CnfConfig, CnfStack, TraceEstimator};
use crate::error::{invalid_arg, Error, Result};
use crate::gbdt::{fit_gaussian_gbm, fit_multirmse_gbm, FeatureMatrix, GbmParams, TreeEnsemble};
use crate::ndiff::AdamConfig;
use crate::seed;
use crate::tabular::{
    check_row, one_hot_row, one_hot_width, Cell, ColumnSchema, DataTable, TargetPipeline,
    TargetTransform,
};

pub use io::MODEL_FORMAT_VERSION;
pub use sfe::{ShallowFeatureExtractor, SparseInput};

/// Rows encoded and evaluated together when scoring a table.
const SCORE_BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Gbdt,
    Onehot,
}

/// How the stage-2 learning rate evolves over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` towards zero over `n_epochs`.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Learning rate for a 1-based `epoch` out of `n_epochs`.
    pub fn rate(self, base: f64, epoch: usize, n_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (epoch - 1) as f64 / n_epochs as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Hyperparameters of both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub depth: usize,
    pub n_trees: usize,
    pub gbm_learning_rate: f64,
    pub gbm_l2_regularization: f64,
    pub gbm_min_samples_leaf: usize,
    pub context_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_blocks: usize,
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub extractor: ExtractorKind,
    pub use_sfe: bool,
    /// Apply `log10` to targets before standardization.
    pub log10_targets: bool,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub trace: TraceEstimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            n_trees: 100,
            gbm_learning_rate: 0.1,
            gbm_l2_regularization: 1.0,
            gbm_min_samples_leaf: 1,
            context_dim: 50,
            hidden_dims: vec![50, 10],
            n_blocks: 2,
            n_epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            extractor: ExtractorKind::Gbdt,
            use_sfe: true,
            log10_targets: false,
            train_steps: 20,
            eval_steps: 50,
            trace: TraceEstimator::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_epochs == 0 {
            return Err(invalid_arg!(
                "no trainable epochs: n_epochs must be at least 1"
            ));
        }
        let counts = [
            ("depth", self.depth),
            ("n_trees", self.n_trees),
            ("context_dim", self.context_dim),
            ("n_blocks", self.n_blocks),
            ("batch_size", self.batch_size),
            ("train_steps", self.train_steps),
            ("eval_steps", self.eval_steps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid_arg!("{name} must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.gbm_learning_rate > 0.0) {
            return Err(invalid_arg!("learning rates must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(invalid_arg!("hidden layer widths must be positive"));
        }
        Ok(())
    }

    fn gbm_params(&self) -> GbmParams {
        GbmParams {
            n_trees: self.n_trees,
            depth: self.depth,
            learning_rate: self.gbm_learning_rate,
            min_samples_leaf: self.gbm_min_samples_leaf,
            l2_regularization: self.gbm_l2_regularization,
            seed: seed::derive_seed(self.seed, "gbdt", 0),
        }
    }
}

/// Stage-1 feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extractor {
    Gbdt {
        ensemble: TreeEnsemble,
    },
    /// One-hot encoding of the raw row (numeric columns pass through).
    Onehot,
}

/// Per-epoch record of stage-2 training. Validation NLL is in transformed
/// target space; `None` marks a non-finite epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<Option<f64>>,
    pub val_nll: Vec<Option<f64>>,
    /// 1-based index of the retained epoch.
    pub best_epoch: usize,
    pub skipped_batches: usize,
}

/// Evenly spaced axis `lo..=hi` with `n` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn point(&self, k: usize) -> f64 {
        self.lo + (self.hi - self.lo) * k as f64 / (self.n - 1) as f64
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }
}

/// Densities on a grid: `points` is row-major `(Π n) x P` with the last axis
/// varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PdfGrid {
    pub axes: Vec<GridAxis>,
    pub points: Vec<f64>,
    pub densities: Vec<f64>,
}

impl PdfGrid {
    /// Riemann sum of the densities over the grid cells.
    pub fn mass(&self) -> f64 {
        let cell: f64 = self.axes.iter().map(GridAxis::step).product();
        self.densities.iter().sum::<f64>() * cell
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeFlowModel {
    config: TrainConfig,
    schema: Vec<ColumnSchema>,
    target_names: Vec<String>,
    target_transform: TargetPipeline,
    extractor: Extractor,
    sfe: Option<ShallowFeatureExtractor>,
    flow: CnfStack,
    history: TrainHistory,
}

impl TreeFlowModel {
    /// Two-stage training. Stage 1 fits the tree ensemble on the transformed
    /// targets (Gaussian head for one target, MultiRMSE otherwise) and freezes
    /// it. Stage 2 trains the shallow extractor and the flow jointly by
    /// minibatch Adam on the flow NLL, keeping the epoch with the lowest
    /// validation NLL.
    pub fn fit(train: &DataTable, val: &DataTable, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.schema() != val.schema() || train.target_names() != val.target_names() {
            return Err(Error::SchemaMismatch(
                "train and validation tables have different schemas".into(),
            ));
        }
        if train.n_rows() == 0 || val.n_rows() == 0 {
            return Err(invalid_arg!("train and validation tables must be nonempty"));
        }
        let p = train.n_targets();

        let mut steps = Vec::new();
        if config.log10_targets {
            steps.push(TargetTransform::Log10);
        }
        let partial = TargetPipeline::new(steps.clone()).apply(train.targets(), p)?;
        steps.push(TargetTransform::fit_standardize(&partial, p)?);
        let target_transform = TargetPipeline::new(steps);
        let y_train = target_transform.apply(train.targets(), p)?;
        let y_val = target_transform.apply(val.targets(), p)?;

        let extractor = match config.extractor {
            ExtractorKind::Gbdt => {
                let (tt, tv) = (
                    train.with_targets(y_train.clone())?,
                    val.with_targets(y_val.clone())?,
                );
                let ensemble = if p == 1 {
                    fit_gaussian_gbm(&tt, &tv, &config.gbm_params())?
                } else {
                    fit_multirmse_gbm(&tt, &tv, &config.gbm_params())?
                };
                log::info!(
                    "stage 1: {} trees, {} leaves",
                    ensemble.n_trees(),
                    ensemble.total_leaves()
                );
                Extractor::Gbdt { ensemble }
            }
            ExtractorKind::Onehot => Extractor::Onehot,
        };
        let feature_dim = match &extractor {
            Extractor::Gbdt { ensemble } => ensemble.total_leaves(),
            Extractor::Onehot => one_hot_width(train.schema()),
        };
        let sfe = if config.use_sfe {
            Some(ShallowFeatureExtractor::new(
                feature_dim,
                config.context_dim,
                seed::derive_seed(config.seed, "sfe", 0),
            )?)
        } else {
            None
        };
        let context_dim = if config.use_sfe {
            config.context_dim
        } else {
            feature_dim
        };
        let flow = CnfStack::new(CnfConfig {
            dim: p,
            context_dim,
            hidden_dims: config.hidden_dims.clone(),
            n_blocks: config.n_blocks,
            train_steps: config.train_steps,
            eval_steps: config.eval_steps,
            trace: config.trace,
            exact_trace_limit: 32,
            seed: seed::derive_seed(config.seed, "cnf", 0),
        })?;
        let mut model = Self {
            config: config.clone(),
            schema: train.schema().to_vec(),
            target_names: train.target_names().to_vec(),
            target_transform,
            extractor,
            sfe,
            flow,
            history: TrainHistory::default(),
        };
        let x_train = model.features(train)?;
        let x_val = model.features(val)?;
        model.train_stage2(&x_train, &y_train, &x_val, &y_val)?;
        Ok(model)
    }

    fn train_stage2(
        &mut self,
        x_train: &[SparseInput],
        y_train: &[f64],
        x_val: &[SparseInput],
        y_val: &[f64],
    ) -> Result<()> {
        let p = self.flow.dim();
        let c = self.flow.context_dim();
        let mut order: Vec<usize> = (0..x_train.len()).collect();
        let mut best: Option<(f64, Vec<f64>, Option<Vec<f64>>)> = None;
        let mut bad_run = 0;
        let mut ctx = Vec::new();
        let mut ctx_grads = Vec::new();
        let mut ys = Vec::new();
        for epoch in 1..=self.config.n_epochs {
            order.shuffle(&mut seed::rng(seed::derive_seed(
                self.config.seed,
                "epoch",
                epoch as u64,
            )));
            let adam = AdamConfig {
                learning_rate: self.config.lr_schedule.rate(
                    self.config.learning_rate,
                    epoch,
                    self.config.n_epochs,
                ),
                ..AdamConfig::default()
            };
            let (mut loss_sum, mut loss_rows) = (0.0, 0usize);
            for batch in order.chunks(self.config.batch_size) {
                let rows: Vec<&SparseInput> = batch.iter().map(|&i| &x_train[i]).collect();
                self.contexts_into(&rows, &mut ctx)?;
                ys.clear();
                ys.extend(batch.iter().flat_map(|&i| &y_train[i * p..(i + 1) * p]));
                ctx_grads.resize(batch.len() * c, 0.0);
                self.flow.store_mut().zero_grad();
                if let Some(s) = self.sfe.as_mut() {
                    s.store_mut().zero_grad();
                }
                let loss = match self
                    .flow
                    .nll_loss_and_gradients(&ys, &ctx, Some(&mut ctx_grads))
                {
                    Ok(l) => l,
                    Err(Error::Numerical(msg)) => {
                        log::warn!("epoch {epoch}: skipping batch: {msg}");
                        self.history.skipped_batches += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if let Some(s) = self.sfe.as_mut() {
                    for (k, x) in rows.iter().enumerate() {
                        s.backward(x, &ctx[k * c..(k + 1) * c], &ctx_grads[k * c..(k + 1) * c])?;
                    }
                    s.store_mut().adam_step(&adam);
                }
                self.flow.store_mut().adam_step(&adam);
                loss_sum += loss * batch.len() as f64;
                loss_rows += batch.len();
            }
            let train_loss = (loss_rows > 0).then(|| loss_sum / loss_rows as f64);
            let val_nll = self
                .model_space_nll(x_val, y_val)
                .ok()
                .filter(|v| v.is_finite());
            self.history.train_loss.push(train_loss);
            self.history.val_nll.push(val_nll);
            let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
            log::info!(
                "epoch {epoch}: train loss {}, val nll {}",
                show(train_loss),
                show(val_nll)
            );
            match val_nll {
                Some(v) => {
                    bad_run = 0;
                    if best.as_ref().is_none_or(|b| v < b.0) {
                        let sfe_vals = self.sfe.as_ref().map(|s| s.store().values().to_vec());
                        best = Some((v, self.flow.store().values().to_vec(), sfe_vals));
                        self.history.best_epoch = epoch;
                    }
                }
                None => {
                    bad_run += 1;
                    if bad_run == 3 {
                        return Err(Error::Numerical(format!(
                            "stage 2 diverged: validation NLL non-finite for 3 consecutive epochs (epochs {}..={epoch}); best finite epoch {}",
                            epoch - 2,
                            self.history.best_epoch
                        )));
                    }
                }
            }
        }
        let (_, flow_vals, sfe_vals) = best
            .ok_or_else(|| Error::Numerical("no epoch produced a finite validation NLL".into()))?;
        self.flow.store_mut().load_values(&flow_vals)?;
        self.flow.store_mut().reset_optimizer();
        if let (Some(s), Some(v)) = (self.sfe.as_mut(), sfe_vals) {
            s.store_mut().load_values(&v)?;
            s.store_mut().reset_optimizer();
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn target_transform(&self) -> &TargetPipeline {
        &self.target_transform
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn sfe(&self) -> Option<&ShallowFeatureExtractor> {
        self.sfe.as_ref()
    }

    pub fn sfe_mut(&mut self) -> Option<&mut ShallowFeatureExtractor> {
        self.sfe.as_mut()
    }

    pub fn flow(&self) -> &CnfStack {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut CnfStack {
        &mut self.flow
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn n_targets(&self) -> usize {
        self.target_names.len()
    }

    pub fn context_dim(&self) -> usize {
        self.flow.context_dim()
    }

    fn feature_dim(&self) -> usize {
        match &self.extractor {
            Extractor::Gbdt { ensemble } => ensemble.total_leaves(),
            Extractor::Onehot => one_hot_width(&self.schema),
        }
    }

    fn check_table(&self, table: &DataTable) -> Result<()> {
        if table.schema() != self.schema.as_slice() {
            return Err(Error::SchemaMismatch(
                "table feature columns do not match the model schema".into(),
            ));
        }
        if table.n_targets() != self.n_targets() {
            return Err(Error::SchemaMismatch(format!(
                "model has {} targets, table has {}",
                self.n_targets(),
                table.n_targets()
            )));
        }
        Ok(())
    }

    /// Stage-1 representation `o` of a single row.
    pub fn occurrence(&self, row: &[Cell]) -> Result<SparseInput> {
        check_row(&self.schema, row)?;
        Ok(match &self.extractor {
            Extractor::Gbdt { ensemble } => {
                let o = ensemble.leaf_occurrence(row)?;
                SparseInput::binary(o.active, o.dim)
            }
            Extractor::Onehot => {
                let mut dense = Vec::new();
                one_hot_row(&self.schema, row, &mut dense);
                SparseInput::from_dense(&dense)
            }
        })
    }

    fn features(&self, table: &DataTable) -> Result<Vec<SparseInput>> {
        if table.schema() != self.schema.as_slice() {
            return Err(Error::SchemaMismatch(
                "table feature columns do not match the model schema".into(),
            ));
        }
        match &self.extractor {
            Extractor::Gbdt { ensemble } => {
                let x = FeatureMatrix::from_table(table);
                let offsets = ensemble.leaf_offsets();
                let dim = ensemble.total_leaves();
                Ok((0..table.n_rows())
                    .map(|r| {
                        let mut active = Vec::with_capacity(ensemble.n_trees());
                        ensemble.occurrence_with(&offsets, |f| x.value(r, f), &mut active);
                        SparseInput::binary(active, dim)
                    })
                    .collect())
            }
            Extractor::Onehot => (0..table.n_rows())
                .map(|r| self.occurrence(&table.row(r)))
                .collect(),
        }
    }

    fn contexts_into(&self, rows: &[&SparseInput], out: &mut Vec<f64>) -> Result<()> {
        let c = self.context_dim();
        out.clear();
        out.resize(rows.len() * c, 0.0);
        for (k, x) in rows.iter().enumerate() {
            let dst = &mut out[k * c..(k + 1) * c];
            match &self.sfe {
                Some(s) => s.forward(x, dst)?,
                None => {
                    if x.dim != c {
                        return Err(Error::SchemaMismatch(format!(
                            "occurrence dimension {} does not match context dimension {c}",
                            x.dim
                        )));
                    }
                    for (i, v) in x.idx.iter().zip(&x.val) {
                        dst[*i as usize] = *v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Context `w` of a row: `tanh(W o + b)`, or `o` itself without the
    /// shallow extractor.
    pub fn encode(&self, row: &[Cell]) -> Result<Vec<f64>> {
        let o = self.occurrence(row)?;
        let mut w = Vec::new();
        self.contexts_into(&[&o], &mut w)?;
        Ok(w)
    }

    /// Mean flow NLL of already transformed targets.
    fn model_space_nll(&self, x: &[SparseInput], y: &[f64]) -> Result<f64> {
        let p = self.n_targets();
        let mut total = 0.0;
        let mut ctx = Vec::new();
        for (blk, xs) in x.chunks(SCORE_BLOCK).enumerate() {
            let rows: Vec<&SparseInput> = xs.iter().collect();
            self.contexts_into(&rows, &mut ctx)?;
            let ys = &y[blk * SCORE_BLOCK * p..(blk * SCORE_BLOCK + xs.len()) * p];
            total -= self
                .flow
                .log_prob_batch(ys, &ctx, self.config.eval_steps)?
                .iter()
                .sum::<f64>();
        }
        Ok(total / x.len() as f64)
    }

    /// `log p(y | x)` in original target units.
    pub fn log_prob(&self, row: &[Cell], y: &[f64]) -> Result<f64> {
        if y.len() != self.n_targets() {
            return Err(invalid_arg!(
                "expected {} target values, got {}",
                self.n_targets(),
                y.len()
            ));
        }
        let w = self.encode(row)?;
        let mut z = y.to_vec();
        self.target_transform.apply_row(&mut z)?;
        Ok(self.flow.log_prob(&z, &w)? + self.target_transform.log_jacobian(y)?)
    }

    /// Per-row `log p(y | x)` for a table, in original target units.
    pub fn log_prob_table(&self, table: &DataTable) -> Result<Vec<f64>> {
        self.check_table(table)?;
        let p = self.n_targets();
        let x = self.features(table)?;
        let mut out = Vec::with_capacity(table.n_rows());
        let mut ctx = Vec::new();
        for (blk, xs) in x.chunks(SCORE_BLOCK).enumerate() {
            let rows: Vec<&SparseInput> = xs.iter().collect();
            self.contexts_into(&rows, &mut ctx)?;
            let y = &table.targets()[blk * SCORE_BLOCK * p..(blk * SCORE_BLOCK + xs.len()) * p];
            let z = self.target_transform.apply(y, p)?;
            let lp = self.flow.log_prob_batch(&z, &ctx, self.config.eval_steps)?;
            for (k, l) in lp.into_iter().enumerate() {
                out.push(l + self.target_transform.log_jacobian(&y[k * p..(k + 1) * p])?);
            }
        }
        Ok(out)
    }

    /// Mean negative log likelihood of a table in original target units.
    pub fn nll(&self, table: &DataTable) -> Result<f64> {
        if table.n_rows() == 0 {
            return Err(invalid_arg!("cannot score an empty table"));
        }
        let lp = self.log_prob_table(table)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// `n` draws from `p(y | x)`, row-major `n x P`, in original units.
    pub fn sample(&self, row: &[Cell], n: usize, seed: u64) -> Result<Vec<f64>> {
        let w = self.encode(row)?;
        let mut ys = self.flow.sample(&w, n, seed)?;
        for y in ys.chunks_exact_mut(self.n_targets()) {
            self.target_transform.invert_row(y)?;
        }
        Ok(ys)
    }

    /// Conditional density on an evenly spaced grid (one axis per target).
    /// Points outside the support of the target transform get density 0.
    pub fn pdf_grid(&self, row: &[Cell], axes: &[GridAxis]) -> Result<PdfGrid> {
        let p = self.n_targets();
        if axes.len() != p {
            return Err(invalid_arg!("expected {p} grid axes, got {}", axes.len()));
        }
        if let Some(a) = axes.iter().find(|a| a.n < 2) {
            return Err(invalid_arg!(
                "grid axes need at least 2 points, got {}",
                a.n
            ));
        }
        if axes
            .iter()
            .any(|a| !(a.lo.is_finite() && a.hi.is_finite() && a.hi > a.lo))
        {
            return Err(invalid_arg!("grid axes need finite bounds with hi > lo"));
        }
        let w = self.encode(row)?;
        let total: usize = axes.iter().map(|a| a.n).product();
        let mut points = Vec::with_capacity(total * p);
        for flat in 0..total {
            let mut rem = flat;
            let mut pt = vec![0.0; p];
            for d in (0..p).rev() {
                pt[d] = axes[d].point(rem % axes[d].n);
                rem /= axes[d].n;
            }
            points.extend(pt);
        }
        let mut valid = Vec::new();
        let mut z = Vec::new();
        let mut jac = Vec::new();
        for (k, y) in points.chunks_exact(p).enumerate() {
            let mut t = y.to_vec();
            if self.target_transform.apply_row(&mut t).is_ok() {
                valid.push(k);
                z.extend(t);
                jac.push(self.target_transform.log_jacobian(y)?);
            }
        }
        let ctx: Vec<f64> = w
            .iter()
            .copied()
            .cycle()
            .take(valid.len() * w.len())
            .collect();
        let lp = self.flow.log_prob_batch(&z, &ctx, self.config.eval_steps)?;
        let mut densities = vec![0.0; total];
        for ((k, l), j) in valid.into_iter().zip(lp).zip(jac) {
            densities[k] = (l + j).exp();
        }
        Ok(PdfGrid {
            axes: axes.to_vec(),
            points,
            densities,
        })
    }
}
