//! Synthetic four-cell benchmark with a known conditional density.
//!
//! Two binary features select one of four laws for `y`:
//!
//! | (x1, x2) | law                          |
//! |----------|------------------------------|
//! | (0, 0)   | N(0, 1)                      |
//! | (0, 1)   | Exp(rate 1/3)                |
//! | (1, 0)   | ½ N(-10, 1) + ½ N(10, 1)     |
//! | (1, 1)   | Gamma(shape 7.5, scale 1)    |

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid_arg, Result};
use crate::gbdt::{fit_gaussian_gbm, nll_gaussian, GbmParams, TreeEnsemble};
use crate::model::{GridAxis, TrainConfig, TreeFlowModel};
use crate::seed;
use crate::tabular::{Cell, Column, ColumnSchema, DataTable};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
pub const EXP_RATE: f64 = 1.0 / 3.0;
pub const MIXTURE_MODE: f64 = 10.0;
pub const GAMMA_SHAPE: f64 = 7.5;

/// The four cells in row order of [`sample_dataset`].
pub const CELLS: [(u8, u8); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Draw one target from the law of cell `(x1, x2)`.
pub fn sample_cell<R: Rng + ?Sized>(x1: u8, x2: u8, rng: &mut R) -> f64 {
    match (x1, x2) {
        (0, 0) => rng.sample(StandardNormal),
        (0, 1) => rng.sample(Exp::new(EXP_RATE).expect("valid rate")),
        (1, 0) => {
            let mode = if rng.gen::<bool>() {
                MIXTURE_MODE
            } else {
                -MIXTURE_MODE
            };
            mode + rng.sample::<f64, _>(StandardNormal)
        }
        _ => rng.sample(Gamma::new(GAMMA_SHAPE, 1.0).expect("valid shape")),
    }
}

fn schema() -> Vec<ColumnSchema> {
    vec![ColumnSchema::numeric("x1"), ColumnSchema::numeric("x2")]
}

/// `n_per_cell` rows from each cell, grouped by cell in [`CELLS`] order.
pub fn sample_dataset(n_per_cell: usize, seed: u64) -> Result<DataTable> {
    if n_per_cell == 0 {
        return Err(invalid_arg!("n_per_cell must be at least 1"));
    }
    let mut x1 = Vec::with_capacity(4 * n_per_cell);
    let mut x2 = Vec::with_capacity(4 * n_per_cell);
    let mut y = Vec::with_capacity(4 * n_per_cell);
    for (k, &(a, b)) in CELLS.iter().enumerate() {
        let mut rng = seed::rng(seed::derive_seed(seed, "cell", k as u64));
        for _ in 0..n_per_cell {
            x1.push(f64::from(a));
            x2.push(f64::from(b));
            y.push(sample_cell(a, b, &mut rng));
        }
    }
    DataTable::new(
        schema(),
        vec![Column::Numeric(x1), Column::Numeric(x2)],
        vec!["y".into()],
        y,
    )
}

/// Feature row of a cell.
pub fn cell_row(x1: u8, x2: u8) -> Vec<Cell> {
    vec![Cell::Numeric(f64::from(x1)), Cell::Numeric(f64::from(x2))]
}

/// Exact `log p(y | x1, x2)`; `-inf` outside the support.
pub fn true_logpdf(x1: u8, x2: u8, y: f64) -> f64 {
    match (x1, x2) {
        (0, 0) => -0.5 * y * y - HALF_LN_2PI,
        (0, 1) => {
            if y >= 0.0 {
                EXP_RATE.ln() - EXP_RATE * y
            } else {
                f64::NEG_INFINITY
            }
        }
        (1, 0) => {
            let a = -0.5 * (y - MIXTURE_MODE).powi(2);
            let b = -0.5 * (y + MIXTURE_MODE).powi(2);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln() + 0.5f64.ln() - HALF_LN_2PI
        }
        _ => {
            if y > 0.0 {
                (GAMMA_SHAPE - 1.0) * y.ln() - y - ln_gamma(GAMMA_SHAPE)
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Differential entropy of each cell's law.
pub fn cell_entropies() -> [f64; 4] {
    let normal = 0.5 + HALF_LN_2PI;
    let exp = 1.0 - EXP_RATE.ln();
    // The two mixture components overlap by less than double precision can
    // resolve, so the entropy is that of one component plus ln 2.
    let mixture = normal + std::f64::consts::LN_2;
    let k = GAMMA_SHAPE;
    let gamma = k + ln_gamma(k) + (1.0 - k) * digamma(k);
    [normal, exp, mixture, gamma]
}

/// How [`true_nll`] evaluates the expected negative log likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruthMode {
    Analytic,
    MonteCarlo { n_per_cell: usize, seed: u64 },
}

/// Expected NLL of the true conditional density over the balanced cells.
pub fn true_nll(mode: TruthMode) -> f64 {
    match mode {
        TruthMode::Analytic => cell_entropies().iter().sum::<f64>() / 4.0,
        TruthMode::MonteCarlo { n_per_cell, seed } => {
            let mut total = 0.0;
            for (k, &(a, b)) in CELLS.iter().enumerate() {
                let mut rng = seed::rng(seed::derive_seed(seed, "truth", k as u64));
                let s: f64 = (0..n_per_cell)
                    .map(|_| -true_logpdf(a, b, sample_cell(a, b, &mut rng)))
                    .sum();
                total += s / n_per_cell as f64;
            }
            total / 4.0
        }
    }
}

/// Best NLL attainable by a per-cell Gaussian: the mean entropy of the
/// moment-matched normals.
pub fn gaussian_floor() -> f64 {
    let variances = [
        1.0,
        1.0 / (EXP_RATE * EXP_RATE),
        1.0 + MIXTURE_MODE * MIXTURE_MODE,
        GAMMA_SHAPE,
    ];
    variances
        .iter()
        .map(|v| 0.5 + HALF_LN_2PI + 0.5 * v.ln())
        .sum::<f64>()
        / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub n_train_per_cell: usize,
    pub n_val_per_cell: usize,
    pub n_test_per_cell: usize,
    pub treeflow: TrainConfig,
    pub gbm: GbmParams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            n_train_per_cell: 5000,
            n_val_per_cell: 1000,
            n_test_per_cell: 100_000,
            treeflow: TrainConfig::default(),
            gbm: GbmParams::default(),
        }
    }
}

/// Train/validation/test tables for one benchmark seed.
pub fn seed_tables(cfg: &BenchConfig, seed: u64) -> Result<(DataTable, DataTable, DataTable)> {
    Ok((
        sample_dataset(cfg.n_train_per_cell, seed::derive_seed(seed, "train", 0))?,
        sample_dataset(cfg.n_val_per_cell, seed::derive_seed(seed, "val", 0))?,
        sample_dataset(cfg.n_test_per_cell, seed::derive_seed(seed, "test", 0))?,
    ))
}

/// Both fitted models of one seed with their test NLLs.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub gbm: TreeEnsemble,
    pub treeflow: TreeFlowModel,
    pub gbm_nll: f64,
    pub treeflow_nll: f64,
}

impl SeedRun {
    pub fn result(&self) -> SeedResult {
        SeedResult {
            seed: self.seed,
            gbm_nll: self.gbm_nll,
            treeflow_nll: self.treeflow_nll,
        }
    }
}

pub fn run_seed(cfg: &BenchConfig, seed: u64) -> Result<SeedRun> {
    let (train, val, test) = seed_tables(cfg, seed)?;
    let gbm = fit_gaussian_gbm(
        &train,
        &val,
        &GbmParams {
            seed,
            ..cfg.gbm.clone()
        },
    )?;
    let gbm_nll = nll_gaussian(&gbm, &test)?;
    let treeflow = TreeFlowModel::fit(
        &train,
        &val,
        &TrainConfig {
            seed,
            ..cfg.treeflow.clone()
        },
    )?;
    let treeflow_nll = treeflow.nll(&test)?;
    log::info!("seed {seed}: gbm nll {gbm_nll:.4}, treeflow nll {treeflow_nll:.4}");
    Ok(SeedRun {
        seed,
        gbm,
        treeflow,
        gbm_nll,
        treeflow_nll,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub gbm_nll: f64,
    pub treeflow_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPair<T> {
    pub gbm: T,
    pub treeflow: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub per_seed: Vec<SeedResult>,
    pub means: ModelPair<f64>,
    /// Sample standard deviations; `None` with a single seed.
    pub stds: ModelPair<Option<f64>>,
    pub analytic_floor: f64,
    pub gaussian_floor: f64,
}

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1)
        .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl BenchReport {
    pub fn from_results(per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(invalid_arg!("the benchmark needs at least one seed"));
        }
        let (gm, gs) = mean_std(&per_seed.iter().map(|r| r.gbm_nll).collect::<Vec<_>>());
        let (tm, ts) = mean_std(&per_seed.iter().map(|r| r.treeflow_nll).collect::<Vec<_>>());
        Ok(Self {
            per_seed,
            means: ModelPair {
                gbm: gm,
                treeflow: tm,
            },
            stds: ModelPair {
                gbm: gs,
                treeflow: ts,
            },
            analytic_floor: true_nll(TruthMode::Analytic),
            gaussian_floor: gaussian_floor(),
        })
    }
}

/// Runs every configured seed, spreading seeds over the available cores.
/// Each seed is deterministic on its own, so the results do not depend on the
/// number of worker threads; they are returned in seed-list order.
pub fn run_seeds(cfg: &BenchConfig) -> Result<Vec<SeedRun>> {
    if cfg.seeds.is_empty() {
        return Err(invalid_arg!("the benchmark needs at least one seed"));
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cfg.seeds.len());
    if workers == 1 {
        return cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SeedRun>>>> =
        Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = cfg.seeds.get(k) else { break };
                let run = run_seed(cfg, seed);
                slots.lock().expect("benchmark worker panicked")[k] = Some(run);
            });
        }
    });
    slots
        .into_inner()
        .expect("benchmark worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed was run"))
        .collect()
}

/// Fits both models for every seed and summarizes the test NLLs.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let runs = run_seeds(cfg)?;
    BenchReport::from_results(runs.iter().map(SeedRun::result).collect())
}

/// Writes `y, true_pdf, treeflow_pdf, gbm_pdf` on a grid for one cell.
pub fn write_pdf_csv<W: Write>(
    model: &TreeFlowModel,
    gbm: &TreeEnsemble,
    cell: (u8, u8),
    axis: GridAxis,
    out: W,
) -> Result<()> {
    let row = cell_row(cell.0, cell.1);
    let grid = model.pdf_grid(&row, &[axis])?;
    let g = gbm.predict_gaussian(&row)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["y", "true_pdf", "treeflow_pdf", "gbm_pdf"])?;
    for (y, d) in grid.points.iter().zip(&grid.densities) {
        let truth = true_logpdf(cell.0, cell.1, *y).exp();
        let gbm_pdf = (-g.nll(*y)).exp();
        w.write_record([
            y.to_string(),
            truth.to_string(),
            d.to_string(),
            gbm_pdf.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
