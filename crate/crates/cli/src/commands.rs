use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use treeflow::model::{GridAxis, TreeFlowModel};
use treeflow::seed::derive_seed;
use treeflow::synth::{self, BenchConfig, BenchReport};
use treeflow::tabular::{
    holdout_indices, kfold_indices, load_csv, read_feature_rows, DataTable, SplitManifest,
};

use crate::config::{DataSource, RunConfig, SplitSpec};
use crate::error::{config_err, input_err, CliResult};

/// Metrics of one trained fold. NLLs are per row, in original target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub dataset: String,
    pub seed: u64,
    pub fold: usize,
    pub nll_train: f64,
    pub nll_val: f64,
    pub nll_test: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfoldMetrics {
    pub dataset: String,
    pub seed: u64,
    pub folds: Vec<FoldMetrics>,
    pub nll_test_mean: f64,
    /// Sample standard deviation over folds; `None` with a single fold.
    pub nll_test_std: Option<f64>,
}

/// Split manifest file written next to the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub dataset: String,
    pub seed: u64,
    pub n_rows: usize,
    pub folds: Vec<SplitManifest>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1)
        .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Load the configured dataset. Synthetic data comes with its fixed split.
fn load_dataset(cfg: &RunConfig) -> CliResult<(String, DataTable, Option<SplitManifest>)> {
    match cfg.data()? {
        DataSource::Path(path) => {
            let targets: Vec<&str> = cfg.target_columns.iter().map(String::as_str).collect();
            let table = load_csv(path, None, &targets)?;
            let name = path
                .file_stem()
                .map_or_else(|| "data".to_owned(), |s| s.to_string_lossy().into_owned());
            Ok((name, table, None))
        }
        DataSource::Synthetic(s) => {
            let data_seed = derive_seed(cfg.seed, "data", 0);
            log::info!("synthetic data seed {data_seed}");
            let bench = BenchConfig {
                n_train_per_cell: s.n_train_per_cell,
                n_val_per_cell: s.n_val_per_cell,
                n_test_per_cell: s.n_test_per_cell,
                ..BenchConfig::default()
            };
            let (train, val, test) = synth::seed_tables(&bench, data_seed)?;
            let (a, b, c) = (train.n_rows(), val.n_rows(), test.n_rows());
            let table = DataTable::concat(&[&train, &val, &test])?;
            let manifest = SplitManifest {
                seed: data_seed,
                fold: 0,
                train_idx: (0..a).collect(),
                val_idx: (a..a + b).collect(),
                test_idx: (a + b..a + b + c).collect(),
            };
            Ok(("synthetic".to_owned(), table, Some(manifest)))
        }
    }
}

fn fold_model_path(dir: &Path, n_folds: usize, fold: usize) -> PathBuf {
    if n_folds == 1 {
        dir.join("model.json")
    } else {
        dir.join(format!("fold_{fold:02}")).join("model.json")
    }
}

fn score(model: &TreeFlowModel, table: &DataTable, m: &SplitManifest) -> CliResult<[f64; 3]> {
    let (train, val, test) = m.apply(table)?;
    Ok([model.nll(&train)?, model.nll(&val)?, model.nll(&test)?])
}

fn print_summary(folds: &[FoldMetrics]) {
    for f in folds {
        println!("fold {}: nll_test {:.4}", f.fold, f.nll_test);
    }
    let (mean, std) = mean_std(&folds.iter().map(|f| f.nll_test).collect::<Vec<_>>());
    match std {
        Some(s) => println!("nll_test: {mean:.2} ± {s:.2}"),
        None => println!("nll_test: {mean:.2}"),
    }
}

fn write_metrics(dir: &Path, dataset: &str, seed: u64, folds: Vec<FoldMetrics>) -> CliResult<()> {
    if folds.len() == 1 {
        return write_json(&dir.join("metrics.json"), &folds[0]);
    }
    let (nll_test_mean, nll_test_std) =
        mean_std(&folds.iter().map(|f| f.nll_test).collect::<Vec<_>>());
    write_json(
        &dir.join("metrics.json"),
        &KfoldMetrics {
            dataset: dataset.to_owned(),
            seed,
            folds,
            nll_test_mean,
            nll_test_std,
        },
    )
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate_train()?;
    let (dataset, table, fixed) = load_dataset(cfg)?;
    let split_seed = derive_seed(cfg.seed, "split", 0);
    let manifests = match (fixed, &cfg.split) {
        (Some(m), _) => vec![m],
        (
            None,
            SplitSpec::Holdout {
                test_fraction,
                val_fraction,
            },
        ) => {
            vec![holdout_indices(
                table.n_rows(),
                *test_fraction,
                *val_fraction,
                split_seed,
            )?]
        }
        (
            None,
            SplitSpec::Kfold {
                folds,
                test_fraction,
                val_fraction,
            },
        ) => kfold_indices(
            table.n_rows(),
            *folds,
            *test_fraction,
            *val_fraction,
            split_seed,
        )?,
    };
    let n_folds = manifests.len();
    log::info!(
        "dataset {dataset}: {} rows, {n_folds} fold(s), split seed {split_seed}",
        table.n_rows()
    );

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(
        &dir.join("split.json"),
        &SplitFile {
            dataset: dataset.clone(),
            seed: cfg.seed,
            n_rows: table.n_rows(),
            folds: manifests.clone(),
        },
    )?;

    let results: Vec<CliResult<FoldMetrics>> = manifests
        .par_iter()
        .map(|m| {
            let start = Instant::now();
            let model_seed = derive_seed(cfg.seed, "model", m.fold as u64);
            log::info!("fold {}: model seed {model_seed}", m.fold);
            let (train, val, _) = m.apply(&table)?;
            let model = TreeFlowModel::fit(&train, &val, &cfg.train_config(model_seed))?;
            let [nll_train, nll_val, nll_test] = score(&model, &table, m)?;
            let path = fold_model_path(dir, n_folds, m.fold);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            model.save(&path)?;
            let metrics = FoldMetrics {
                dataset: dataset.clone(),
                seed: cfg.seed,
                fold: m.fold,
                nll_train,
                nll_val,
                nll_test,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            if n_folds > 1 {
                write_json(&path.with_file_name("metrics.json"), &metrics)?;
            }
            Ok(metrics)
        })
        .collect();
    let folds = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    print_summary(&folds);
    write_metrics(dir, &dataset, cfg.seed, folds)
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub manifest: &'a Path,
    pub data: Option<&'a Path>,
    pub config: Option<&'a RunConfig>,
    pub output: Option<&'a Path>,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let text = fs::read_to_string(args.manifest)?;
    let split: SplitFile = serde_json::from_str(&text)
        .map_err(|e| input_err!("invalid split manifest {}: {e}", args.manifest.display()))?;
    if split.folds.is_empty() {
        return Err(input_err!("split manifest lists no folds"));
    }
    let n_folds = split.folds.len();
    let model_path = |fold: usize| -> CliResult<PathBuf> {
        if args.model.is_dir() {
            Ok(fold_model_path(args.model, n_folds, fold))
        } else if n_folds == 1 {
            Ok(args.model.to_path_buf())
        } else {
            Err(config_err!(
                "a {n_folds}-fold manifest needs the run directory as --model"
            ))
        }
    };

    let first = TreeFlowModel::load(model_path(split.folds[0].fold)?)?;
    let table = match (args.data, args.config) {
        (Some(path), _) => {
            let targets: Vec<&str> = first.target_names().iter().map(String::as_str).collect();
            load_csv(path, Some(first.schema()), &targets)?
        }
        (None, Some(cfg)) => load_dataset(cfg)?.1,
        (None, None) => return Err(config_err!("eval needs --data or --config")),
    };
    if table.n_rows() != split.n_rows {
        return Err(input_err!(
            "manifest/data mismatch: manifest covers {} rows, data has {}",
            split.n_rows,
            table.n_rows()
        ));
    }
    for m in &split.folds {
        if let Some(bad) = m
            .train_idx
            .iter()
            .chain(&m.val_idx)
            .chain(&m.test_idx)
            .find(|&&i| i >= table.n_rows())
        {
            return Err(input_err!(
                "manifest/data mismatch: fold {} index {bad} is out of range",
                m.fold
            ));
        }
    }

    let mut folds = Vec::with_capacity(n_folds);
    for (k, m) in split.folds.iter().enumerate() {
        let start = Instant::now();
        let model = if k == 0 {
            first.clone()
        } else {
            TreeFlowModel::load(model_path(m.fold)?)?
        };
        if model.schema() != table.schema() || model.target_names() != table.target_names() {
            return Err(input_err!(
                "manifest/data mismatch: fold {} model schema differs from the data",
                m.fold
            ));
        }
        let [nll_train, nll_val, nll_test] = score(&model, &table, m)?;
        folds.push(FoldMetrics {
            dataset: split.dataset.clone(),
            seed: split.seed,
            fold: m.fold,
            nll_train,
            nll_val,
            nll_test,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }
    print_summary(&folds);
    if let Some(out) = args.output {
        if folds.len() == 1 {
            write_json(out, &folds[0])?;
        } else {
            let (nll_test_mean, nll_test_std) =
                mean_std(&folds.iter().map(|f| f.nll_test).collect::<Vec<_>>());
            write_json(
                out,
                &KfoldMetrics {
                    dataset: split.dataset,
                    seed: split.seed,
                    folds,
                    nll_test_mean,
                    nll_test_std,
                },
            )?;
        }
    }
    Ok(())
}

fn output_writer(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn read_rows(model: &TreeFlowModel, input: &Path) -> CliResult<Vec<Vec<treeflow::tabular::Cell>>> {
    let file = fs::File::open(input)?;
    Ok(read_feature_rows(file, model.schema())?)
}

/// Draw `n` samples per input row. Row `r` uses a seed derived from `(seed, r)`.
pub fn sample(
    model_path: &Path,
    input: &Path,
    n: usize,
    seed: u64,
    output: Option<&Path>,
) -> CliResult<()> {
    let model = TreeFlowModel::load(model_path)?;
    let rows = read_rows(&model, input)?;
    let p = model.n_targets();
    let mut wtr = csv::Writer::from_writer(output_writer(output)?);
    let header: Vec<&str> = std::iter::once("row")
        .chain(model.target_names().iter().map(String::as_str))
        .collect();
    wtr.write_record(&header)?;
    for (r, row) in rows.iter().enumerate() {
        let draws = model.sample(row, n, derive_seed(seed, "sample", r as u64))?;
        for s in draws.chunks(p) {
            let record: Vec<String> = std::iter::once(r.to_string())
                .chain(s.iter().map(|v| format!("{v:?}")))
                .collect();
            wtr.write_record(&record)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Parse a `lo:hi:n` grid axis.
pub fn parse_axis(spec: &str) -> CliResult<GridAxis> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || config_err!("grid axis '{spec}' is not of the form lo:hi:n");
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    Ok(GridAxis::new(lo, hi, n))
}

/// Density of the model on a regular grid, for one input row.
pub fn pdf(
    model_path: &Path,
    input: &Path,
    row: usize,
    axes: &[GridAxis],
    output: Option<&Path>,
) -> CliResult<()> {
    let model = TreeFlowModel::load(model_path)?;
    let rows = read_rows(&model, input)?;
    let features = rows
        .get(row)
        .ok_or_else(|| config_err!("input has {} rows; row {row} does not exist", rows.len()))?;
    let grid = model.pdf_grid(features, axes)?;
    let d = axes.len();
    let mut wtr = csv::Writer::from_writer(output_writer(output)?);
    let header: Vec<&str> = model
        .target_names()
        .iter()
        .map(String::as_str)
        .chain(std::iter::once("density"))
        .collect();
    wtr.write_record(&header)?;
    for (point, density) in grid.points.chunks(d).zip(&grid.densities) {
        let record: Vec<String> = point
            .iter()
            .chain(std::iter::once(density))
            .map(|v| format!("{v:?}"))
            .collect();
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Run the synthetic benchmark; write the report and per-cell density CSVs.
pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate_synth()?;
    let b = &cfg.benchmark;
    let seeds: Vec<u64> = (0..b.n_seeds as u64)
        .map(|k| derive_seed(cfg.seed, "repetition", k))
        .collect();
    log::info!("benchmark seeds {seeds:?}");
    let bench = BenchConfig {
        seeds,
        n_train_per_cell: b.n_train_per_cell,
        n_val_per_cell: b.n_val_per_cell,
        n_test_per_cell: b.n_test_per_cell,
        treeflow: cfg.model.clone(),
        gbm: b.gbm.clone(),
    };
    let runs = synth::run_seeds(&bench)?;
    let report = BenchReport::from_results(runs.iter().map(|r| r.result()).collect())?;

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    let axis = GridAxis::new(b.pdf_lo, b.pdf_hi, b.pdf_points);
    for &(x1, x2) in &synth::CELLS {
        let file = fs::File::create(dir.join(format!("pdf_cell_{x1}{x2}.csv")))?;
        synth::write_pdf_csv(
            &runs[0].treeflow,
            &runs[0].gbm,
            (x1, x2),
            axis,
            std::io::BufWriter::new(file),
        )?;
    }
    let fmt = |m: f64, s: Option<f64>| s.map_or(format!("{m:.2}"), |s| format!("{m:.2} ± {s:.2}"));
    println!("gbm nll: {}", fmt(report.means.gbm, report.stds.gbm));
    println!(
        "treeflow nll: {}",
        fmt(report.means.treeflow, report.stds.treeflow)
    );
    println!("analytic floor: {:.4}", report.analytic_floor);
    Ok(())
}
