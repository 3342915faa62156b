use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use treeflow::gbdt::testing::best_split_for_test;
use treeflow::gbdt::{
    fit_gaussian_gbm, nll_gaussian, DecisionTree, FeatureMatrix, GbmParams, Node, SplitRule,
    TreeEnsemble,
};
use treeflow::tabular::{Cell, Column, ColumnSchema, DataTable};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn numeric_table(cols: Vec<Vec<f64>>, targets: Vec<f64>, p: usize) -> DataTable {
    let schema = (0..cols.len())
        .map(|i| ColumnSchema {
            allows_missing: true,
            ..ColumnSchema::numeric(format!("x{i}"))
        })
        .collect();
    let names = (0..p).map(|i| format!("y{i}")).collect();
    DataTable::new(
        schema,
        cols.into_iter().map(Column::Numeric).collect(),
        names,
        targets,
    )
    .unwrap()
}

pub fn gain_of(
    left: &[usize],
    right: &[usize],
    grad: &[f64],
    hess: &[f64],
    v: usize,
    lambda: f64,
) -> f64 {
    let score = |rows: &[usize]| -> f64 {
        (0..v)
            .map(|k| {
                let g: f64 = rows.iter().map(|&r| grad[r * v + k]).sum();
                let h: f64 = rows.iter().map(|&r| hess[r * v + k]).sum();
                g * g / (h + lambda)
            })
            .sum()
    };
    let all: Vec<usize> = left.iter().chain(right).copied().collect();
    score(left) + score(right) - score(&all)
}

fn partition_rows(
    x: &FeatureMatrix,
    rows: &[usize],
    f: usize,
    thr: f64,
    missing_left: bool,
) -> (Vec<usize>, Vec<usize>) {
    rows.iter().partition(|&&row| {
        let val = x.value(row, f);
        if val.is_nan() {
            missing_left
        } else {
            val <= thr
        }
    })
}

/// Every `(feature, threshold, missing direction)` split of `rows`, scored
/// directly from its row partition.
pub fn brute_force_best(
    x: &FeatureMatrix,
    grad: &[f64],
    hess: &[f64],
    v: usize,
    rows: &[usize],
    lambda: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in 0..x.n_features() {
        let mut vals: Vec<f64> = rows
            .iter()
            .map(|&r| x.value(r, f))
            .filter(|v| !v.is_nan())
            .collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            for missing_left in [true, false] {
                let (l, r) = partition_rows(x, rows, f, thr, missing_left);
                if l.is_empty() || r.is_empty() {
                    continue;
                }
                let g = gain_of(&l, &r, grad, hess, v, lambda);
                if best.is_none_or(|b| g > b) {
                    best = Some(g);
                }
            }
        }
    }
    best
}

/// Compare the split finder with exhaustive search on `cases` random tables of
/// at most 200 rows and 3 features. Returns a description of each mismatch.
pub fn split_oracle_failures(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let n = rng.gen_range(2..=200);
        let d = rng.gen_range(1..=3);
        let v = rng.gen_range(1..=2);
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| {
                let levels = rng.gen_range(2..40);
                (0..n)
                    .map(|_| {
                        if rng.gen_bool(0.1) {
                            f64::NAN
                        } else {
                            rng.gen_range(0..levels) as f64 * 0.5
                        }
                    })
                    .collect()
            })
            .collect();
        let x = FeatureMatrix::new(cols, vec![None; d]);
        let grad: Vec<f64> = (0..n * v).map(|_| rng.sample(StandardNormal)).collect();
        let hess: Vec<f64> = (0..n * v).map(|_| rng.gen_range(0.1..2.0)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let lambda = 1.0;

        let chosen = best_split_for_test(&x, &grad, &hess, v, &rows, 1, lambda);
        let oracle = brute_force_best(&x, &grad, &hess, v, &rows, lambda).filter(|g| *g > 1e-12);
        match (chosen, oracle) {
            (None, None) => {}
            (Some((f, SplitRule::Threshold { threshold }, missing_left, gain)), Some(best)) => {
                let (l, r) = partition_rows(&x, &rows, f, threshold, missing_left);
                let realized = gain_of(&l, &r, &grad, &hess, v, lambda);
                let tol = 1e-9 * best.abs().max(1.0);
                if (realized - best).abs() >= tol || (gain - best).abs() >= tol {
                    failures.push(format!("case {case}: chosen split realizes {realized} (reported {gain}), best is {best}"));
                }
            }
            (c, o) => failures.push(format!("case {case}: chosen {c:?}, oracle {o:?}")),
        }
    }
    failures
}

type PathCond = (usize, SplitRule, bool, bool);

/// Conditions along every root-to-leaf path, as `(feature, rule, missing_left, went_left)`.
pub fn leaf_paths(tree: &DecisionTree) -> Vec<(usize, Vec<PathCond>)> {
    fn walk(
        tree: &DecisionTree,
        id: usize,
        path: &mut Vec<PathCond>,
        out: &mut Vec<(usize, Vec<PathCond>)>,
    ) {
        match &tree.nodes[id] {
            Node::Leaf { leaf, .. } => out.push((*leaf, path.clone())),
            Node::Split {
                feature,
                rule,
                missing_left,
                left,
                right,
            } => {
                path.push((*feature, rule.clone(), *missing_left, true));
                walk(tree, *left, path, out);
                path.pop();
                path.push((*feature, rule.clone(), *missing_left, false));
                walk(tree, *right, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, 0, &mut Vec::new(), &mut out);
    out
}

pub fn satisfies(row: &[Cell], cond: &PathCond) -> bool {
    let (feature, rule, missing_left, went_left) = cond;
    let left = match row[*feature] {
        Cell::Missing => *missing_left,
        Cell::Numeric(v) => match rule {
            SplitRule::Threshold { threshold } => v <= *threshold,
            SplitRule::Categories { .. } => unreachable!(),
        },
        Cell::Category(c) => match rule {
            SplitRule::Categories { left } => left.contains(&c),
            SplitRule::Threshold { .. } => unreachable!(),
        },
    };
    left == *went_left
}

/// Numeric, categorical and complete columns, all but the last with missing cells.
pub fn mixed_table(n: usize, rng: &mut ChaCha8Rng) -> DataTable {
    let schema = vec![
        ColumnSchema {
            allows_missing: true,
            ..ColumnSchema::numeric("a")
        },
        ColumnSchema {
            allows_missing: true,
            ..ColumnSchema::categorical("b", ["p", "q", "r", "s"])
        },
        ColumnSchema::numeric("c"),
    ];
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let av: f64 = rng.sample(StandardNormal);
        let bv = rng.gen_range(0..4u32);
        let cv: f64 = rng.gen_range(-2.0..2.0);
        a.push(if rng.gen_bool(0.15) { f64::NAN } else { av });
        b.push(if rng.gen_bool(0.15) { None } else { Some(bv) });
        c.push(cv);
        let noise: f64 = rng.sample(StandardNormal);
        y.push(av + f64::from(bv) - cv * cv + (0.2 + 0.3 * cv.abs()) * noise);
    }
    DataTable::new(
        schema,
        vec![
            Column::Numeric(a),
            Column::Categorical(b),
            Column::Numeric(c),
        ],
        vec!["y".into()],
        y,
    )
    .unwrap()
}

/// Route `n_rows` random rows (with missing cells) through an ensemble fitted
/// on [`mixed_table`] data and check each against an enumeration of leaf
/// paths. Returns a description of each violation.
pub fn routing_failures(n_rows: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = mixed_table(600, &mut rng);
    let val = mixed_table(200, &mut rng);
    let model = fit_gaussian_gbm(
        &train,
        &val,
        &GbmParams {
            n_trees: 30,
            depth: 3,
            ..GbmParams::default()
        },
    )
    .unwrap();
    let paths: Vec<_> = model.trees.iter().map(leaf_paths).collect();
    let offsets = model.leaf_offsets();
    let mut failures = Vec::new();
    if model.n_trees() == 0 {
        failures.push("the ensemble has no trees".to_owned());
    }
    for _ in 0..n_rows {
        let row = vec![
            if rng.gen_bool(0.3) {
                Cell::Missing
            } else {
                Cell::Numeric(rng.gen_range(-3.0..3.0))
            },
            if rng.gen_bool(0.3) {
                Cell::Missing
            } else {
                Cell::Category(rng.gen_range(0..4))
            },
            Cell::Numeric(rng.gen_range(-3.0..3.0)),
        ];
        let occ = model.leaf_occurrence(&row).unwrap();
        if occ.active.len() != model.n_trees() || occ.dim != model.total_leaves() {
            failures.push(format!(
                "row {row:?}: occurrence shape {} / {}",
                occ.active.len(),
                occ.dim
            ));
            continue;
        }
        let dense = occ.to_dense();
        for (t, tree_paths) in paths.iter().enumerate() {
            let hits: Vec<usize> = tree_paths
                .iter()
                .filter(|(_, conds)| conds.iter().all(|c| satisfies(&row, c)))
                .map(|(l, _)| *l)
                .collect();
            let block: f64 = dense[offsets[t]..offsets[t] + model.trees[t].n_leaves]
                .iter()
                .sum();
            if hits.len() != 1 || occ.active[t] as usize != offsets[t] + hits[0] || block != 1.0 {
                failures.push(format!(
                    "tree {t}: row {row:?} matches leaves {hits:?}, active {}",
                    occ.active[t]
                ));
            }
        }
    }
    failures
}

pub fn truncated(model: &TreeEnsemble, k: usize) -> TreeEnsemble {
    TreeEnsemble {
        trees: model.trees[..k].to_vec(),
        ..model.clone()
    }
}

/// Train NLL after each retained iteration of a Gaussian-head fit, together
/// with the recorded training history.
pub fn gaussian_train_curve(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = mixed_table(400, &mut rng);
    let val = mixed_table(400, &mut rng);
    let params = GbmParams {
        n_trees: 60,
        depth: 2,
        learning_rate: 0.1,
        ..GbmParams::default()
    };
    let model = fit_gaussian_gbm(&train, &val, &params).unwrap();
    let curve = (0..=model.n_trees())
        .map(|k| nll_gaussian(&truncated(&model, k), &train).unwrap())
        .collect();
    (curve, model.history.train_loss.clone())
}

/// Test NLL of a default Gaussian GBM on N(0,1) targets with uninformative features.
pub fn uninformative_nll(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| {
        let cols = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let y = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        numeric_table(cols, y, 1)
    };
    let (train, val, test) = (make(5000), make(2000), make(50_000));
    let model = fit_gaussian_gbm(&train, &val, &GbmParams::default()).unwrap();
    nll_gaussian(&model, &test).unwrap()
}
