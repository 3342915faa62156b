//! Regression trees grown level-wise on per-row gradient/hessian vectors.

use serde::{Deserialize, Serialize};

/// Column-major feature storage used during training. Missing cells are `NaN`;
/// categorical cells hold the category id.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub(crate) columns: Vec<Vec<f64>>,
    /// `Some(cardinality)` for categorical features.
    pub(crate) categorical: Vec<Option<usize>>,
    pub(crate) n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<Vec<f64>>, categorical: Vec<Option<usize>>) -> Self {
        let n_rows = columns.first().map_or(0, Vec::len);
        assert_eq!(columns.len(), categorical.len());
        assert!(columns.iter().all(|c| c.len() == n_rows));
        Self {
            columns,
            categorical,
            n_rows,
        }
    }

    pub fn from_table(table: &crate::tabular::DataTable) -> Self {
        let columns = (0..table.n_features())
            .map(|c| {
                (0..table.n_rows())
                    .map(|r| table.cell(r, c).as_f64())
                    .collect()
            })
            .collect();
        let categorical = table.schema().iter().map(|c| c.cardinality()).collect();
        let mut m = Self::new(columns, categorical);
        m.n_rows = table.n_rows();
        m
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Threshold { threshold: f64 },
    /// Categories in the (sorted) set go left; all others go right.
    Categories { left: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        rule: SplitRule,
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
        value: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_leaves: usize,
    pub depth: usize,
}

impl DecisionTree {
    /// A tree with a single leaf.
    pub fn stump(value: Vec<f64>) -> Self {
        Self {
            nodes: vec![Node::Leaf { leaf: 0, value }],
            n_leaves: 1,
            depth: 0,
        }
    }

    /// Node id of the leaf reached by a row whose feature `f` has value `x(f)`.
    #[inline]
    pub fn route(&self, x: impl Fn(usize) -> f64) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split {
                    feature,
                    rule,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = x(*feature);
                    let go_left = if v.is_nan() {
                        *missing_left
                    } else {
                        match rule {
                            SplitRule::Threshold { threshold } => v <= *threshold,
                            SplitRule::Categories { left } => {
                                left.binary_search(&(v as u32)).is_ok()
                            }
                        }
                    };
                    id = if go_left { *left } else { *right };
                }
            }
        }
    }

    /// Leaf index (0-based within the tree) and leaf value for a row.
    #[inline]
    pub fn leaf(&self, x: impl Fn(usize) -> f64) -> (usize, &[f64]) {
        match &self.nodes[self.route(x)] {
            Node::Leaf { leaf, value } => (*leaf, value),
            Node::Split { .. } => unreachable!("route always ends at a leaf"),
        }
    }
}

/// Gradient and hessian sums of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Stats {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub n: usize,
}

impl Stats {
    pub fn zeros(v: usize) -> Self {
        Self {
            g: vec![0.0; v],
            h: vec![0.0; v],
            n: 0,
        }
    }

    #[inline]
    pub fn add_row(&mut self, grad: &[f64], hess: &[f64], row: usize) {
        let v = self.g.len();
        for k in 0..v {
            self.g[k] += grad[row * v + k];
            self.h[k] += hess[row * v + k];
        }
        self.n += 1;
    }

    pub fn add(&mut self, other: &Stats) {
        for k in 0..self.g.len() {
            self.g[k] += other.g[k];
            self.h[k] += other.h[k];
        }
        self.n += other.n;
    }

    pub fn sub(&self, other: &Stats) -> Stats {
        Stats {
            g: self.g.iter().zip(&other.g).map(|(a, b)| a - b).collect(),
            h: self.h.iter().zip(&other.h).map(|(a, b)| a - b).collect(),
            n: self.n - other.n,
        }
    }

    /// `sum_k G_k^2 / (H_k + lambda)`.
    pub fn score(&self, lambda: f64) -> f64 {
        self.g
            .iter()
            .zip(&self.h)
            .map(|(g, h)| g * g / (h + lambda))
            .sum()
    }

    pub fn leaf_value(&self, lambda: f64) -> Vec<f64> {
        self.g
            .iter()
            .zip(&self.h)
            .map(|(g, h)| {
                if h + lambda > 0.0 {
                    -g / (h + lambda)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SplitCandidate {
    pub feature: usize,
    pub rule: SplitRule,
    pub missing_left: bool,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    pub depth: usize,
    pub min_samples_leaf: usize,
    pub lambda: f64,
}

struct Best {
    cand: Option<SplitCandidate>,
}

impl Best {
    fn offer(&mut self, gain: f64, make: impl FnOnce() -> SplitCandidate) {
        if gain > 1e-12 && self.cand.as_ref().is_none_or(|c| gain > c.gain) {
            self.cand = Some(make());
        }
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

/// Exact greedy search for the best split of `rows`. Ties keep the earliest
/// candidate in (feature, threshold, missing-left-first) order.
pub(crate) fn best_split(
    x: &FeatureMatrix,
    grad: &[f64],
    hess: &[f64],
    v: usize,
    rows: &[usize],
    params: &GrowParams,
) -> Option<SplitCandidate> {
    let lambda = params.lambda;
    let min_leaf = params.min_samples_leaf.max(1);
    let mut parent = Stats::zeros(v);
    for &r in rows {
        parent.add_row(grad, hess, r);
    }
    let parent_score = parent.score(lambda);
    let mut best = Best { cand: None };

    let mut evaluate = |left: &Stats,
                        right: &Stats,
                        missing: &Stats,
                        feature: usize,
                        rule: &dyn Fn() -> SplitRule| {
        for missing_left in [true, false] {
            let (mut l, mut r) = (left.clone(), right.clone());
            if missing_left {
                l.add(missing);
            } else {
                r.add(missing);
            }
            if l.n < min_leaf || r.n < min_leaf {
                continue;
            }
            let gain = l.score(lambda) + r.score(lambda) - parent_score;
            best.offer(gain, || SplitCandidate {
                feature,
                rule: rule(),
                missing_left,
                gain,
            });
        }
    };

    for feature in 0..x.n_features() {
        let col = &x.columns[feature];
        let mut missing = Stats::zeros(v);
        let mut present: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for &r in rows {
            if col[r].is_nan() {
                missing.add_row(grad, hess, r);
            } else {
                present.push((col[r], r));
            }
        }
        let total_present = parent.sub(&missing);
        match x.categorical[feature] {
            None => {
                present.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut left = Stats::zeros(v);
                for i in 0..present.len().saturating_sub(1) {
                    left.add_row(grad, hess, present[i].1);
                    let (a, b) = (present[i].0, present[i + 1].0);
                    if a == b {
                        continue;
                    }
                    let right = total_present.sub(&left);
                    let threshold = midpoint(a, b);
                    evaluate(&left, &right, &missing, feature, &|| SplitRule::Threshold {
                        threshold,
                    });
                }
            }
            Some(cardinality) => {
                let mut per_cat: Vec<Stats> = vec![Stats::zeros(v); cardinality];
                for &(val, r) in &present {
                    per_cat[val as usize].add_row(grad, hess, r);
                }
                let mut order: Vec<usize> =
                    (0..cardinality).filter(|&c| per_cat[c].n > 0).collect();
                order.sort_by(|&a, &b| {
                    let ma = per_cat[a].g[0] / per_cat[a].n as f64;
                    let mb = per_cat[b].g[0] / per_cat[b].n as f64;
                    ma.total_cmp(&mb).then(a.cmp(&b))
                });
                let mut left = Stats::zeros(v);
                for k in 0..order.len().saturating_sub(1) {
                    left.add(&per_cat[order[k]]);
                    let right = total_present.sub(&left);
                    let prefix = &order[..=k];
                    evaluate(&left, &right, &missing, feature, &|| {
                        let mut set: Vec<u32> = prefix.iter().map(|&c| c as u32).collect();
                        set.sort_unstable();
                        SplitRule::Categories { left: set }
                    });
                }
            }
        }
    }
    best.cand
}

/// Best split of `rows` as `(feature, rule, missing_left, gain)`.
pub fn best_split_for_test(
    x: &FeatureMatrix,
    grad: &[f64],
    hess: &[f64],
    v: usize,
    rows: &[usize],
    min_samples_leaf: usize,
    lambda: f64,
) -> Option<(usize, SplitRule, bool, f64)> {
    let params = GrowParams {
        depth: 1,
        min_samples_leaf,
        lambda,
    };
    best_split(x, grad, hess, v, rows, &params).map(|c| (c.feature, c.rule, c.missing_left, c.gain))
}

fn goes_left(x: &FeatureMatrix, row: usize, cand: &SplitCandidate) -> bool {
    let v = x.value(row, cand.feature);
    if v.is_nan() {
        return cand.missing_left;
    }
    match &cand.rule {
        SplitRule::Threshold { threshold } => v <= *threshold,
        SplitRule::Categories { left } => left.binary_search(&(v as u32)).is_ok(),
    }
}

/// Grow one tree level by level. Leaf values are `-G / (H + lambda)` per
/// coordinate over the rows reaching the leaf.
pub(crate) fn grow_tree(
    x: &FeatureMatrix,
    grad: &[f64],
    hess: &[f64],
    v: usize,
    rows: Vec<usize>,
    params: &GrowParams,
) -> DecisionTree {
    enum Slot {
        Open(Vec<usize>),
        Split {
            feature: usize,
            rule: SplitRule,
            missing_left: bool,
            left: usize,
            right: usize,
        },
    }
    let mut slots = vec![Slot::Open(rows)];
    let mut frontier = vec![0usize];
    let mut depth = 0;
    for _ in 0..params.depth {
        let mut next = Vec::new();
        for &id in &frontier {
            let Slot::Open(rows) = &slots[id] else {
                unreachable!()
            };
            let Some(cand) = best_split(x, grad, hess, v, rows, params) else {
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&row| goes_left(x, row, &cand));
            let (left, right) = (slots.len(), slots.len() + 1);
            slots.push(Slot::Open(l));
            slots.push(Slot::Open(r));
            slots[id] = Slot::Split {
                feature: cand.feature,
                rule: cand.rule,
                missing_left: cand.missing_left,
                left,
                right,
            };
            next.push(left);
            next.push(right);
        }
        if next.is_empty() {
            break;
        }
        depth += 1;
        frontier = next;
    }

    let mut n_leaves = 0;
    let nodes = slots
        .into_iter()
        .map(|slot| match slot {
            Slot::Split {
                feature,
                rule,
                missing_left,
                left,
                right,
            } => Node::Split {
                feature,
                rule,
                missing_left,
                left,
                right,
            },
            Slot::Open(rows) => {
                let mut s = Stats::zeros(v);
                for r in rows {
                    s.add_row(grad, hess, r);
                }
                n_leaves += 1;
                Node::Leaf {
                    leaf: n_leaves - 1,
                    value: s.leaf_value(params.lambda),
                }
            }
        })
        .collect();
    DecisionTree {
        nodes,
        n_leaves,
        depth,
    }
}
