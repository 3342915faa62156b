//! Gradient-boosted regression trees used as the feature extractor.
//!
//! Two objectives are supported:
//!
//! * **Gaussian head** (single target): every tree carries a two-vector
//!   `(Δμ, Δlog σ)` per leaf, fitted by a damped Newton step on the Gaussian
//!   negative log likelihood.
//! * **MultiRMSE head** (two or more targets): every leaf carries the mean
//!   residual vector.
//!
//! Beyond point and Gaussian predictions, a trained ensemble maps a row to its
//! [`LeafOccurrence`]: the index of the leaf it lands in, for every tree.

mod boost;
mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{check_row, Cell, ColumnSchema};

pub use boost::{fit_gaussian_gbm, fit_multirmse_gbm, nll_gaussian, GbmParams};
pub use tree::{DecisionTree, FeatureMatrix, Node, SplitRule};

#[doc(hidden)]
pub mod testing {
    //! Internal hooks exposed for the split-search oracle tests.
    pub use super::tree::best_split_for_test;
}

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;
pub const LOG_SIGMA_CLAMP: f64 = 10.0;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Gaussian,
    MultiRmse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianPrediction {
    /// From raw `(μ, log σ)` accumulations, applying the log-σ clamp and σ floor.
    pub fn from_raw(mu: f64, log_sigma: f64) -> Self {
        let s = log_sigma.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
        Self {
            mu,
            sigma: s.exp().max(SIGMA_FLOOR),
        }
    }

    pub fn nll(&self, y: f64) -> f64 {
        let r = (y - self.mu) / self.sigma;
        0.5 * (2.0 * std::f64::consts::PI).ln() + self.sigma.ln() + 0.5 * r * r
    }
}

/// Active leaf per tree, encoded with global offsets into a vector of length
/// `dim = sum of leaves over trees`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafOccurrence {
    pub active: Vec<u32>,
    pub dim: usize,
}

impl LeafOccurrence {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for &a in &self.active {
            d[a as usize] = 1.0;
        }
        d
    }
}

/// Per-iteration losses recorded during boosting. Index 0 is the base
/// prediction alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Number of trees retained.
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub version: u32,
    pub head: Head,
    pub base_prediction: Vec<f64>,
    pub learning_rate: f64,
    pub schema: Vec<ColumnSchema>,
    pub trees: Vec<DecisionTree>,
    #[serde(default)]
    pub history: FitHistory,
}

impl TreeEnsemble {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Length of every value vector: 2 for the Gaussian head, P for MultiRMSE.
    pub fn value_dim(&self) -> usize {
        self.base_prediction.len()
    }

    pub fn total_leaves(&self) -> usize {
        self.trees.iter().map(|t| t.n_leaves).sum()
    }

    pub fn leaf_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.trees
            .iter()
            .map(|t| {
                let o = acc;
                acc += t.n_leaves;
                o
            })
            .collect()
    }

    /// Sum of base prediction and scaled leaf values for a row given as a
    /// feature accessor.
    pub(crate) fn raw_with(&self, x: impl Fn(usize) -> f64 + Copy) -> Vec<f64> {
        let mut out = self.base_prediction.clone();
        for t in &self.trees {
            let (_, value) = t.leaf(x);
            for (o, v) in out.iter_mut().zip(value) {
                *o += self.learning_rate * v;
            }
        }
        out
    }

    /// Raw additive prediction (μ, log σ) or the P-vector for MultiRMSE.
    pub fn predict_raw(&self, row: &[Cell]) -> Result<Vec<f64>> {
        check_row(&self.schema, row)?;
        Ok(self.raw_with(|f| row[f].as_f64()))
    }

    pub fn predict_gaussian(&self, row: &[Cell]) -> Result<GaussianPrediction> {
        if self.head != Head::Gaussian {
            return Err(Error::InvalidArgument(
                "predict_gaussian needs a Gaussian-head ensemble".into(),
            ));
        }
        let raw = self.predict_raw(row)?;
        Ok(GaussianPrediction::from_raw(raw[0], raw[1]))
    }

    pub(crate) fn occurrence_with(
        &self,
        offsets: &[usize],
        x: impl Fn(usize) -> f64 + Copy,
        out: &mut Vec<u32>,
    ) {
        out.clear();
        out.extend(
            self.trees
                .iter()
                .zip(offsets)
                .map(|(t, o)| (o + t.leaf(x).0) as u32),
        );
    }

    pub fn leaf_occurrence(&self, row: &[Cell]) -> Result<LeafOccurrence> {
        check_row(&self.schema, row)?;
        let mut active = Vec::with_capacity(self.trees.len());
        self.occurrence_with(&self.leaf_offsets(), |f| row[f].as_f64(), &mut active);
        Ok(LeafOccurrence {
            active,
            dim: self.total_leaves(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: TreeEnsemble = serde_json::from_str(s)?;
        if e.version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: e.version,
                supported: ENSEMBLE_FORMAT_VERSION,
            });
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tree(value: Vec<f64>) -> TreeEnsemble {
        let tree = DecisionTree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    rule: SplitRule::Threshold { threshold: 0.5 },
                    missing_left: true,
                    left: 1,
                    right: 2,
                },
                Node::Leaf {
                    leaf: 0,
                    value: value.clone(),
                },
                Node::Leaf {
                    leaf: 1,
                    value: vec![0.0; value.len()],
                },
            ],
            n_leaves: 2,
            depth: 1,
        };
        TreeEnsemble {
            version: ENSEMBLE_FORMAT_VERSION,
            head: Head::Gaussian,
            base_prediction: vec![0.0, 0.0],
            learning_rate: 0.1,
            schema: vec![ColumnSchema {
                allows_missing: true,
                ..ColumnSchema::numeric("x")
            }],
            trees: vec![tree],
            history: FitHistory::default(),
        }
    }

    #[test]
    fn nll_constants() {
        let p = GaussianPrediction {
            mu: 0.0,
            sigma: 1.0,
        };
        assert!((p.nll(0.0) - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((p.nll(1.0) - 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn zero_trees_gives_base() {
        let mut e = one_tree(vec![1.0, 0.0]);
        e.trees.clear();
        e.base_prediction = vec![2.0, 0.5];
        let p = e.predict_gaussian(&[Cell::Numeric(0.0)]).unwrap();
        assert_eq!(p.mu, 2.0);
        assert_eq!(p.sigma, 0.5f64.exp());
    }

    #[test]
    fn one_tree_arithmetic() {
        let e = one_tree(vec![1.0, 0.0]);
        let p = e.predict_gaussian(&[Cell::Numeric(0.0)]).unwrap();
        assert!((p.mu - 0.1).abs() < 1e-15);
        assert_eq!(p.sigma, 1.0);
        // missing follows the stored direction
        assert_eq!(e.leaf_occurrence(&[Cell::Missing]).unwrap().active, vec![0]);
        assert_eq!(
            e.leaf_occurrence(&[Cell::Numeric(3.0)]).unwrap().active,
            vec![1]
        );
        assert!(e.predict_gaussian(&[Cell::Category(0)]).is_err());
        assert!(e.leaf_occurrence(&[]).is_err());
    }

    #[test]
    fn depth_zero_occurrence() {
        let mut e = one_tree(vec![0.0, 0.0]);
        e.trees = vec![DecisionTree::stump(vec![0.0, 0.0])];
        let o = e.leaf_occurrence(&[Cell::Numeric(1.0)]).unwrap();
        assert_eq!((o.dim, o.active), (1, vec![0]));
    }

    #[test]
    fn clamp_and_floor() {
        let p = GaussianPrediction::from_raw(0.0, -50.0);
        assert_eq!(p.sigma, (-10.0f64).exp());
        let p = GaussianPrediction::from_raw(0.0, 50.0);
        assert_eq!(p.sigma, 10.0f64.exp());
    }

    #[test]
    fn json_round_trip_and_version() {
        let e = one_tree(vec![0.123_456_789_012_345_6, -1e-300]);
        let back = TreeEnsemble::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
        let mut future = e.clone();
        future.version = 99;
        assert!(matches!(
            TreeEnsemble::from_json(&future.to_json().unwrap()),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }
}
