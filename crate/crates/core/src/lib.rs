//! Conditional density estimation for tabular data.
//!
//! A gradient-boosted tree ensemble turns each row into a sparse leaf
//! occurrence vector. A shallow `tanh` layer compresses it into a context for a
//! conditional continuous normalizing flow, which models `p(y | x)` for real
//! valued targets of any dimension.
//!
//! ```
//! use treeflow::synth;
//!
//! let table = synth::sample_dataset(10, 0).unwrap();
//! assert_eq!(table.n_rows(), 40);
//! ```
//!
//! See [`model::TreeFlowModel`] for the fitted model.

pub mod cnf;
pub mod error;
pub mod gbdt;
pub mod model;
pub mod ndiff;
pub mod seed;
pub mod synth;
pub mod tabular;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tabular.md")]
    pub struct Tabular;
    #[doc = include_str!("../../../book/src/trees.md")]
    pub struct Trees;
    #[doc = include_str!("../../../book/src/flows.md")]
    pub struct Flows;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    pub struct Synthetic;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
