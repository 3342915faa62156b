//! Oracles shared by the test suites and the acceptance run.
#![allow(dead_code)]

pub mod flow;
pub mod trees;
