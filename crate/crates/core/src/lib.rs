//! Tabular simulation of learning from user edits: environments, balance
//! users, regularized objectives, offline and online learners.

// `!(x > 0.0)` is used deliberately so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod harness;
pub mod metric;
pub mod objectives;
pub mod offline;
pub mod online;
pub mod rng;
pub mod spaces;
pub mod users;

pub use env::{Environment, UserEditModel};
pub use error::{Error, Result};
pub use metric::{EditMetric, MetricKind};
pub use spaces::{ContextSpace, Distribution, Item, Policy, ResponseSpace, Space};
