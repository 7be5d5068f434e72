//! GFlowNet-learned dropout for small feed-forward classifiers.

// `!(x > 0.0)` style checks reject NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod metrics;
pub mod numeric;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod perceptron;
pub mod policy;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
