//! Censoring-unbiased transformations and heterogeneous treatment effect
//! learners for right-censored and competing-risks data.

pub mod crossfit;
pub mod error;
pub mod learners;
pub mod metrics;
pub mod nuisance;
mod par;
pub mod simgen;
pub mod survival;
pub mod transforms;

pub use error::{Error, Result};
