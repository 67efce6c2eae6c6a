//! Self-distillation with behavior dropping for attention-based news
//! recommenders, and the cold-user fairness protocol used to evaluate it.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use error::{Error, Result};
