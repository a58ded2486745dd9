//! Offline multi-task workbench: a prompting decision transformer trained on a
//! sparse-reward 2D point environment, plus a contextual-bandit prompt tuner.

pub mod error;
pub mod io;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod env;
pub mod trajectory;
pub mod pdt;
pub mod bandit;
pub mod perturb;
pub mod experiment;
