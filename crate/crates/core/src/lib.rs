//! Attention with query-value interactions (QVI) built on a small
//! reverse-mode autodiff core, plus the models, data pipeline and training
//! loop used to exercise it.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, Mask, Tensor, Var};
