//! Profile-guided augmentation and distribution-shaping training for
//! collaborative-filtering recommenders.

pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod formats;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rerank;
pub mod retrieval;
pub mod seed;
pub mod shaping;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
