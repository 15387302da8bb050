pub mod cli;
pub mod config;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod persistence;
pub mod random;
pub mod selfcheck;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
