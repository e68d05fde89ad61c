pub mod adapter;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod l0;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
