pub mod blob;
pub mod error;
pub mod eval;
pub mod nn;
pub mod scene;
pub mod seed;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
