//! Planning and simulation toolkit for axial-parallel evoformer execution.

pub mod autochunk;
pub mod costsched;
pub mod dap;
pub mod error;
pub mod evoformer;
pub mod graphir;
pub mod tensor;

pub use error::{Error, Result};
