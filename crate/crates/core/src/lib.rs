#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod microworld;
pub mod model;
pub mod nn;
pub mod params;
pub mod reasoning;
pub mod tensor;
pub mod tokenization;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use params::{AdamW, Bound, ParamStore};
pub use tensor::Tensor;
