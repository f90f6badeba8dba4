//! Diversity-regularized joint vision-language tokenization at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithmic piece:
//! a small reverse-mode autodiff engine ([`autodiff`]), transformer building
//! blocks ([`nn`]), adaptive token learning over visual feature grids
//! ([`tokenizer`]), the pairwise-orthogonality penalty on attention maps
//! ([`diversity`]), the encoder-decoder QA model ([`model`]), deterministic
//! synthetic datasets ([`data`]) and the optimizer/training loop ([`train`]).
//!
//! File formats, configuration parsing and the command line live in the std
//! companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod diversity;
mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
