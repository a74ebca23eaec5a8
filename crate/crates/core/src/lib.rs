//! A desk-scale neural module network engine for compositional question
//! answering over annotated text passages.
//!
//! The pipeline: questions are parsed by a grammar-constrained attention
//! decoder into typed programs of differentiable modules, which execute
//! against a passage's token encodings and its extracted number/date
//! supports. Everything is trained end to end from answer supervision plus
//! auxiliary losses, on a synthetic corpus built by [`data`].

pub mod annotate;
pub mod data;
pub mod dist;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod modules;
pub mod params;
pub mod program;
pub mod tensor;
pub mod train;

pub use error::{ModelError, Result};
