//! Land-cover map super-resolution from frozen dense features and a coarse
//! label product.
//!
//! The pipeline trains a linear probe once on coarse labels, keeps the pixels
//! where probe and labels agree to form one prompt vector per class,
//! classifies every pixel by cosine similarity to the prompts, and smooths
//! the result by propagating scores over a superpixel affinity graph.

pub mod classify;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod probe;
pub mod prompts;
pub mod superpixel;
pub mod synth;
pub mod tensorio;
pub mod upsample;

pub use error::{Error, Result};
