//! Multivariate time-series imputation with axis-factored attention.
//!
//! The crate implements a complete desk-scale imputation stack: a reverse-mode
//! autodiff engine on dense f64 tensors, an embedding layer with learnable
//! per-feature identity vectors, an encoder that interleaves temporal and
//! cross-feature attention, masked training with artificial corruption, naive
//! baselines, structure diagnostics, and file/CLI plumbing.

// training allocates and frees large activation buffers every step; the
// default glibc allocator returns them to the kernel each time, which costs
// a page-fault storm per pass
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod adam;
pub mod analysis;
pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod gradcheck;
pub mod missingness;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
