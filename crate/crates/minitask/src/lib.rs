//! Multitask sentence-pair fine-tuning on a miniature transformer encoder,
//! with gradient-surgery optimization, a semi-supervised adversarial
//! extension, and the analysis tooling (label-masking sweeps, significance
//! tests, t-SNE) used to study them.
//!
//! Everything is f64 and deterministic: every stochastic operation draws
//! from an explicit, domain-tagged stream of a counter-based RNG, so a fixed
//! seed reproduces runs bit for bit. The numeric core is pure Rust; with the
//! default `parallel` feature, hot kernels fan rows out across threads while
//! keeping bitwise-identical results to the sequential fallback.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod kernels;
pub mod gan;
pub mod report;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod train;
pub mod tsne;

pub use autodiff::{finite_diff_check, finite_diff_check_params, Graph, Params, Var};
pub use error::{Error, Result};
pub use rng::RunRng;
pub use tensor::Tensor;
