//! Universal adversarial perturbation crafting with dynamic maximin optimization.
//!
//! The crate bundles a small reverse-mode autodiff engine, a model zoo of
//! compact MLPs/CNNs, dataset loaders, the inner optimizers, the crafting loop
//! and an evaluation harness. The `uapforge` binary drives all of it from one
//! JSON config.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod real;
pub mod tensor;

pub use attack::{craft, craft_observed, schedule, AttackConfig, CraftOutput, EpochSchedule, Order, RunLog, UapState};
pub use data::Dataset;
pub use error::{Error, Result};
pub use eval::{fooling_ratio, transfer_matrix, FoolingReport, TransferMatrix};
pub use model::{ModelSpec, ModelState};
pub use real::{DType, Real};
pub use tensor::{AnyTensor, Tensor};

/// Derives an independent seed for the named component from the top-level seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(name.as_bytes());
    tensor::fnv1a64(&bytes)
}
