//! Zero-sum linear attention: kernels, a small autodiff tape, a transformer
//! language model built on them, synthetic tasks and a training loop.

// index loops mirror the formulas they implement
#![allow(clippy::needless_range_loop)]
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod model;
pub mod real;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zeros;

pub use config::{AttentionConfig, Mechanism};
pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::{Graph, Tensor, Var};

/// Guide chapters, compiled so their listings run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/zero-sum-weights.md")]
    mod zero_sum_weights {}
    #[doc = include_str!("../../../book/src/logits-and-rotations.md")]
    mod logits_and_rotations {}
    #[doc = include_str!("../../../book/src/linear-scan.md")]
    mod linear_scan {}
    #[doc = include_str!("../../../book/src/zeros-sm.md")]
    mod zeros_sm {}
    #[doc = include_str!("../../../book/src/stability.md")]
    mod stability {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
