//! Test-time adaptation of batch-normalization statistics.
//!
//! The crate carries everything needed to run the method end to end at
//! desk scale: a small `f64` CNN with explicit forward/backward passes
//! ([`model`], [`layers`]), batch-norm statistics and their update rules
//! ([`bn`], [`adapt`]), a distribution-shift lab of datasets, corruptions
//! and augmentations ([`shiftlab`]), and brute-force references
//! ([`oracle`]).

pub mod adapt;
pub mod bn;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod shiftlab;
pub mod tensor;

pub use adapt::{dua_adapt_step, fixed_momentum_adapt_step, norm_recompute, AdaptConfig};
pub use bn::{BatchNormState, MomentumSchedule, StatsTiming};
pub use error::{Error, Result};
pub use model::{AdaptPass, Layer, LayerMask, Mode, Model, Sgd};
pub use rng::Rng;
pub use tensor::Tensor;
