//! Multiple instance learning with attention pooling and a progressive,
//! attention-ranked instance dropout layer.
//!
//! Modules, bottom up:
//!
//! * [`numerics`]: matrices, seeded RNG streams, softmax, gradient checking
//! * [`pdl`]: the progressive dropout layer and its epoch scheduler
//! * [`baselines`]: vanilla, spatial, DropInstance and attention dropout
//! * [`data`]: bags, synthetic generator, CSV loader, stratified folds
//! * [`model`]: projector, attention aggregators, forward/backward
//! * [`io`]: parameter save/load
//! * [`train`]: optimizer loop, metrics, cross-validation runner

pub mod baselines;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pdl;
pub mod train;

pub use error::{MilError, Result};
