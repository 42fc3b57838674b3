//! Pool-based active learning for low-rank adapters on a compact
//! decoder-only transformer.
//!
//! The crate covers the whole loop: a small autodiff substrate
//! ([`numerics`]), the adapted transformer ([`model`]), acquisition scores
//! ([`uncertainty`]), adapter training with decay on the `B` factors
//! ([`trainer`]), synthetic tasks with a labeling oracle ([`tasks`]), the
//! query/label/train loop ([`active_loop`]), and learning-curve metrics plus
//! calibration probes ([`metrics`]).

pub mod active_loop;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod tasks;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
