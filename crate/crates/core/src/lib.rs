//! Experiment metric computation over bit-sliced indexes.
//!
//! The crate is `no_std` (it needs `alloc`). Enable `std` for `std::error::Error`
//! integration and `parallel` to run per-segment work on rayon.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bitmap;
pub mod bsi;
pub mod codec;
pub mod engine;
pub mod error;
pub mod model;
pub mod stats;

pub use bitmap::Bitmap;
pub use bsi::{AggFn, BinaryBsi, Bsi, BsiError, CmpMode, CmpOp};
pub use codec::{CodecError, NormalRows};
pub use error::FormatError;
pub use model::{Catalog, Date, HashConfig, MetricId, ModelError, PositionEncoder, StrategyId};
