//! File-backed storage, TSV ingest, synthetic data, benchmarks and the
//! command-line interface on top of `bsimetrics-core`.

pub mod bench;
pub mod cli;
pub mod generate;
pub mod ingest;
pub mod inspect;
pub mod report;
pub mod store;

pub use bsimetrics_core as core;
pub use store::{Partition, SegmentBlock, Store, StoreError};
