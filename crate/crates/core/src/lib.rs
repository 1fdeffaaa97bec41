//! Step-synchronous simulator of a PLMR-style 2D-mesh wafer-scale fabric.
//!
//! Every algorithm here computes real numbers on per-core tiles and, alongside,
//! a [`report::SimReport`] with the critical-path cost of each step.

pub mod collectives;
pub mod error;
pub mod fabric;
pub mod gemm;
pub mod gemv;
pub mod kv_cache;
pub mod llm;
pub mod report;
pub mod tiles;

pub use error::{Error, Result};
pub use fabric::{Axis, CoreCoord, PlmrConfig};
pub use report::SimReport;
pub use tiles::{GridShape, Matrix};
