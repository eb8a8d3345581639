//! Int8 multi-head self-attention for microcontroller-class memory
//! hierarchies.
//!
//! The crate provides the quantized attention kernels (input/weight-reuse
//! projections, fused score GEMM + integer softmax, value GEMM, output
//! projection and the fused-weight attention kernel), the offline weight
//! fusion and its cost model, a layer-wise and depth-first tiling planner
//! over a two-level memory, and an executor that runs those plans against a
//! simulated L1/L2 while counting transfers and MACs.

pub mod error;
pub mod exec;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{AttentionBlock, Flavor, ScorePath};
pub use tensor::{tensor_bytes, AttnDims, Layout, QuantTensor, RequantParams, TensorRole};
