//! Post-training quantization with low-precision minifloats and integers.
//!
//! The crate provides bit-exact integer and minifloat fake-quantization
//! kernels, a small feed-forward layer graph with fake-quantized inference,
//! the usual PTQ transforms (cross-layer equalization, activation smoothing,
//! bias correction, learned rounding, GPTQ), MSE-based activation range
//! calibration, an FPGA MAC hardware cost model, and a design-space sweep
//! that emits accuracy-versus-cost Pareto frontiers.

pub mod calibrate;
pub mod data;
pub mod equalize;
pub mod error;
pub mod explore;
pub mod formats;
pub mod gptq;
pub mod graph;
pub mod hwcost;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod quantizers;
pub mod rounding;
pub mod tensor;

pub use calibrate::{CalibEntry, CalibSettings, CalibTable};
pub use error::{Error, Result};
pub use explore::{CostAxis, FormatKinds, SweepResult, SweepSpec};
pub use formats::{IntFormat, MinifloatFormat, NumericFormat};
pub use gptq::GptqSettings;
pub use graph::{GraphBuilder, LayerGraph, LayerKind, Node, SiteId, ValueRef};
pub use hwcost::{MacConfig, MacKind, RefModel};
pub use pipeline::{PreparedModel, QuantRecipe, WeightGranularity};
pub use quantizers::{Granularity, QTensor, ScalingSpec};
pub use rounding::RoundingHyper;
pub use tensor::Tensor;
