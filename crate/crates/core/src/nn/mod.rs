//! Reverse-mode autodiff and the unmixing network.

mod attention;
mod checkpoint;
mod conv;
mod fastmath;
mod gemm;
mod graph;
pub mod model;
mod ops;
mod tensor;

pub use attention::{for_each_spatial_row, for_each_temporal_row};
pub use checkpoint::{load_checkpoint, save_checkpoint, ARCH_FILE, CHECKPOINT_FILE, CHECKPOINT_VERSION};
pub use conv::BN_EPS;
pub use graph::{Gradients, Graph, Var};
pub use model::{
    infer, ArchitectureConfig, AttentionKind, Bound, CemMode, DataDims, ForwardOutput, ModelParameters,
    ModuleSwitches, Prediction,
};
pub use tensor::Tensor;
