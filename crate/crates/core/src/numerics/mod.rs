//! Dense tensors, reverse-mode differentiation and the layers built on them.

pub mod attention;
pub mod checkpoint;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::multi_head_attention;
pub use checkpoint::Checkpoint;
pub use float::{cast, DType, Float};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{LayerNorm, Linear, LoraLinear, Mlp};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{ComplexTensor, Tensor};
