//! Tensors, differentiable operators, parameters and the residual blocks the
//! network is assembled from.

pub mod autograd;
pub mod blocks;
pub mod container;
pub mod ops;
pub mod params;
pub mod tensor;

pub use autograd::{backward, Gradients, Var};
pub use blocks::{BasicBlock, Block, BlockKind, BlockSpec, Cost, MobileBlock};
pub use params::{ForwardCtx, Mode, ParamId, ParamStore};
pub use tensor::Tensor;
