//! Unsupervised and supervised 3D pose transfer between unaligned meshes:
//! a small reverse-mode autodiff engine, the generator network with optimal
//! transport correspondence, contrastive losses, evaluation metrics, a
//! synthetic articulated-mesh generator and the training loops.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Graph, OpKind, Var};
pub use error::{Error, Result};
pub use mesh::{Mesh, Permutation};
pub use network::{GeneratorParams, ModelDims, OtConfig};
pub use optim::{AdamState, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{Mode, Trainer, TrainingConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Params32 = GeneratorParams<f32>;
pub type Params64 = GeneratorParams<f64>;
