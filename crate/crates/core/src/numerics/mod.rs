//! Dense tensors, reverse-mode gradients, optimizers and a finite-difference
//! gradient oracle.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, ManifestEntry, FORMAT_VERSION, MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{gelu_scalar, AttentionLayout, Grads, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{ParamId, ParamStore, Parameter, INIT_STD};
pub use tensor::Tensor;
