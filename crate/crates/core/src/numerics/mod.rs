//! Dense 64-bit numerics with reverse-mode differentiation.

pub mod checkpoint;
pub mod dropout;
pub mod funcs;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use dropout::Dropout;
pub use mlp::{Activation, Mlp};
pub use optim::{Adam, AdamConfig};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Segments, Tape, Var};
pub use tensor::Tensor2;
