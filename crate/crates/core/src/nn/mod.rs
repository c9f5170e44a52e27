//! Tensors, reverse-mode autodiff, split MLPs and the base losses.

mod model;
mod ops;
mod tape;
mod tensor;

pub use model::{sgd_step, Layer, Linear, MlpSpec, SplitModel};
pub use ops::{cross_entropy, kl_div, log_softmax_t, mse, softmax_t, LabelBatch};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use ops::check_temperature;
