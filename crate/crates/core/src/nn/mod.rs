//! Numeric substrate: tensors, a reverse-mode tape, layers, losses, the Adam
//! optimizer, gradient checking and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
mod store;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};
pub use layers::{affine, attention_encode, AttentionEncoder, EncoderConfig};
pub use loss::softmax_cross_entropy;
pub use store::ParamStore;
pub use tensor::{dot, Tensor};
