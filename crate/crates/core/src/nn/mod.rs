//! Dense tensors, parameter storage, the block semantics encoder and the
//! finite-difference gradient checker.

pub mod encoder;
pub mod gradcheck;
pub mod gru;
pub mod ops;
pub mod params;
pub mod tensor;

pub use encoder::{encode, encode_backward, EncoderCache, EncoderParams, PoolMode, TokenBatch};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::Activation;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Precision, Tensor};
