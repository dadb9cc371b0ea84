//! Tensor substrate: shapes, resampling, convolution, seeded RNG, and the
//! reverse-mode tape every trainable operation runs on.

pub mod conv;
pub mod gradcheck;
pub mod linalg;
pub mod resample;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use conv::ConvSpec;
pub use gradcheck::grad_check;
pub use resample::{resize_down, resize_up};
pub use rng::Rng;
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;
