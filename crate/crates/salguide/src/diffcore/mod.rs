//! Reverse-mode differentiation engine over dense f64 tensors.
//!
//! Gradients are built out of the same primitive operations they
//! differentiate, so a backward pass with `create_graph` yields tensors that
//! can be differentiated again (needed for training through Grad-CAM
//! weights, which are themselves gradients).

mod backward;
mod nn;
mod tensor;


pub use backward::{backward, GradientMap};
pub use nn::{conv2d, dropout, global_avg_pool, linear, maxpool2, reduce, softmax2, Reduction};
pub use tensor::{Tensor, TensorId};
