//! Minimal NHWC layers with hand-written backward passes.

mod conv;
mod ops;

pub use conv::{Conv2d, ConvCache, ConvGeom, ConvParams};
pub use ops::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    softmax_backward, Resize,
};
