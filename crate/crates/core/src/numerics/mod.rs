//! Dense tensors, neural layers, reverse-mode gradients and the optimizer.

mod gradcheck;
mod graph;
mod gumbel;
pub mod kernels;
mod layers;
mod optim;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use gumbel::{gumbel_soft, gumbel_softmax, gumbel_softmax_with_noise, hot_indices, one_hot_argmax, sample_gumbel};
pub use layers::{
    attention_coefficients, gru_step, linear, multi_head_aggregate, softmax, AttentionHead, Gru, Linear,
    MultiHeadAggregator,
};
pub use optim::rmsprop_step;
pub use tensor::{argmax, Module, Parameter, Tensor};
