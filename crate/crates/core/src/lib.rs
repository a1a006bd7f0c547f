//! Compiles smooth target functions into explicit ReLU convolutional
//! residual networks and measures how well they approximate in Sobolev norms.

// `!(a <= b)` is used on purpose so NaN fails a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the network's operation order.
#![allow(clippy::needless_range_loop)]

pub mod algebra;
pub mod calculus;
pub mod error;
pub mod io;
pub mod manifold;
pub mod metrics;
pub mod net;
pub mod risk;
pub mod targets;
pub mod taylor;

pub use error::{ForgeError, Result};
pub use net::{
    audit_class, block_forward, conv_forward, mlp_forward, resnet_forward, ConvResNetModel, FilterTensor, Matrix,
    MlpModel, NetClassParams, ResidualBlockSpec,
};
