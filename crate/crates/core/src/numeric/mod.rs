//! Differentiable numeric substrate.

mod array;
pub mod gradcheck;
pub mod nn;
mod params;
mod rng;
mod tape;

pub use array::{dot, DenseArray};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use nn::{
    attention, attention_weights, gumbel_softmax, mlp, mlp_forward, scaled_dot_attention, Activation,
    GumbelNoise,
};
pub(crate) use params::ByteReader;
pub use params::{Group, Parameter, ParameterSet};
pub use rng::RngStream;
pub use tape::{log_sum_exp, softmax, Gradients, Tape, Var};
