//! Convolution, upsampling, parameter storage and the Adam optimizer.

pub mod adam;
pub mod conv;
pub mod params;

pub use adam::{adam_step, AdamConfig, AdamState, DEFAULT_LR};
pub use conv::{conv, upsample2x, ConvSpec};
pub use params::{he_normal, init_bias, init_params, ConvLayer, ParamId, ParamStore};
