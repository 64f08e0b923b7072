//! Model parameters, optimizer, and the backbone + masked-transformer
//! network.

mod adam;
mod attention;
mod model;
mod param;

pub use adam::{adam_step, adam_step_slice, AdamConfig};
pub use attention::{smt_layer, BindMode, Binder, HeadCapture};
pub use model::{
    forward, init_params, test_pixels, tiny_config, Arch, ForwardOpts, ForwardOutput, MaskPair,
    ModelConfig,
};
pub use param::{embedding_uniform, kaiming_uniform, xavier_uniform, Param, ParamSet};
