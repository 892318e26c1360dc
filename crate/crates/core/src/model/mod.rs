//! The U-Net assembly: encoder, down and up paths with resolution-wise attention
//! sharing, refinement heads, mask and phase decoders, and the accounting around them.

mod accounting;
mod config;
mod net;
mod weights;

pub use accounting::{count_params, ParamCounts};
pub use config::{ModelConfig, RwsaPairing, LEVELS};
pub use net::{
    compressed_polar, polar_to_spec, DecoderTrunk, Encoder, Enhancement, ForwardOutput, MaskDecoder, PhaseDecoder,
    Refinement, RwsaMambaUNet, Stack, UpLevel, DENSE_DEPTH,
};
pub use weights::{load_weights, save_weights, WeightFile, FORMAT_VERSION, MAGIC};
