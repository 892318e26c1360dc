//! Sequence machinery: selective scan, bidirectional Mamba, multi-head attention
//! and the MambAttention block.

mod block;
mod mamba;
mod mha;
mod ops;

pub use block::{BlockOptions, BlockTrace, FeatureMap, Layout, MambAttention};
pub use mamba::{BiMamba, MambaConfig, MambaUnit, RMS_NORM_EPS};
pub use mha::{AttentionUnit, Mha, LAYER_NORM_EPS};
