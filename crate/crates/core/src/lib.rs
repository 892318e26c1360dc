//! RWSA-MambaUNet speech enhancement, from scratch.
//!
//! Layers, bottom-up:
//! - [`tensor`]: dense arrays, a tape-based reverse-mode engine and the parameter
//!   store whose weight tying implements resolution-wise shared attention.
//! - [`dsp`]: STFT/iSTFT, power-law compression, SNR mixing, WAV IO.
//! - [`nn`]: convolutions (plain, transposed, deformable), normalization, dense
//!   blocks, sub-pixel convolution, patch embeddings.
//! - [`seq`]: selective scan, bidirectional Mamba, multi-head attention and the
//!   MambAttention block.
//! - [`model`]: the U-Net assembly, configuration, weight files, parameter and
//!   FLOP accounting.
//! - [`objectives`]: losses, SSNR / SI-SDR, the training step and toy data.

pub mod config;
pub mod dsp;
mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod seq;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
