//! Differentiable-computation core: tensors, a reverse-mode tape, the
//! conditioned 1D U-Net, the Adam optimizer, and parameter serialization.

mod adam;
mod embed;
mod ops;
mod serialize;
mod tape;
mod tensor;
mod unet;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use embed::{time_embed, time_embed_batch};
pub use serialize::{read_params, write_params};
pub use tape::{Tape, ValId};
pub use tensor::Tensor;
pub use unet::{crop_tail, pad_tail_replicate, tail_mask, ParamSet, UNet1d, UNetConfig};
