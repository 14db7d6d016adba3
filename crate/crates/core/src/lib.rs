//! Deterministic toy latent-diffusion engine built around editable QKV
//! attention: decoupled text+image cross-attention, batch-2 shared-KV
//! condition guidance, thresholded attention-map mask guidance, plus
//! capture, export and consistency metrics.
//!
//! Everything is seeded and bit-reproducible: the same config produces the
//! same images, capture archives and metrics on every run and platform.


pub mod attention;
pub mod config;
pub mod detmath;
pub mod error;
pub mod guidance;
pub mod imageio;
pub mod inspect;
pub mod model;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{seeded_normal, SeededRng, Tensor};
