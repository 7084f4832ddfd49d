//! Semantic mixing of visual concepts with a conditional diffusion model.
//!
//! The crate holds the noise schedule, prompt handling, a small trainable
//! conditional UNet with cross-attention, an analytic Gaussian-mixture
//! denoiser used as a test oracle, the reverse-process sampler, the mixing
//! procedure itself, training, and the on-disk formats.

pub mod classifier;
pub mod error;
pub mod io;
pub mod magicmix;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod prompt;
pub mod request;
pub mod sample;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Denoiser;
pub use prompt::{Prompt, Vocabulary};
pub use sample::Sample;
pub use schedule::{NoiseSchedule, ScheduleFamily};
