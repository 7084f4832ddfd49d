//! Noise predictors and the cross-attention re-weighting hook.

pub(crate) mod attention;
pub mod checkpoint;
pub mod unet;

pub use attention::{reweight_attention, CrossAttentionState};
pub use checkpoint::ModelCheckpoint;
pub use unet::{ForwardOptions, UNet, UNetConfig};

use crate::error::{Error, Result};
use crate::prompt::Prompt;
use crate::sample::Sample;
use crate::schedule::NoiseSchedule;

/// `eps_theta(x_t, t, prompt)`.
///
/// Implementations are deterministic and may be called concurrently.
pub trait Denoiser: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Shape of the samples this denoiser operates on.
    fn sample_shape(&self) -> Vec<usize>;

    /// Predicted noise for `x_t` at step `t`; prompt scales are applied to
    /// cross-attention where the implementation has any.
    fn predict_eps(&self, x_t: &Sample, t: usize, prompt: &Prompt) -> Result<Sample>;

    /// Bounds of clean samples, if any; reverse steps clamp their clean-sample
    /// estimate to them.
    fn data_range(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Checks shared by every `predict_eps` implementation.
pub fn check_eps_inputs(model: &dyn Denoiser, x_t: &Sample, t: usize) -> Result<()> {
    let steps = model.schedule().steps();
    if t == 0 || t > steps {
        return Err(Error::config(format!("step {t} outside [1, {steps}]")));
    }
    let shape = model.sample_shape();
    if x_t.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: x_t.shape().to_vec(),
        });
    }
    x_t.ensure_finite("denoiser input")
}

/// Classifier-free guidance: `eps(null) + w * (eps(prompt) - eps(null))`.
///
/// `w = 1` returns the conditional prediction and `w = 0` the unconditional
/// one, without evaluating the other branch.
pub fn guided_eps(
    model: &dyn Denoiser,
    x_t: &Sample,
    t: usize,
    prompt: &Prompt,
    guidance_weight: f64,
) -> Result<Sample> {
    if !(guidance_weight >= 0.0) || !guidance_weight.is_finite() {
        return Err(Error::config(format!(
            "guidance weight must be finite and >= 0, got {guidance_weight}"
        )));
    }
    if guidance_weight == 1.0 || prompt.is_null() {
        return model.predict_eps(x_t, t, prompt);
    }
    let uncond = model.predict_eps(x_t, t, &Prompt::null())?;
    if guidance_weight == 0.0 {
        return Ok(uncond);
    }
    let cond = model.predict_eps(x_t, t, prompt)?;
    let mut out = uncond;
    for (u, c) in out.data_mut().iter_mut().zip(cond.data()) {
        *u += guidance_weight * (c - *u);
    }
    Ok(out)
}
