//! A small CPU autodiff-free layer library: every layer has an explicit
//! forward that returns a cache and a backward that consumes it.
//!
//! Parameters of a whole network live in one flat slice; layers only hold
//! offsets into it. Gradients use a slice with the same layout.

mod layers;
mod params;
mod scalar;

pub use layers::{
    concat_channels, sinusoidal_embedding, split_channels, upsample_nearest2, upsample_nearest2_backward,
    AttentionCache, AttentionOptions, Conv2d, ConvCache, CrossAttention, Embedding, GroupNorm, NormCache,
    ResBlock, ResBlockCache, SiluCache, silu, silu_backward,
};
pub use params::{initialize, Init, ParamBuilder, ParamRef, ParamSpec};
pub use scalar::{gemm, Scalar};

/// Channel-major feature map `c x (h * w)`. Token sequences use `h = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Feat<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature size mismatch");
        Self { c, h, w, data }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Feat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
