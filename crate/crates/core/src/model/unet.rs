//! Three-resolution conditional U-Net with image-text cross-attention at the
//! two coarsest resolutions.
//!
//! ```text
//! x -> conv_in -> rb0 ----------------------------------------- cat -> up_rb0 -> out
//!                  \-> down0 -> rb1+attn1 ---------- cat -> up_rb1+attn -^
//!                                 \-> down1 -> mid (rb, attn, rb) -^
//! ```

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::attention::CrossAttentionState;
use super::{check_eps_inputs, Denoiser};
use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, initialize, silu, silu_backward, sinusoidal_embedding, split_channels, upsample_nearest2,
    upsample_nearest2_backward, AttentionCache, AttentionOptions, Conv2d, ConvCache, CrossAttention, Embedding,
    Feat, GroupNorm, Init, NormCache, ParamBuilder, ParamSpec, ResBlock, ResBlockCache, Scalar, SiluCache,
};
use crate::par::{rng_for, streams};
use crate::prompt::{Prompt, Vocabulary};
use crate::sample::Sample;
use crate::schedule::NoiseSchedule;

/// Images are normalized to this range before training.
pub const DATA_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub token_dim: usize,
    pub step_dim: usize,
    pub groups: usize,
    pub vocab_size: usize,
}

impl UNetConfig {
    /// The reference configuration for 32x32 grayscale shapes.
    pub fn shapes(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            channels: [32, 64, 96],
            token_dim: 64,
            step_dim: 128,
            groups: 8,
            vocab_size,
        }
    }

    /// A few-thousand-parameter instance for gradient checks and service tests.
    pub fn tiny(vocab_size: usize, image_size: usize) -> Self {
        Self {
            image_size,
            in_channels: 1,
            channels: [4, 8, 8],
            token_dim: 6,
            step_dim: 8,
            groups: 2,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::config("image size must be a positive multiple of 4"));
        }
        if self.in_channels == 0 || self.vocab_size == 0 || self.token_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.step_dim < 2 || self.step_dim % 2 != 0 {
            return Err(Error::config("step embedding dimension must be even"));
        }
        let [c0, c1, c2] = self.channels;
        for c in [c0, c1, c2, c1 + c2, c0 + c1] {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::config(format!(
                    "channel count {c} is not divisible into {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Options for one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub attention: AttentionOptions,
}

/// Parameter layout and layer graph; holds no weights.
#[derive(Clone, Debug)]
pub struct UNetLayout {
    config: UNetConfig,
    specs: Vec<ParamSpec>,
    n_params: usize,
    embed: Embedding,
    step1: Conv2d,
    step2: Conv2d,
    conv_in: Conv2d,
    rb0: ResBlock,
    down0: Conv2d,
    rb1: ResBlock,
    at1: CrossAttention,
    down1: Conv2d,
    mid1: ResBlock,
    at_mid: CrossAttention,
    mid2: ResBlock,
    up_rb1: ResBlock,
    up_at1: CrossAttention,
    up_rb0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

pub struct UNetCache<T> {
    tokens: Vec<u32>,
    step_h: ConvCache<T>,
    step_a: SiluCache<T>,
    step_o: ConvCache<T>,
    step_act: SiluCache<T>,
    conv_in: ConvCache<T>,
    rb0: ResBlockCache<T>,
    down0: ConvCache<T>,
    rb1: ResBlockCache<T>,
    at1: AttentionCache<T>,
    down1: ConvCache<T>,
    mid1: ResBlockCache<T>,
    at_mid: AttentionCache<T>,
    mid2: ResBlockCache<T>,
    up_rb1: ResBlockCache<T>,
    up_at1: AttentionCache<T>,
    up_rb0: ResBlockCache<T>,
    norm_out: NormCache<T>,
    act_out: SiluCache<T>,
    conv_out: ConvCache<T>,
}

impl<T: Scalar> UNetCache<T> {
    /// Post-softmax maps of the three attention layers, before re-weighting.
    pub fn attention_maps(&self) -> Vec<CrossAttentionState> {
        let l = self.tokens.len();
        [&self.at1, &self.at_mid, &self.up_at1]
            .iter()
            .enumerate()
            .map(|(layer, c)| CrossAttentionState {
                layer,
                n_image: c.probs.len() / l,
                n_text: l,
                weights: c.probs.iter().map(|v| v.to_f64()).collect(),
            })
            .collect()
    }
}

impl UNetLayout {
    pub fn new(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2] = config.channels;
        let (g, e, s) = (config.groups, config.token_dim, config.step_dim);
        let mut pb = ParamBuilder::new();
        let embed = Embedding::new(&mut pb, "embed", config.vocab_size, e);
        let step1 = Conv2d::linear(&mut pb, "step1", s, s);
        let step2 = Conv2d::linear(&mut pb, "step2", s, s);
        let conv_in = Conv2d::new(&mut pb, "conv_in", config.in_channels, c0, 3, 1);
        let rb0 = ResBlock::new(&mut pb, "rb0", c0, c0, s, g);
        let down0 = Conv2d::new(&mut pb, "down0", c0, c0, 3, 2);
        let rb1 = ResBlock::new(&mut pb, "rb1", c0, c1, s, g);
        let at1 = CrossAttention::new(&mut pb, "at1", c1, e, g);
        let down1 = Conv2d::new(&mut pb, "down1", c1, c1, 3, 2);
        let mid1 = ResBlock::new(&mut pb, "mid1", c1, c2, s, g);
        let at_mid = CrossAttention::new(&mut pb, "at_mid", c2, e, g);
        let mid2 = ResBlock::new(&mut pb, "mid2", c2, c2, s, g);
        let up_rb1 = ResBlock::new(&mut pb, "up_rb1", c2 + c1, c1, s, g);
        let up_at1 = CrossAttention::new(&mut pb, "up_at1", c1, e, g);
        let up_rb0 = ResBlock::new(&mut pb, "up_rb0", c1 + c0, c0, s, g);
        let norm_out = GroupNorm::new(&mut pb, "norm_out", c0, g);
        let conv_out = Conv2d::with_init(&mut pb, "conv_out", c0, config.in_channels, 3, 1, Init::Zeros);
        let n_params = pb.len();
        Ok(Self {
            config: config.clone(),
            specs: pb.into_specs(),
            n_params,
            embed,
            step1,
            step2,
            conv_in,
            rb0,
            down0,
            rb1,
            at1,
            down1,
            mid1,
            at_mid,
            mid2,
            up_rb1,
            up_at1,
            up_rb0,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, streams::INIT);
        initialize(&self.specs, &mut rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &[T],
        x: &Feat<T>,
        t: usize,
        tokens: &[u32],
        scales: &[T],
        opts: &ForwardOptions,
    ) -> (Feat<T>, UNetCache<T>) {
        assert_eq!(p.len(), self.n_params, "parameter count");
        let ao = &opts.attention;
        let ctx = self.embed.forward(p, tokens);
        let temb = sinusoidal_embedding::<T>(t as f64, self.config.step_dim);
        let (h, step_h) = self.step1.forward(p, &temb);
        let (h, step_a) = silu(&h);
        let (h, step_o) = self.step2.forward(p, &h);
        let (step, step_act) = silu(&h);

        let (h, conv_in) = self.conv_in.forward(p, x);
        let (skip0, rb0) = self.rb0.forward(p, &h, &step);
        let (h, down0) = self.down0.forward(p, &skip0);
        let (h, rb1) = self.rb1.forward(p, &h, &step);
        let (skip1, at1) = self.at1.forward(p, &h, &ctx, scales, ao);
        let (h, down1) = self.down1.forward(p, &skip1);
        let (h, mid1) = self.mid1.forward(p, &h, &step);
        let (h, at_mid) = self.at_mid.forward(p, &h, &ctx, scales, ao);
        let (h, mid2) = self.mid2.forward(p, &h, &step);
        let h = concat_channels(&upsample_nearest2(&h), &skip1);
        let (h, up_rb1) = self.up_rb1.forward(p, &h, &step);
        let (h, up_at1) = self.up_at1.forward(p, &h, &ctx, scales, ao);
        let h = concat_channels(&upsample_nearest2(&h), &skip0);
        let (h, up_rb0) = self.up_rb0.forward(p, &h, &step);
        let (h, norm_out) = self.norm_out.forward(p, &h);
        let (h, act_out) = silu(&h);
        let (out, conv_out) = self.conv_out.forward(p, &h);
        (
            out,
            UNetCache {
                tokens: tokens.to_vec(),
                step_h,
                step_a,
                step_o,
                step_act,
                conv_in,
                rb0,
                down0,
                rb1,
                at1,
                down1,
                mid1,
                at_mid,
                mid2,
                up_rb1,
                up_at1,
                up_rb0,
                norm_out,
                act_out,
                conv_out,
            },
        )
    }

    /// Accumulates parameter gradients of `<dout, output>` into `g`.
    pub fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], cache: UNetCache<T>, dout: &Feat<T>) {
        let [_, c1, c2] = self.config.channels;
        let mut dstep = Feat::zeros(self.config.step_dim, 1, 1);
        let mut dctx = Feat::zeros(self.config.token_dim, 1, cache.tokens.len());

        let dh = self.conv_out.backward(p, g, cache.conv_out, dout);
        let dh = silu_backward(cache.act_out, &dh);
        let dh = self.norm_out.backward(p, g, cache.norm_out, &dh);
        let dh = self.up_rb0.backward(p, g, cache.up_rb0, &dh, &mut dstep);
        let (dup, mut dskip0) = split_channels(dh, c1);
        let dh = upsample_nearest2_backward(&dup);
        let (dh, dc) = self.up_at1.backward(p, g, cache.up_at1, &dh);
        dctx.add_assign(&dc);
        let dh = self.up_rb1.backward(p, g, cache.up_rb1, &dh, &mut dstep);
        let (dup, mut dskip1) = split_channels(dh, c2);
        let dh = upsample_nearest2_backward(&dup);
        let dh = self.mid2.backward(p, g, cache.mid2, &dh, &mut dstep);
        let (dh, dc) = self.at_mid.backward(p, g, cache.at_mid, &dh);
        dctx.add_assign(&dc);
        let dh = self.mid1.backward(p, g, cache.mid1, &dh, &mut dstep);
        dskip1.add_assign(&self.down1.backward(p, g, cache.down1, &dh));
        let (dh, dc) = self.at1.backward(p, g, cache.at1, &dskip1);
        dctx.add_assign(&dc);
        let dh = self.rb1.backward(p, g, cache.rb1, &dh, &mut dstep);
        dskip0.add_assign(&self.down0.backward(p, g, cache.down0, &dh));
        let dh = self.rb0.backward(p, g, cache.rb0, &dskip0, &mut dstep);
        let _ = self.conv_in.backward(p, g, cache.conv_in, &dh);

        let dh = silu_backward(cache.step_act, &dstep);
        let dh = self.step2.backward(p, g, cache.step_o, &dh);
        let dh = silu_backward(cache.step_a, &dh);
        let _ = self.step1.backward(p, g, cache.step_h, &dh);
        self.embed.backward(g, &cache.tokens, &dctx);
    }

    pub fn input_feat<T: Scalar>(&self, x: &Sample) -> Feat<T> {
        let s = self.config.image_size;
        Feat::from_vec(
            self.config.in_channels,
            s,
            s,
            x.data().iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        let s = self.config.image_size;
        vec![self.config.in_channels, s, s]
    }
}

/// A U-Net with loaded weights, ready for inference.
#[derive(Clone, Debug)]
pub struct UNet {
    layout: UNetLayout,
    params: Vec<f32>,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
}

impl UNet {
    /// Randomly initialized network.
    pub fn new(config: &UNetConfig, schedule: NoiseSchedule, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "model vocabulary size {} does not match vocabulary of {} words",
                config.vocab_size,
                vocab.len()
            )));
        }
        let layout = UNetLayout::new(config)?;
        let params = layout.init_params(seed).into_iter().map(|v| v as f32).collect();
        Ok(Self {
            layout,
            params,
            schedule,
            vocab,
        })
    }

    pub fn from_parts(layout: UNetLayout, params: Vec<f32>, schedule: NoiseSchedule, vocab: Vocabulary) -> Result<Self> {
        if params.len() != layout.num_params() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                layout.num_params(),
                params.len()
            )));
        }
        if layout.config().vocab_size != vocab.len() {
            return Err(Error::config("vocabulary size mismatch"));
        }
        Ok(Self {
            layout,
            params,
            schedule,
            vocab,
        })
    }

    pub fn layout(&self) -> &UNetLayout {
        &self.layout
    }

    pub fn config(&self) -> &UNetConfig {
        self.layout.config()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if let Some(t) = prompt.tokens().iter().find(|t| !self.vocab.contains(**t)) {
            return Err(Error::InvalidPrompt(format!("token id {t} not in model vocabulary")));
        }
        Ok(())
    }

    /// Noise prediction plus the captured (pre-scaling) attention maps.
    pub fn forward_with(
        &self,
        x_t: &Sample,
        t: usize,
        prompt: &Prompt,
        opts: &ForwardOptions,
    ) -> Result<(Sample, Vec<CrossAttentionState>)> {
        check_eps_inputs(self, x_t, t)?;
        self.check_prompt(prompt)?;
        let x = self.layout.input_feat::<f32>(x_t);
        let scales: Vec<f32> = prompt.scales().iter().map(|&s| s as f32).collect();
        let (out, cache) = self.layout.forward(&self.params, &x, t, prompt.tokens(), &scales, opts);
        let maps = if opts.attention.capture {
            cache.attention_maps()
        } else {
            Vec::new()
        };
        let eps = Sample::new(x_t.shape().to_vec(), out.data.iter().map(|&v| v as f64).collect())?;
        eps.ensure_finite("model output")?;
        Ok((eps, maps))
    }
}

impl Denoiser for UNet {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.layout.sample_shape()
    }

    fn predict_eps(&self, x_t: &Sample, t: usize, prompt: &Prompt) -> Result<Sample> {
        self.forward_with(x_t, t, prompt, &ForwardOptions::default()).map(|(e, _)| e)
    }

    fn data_range(&self) -> Option<(f64, f64)> {
        Some(DATA_RANGE)
    }
}

/// Deterministic pseudo-random parameters for tests that need a non-trivial
/// network without training (the output layer starts at zero otherwise).
pub fn perturbed_params(layout: &UNetLayout, seed: u64, scale: f64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    layout
        .init_params(seed)
        .into_iter()
        .map(|v| (v + scale * rng.gen_range(-1.0..1.0)) as f32)
        .collect()
}
