use super::params::{Init, ParamBuilder, ParamRef};
use super::scalar::{gemm, Scalar};
use super::Feat;
use crate::model::attention::scale_columns;

const NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Convolution (and pointwise linear maps)
// ---------------------------------------------------------------------------

/// Square `k x k` convolution with zero padding `k / 2`. `k = 1` doubles as a
/// dense layer over the channel axis.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    weight: ParamRef,
    bias: ParamRef,
}

pub struct ConvCache<T> {
    col: Vec<T>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self::with_init(pb, name, cin, cout, kernel, stride, Init::FanIn(cin * kernel * kernel))
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        pb.push_scope(name);
        let weight = pb.add("weight", &[cout, cin, kernel, kernel], init);
        let bias_init = match init {
            Init::FanIn(_) => Init::FanIn(cin * kernel * kernel),
            other => other,
        };
        let bias = pb.add("bias", &[cout], bias_init);
        pb.pop_scope();
        Self {
            cin,
            cout,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn linear(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(pb, name, cin, cout, 1, 1)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col<T: Scalar>(&self, x: &Feat<T>) -> Vec<T> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (ho, wo) = self.out_size(x.h, x.w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let n = ho * wo;
        let mut col = vec![T::zero(); self.cin * k * k * n];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], h: usize, w: usize) -> Feat<T> {
        if self.is_pointwise() {
            return Feat::from_vec(self.cin, h, w, col.to_vec());
        }
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let n = ho * wo;
        let mut out = Feat::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = &mut out.data[ci * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Feat<T>) -> (Feat<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let n = ho * wo;
        let col = self.im2col(x);
        let kk = self.cin * self.kernel * self.kernel;
        let mut y = Feat::zeros(self.cout, ho, wo);
        let bias = self.bias.get(p);
        for (co, b) in bias.iter().enumerate() {
            y.data[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        gemm(false, false, self.cout, n, kk, T::one(), self.weight.get(p), &col, T::one(), &mut y.data);
        (y, ConvCache { col, h: x.h, w: x.w })
    }

    pub fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], cache: ConvCache<T>, dy: &Feat<T>) -> Feat<T> {
        let n = dy.spatial();
        let kk = self.cin * self.kernel * self.kernel;
        gemm(false, true, self.cout, kk, n, T::one(), &dy.data, &cache.col, T::one(), self.weight.get_mut(g));
        for (co, gb) in self.bias.get_mut(g).iter_mut().enumerate() {
            *gb += dy.data[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
        let mut dcol = cache.col;
        gemm(true, false, kk, n, self.cout, T::one(), self.weight.get(p), &dy.data, T::zero(), &mut dcol);
        self.col2im(&dcol, cache.h, cache.w)
    }
}

// ---------------------------------------------------------------------------
// Group normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: ParamRef,
    beta: ParamRef,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        pb.push_scope(name);
        let gamma = pb.add("gamma", &[channels], Init::Ones);
        let beta = pb.add("beta", &[channels], Init::Zeros);
        pb.pop_scope();
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Feat<T>) -> (Feat<T>, NormCache<T>) {
        assert_eq!(x.c, self.channels, "norm channels");
        let hw = x.spatial();
        let per = self.channels / self.groups * hw;
        let inv_n = T::from_f64(1.0 / per as f64);
        let eps = T::from_f64(NORM_EPS);
        let gamma = self.gamma.get(p);
        let beta = self.beta.get(p);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        let mut y = Feat::zeros(x.c, x.h, x.w);
        for g in 0..self.groups {
            let src = &x.data[g * per..(g + 1) * per];
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (d, &s) in xhat[g * per..(g + 1) * per].iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        for c in 0..x.c {
            let (gm, bt) = (gamma[c], beta[c]);
            for (o, &xh) in y.data[c * hw..(c + 1) * hw].iter_mut().zip(&xhat[c * hw..(c + 1) * hw]) {
                *o = gm * xh + bt;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], cache: NormCache<T>, dy: &Feat<T>) -> Feat<T> {
        let hw = dy.spatial();
        let per = self.channels / self.groups * hw;
        let gamma = self.gamma.get(p);
        {
            let gg = self.gamma.get_mut(g);
            for c in 0..self.channels {
                let mut acc = T::zero();
                for (d, xh) in dy.data[c * hw..(c + 1) * hw].iter().zip(&cache.xhat[c * hw..(c + 1) * hw]) {
                    acc += *d * *xh;
                }
                gg[c] += acc;
            }
        }
        {
            let gb = self.beta.get_mut(g);
            for c in 0..self.channels {
                gb[c] += dy.data[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
            }
        }
        let mut dx = Feat::zeros(dy.c, dy.h, dy.w);
        let mut dxhat = vec![T::zero(); dy.data.len()];
        for c in 0..self.channels {
            let gm = gamma[c];
            for (o, &d) in dxhat[c * hw..(c + 1) * hw].iter_mut().zip(&dy.data[c * hw..(c + 1) * hw]) {
                *o = d * gm;
            }
        }
        let n = T::from_f64(per as f64);
        for gi in 0..self.groups {
            let r = gi * per..(gi + 1) * per;
            let dxh = &dxhat[r.clone()];
            let xh = &cache.xhat[r.clone()];
            let sum_d = dxh.iter().copied().sum::<T>();
            let sum_dx = dxh.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>();
            let k = cache.inv_std[gi] / n;
            for ((o, &d), &x) in dx.data[r].iter_mut().zip(dxh).zip(xh) {
                *o = k * (n * d - sum_d - x * sum_dx);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

pub struct SiluCache<T> {
    x: Vec<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &Feat<T>) -> (Feat<T>, SiluCache<T>) {
    let y = Feat {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    };
    (y, SiluCache { x: x.data.clone() })
}

pub fn silu_backward<T: Scalar>(cache: SiluCache<T>, dy: &Feat<T>) -> Feat<T> {
    let data = cache
        .x
        .iter()
        .zip(&dy.data)
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * s * (T::one() + x * (T::one() - s))
        })
        .collect();
    Feat {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data,
    }
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    table: ParamRef,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, vocab: usize, dim: usize) -> Self {
        pb.push_scope(name);
        let table = pb.add("table", &[vocab, dim], Init::Normal(1.0));
        pb.pop_scope();
        Self { vocab, dim, table }
    }

    /// `dim x len` context for a token sequence.
    pub fn forward<T: Scalar>(&self, p: &[T], tokens: &[u32]) -> Feat<T> {
        let table = self.table.get(p);
        let l = tokens.len();
        let mut out = Feat::zeros(self.dim, 1, l);
        for (j, &t) in tokens.iter().enumerate() {
            let row = &table[t as usize * self.dim..][..self.dim];
            for (d, v) in row.iter().enumerate() {
                out.data[d * l + j] = *v;
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, g: &mut [T], tokens: &[u32], dy: &Feat<T>) {
        let l = tokens.len();
        let table = self.table.get_mut(g);
        for (j, &t) in tokens.iter().enumerate() {
            let row = &mut table[t as usize * self.dim..][..self.dim];
            for (d, v) in row.iter_mut().enumerate() {
                *v += dy.data[d * l + j];
            }
        }
    }
}

/// `[sin(t f_i), cos(t f_i)]` with geometric frequencies `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Feat<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = T::from_f64((t * f).sin());
        data[half + i] = T::from_f64((t * f).cos());
    }
    Feat::from_vec(dim, 1, 1, data)
}

// ---------------------------------------------------------------------------
// Resampling and concatenation
// ---------------------------------------------------------------------------

pub fn upsample_nearest2<T: Scalar>(x: &Feat<T>) -> Feat<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Feat::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut y.data[c * h2 * w2..][..h2 * w2];
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[yy * w2 + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Feat<T>) -> Feat<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Feat::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * h * w..][..h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Feat<T>, b: &Feat<T>) -> Feat<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat::from_vec(a.c + b.c, a.h, a.w, data)
}

pub fn split_channels<T: Scalar>(x: Feat<T>, first: usize) -> (Feat<T>, Feat<T>) {
    let n = x.spatial();
    let mut data = x.data;
    let rest = data.split_off(first * n);
    (
        Feat::from_vec(first, x.h, x.w, data),
        Feat::from_vec(x.c - first, x.h, x.w, rest),
    )
}

// ---------------------------------------------------------------------------
// Residual block with step conditioning
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    step_proj: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub struct ResBlockCache<T> {
    n1: NormCache<T>,
    a1: SiluCache<T>,
    c1: ConvCache<T>,
    p: ConvCache<T>,
    n2: NormCache<T>,
    a2: SiluCache<T>,
    c2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, step_dim: usize, groups: usize) -> Self {
        pb.push_scope(name);
        let norm1 = GroupNorm::new(pb, "norm1", cin, groups);
        let conv1 = Conv2d::new(pb, "conv1", cin, cout, 3, 1);
        let step_proj = Conv2d::linear(pb, "step_proj", step_dim, cout);
        let norm2 = GroupNorm::new(pb, "norm2", cout, groups);
        let conv2 = Conv2d::new(pb, "conv2", cout, cout, 3, 1);
        let skip = (cin != cout).then(|| Conv2d::linear(pb, "skip", cin, cout));
        pb.pop_scope();
        Self {
            norm1,
            conv1,
            step_proj,
            norm2,
            conv2,
            skip,
        }
    }

    /// `step` is the already-activated step embedding (`step_dim x 1`).
    pub fn forward<T: Scalar>(&self, p: &[T], x: &Feat<T>, step: &Feat<T>) -> (Feat<T>, ResBlockCache<T>) {
        let (h, n1) = self.norm1.forward(p, x);
        let (h, a1) = silu(&h);
        let (mut h, c1) = self.conv1.forward(p, &h);
        let (proj, pc) = self.step_proj.forward(p, step);
        let hw = h.spatial();
        for (c, b) in proj.data.iter().enumerate() {
            h.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += *b);
        }
        let (h, n2) = self.norm2.forward(p, &h);
        let (h, a2) = silu(&h);
        let (mut h, c2) = self.conv2.forward(p, &h);
        let skip = match &self.skip {
            Some(s) => {
                let (sx, sc) = s.forward(p, x);
                h.add_assign(&sx);
                Some(sc)
            }
            None => {
                h.add_assign(x);
                None
            }
        };
        (
            h,
            ResBlockCache {
                n1,
                a1,
                c1,
                p: pc,
                n2,
                a2,
                c2,
                skip,
            },
        )
    }

    /// Returns the input gradient and adds the step-embedding gradient to `dstep`.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: ResBlockCache<T>,
        dy: &Feat<T>,
        dstep: &mut Feat<T>,
    ) -> Feat<T> {
        let dh = self.conv2.backward(p, g, cache.c2, dy);
        let dh = silu_backward(cache.a2, &dh);
        let dh = self.norm2.backward(p, g, cache.n2, &dh);
        let hw = dh.spatial();
        let dproj = Feat::from_vec(
            dh.c,
            1,
            1,
            (0..dh.c)
                .map(|c| dh.data[c * hw..(c + 1) * hw].iter().copied().sum::<T>())
                .collect(),
        );
        dstep.add_assign(&self.step_proj.backward(p, g, cache.p, &dproj));
        let dh = self.conv1.backward(p, g, cache.c1, &dh);
        let dh = silu_backward(cache.a1, &dh);
        let mut dx = self.norm1.backward(p, g, cache.n1, &dh);
        match (&self.skip, cache.skip) {
            (Some(s), Some(sc)) => dx.add_assign(&s.backward(p, g, sc, dy)),
            _ => dx.add_assign(dy),
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Image-text cross-attention
// ---------------------------------------------------------------------------

/// Per-call switches for the attention hook.
#[derive(Clone, Debug, Default)]
pub struct AttentionOptions {
    /// Skip the per-token column scaling entirely.
    pub disable_reweight: bool,
    /// Tokens whose value vectors are replaced by zeros.
    pub zero_values: Vec<usize>,
    /// Keep the post-softmax maps (before scaling) in the cache.
    pub capture: bool,
}

/// Single-head attention from image positions (queries) to prompt tokens
/// (keys/values), with a residual connection.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub channels: usize,
    pub context_dim: usize,
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    o: Conv2d,
}

pub struct AttentionCache<T> {
    norm: NormCache<T>,
    qc: ConvCache<T>,
    kc: ConvCache<T>,
    vc: ConvCache<T>,
    oc: ConvCache<T>,
    q: Feat<T>,
    k: Feat<T>,
    v: Feat<T>,
    /// Post-softmax weights, `n_image x n_text`.
    pub probs: Vec<T>,
    scaled: Vec<T>,
    scales: Vec<T>,
    zero_values: Vec<usize>,
}

impl CrossAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, context_dim: usize, groups: usize) -> Self {
        pb.push_scope(name);
        let norm = GroupNorm::new(pb, "norm", channels, groups);
        let q = Conv2d::linear(pb, "q", channels, channels);
        let k = Conv2d::linear(pb, "k", context_dim, channels);
        let v = Conv2d::linear(pb, "v", context_dim, channels);
        let o = Conv2d::with_init(pb, "o", channels, channels, 1, 1, Init::Zeros);
        pb.pop_scope();
        Self {
            channels,
            context_dim,
            norm,
            q,
            k,
            v,
            o,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &[T],
        x: &Feat<T>,
        ctx: &Feat<T>,
        scales: &[T],
        opts: &AttentionOptions,
    ) -> (Feat<T>, AttentionCache<T>) {
        let d = self.channels;
        let n = x.spatial();
        let l = ctx.spatial();
        assert_eq!(scales.len(), l, "one scale per token");
        let (h, norm) = self.norm.forward(p, x);
        let (q, qc) = self.q.forward(p, &h);
        let (k, kc) = self.k.forward(p, ctx);
        let (mut v, vc) = self.v.forward(p, ctx);
        for &j in &opts.zero_values {
            if j < l {
                for di in 0..d {
                    v.data[di * l + j] = T::zero();
                }
            }
        }
        let inv = T::from_f64(1.0 / (d as f64).sqrt());
        let mut probs = vec![T::zero(); n * l];
        gemm(true, false, n, l, d, inv, &q.data, &k.data, T::zero(), &mut probs);
        for row in probs.chunks_mut(l) {
            let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let r = T::one() / sum;
            row.iter_mut().for_each(|v| *v *= r);
        }
        let mut scaled = probs.clone();
        let scales: Vec<T> = if opts.disable_reweight {
            vec![T::one(); l]
        } else {
            scales.to_vec()
        };
        scale_columns(&mut scaled, &scales);
        let mut attn = Feat::zeros(d, x.h, x.w);
        gemm(false, true, d, n, l, T::one(), &v.data, &scaled, T::zero(), &mut attn.data);
        let (out, oc) = self.o.forward(p, &attn);
        let mut y = x.clone();
        y.add_assign(&out);
        (
            y,
            AttentionCache {
                norm,
                qc,
                kc,
                vc,
                oc,
                q,
                k,
                v,
                probs,
                scaled,
                scales,
                zero_values: opts.zero_values.clone(),
            },
        )
    }

    /// Returns `(dx, dctx)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: AttentionCache<T>,
        dy: &Feat<T>,
    ) -> (Feat<T>, Feat<T>) {
        let d = self.channels;
        let n = dy.spatial();
        let l = cache.scales.len();
        let dattn = self.o.backward(p, g, cache.oc, dy);
        let mut dscaled = vec![T::zero(); n * l];
        gemm(true, false, n, l, d, T::one(), &dattn.data, &cache.v.data, T::zero(), &mut dscaled);
        let mut dv = Feat::zeros(d, 1, l);
        gemm(false, false, d, l, n, T::one(), &dattn.data, &cache.scaled, T::zero(), &mut dv.data);
        for &j in &cache.zero_values {
            if j < l {
                for di in 0..d {
                    dv.data[di * l + j] = T::zero();
                }
            }
        }
        // Through the column scaling, then the row softmax.
        let mut dscores = dscaled;
        scale_columns(&mut dscores, &cache.scales);
        for (drow, prow) in dscores.chunks_mut(l).zip(cache.probs.chunks(l)) {
            let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
            for (dv, pv) in drow.iter_mut().zip(prow) {
                *dv = *pv * (*dv - dot);
            }
        }
        let inv = T::from_f64(1.0 / (d as f64).sqrt());
        let mut dq = Feat::zeros(d, cache.q.h, cache.q.w);
        gemm(false, true, d, n, l, inv, &cache.k.data, &dscores, T::zero(), &mut dq.data);
        let mut dk = Feat::zeros(d, 1, l);
        gemm(false, false, d, l, n, inv, &cache.q.data, &dscores, T::zero(), &mut dk.data);
        let dh = self.q.backward(p, g, cache.qc, &dq);
        let mut dctx = self.k.backward(p, g, cache.kc, &dk);
        dctx.add_assign(&self.v.backward(p, g, cache.vc, &dv));
        let mut dx = self.norm.backward(p, g, cache.norm, &dh);
        dx.add_assign(dy);
        (dx, dctx)
    }
}

#[cfg(test)]
mod tests {
    use super::super::params::initialize;
    use super::*;
    use crate::par::rng_for;

    /// Central-difference check of `sum(w . f(params, x))` for a layer closure.
    fn check<F, B>(n_params: usize, specs_init: Vec<f64>, x: Feat<f64>, fwd: F, bwd: B)
    where
        F: Fn(&[f64], &Feat<f64>) -> Feat<f64>,
        B: Fn(&[f64], &mut [f64], &Feat<f64>, &Feat<f64>) -> Feat<f64>,
    {
        let p = specs_init;
        assert_eq!(p.len(), n_params);
        let y = fwd(&p, &x);
        let wts: Vec<f64> = (0..y.data.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let obj = |p: &[f64], x: &Feat<f64>| -> f64 {
            fwd(p, x).data.iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let dy = Feat::from_vec(y.c, y.h, y.w, wts.clone());
        let mut g = vec![0.0; n_params];
        let dx = bwd(&p, &mut g, &x, &dy);
        let h = 1e-5;
        for i in (0..n_params).step_by((n_params / 40).max(1)) {
            let mut pp = p.clone();
            pp[i] += h;
            let up = obj(&pp, &x);
            pp[i] -= 2.0 * h;
            let dn = obj(&pp, &x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", g[i]);
        }
        for i in (0..x.data.len()).step_by((x.data.len() / 40).max(1)) {
            let mut xx = x.clone();
            xx.data[i] += h;
            let up = obj(&p, &xx);
            xx.data[i] -= 2.0 * h;
            let dn = obj(&p, &xx);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    fn rand_feat(c: usize, h: usize, w: usize, seed: u64) -> Feat<f64> {
        use rand::Rng;
        let mut r = rng_for(seed, 0);
        Feat::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn random_params(pb: &ParamBuilder, seed: u64) -> Vec<f64> {
        // Perturb away from ones/zeros so every parameter matters.
        use rand::Rng;
        let mut r = rng_for(seed, 1);
        initialize(pb.specs(), &mut r)
            .into_iter()
            .map(|v| v + r.gen_range(-0.3..0.3))
            .collect()
    }

    #[test]
    fn conv_gradients() {
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let mut pb = ParamBuilder::new();
            let conv = Conv2d::new(&mut pb, "c", 3, 4, k, s);
            let p = random_params(&pb, 1);
            check(
                pb.len(),
                p,
                rand_feat(3, 6, 6, 2),
                |p, x| conv.forward(p, x).0,
                |p, g, x, dy| {
                    let (_, c) = conv.forward(p, x);
                    conv.backward(p, g, c, dy)
                },
            );
        }
    }

    #[test]
    fn norm_gradients() {
        let mut pb = ParamBuilder::new();
        let n = GroupNorm::new(&mut pb, "n", 4, 2);
        let p = random_params(&pb, 3);
        check(
            pb.len(),
            p,
            rand_feat(4, 3, 3, 4),
            |p, x| n.forward(p, x).0,
            |p, g, x, dy| {
                let (_, c) = n.forward(p, x);
                n.backward(p, g, c, dy)
            },
        );
    }

    #[test]
    fn resblock_gradients() {
        let mut pb = ParamBuilder::new();
        let rb = ResBlock::new(&mut pb, "rb", 4, 6, 5, 2);
        let p = random_params(&pb, 5);
        let step = rand_feat(5, 1, 1, 6);
        check(
            pb.len(),
            p,
            rand_feat(4, 4, 4, 7),
            |p, x| rb.forward(p, x, &step).0,
            |p, g, x, dy| {
                let (_, c) = rb.forward(p, x, &step);
                let mut ds = Feat::zeros(5, 1, 1);
                rb.backward(p, g, c, dy, &mut ds)
            },
        );
    }

    #[test]
    fn attention_gradients_with_scales_and_mask() {
        let mut pb = ParamBuilder::new();
        let at = CrossAttention::new(&mut pb, "a", 4, 3, 2);
        let p = random_params(&pb, 8);
        let ctx = rand_feat(3, 1, 5, 9);
        let scales = [1.0, -1.5, 0.0, 2.0, 1.0];
        for opts in [
            AttentionOptions::default(),
            AttentionOptions {
                zero_values: vec![3],
                ..Default::default()
            },
        ] {
            check(
                pb.len(),
                p.clone(),
                rand_feat(4, 3, 3, 10),
                |p, x| at.forward(p, x, &ctx, &scales, &opts).0,
                |p, g, x, dy| {
                    let (_, c) = at.forward(p, x, &ctx, &scales, &opts);
                    at.backward(p, g, c, dy).0
                },
            );
        }
    }

    #[test]
    fn attention_context_gradient() {
        let mut pb = ParamBuilder::new();
        let at = CrossAttention::new(&mut pb, "a", 4, 3, 2);
        let p = random_params(&pb, 11);
        let x = rand_feat(4, 2, 2, 12);
        let scales = [1.0, 0.5, -1.0];
        let opts = AttentionOptions::default();
        let ctx = rand_feat(3, 1, 3, 13);
        let (y, c) = at.forward(&p, &x, &ctx, &scales, &opts);
        let dy = Feat::from_vec(y.c, y.h, y.w, (0..y.data.len()).map(|i| (i as f64 * 0.3).sin()).collect());
        let mut g = vec![0.0; pb.len()];
        let (_, dctx) = at.backward(&p, &mut g, c, &dy);
        let obj = |ctx: &Feat<f64>| -> f64 {
            at.forward(&p, &x, ctx, &scales, &opts).0.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        for i in 0..ctx.data.len() {
            let mut cp = ctx.clone();
            cp.data[i] += 1e-5;
            let up = obj(&cp);
            cp.data[i] -= 2e-5;
            let fd = (up - obj(&cp)) / 2e-5;
            assert!((fd - dctx.data[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut pb = ParamBuilder::new();
        let at = CrossAttention::new(&mut pb, "a", 4, 3, 2);
        let p = random_params(&pb, 14);
        let (_, c) = at.forward(&p, &rand_feat(4, 3, 3, 15), &rand_feat(3, 1, 4, 16), &[1.0; 4], &AttentionOptions::default());
        for row in c.probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_and_concat_round_trip() {
        let x = rand_feat(2, 2, 3, 17);
        let up = upsample_nearest2(&x);
        assert_eq!((up.h, up.w), (4, 6));
        let back = upsample_nearest2_backward(&up);
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
        let y = rand_feat(3, 2, 3, 18);
        let cat = concat_channels(&x, &y);
        let (a, b) = split_channels(cat, 2);
        assert_eq!(a, x);
        assert_eq!(b, y);
    }
}
