//! The denoising generator and the time-conditioned discriminator.
//!
//! Both networks are described by a config, register their parameters into a
//! [`Params`] arena at construction, and run forward passes against any arena
//! with matching registration order (live weights, EMA shadow, or a loaded
//! checkpoint). All spatial resizing inside the generator is done with the
//! orthonormal Haar transform — downsampling packs a feature map into its
//! four sub-bands and mixes them back to the target width with a 1x1
//! convolution, upsampling inverts that — so every resize is exactly
//! invertible and the network operates natively on frequency content.

use std::collections::HashMap;

use crate::rng::InitRng;
use crate::tensor::nn;
use crate::{Error, Result, Tensor};

/// Named, ordered parameter store. Registration order is the serialization
/// order; lookups during the forward pass go through [`ParamId`] indices.
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct ParamId(usize);

impl Params {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Params {
        Params { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(Tensor::var(data, shape));
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|i| &self.tensors[*i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Replaces a parameter's values with a fresh gradient-tracked leaf
    /// (optimizer steps and checkpoint loads go through here).
    pub fn set_data(&mut self, i: usize, data: Vec<f32>) {
        let shape = self.tensors[i].shape().to_vec();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "set_data: wrong length for {}", self.names[i]);
        self.tensors[i] = Tensor::var(data, &shape);
    }

    /// Deep copy with identical names, shapes, and values (EMA shadow).
    pub fn clone_values(&self) -> Params {
        let mut out = Params::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.add(name, t.to_vec(), t.shape());
        }
        out
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Sinusoidal embedding of integer timesteps: [n] -> [n, dim], first half
/// sine, second half cosine, log-spaced frequencies from 1 to 1/10000.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    assert!(dim >= 4 && dim % 2 == 0, "time embedding dim must be even and >= 4");
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let tv = tv as f32;
        for k in 0..half {
            let freq = (-(10000.0f32).ln() * k as f32 / (half - 1) as f32).exp();
            data.push((tv * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10000.0f32).ln() * k as f32 / (half - 1) as f32).exp();
            data.push((tv * freq).cos());
        }
    }
    Tensor::from_vec(data, &[t.len(), dim])
}

fn group_count(c: usize) -> usize {
    for g in [8, 4, 2] {
        if c % g == 0 {
            return g;
        }
    }
    1
}

// ---------------------------------------------------------------------------
// Shared building blocks
// ---------------------------------------------------------------------------

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

fn add_conv(params: &mut Params, rng: &mut InitRng, name: &str, ci: usize, co: usize, k: usize) -> ConvIds {
    let fan_in = ci * k * k;
    let std = (2.0 / fan_in as f32).sqrt();
    ConvIds {
        w: params.add(&format!("{name}.w"), rng.normal_vec(co * ci * k * k, std), &[co, ci, k, k]),
        b: params.add(&format!("{name}.b"), vec![0.0; co], &[co]),
    }
}

/// Zero-initialized conv: the enclosing block starts as the identity (or
/// zero) map, which keeps early training near the symmetric point.
fn add_conv_zero(params: &mut Params, name: &str, ci: usize, co: usize, k: usize) -> ConvIds {
    ConvIds {
        w: params.add(&format!("{name}.w"), vec![0.0; co * ci * k * k], &[co, ci, k, k]),
        b: params.add(&format!("{name}.b"), vec![0.0; co], &[co]),
    }
}

fn add_linear_zero(params: &mut Params, name: &str, fin: usize, fout: usize) -> ConvIds {
    ConvIds {
        w: params.add(&format!("{name}.w"), vec![0.0; fout * fin], &[fout, fin]),
        b: params.add(&format!("{name}.b"), vec![0.0; fout], &[fout]),
    }
}

fn add_linear(params: &mut Params, rng: &mut InitRng, name: &str, fin: usize, fout: usize) -> ConvIds {
    let std = (2.0 / fin as f32).sqrt();
    ConvIds {
        w: params.add(&format!("{name}.w"), rng.normal_vec(fout * fin, std), &[fout, fin]),
        b: params.add(&format!("{name}.b"), vec![0.0; fout], &[fout]),
    }
}

struct NormIds {
    w: ParamId,
    b: ParamId,
}

fn add_norm(params: &mut Params, name: &str, c: usize) -> NormIds {
    NormIds {
        w: params.add(&format!("{name}.w"), vec![1.0; c], &[c]),
        b: params.add(&format!("{name}.b"), vec![0.0; c], &[c]),
    }
}

fn norm(params: &Params, ids: &NormIds, x: &Tensor) -> Tensor {
    let c = x.shape()[1];
    nn::group_norm(x, group_count(c), params.get(ids.w), params.get(ids.b), 1e-5)
}

fn conv(params: &Params, ids: &ConvIds, x: &Tensor, stride: usize, pad: usize) -> Tensor {
    x.conv2d(params.get(ids.w), Some(params.get(ids.b)), stride, pad)
}

struct ResBlockIds {
    norm1: NormIds,
    conv1: ConvIds,
    tproj: ConvIds,
    norm2: NormIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
}

fn add_res_block(
    params: &mut Params,
    rng: &mut InitRng,
    name: &str,
    ci: usize,
    co: usize,
    temb_dim: usize,
) -> ResBlockIds {
    ResBlockIds {
        norm1: add_norm(params, &format!("{name}.norm1"), ci),
        conv1: add_conv(params, rng, &format!("{name}.conv1"), ci, co, 3),
        tproj: add_linear(params, rng, &format!("{name}.tproj"), temb_dim, co),
        norm2: add_norm(params, &format!("{name}.norm2"), co),
        conv2: add_conv(params, rng, &format!("{name}.conv2"), co, co, 3),
        skip: (ci != co).then(|| add_conv(params, rng, &format!("{name}.skip"), ci, co, 1)),
    }
}

/// GroupNorm -> SiLU -> conv, additive time projection, GroupNorm -> SiLU ->
/// conv, plus identity (or 1x1-projected) shortcut.
fn res_block(params: &Params, ids: &ResBlockIds, x: &Tensor, temb: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut y = conv(params, &ids.conv1, &norm(params, &ids.norm1, x).silu(), 1, 1);
    let tp = nn::linear(temb, params.get(ids.tproj.w), params.get(ids.tproj.b));
    y = y.add(&tp.bcast_nc_hw(h, w));
    y = conv(params, &ids.conv2, &norm(params, &ids.norm2, &y).silu(), 1, 1);
    let shortcut = match &ids.skip {
        Some(s) => conv(params, s, x, 1, 0),
        None => x.clone(),
    };
    shortcut.add(&y)
}

struct AttnIds {
    norm: NormIds,
    q: ConvIds,
    k: ConvIds,
    v: ConvIds,
    o: ConvIds,
}

fn add_attn(params: &mut Params, rng: &mut InitRng, name: &str, c: usize) -> AttnIds {
    AttnIds {
        norm: add_norm(params, &format!("{name}.norm"), c),
        q: add_conv(params, rng, &format!("{name}.q"), c, c, 1),
        k: add_conv(params, rng, &format!("{name}.k"), c, c, 1),
        v: add_conv(params, rng, &format!("{name}.v"), c, c, 1),
        o: add_conv(params, rng, &format!("{name}.o"), c, c, 1),
    }
}

/// Single-head self-attention over all spatial positions, with residual.
fn attention(params: &Params, ids: &AttnIds, x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let xn = norm(params, &ids.norm, x);
    let q = conv(params, &ids.q, &xn, 1, 0).reshape(&[n, c, hw]).transpose3_12();
    let k = conv(params, &ids.k, &xn, 1, 0).reshape(&[n, c, hw]);
    let v = conv(params, &ids.v, &xn, 1, 0).reshape(&[n, c, hw]).transpose3_12();
    let scores = q.bmm3(&k).mul_scalar(1.0 / (c as f32).sqrt());
    let attn = scores.reshape(&[n * hw, hw]).softmax_rows().reshape(&[n, hw, hw]);
    let out = attn.bmm3(&v).transpose3_12().reshape(&[n, c, h, w]);
    x.add(&conv(params, &ids.o, &out, 1, 0))
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub resnet_blocks_per_level: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub time_embed_dim: usize,
    pub attention_levels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            channel_mult: vec![1, 2, 2, 2, 4],
            resnet_blocks_per_level: 2,
            in_channels: 24,
            out_channels: 12,
            time_embed_dim: 256,
            attention_levels: vec![4],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 2 * self.out_channels {
            return Err(Error::Config(format!(
                "generator in_channels {} must be twice out_channels {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.channel_mult.len() < 2 {
            return Err(Error::Config("channel_mult needs at least two levels".into()));
        }
        if self.base_channels == 0
            || self.resnet_blocks_per_level == 0
            || self.channel_mult.iter().any(|m| *m == 0)
        {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim {} must be even and >= 4",
                self.time_embed_dim
            )));
        }
        let levels = self.channel_mult.len();
        if self.attention_levels.iter().any(|l| *l >= levels) {
            return Err(Error::Config(format!(
                "attention level out of range (levels: 0..{levels})"
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }
}

struct DownLevelIds {
    blocks: Vec<ResBlockIds>,
    attn: Option<AttnIds>,
    /// 1x1 mix of the four sub-bands down to the next level's width.
    down: Option<ConvIds>,
}

struct UpLevelIds {
    /// 1x1 expansion to four sub-bands of this level's width, then idwt.
    up: ConvIds,
    /// Learned per-channel gain on the skip's high-frequency bands.
    skip_gain: ParamId,
    blocks: Vec<ResBlockIds>,
    attn: Option<AttnIds>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    temb1: ConvIds,
    temb2: ConvIds,
    stem: ConvIds,
    down: Vec<DownLevelIds>,
    mid_block1: ResBlockIds,
    mid_attn: AttnIds,
    mid_block2: ResBlockIds,
    up: Vec<UpLevelIds>,
    head_norm: NormIds,
    head: ConvIds,
}

impl Generator {
    /// Registers all generator parameters into `params` (names prefixed
    /// "gen.") and returns the forward-pass description.
    pub fn new(cfg: GeneratorConfig, params: &mut Params, rng: &mut InitRng) -> Result<Generator> {
        cfg.validate()?;
        let e = cfg.time_embed_dim;
        let levels = cfg.channel_mult.len();
        let r = cfg.resnet_blocks_per_level;

        let temb1 = add_linear(params, rng, "gen.temb.l1", e, e);
        let temb2 = add_linear(params, rng, "gen.temb.l2", e, e);
        let stem = add_conv(params, rng, "gen.stem", cfg.in_channels, cfg.width(0), 3);

        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut blocks = Vec::with_capacity(r);
            for b in 0..r {
                let ci = if b == 0 && l > 0 { cfg.width(l - 1) } else { cfg.width(l) };
                blocks.push(add_res_block(params, rng, &format!("gen.down{l}.block{b}"), ci, cfg.width(l), e));
            }
            let attn = (cfg.attention_levels.contains(&l) && l + 1 < levels)
                .then(|| add_attn(params, rng, &format!("gen.down{l}.attn"), cfg.width(l)));
            let down_mix = (l + 1 < levels).then(|| {
                add_conv(params, rng, &format!("gen.down{l}.mix"), 4 * cfg.width(l), cfg.width(l), 1)
            });
            down.push(DownLevelIds { blocks, attn, down: down_mix });
        }

        let bottom = cfg.width(levels - 1);
        let mid_block1 = add_res_block(params, rng, "gen.mid.block1", bottom, bottom, e);
        let mid_attn = add_attn(params, rng, "gen.mid.attn", bottom);
        let mid_block2 = add_res_block(params, rng, "gen.mid.block2", bottom, bottom, e);

        let mut up = Vec::new();
        for l in (0..levels - 1).rev() {
            let up_conv = add_conv(params, rng, &format!("gen.up{l}.expand"), cfg.width(l + 1), 4 * cfg.width(l), 1);
            let skip_gain = params.add(
                &format!("gen.up{l}.skip_gain"),
                vec![1.0; 3 * cfg.width(l)],
                &[3 * cfg.width(l)],
            );
            let mut blocks = Vec::with_capacity(r);
            for b in 0..r {
                let ci = if b == 0 { 2 * cfg.width(l) } else { cfg.width(l) };
                blocks.push(add_res_block(params, rng, &format!("gen.up{l}.block{b}"), ci, cfg.width(l), e));
            }
            let attn = cfg
                .attention_levels
                .contains(&l)
                .then(|| add_attn(params, rng, &format!("gen.up{l}.attn"), cfg.width(l)));
            up.push(UpLevelIds { up: up_conv, skip_gain, blocks, attn });
        }

        let head_norm = add_norm(params, "gen.head.norm", cfg.width(0));
        // Zero-initialized head: the untrained model predicts the zero
        // packet (mid-gray) instead of amplified noise.
        let head = add_conv_zero(params, "gen.head", cfg.width(0), cfg.out_channels, 3);

        Ok(Generator {
            cfg,
            temb1,
            temb2,
            stem,
            down,
            mid_block1,
            mid_attn,
            mid_block2,
            up,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Haar-packed skip connection: LL passes through unchanged, the three
    /// high bands get a learned per-channel gain. At gain = 1 this is the
    /// identity (perfect reconstruction).
    fn freq_skip(&self, params: &Params, gain: ParamId, skip: &Tensor) -> Tensor {
        let (n, c, h, w) = (
            skip.shape()[0],
            skip.shape()[1],
            skip.shape()[2],
            skip.shape()[3],
        );
        let packed = skip.dwt_nchw();
        let ll = packed.narrow_channels(0, c);
        let high = packed.narrow_channels(c, 3 * c);
        let gained = high.mul(&params.get(gain).chan_broadcast(n, h / 2, w / 2));
        Tensor::concat_channels(&[&ll, &gained]).idwt_nchw()
    }

    /// Predicts x0 from (x_t, x_lr, t). `t` holds one timestep per sample.
    pub fn forward(&self, params: &Params, x_t: &Tensor, x_lr: &Tensor, t: &[usize]) -> Result<Tensor> {
        let s = x_t.shape();
        if s.len() != 4 || x_lr.shape() != s {
            return Err(Error::Shape(format!(
                "x_t shape {:?} and x_lr shape {:?} must be identical NCHW",
                s,
                x_lr.shape()
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c != self.cfg.out_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, generator expects {}",
                self.cfg.out_channels
            )));
        }
        if t.len() != n {
            return Err(Error::Shape(format!(
                "got {} timesteps for batch of {n}",
                t.len()
            )));
        }
        if t.iter().any(|tv| *tv == 0) {
            return Err(Error::Index("timestep must be >= 1".into()));
        }
        let levels = self.cfg.channel_mult.len();
        let div = 1usize << (levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} not divisible by 2^{} = {div}",
                levels - 1
            )));
        }

        let temb_raw = time_embedding(t, self.cfg.time_embed_dim);
        let temb = nn::linear(
            &nn::linear(&temb_raw, params.get(self.temb1.w), params.get(self.temb1.b)).silu(),
            params.get(self.temb2.w),
            params.get(self.temb2.b),
        );

        let mut x = conv(params, &self.stem, &Tensor::concat_channels(&[x_t, x_lr]), 1, 1);
        let mut skips: Vec<Tensor> = Vec::with_capacity(levels - 1);
        for level in &self.down {
            for b in &level.blocks {
                x = res_block(params, b, &x, &temb);
            }
            if let Some(a) = &level.attn {
                x = attention(params, a, &x);
            }
            if let Some(mix) = &level.down {
                skips.push(x.clone());
                x = conv(params, mix, &x.dwt_nchw(), 1, 0);
            }
        }

        x = res_block(params, &self.mid_block1, &x, &temb);
        x = attention(params, &self.mid_attn, &x);
        x = res_block(params, &self.mid_block2, &x, &temb);

        for level in &self.up {
            x = conv(params, &level.up, &x, 1, 0).idwt_nchw();
            let skip = skips.pop().expect("skip stack underflow");
            let skip = self.freq_skip(params, level.skip_gain, &skip);
            x = Tensor::concat_channels(&[&x, &skip]);
            for b in &level.blocks {
                x = res_block(params, b, &x, &temb);
            }
            if let Some(a) = &level.attn {
                x = attention(params, a, &x);
            }
        }

        Ok(conv(params, &self.head, &norm(params, &self.head_norm, &x).silu(), 1, 1))
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub num_layers: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            num_layers: 6,
            base_channels: 128,
            in_channels: 24,
            time_embed_dim: 256,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim {} must be even and >= 4",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Width multiplier pattern 1, 2, 4, 4, 8, 8, then capped.
    fn width(&self, layer: usize) -> usize {
        const PATTERN: [usize; 6] = [1, 2, 4, 4, 8, 8];
        self.base_channels * PATTERN[layer.min(PATTERN.len() - 1)]
    }
}

struct DiscLayerIds {
    conv1: ConvIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
    stride: usize,
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    temb1: ConvIds,
    temb2: ConvIds,
    tproj: ConvIds,
    layers: Vec<DiscLayerIds>,
    head: ConvIds,
}

impl Discriminator {
    /// Registers all discriminator parameters (names prefixed "disc.").
    pub fn new(cfg: DiscriminatorConfig, params: &mut Params, rng: &mut InitRng) -> Result<Discriminator> {
        cfg.validate()?;
        let e = cfg.time_embed_dim;
        let temb1 = add_linear(params, rng, "disc.temb.l1", e, e);
        let temb2 = add_linear(params, rng, "disc.temb.l2", e, e);
        let tproj = add_linear(params, rng, "disc.tproj", e, cfg.width(0));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let ci = if l == 0 { cfg.in_channels } else { cfg.width(l - 1) };
            let co = cfg.width(l);
            // First layer keeps resolution; the rest halve it.
            let stride = if l == 0 { 1 } else { 2 };
            layers.push(DiscLayerIds {
                conv1: add_conv(params, rng, &format!("disc.layer{l}.conv1"), ci, co, 3),
                conv2: add_conv(params, rng, &format!("disc.layer{l}.conv2"), co, co, 3),
                skip: (ci != co || stride != 1)
                    .then(|| add_conv(params, rng, &format!("disc.layer{l}.skip"), ci, co, 1)),
                stride,
            });
        }
        // Zero-initialized head: every logit starts at exactly 0, so the
        // first adversarial losses sit at the symmetric point regardless of
        // how many positions the sum-pooling folds together.
        let head = add_linear_zero(params, "disc.head", cfg.width(cfg.num_layers - 1), 1);
        Ok(Discriminator { cfg, temb1, temb2, tproj, layers, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Scalar logit per sample for the pair (x_prev, x_t) at timestep t.
    /// Output shape [n].
    pub fn forward(&self, params: &Params, x_prev: &Tensor, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        if x_prev.shape() != x_t.shape() || x_prev.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "x_prev shape {:?} and x_t shape {:?} must be identical NCHW",
                x_prev.shape(),
                x_t.shape()
            )));
        }
        let n = x_prev.shape()[0];
        if x_prev.shape()[1] * 2 != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "pair has {} channels, discriminator expects {}",
                2 * x_prev.shape()[1],
                self.cfg.in_channels
            )));
        }
        if t.len() != n {
            return Err(Error::Shape(format!("got {} timesteps for batch of {n}", t.len())));
        }
        if t.iter().any(|tv| *tv == 0) {
            return Err(Error::Index("timestep must be >= 1".into()));
        }

        let temb_raw = time_embedding(t, self.cfg.time_embed_dim);
        let temb = nn::linear(
            &nn::linear(&temb_raw, params.get(self.temb1.w), params.get(self.temb1.b)).silu(),
            params.get(self.temb2.w),
            params.get(self.temb2.b),
        );

        let mut x = Tensor::concat_channels(&[x_prev, x_t]);
        for (l, layer) in self.layers.iter().enumerate() {
            let y = conv(params, &layer.conv1, &x, 1, 1).leaky_relu(0.2);
            let y = conv(params, &layer.conv2, &y, layer.stride, 1).leaky_relu(0.2);
            let shortcut = match &layer.skip {
                Some(s) => conv(params, s, &x, layer.stride, 0),
                None => x.clone(),
            };
            x = shortcut.add(&y);
            if l == 0 {
                // Timestep conditioning enters once, after the first layer.
                let tp = nn::linear(&temb, params.get(self.tproj.w), params.get(self.tproj.b));
                let (h, w) = (x.shape()[2], x.shape()[3]);
                x = x.add(&tp.bcast_nc_hw(h, w));
            }
        }
        let pooled = x.leaky_relu(0.2).sum_hw();
        let logits = nn::linear(&pooled, params.get(self.head.w), params.get(self.head.b));
        Ok(logits.reshape(&[n]))
    }
}
