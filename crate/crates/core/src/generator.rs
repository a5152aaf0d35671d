//! Swap generator: a small NCSN++-style U-Net whose residual blocks receive
//! the source identity embedding as a broadcast bias, with the target image
//! added back at the output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Init, Linear, ParamBuilder, ParamSet};
use crate::tensor::{Real, Tensor};

const SKIP_RESCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Several channels per group, so a per-channel bias survives normalization.
fn group_norm<T: Real>(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> GroupNorm<T> {
    let mut groups = (channels / 4).clamp(1, 32);
    while channels % groups != 0 {
        groups -= 1;
    }
    GroupNorm::with_groups(b, name, channels, groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level; level `s` runs at
    /// `resolution / 2^s`, so `len − 1` down/up stages.
    pub channel_mults: Vec<usize>,
    pub resblocks: usize,
    pub attention: bool,
    pub d_emb: usize,
    pub resolution: usize,
    /// Shared two-layer MLP on the embedding before the per-block projections.
    pub cond_mlp: bool,
    pub cond_hidden: usize,
    /// Zero the last conv so the network starts as the identity map.
    pub zero_init_output: bool,
    pub init_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            resblocks: 2,
            attention: true,
            d_emb: 64,
            resolution: 32,
            cond_mlp: true,
            cond_hidden: 128,
            zero_init_output: true,
            init_seed: 1,
        }
    }
}

impl GeneratorConfig {
    /// Five levels with three blocks each, the layout of the full-size model.
    pub fn paper_shaped() -> Self {
        Self {
            channel_mults: vec![1, 1, 2, 2, 2],
            resblocks: 3,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_mults.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() < 2 {
            return Err(Error::Config(format!(
                "generator needs at least 2 resolution stages, got {}",
                self.stages()
            )));
        }
        if self.channel_mults.contains(&0) || self.base_channels == 0 {
            return Err(Error::Config("channel multipliers and base width must be ≥ 1".into()));
        }
        if self.resblocks == 0 {
            return Err(Error::Config("need at least one resblock per stage".into()));
        }
        if self.resolution % (1 << self.stages()) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.stages()
            )));
        }
        if self.d_emb == 0 || (self.cond_mlp && self.cond_hidden == 0) {
            return Err(Error::Config("conditioning dimensions must be positive".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }
}

/// Encoder-to-decoder skips plus the input-to-output skip.
pub fn count_skip_connections(config: &GeneratorConfig) -> usize {
    config.stages() * config.resblocks + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    None,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondResBlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub resample: Resample,
}

/// Residual block with the conditioning vector added after the first conv.
pub struct CondResBlock<T: Real> {
    pub spec: CondResBlockSpec,
    norm1: GroupNorm<T>,
    conv1: Conv2d<T>,
    pub proj: Linear<T>,
    norm2: GroupNorm<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

impl<T: Real> CondResBlock<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, spec: CondResBlockSpec, cond_dim: usize) -> Self {
        let u = Init::Uniform { scale: 1.0 };
        b.scope(name, |b| Self {
            spec,
            norm1: group_norm(b, "norm1", spec.c_in),
            conv1: Conv2d::new(b, "conv1", spec.c_in, spec.c_out, 3, u),
            proj: Linear::new(b, "proj", cond_dim, spec.c_out, u),
            norm2: group_norm(b, "norm2", spec.c_out),
            conv2: Conv2d::new(b, "conv2", spec.c_out, spec.c_out, 3, u),
            shortcut: (spec.c_in != spec.c_out || spec.resample != Resample::None)
                .then(|| Conv2d::new(b, "shortcut", spec.c_in, spec.c_out, 1, u)),
        })
    }

    /// `cond` is `[N, cond_dim]`, already passed through the shared MLP.
    pub fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.spec.c_in {
            return Err(Error::dim("cond_resblock", s, &[0, self.spec.c_in, 0, 0]));
        }
        let cs = cond.shape();
        if cs.len() != 2 || cs[0] != s[0] || cs[1] != self.proj.weight.shape()[1] {
            return Err(Error::dim(
                "cond_resblock conditioning",
                cs,
                &[s[0], self.proj.weight.shape()[1]],
            ));
        }
        let resample = |t: &Tensor<T>| match self.spec.resample {
            Resample::None => Ok(t.clone()),
            Resample::Up => t.upsample2x(),
            Resample::Down => t.avg_pool2x(),
        };
        let mut h = self.norm1.forward(x)?.silu();
        h = resample(&h)?;
        h = self.conv1.forward(&h)?;
        h = h.broadcast_add_channels(&self.proj.forward(cond)?)?;
        h = self.norm2.forward(&h)?.silu();
        h = self.conv2.forward(&h)?;
        let mut skip = resample(x)?;
        if let Some(sc) = &self.shortcut {
            skip = sc.forward(&skip)?;
        }
        Ok(skip.add(&h)?.scale(SKIP_RESCALE))
    }
}

/// Single-head self-attention over spatial positions.
struct Attention<T: Real> {
    norm: GroupNorm<T>,
    q: Conv2d<T>,
    k: Conv2d<T>,
    v: Conv2d<T>,
    out: Conv2d<T>,
}

impl<T: Real> Attention<T> {
    fn new(b: &mut ParamBuilder<T>, name: &str, c: usize) -> Self {
        let u = Init::Uniform { scale: 1.0 };
        b.scope(name, |b| Self {
            norm: group_norm(b, "norm", c),
            q: Conv2d::new(b, "q", c, c, 1, u),
            k: Conv2d::new(b, "k", c, c, 1, u),
            v: Conv2d::new(b, "v", c, c, 1, u),
            out: Conv2d::new(b, "out", c, c, 1, u),
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(x)?;
        let flat = |t: Tensor<T>| t.reshape(&[n, c, hw]);
        let q = flat(self.q.forward(&h)?)?;
        let k = flat(self.k.forward(&h)?)?;
        let v = flat(self.v.forward(&h)?)?;
        let w = q
            .transpose_last2()?
            .bmm(&k)?
            .scale(1.0 / (c as f64).sqrt())
            .softmax_last();
        let a = v.bmm(&w.transpose_last2()?)?.reshape(&s)?;
        Ok(x.add(&self.out.forward(&a)?)?.scale(SKIP_RESCALE))
    }
}

enum Layer<T: Real> {
    Block(CondResBlock<T>),
    /// Concatenates the most recent unused encoder map first.
    SkipBlock(CondResBlock<T>),
    Attention(Attention<T>),
}

/// One encoder-to-decoder connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkipEdge {
    pub channels: usize,
    pub resolution: usize,
    /// Index of the decoder layer that concatenates it.
    pub consumer: usize,
}

pub struct Generator<T: Real> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
    cond: Option<(Linear<T>, Linear<T>)>,
    conv_in: Conv2d<T>,
    encoder: Vec<CondResBlock<T>>,
    middle: Vec<Layer<T>>,
    decoder: Vec<Layer<T>>,
    norm_out: GroupNorm<T>,
    conv_out: Conv2d<T>,
    skips: Vec<SkipEdge>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, trainable: bool) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.init_seed, trainable);
        let u = Init::Uniform { scale: 1.0 };
        let cond = config.cond_mlp.then(|| {
            b.scope("cond", |b| {
                (
                    Linear::new(b, "fc1", config.d_emb, config.cond_hidden, u),
                    Linear::new(b, "fc2", config.cond_hidden, config.cond_hidden, u),
                )
            })
        });
        let cd = if config.cond_mlp {
            config.cond_hidden
        } else {
            config.d_emb
        };
        let (stages, r) = (config.stages(), config.resblocks);
        let c0 = config.channels(0);
        let conv_in = Conv2d::new(&mut b, "conv_in", 3, c0, 3, u);

        // encoder; every block input is kept for the decoder
        let mut pending: Vec<(usize, usize)> = Vec::new();
        let mut encoder = Vec::new();
        let (mut c, mut res) = (c0, config.resolution);
        for s in 1..=stages {
            for i in 0..r {
                pending.push((c, res));
                let spec = CondResBlockSpec {
                    c_in: c,
                    c_out: config.channels(s),
                    resample: if i == 0 { Resample::Down } else { Resample::None },
                };
                encoder.push(CondResBlock::new(&mut b, &format!("enc{s}.{i}"), spec, cd));
                c = spec.c_out;
                if i == 0 {
                    res /= 2;
                }
            }
        }

        let plain = |c| CondResBlockSpec {
            c_in: c,
            c_out: c,
            resample: Resample::None,
        };
        let mut middle = vec![Layer::Block(CondResBlock::new(&mut b, "mid.0", plain(c), cd))];
        if config.attention {
            middle.push(Layer::Attention(Attention::new(&mut b, "mid.attn", c)));
        }
        middle.push(Layer::Block(CondResBlock::new(&mut b, "mid.1", plain(c), cd)));

        let mut decoder = Vec::new();
        let mut skips = Vec::new();
        let mut skip_block =
            |b: &mut ParamBuilder<T>, decoder: &mut Vec<Layer<T>>, c: usize, c_out: usize, name: String| {
                let (sc, sres) = pending.pop().expect("one decoder consumer per encoder map");
                skips.push(SkipEdge {
                    channels: sc,
                    resolution: sres,
                    consumer: decoder.len(),
                });
                let spec = CondResBlockSpec {
                    c_in: c + sc,
                    c_out,
                    resample: Resample::None,
                };
                decoder.push(Layer::SkipBlock(CondResBlock::new(b, &name, spec, cd)));
            };
        for s in (1..=stages).rev() {
            for i in 0..r - 1 {
                skip_block(&mut b, &mut decoder, c, c, format!("dec{s}.{i}"));
            }
            let up = CondResBlockSpec {
                c_in: c,
                c_out: config.channels(s - 1),
                resample: Resample::Up,
            };
            decoder.push(Layer::Block(CondResBlock::new(&mut b, &format!("dec{s}.up"), up, cd)));
            c = up.c_out;
            skip_block(&mut b, &mut decoder, c, c, format!("dec{s}.{}", r - 1));
        }
        let norm_out = group_norm(&mut b, "norm_out", c);
        let out_init = if config.zero_init_output { Init::Zeros } else { u };
        let conv_out = Conv2d::new(&mut b, "conv_out", c, 3, 3, out_init);
        Ok(Self {
            config,
            params: b.finish(),
            cond,
            conv_in,
            encoder,
            middle,
            decoder,
            norm_out,
            conv_out,
            skips,
        })
    }

    /// Encoder-to-decoder connections, in the order the decoder uses them.
    pub fn skip_edges(&self) -> &[SkipEdge] {
        &self.skips
    }

    pub fn conditioning(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.config.d_emb {
            return Err(Error::dim(
                "generator embedding",
                zs,
                &[zs.first().copied().unwrap_or(0), self.config.d_emb],
            ));
        }
        match &self.cond {
            Some((fc1, fc2)) => Ok(fc2.forward(&fc1.forward(z)?.silu())?.silu()),
            None => Ok(z.clone()),
        }
    }

    /// The residual branch alone.
    pub fn residual(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::dim("generate", s, &[s.first().copied().unwrap_or(0), 3, r, r]));
        }
        if z.shape().first() != Some(&s[0]) {
            return Err(Error::dim(
                "generate embedding batch",
                z.shape(),
                &[s[0], self.config.d_emb],
            ));
        }
        let cond = self.conditioning(z)?;
        let mut h = self.conv_in.forward(x)?;
        let mut stack = Vec::with_capacity(self.skips.len());
        for blk in &self.encoder {
            stack.push(h.clone());
            h = blk.forward(&h, &cond)?;
        }
        for layer in self.middle.iter().chain(&self.decoder) {
            h = match layer {
                Layer::Block(blk) => blk.forward(&h, &cond)?,
                Layer::SkipBlock(blk) => {
                    let skip = stack
                        .pop()
                        .ok_or_else(|| Error::Contract("decoder ran out of encoder maps".into()))?;
                    blk.forward(&Tensor::concat_channels(&[&h, &skip])?, &cond)?
                }
                Layer::Attention(a) => a.forward(&h)?,
            };
        }
        if !stack.is_empty() {
            return Err(Error::Contract(format!("{} encoder maps left unused", stack.len())));
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu())
    }

    /// `x_tgt + residual(x_tgt, z_src)`, unclamped for training.
    pub fn forward(&self, x_tgt: &Tensor<T>, z_src: &Tensor<T>) -> Result<Tensor<T>> {
        x_tgt.add(&self.residual(x_tgt, z_src)?)
    }

    /// Inference output, clamped to the image range.
    pub fn generate(&self, x_tgt: &Tensor<T>, z_src: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x_tgt, z_src)?.clamp(-1.0, 1.0))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save_params(stem, &self.params, serde_json::json!({ "generator": self.config }))
    }

    pub fn load(stem: &Path, trainable: bool) -> Result<Self> {
        let (manifest, arrays) = checkpoint::read_arrays::<T>(stem)?;
        let config: GeneratorConfig = serde_json::from_value(manifest.meta["generator"].clone())
            .map_err(|e| Error::Checkpoint(format!("generator config missing from checkpoint: {e}")))?;
        let g = Self::new(config, trainable)?;
        checkpoint::assign(&g.params, &arrays)?;
        Ok(g)
    }
}
