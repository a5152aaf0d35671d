//! Discriminator, non-saturating adversarial losses and the R1 penalty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamBuilder, ParamSet};
use crate::tensor::{no_grad, Dual, Real, Scalar, Tensor};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Width of each residual stage; each stage halves the resolution.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub r1_gamma: f64,
    pub resolution: usize,
    pub init_seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 64],
            hidden: 64,
            r1_gamma: 1.0,
            resolution: 32,
            init_seed: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1_gamma > 0.0) {
            return Err(Error::Config(format!(
                "r1_gamma must be positive, got {}",
                self.r1_gamma
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

struct Stage<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    skip: Conv2d<T>,
}

pub struct Discriminator<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
    from_rgb: Conv2d<T>,
    stages: Vec<Stage<T>>,
    conv_out: Conv2d<T>,
    fc: Linear<T>,
    out: Linear<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, trainable: bool) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.init_seed, trainable);
        let u = Init::Uniform { scale: 1.0 };
        let mut c = config.channels[0];
        let from_rgb = Conv2d::new(&mut b, "from_rgb", 3, c, 1, u);
        let stages = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = b.scope(&format!("stage{i}"), |b| Stage {
                    conv1: Conv2d::new(b, "conv1", c, c, 3, u),
                    conv2: Conv2d::new(b, "conv2", c, w, 3, u),
                    skip: Conv2d::new(b, "skip", c, w, 1, u),
                });
                c = w;
                s
            })
            .collect();
        let side = config.resolution >> config.channels.len();
        let conv_out = Conv2d::new(&mut b, "conv_out", c, c, 3, u);
        let fc = Linear::new(&mut b, "fc", c * side * side, config.hidden, u);
        let out = Linear::new(&mut b, "out", config.hidden, 1, u);
        Ok(Self {
            config,
            params: b.finish(),
            from_rgb,
            stages,
            conv_out,
            fc,
            out,
        })
    }

    /// Pre-sigmoid realness logit per image, shape `[N]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::dim("d_logit", s, &[s.first().copied().unwrap_or(0), 3, r, r]));
        }
        let n = s[0];
        let mut h = self.from_rgb.forward(x)?.leaky_relu(SLOPE);
        for st in &self.stages {
            let y = st.conv1.forward(&h)?.leaky_relu(SLOPE);
            let y = st.conv2.forward(&y)?.leaky_relu(SLOPE).avg_pool2x()?;
            let skip = st.skip.forward(&h.avg_pool2x()?)?;
            h = y.add(&skip)?.scale(std::f64::consts::FRAC_1_SQRT_2);
        }
        let h = self.conv_out.forward(&h)?.leaky_relu(SLOPE);
        let flat = h.reshape(&[n, h.numel() / n])?;
        let h = self.fc.forward(&flat)?.leaky_relu(SLOPE);
        self.out.forward(&h)?.reshape(&[n])
    }
}

/// Anything that maps an image batch to one logit per image.
pub trait Critic<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A critic that can be rebuilt over dual numbers with the same weights.
pub trait Liftable<T: Real>: Critic<T> {
    type Lifted: Critic<Dual<T>>;
    fn lift(&self) -> Result<Self::Lifted>;
}

impl<T: Scalar> Critic<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Discriminator::logits(self, x)
    }
}

impl<T: Real> Liftable<T> for Discriminator<T> {
    type Lifted = Discriminator<Dual<T>>;
    fn lift(&self) -> Result<Self::Lifted> {
        let dual = Discriminator::<Dual<T>>::new(self.config.clone(), true)?;
        dual.params
            .copy_from(&self.params, |v| Dual { re: v, eps: T::zero() })?;
        Ok(dual)
    }
}

impl<T: Real> Discriminator<T> {
    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save_params(stem, &self.params, serde_json::json!({ "discriminator": self.config }))
    }

    pub fn load(stem: &Path, trainable: bool) -> Result<Self> {
        let (manifest, arrays) = checkpoint::read_arrays::<T>(stem)?;
        let config: DiscriminatorConfig = serde_json::from_value(manifest.meta["discriminator"].clone())
            .map_err(|e| Error::Checkpoint(format!("discriminator config missing from checkpoint: {e}")))?;
        let d = Self::new(config, trainable)?;
        checkpoint::assign(&d.params, &arrays)?;
        Ok(d)
    }
}

/// `mean softplus(−real) + mean softplus(fake)`.
pub fn d_loss<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Tensor<T> {
    real_logits
        .neg()
        .softplus()
        .mean()
        .add(&fake_logits.softplus().mean())
        .expect("scalars")
}

/// `mean softplus(−fake)`, i.e. `−log sigmoid(fake)`.
pub fn g_loss<T: Scalar>(fake_logits: &Tensor<T>) -> Tensor<T> {
    fake_logits.neg().softplus().mean()
}

pub fn adv_losses<T: Scalar>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (d_loss(real_logits, fake_logits), g_loss(fake_logits))
}

/// `(γ/2)·mean_i ‖∇_x d(x_i)‖²` over the real batch.
///
/// The value comes from one reverse pass. Its gradient with respect to the
/// discriminator weights is `(γ/N)·∂/∂ε ∇_θ Σd(x + ε g)` at `ε = 0` with
/// `g = ∇_x Σd(x)`, evaluated by running a dual-number copy of the network
/// through forward and reverse once more.
pub fn r1_penalty<T: Real, D: Liftable<T>>(d: &D, real: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("r1_gamma must be positive, got {gamma}")));
    }
    let n = real.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("R1 penalty on an empty batch".into()));
    }
    let x = real.detach_requiring_grad();
    let g = crate::tensor::with_grad(|| -> Result<Vec<T>> {
        let y = d.logits(&x)?.sum();
        Ok(y.grad_of(&[&x])?.remove(0))
    })?;
    let value = gamma / (2.0 * n as f64) * g.iter().map(|v| v.primal() * v.primal()).sum::<f64>();

    let trainable: Vec<Tensor<T>> = d
        .params()
        .params()
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.clone())
        .collect();
    if trainable.is_empty() || !crate::tensor::grad_enabled() {
        return Ok(Tensor::scalar(T::from_f64(value)));
    }
    let dual = d.lift()?;
    let xd: Vec<Dual<T>> = x.data().iter().zip(&g).map(|(&re, &eps)| Dual { re, eps }).collect();
    let xd = Tensor::new(xd, x.shape())?;
    let dual_params: Vec<Tensor<Dual<T>>> = d
        .params()
        .params()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, _)| {
            dual.params()
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("lifted critic lacks `{name}`")))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<Dual<T>>> = dual_params.iter().collect();
    let grads = dual.logits(&xd)?.sum().grad_of(&refs)?;
    let scale = T::from_f64(gamma / n as f64);
    let weight_grads: Vec<Vec<T>> = grads
        .into_iter()
        .map(|gv| gv.into_iter().map(|v| scale * v.eps).collect())
        .collect();
    Ok(Tensor::from_op(
        vec![T::from_f64(value)],
        vec![1],
        "r1_penalty",
        trainable,
        Box::new(move |go, _, _| {
            weight_grads
                .iter()
                .map(|w| Some(w.iter().map(|&v| go[0] * v).collect()))
                .collect()
        }),
    ))
}

/// Input gradient `∇_x Σd(x)` without touching stored gradients.
pub fn input_gradient<T: Real>(d: &impl Critic<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    let x = x.detach_requiring_grad();
    let y = d.logits(&x)?.sum();
    Ok(y.grad_of(&[&x])?.remove(0))
}

/// Logits without building a graph.
pub fn score<T: Real>(d: &impl Critic<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    no_grad(|| Ok(d.logits(x)?.to_f64_vec()))
}
