//! The swap training loop: identity, change and adversarial losses for the
//! generator, non-saturating loss plus R1 for the discriminator, with the
//! embedder frozen throughout.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, Discriminator, DiscriminatorConfig};
use crate::checkpoint::{self, NamedArray};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{purpose, stream};
use crate::synth::{self, ppm, Dataset, Image, SwapBatch};
use crate::tensor::{no_grad, Real, Tensor};

/// The step count of the full-size schedule.
pub const PAPER_STEPS: u64 = 800_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwapLossWeights {
    pub id: f64,
    pub chg: f64,
    pub adv: f64,
}

impl Default for SwapLossWeights {
    fn default() -> Self {
        Self {
            id: 4.0,
            chg: 1.0,
            adv: 1.0,
        }
    }
}

impl SwapLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.id, self.chg, self.adv];
        if all.iter().any(|w| !(w >= &0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_dis: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Image-grid cadence; 0 disables grids.
    pub grid_every: u64,
    /// Halt after this many steps with a resumable checkpoint.
    pub stop_at: Option<u64>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            batch_size: 8,
            lr_gen: 1e-3,
            lr_dis: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 1000,
            grid_every: 1000,
            stop_at: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 to hold the reconstruction pair, got {}",
                self.batch_size
            )));
        }
        if !(self.lr_gen > 0.0 && self.lr_dis > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// `mean_i (1 − ⟨z_swap_i, z_src_i⟩)` for unit-length rows.
pub fn identity_loss<T: Real>(z_swap: &Tensor<T>, z_src: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(z_swap.rows_dot(z_src)?.neg().add_scalar(1.0).mean())
}

/// Mean squared pixel difference: `‖x_swap − x_tgt‖²/D` averaged over the batch.
pub fn change_loss<T: Real>(x_swap: &Tensor<T>, x_tgt: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x_swap.sub(x_tgt)?.square().mean())
}

/// Scalar values of one generator loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_id: f64,
    pub l_chg: f64,
    pub l_adv: f64,
    pub total: f64,
    pub reconstruction: usize,
    /// `L_chg` of the reconstruction pair alone, where it acts as a reconstruction loss.
    pub recon_l_chg: f64,
    pub recon_l_id: f64,
}

/// Inputs of one generator update, already as tensors.
pub struct SwapInputs<T: Real> {
    pub x_tgt: Tensor<T>,
    pub z_src: Tensor<T>,
    pub flags: Vec<bool>,
}

/// `λ_id·L_id + λ_chg·L_chg + λ_adv·L_adv` on one batch.
pub fn total_generator_loss<T: Real>(
    gen: &Generator<T>,
    emb: &Embedder<T>,
    dis: &Discriminator<T>,
    inputs: &SwapInputs<T>,
    weights: &SwapLossWeights,
) -> Result<(Tensor<T>, LossReport)> {
    weights.validate()?;
    let recon: Vec<usize> = inputs
        .flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i)
        .collect();
    if recon.len() != 1 {
        return Err(Error::Contract(format!(
            "a swap batch needs exactly one reconstruction pair, found {}",
            recon.len()
        )));
    }
    let r = recon[0];
    let n = inputs.x_tgt.shape()[0];
    if inputs.flags.len() != n {
        return Err(Error::dim("swap flags", &[inputs.flags.len()], &[n]));
    }
    let x_swap = gen.forward(&inputs.x_tgt, &inputs.z_src)?;
    let z_swap = emb.forward(&x_swap, false)?.z;
    let l_id = identity_loss(&z_swap, &inputs.z_src)?;
    let l_chg = change_loss(&x_swap, &inputs.x_tgt)?;
    let l_adv = adversary::g_loss(&dis.logits(&x_swap)?);
    let total = l_id
        .scale(weights.id)
        .add(&l_chg.scale(weights.chg))?
        .add(&l_adv.scale(weights.adv))?;

    let per_pixel = x_swap.numel() / n;
    let (xs, xt) = (x_swap.to_f64_vec(), inputs.x_tgt.to_f64_vec());
    let recon_l_chg = xs[r * per_pixel..(r + 1) * per_pixel]
        .iter()
        .zip(&xt[r * per_pixel..(r + 1) * per_pixel])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / per_pixel as f64;
    let d = emb.config.d_emb;
    let (zs, zr) = (z_swap.to_f64_vec(), inputs.z_src.to_f64_vec());
    let recon_l_id = 1.0 - (0..d).map(|k| zs[r * d + k] * zr[r * d + k]).sum::<f64>();
    let report = LossReport {
        l_id: l_id.item().primal(),
        l_chg: l_chg.item().primal(),
        l_adv: l_adv.item().primal(),
        total: total.item().primal(),
        reconstruction: r,
        recon_l_chg,
        recon_l_id,
    };
    Ok((total, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_id: f64,
    pub l_chg: f64,
    pub l_adv: f64,
    pub d_loss: f64,
    pub r1: f64,
    pub lr_gen: f64,
    pub lr_dis: f64,
}

impl StepMetrics {
    fn all_finite(&self) -> bool {
        [self.l_id, self.l_chg, self.l_adv, self.d_loss, self.r1]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct SwapPaths {
    pub dir: PathBuf,
}

impl SwapPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn checkpoint(&self, net: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("latest_{net}"))
    }
    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator")
    }
    pub fn discriminator(&self) -> PathBuf {
        self.dir.join("discriminator")
    }
    pub fn grid(&self, step: u64) -> PathBuf {
        self.dir.join("grids").join(format!("step_{step:07}.ppm"))
    }
}

/// Everything a swap run owns: the three networks, both optimizers and the log.
pub struct SwapTrainer<'a, T: Real> {
    pub dataset: &'a Dataset,
    pub embedder: &'a Embedder<T>,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub weights: SwapLossWeights,
    pub config: TrainRunConfig,
    pub log: Vec<StepMetrics>,
    pub step: u64,
    adam_g: AdamState<T>,
    adam_d: AdamState<T>,
    train_ids: Vec<usize>,
    embedder_checksum: String,
    paths: Option<SwapPaths>,
}

impl<'a, T: Real> SwapTrainer<'a, T> {
    pub fn new(
        dataset: &'a Dataset,
        embedder: &'a Embedder<T>,
        gen_config: GeneratorConfig,
        dis_config: DiscriminatorConfig,
        weights: SwapLossWeights,
        config: TrainRunConfig,
        out: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        if embedder.params.params().any(|(_, t)| t.requires_grad()) {
            return Err(Error::Contract("the swap embedder must be frozen".into()));
        }
        let res = dataset.config.resolution;
        if gen_config.resolution != res || dis_config.resolution != res || embedder.config.resolution != res {
            return Err(Error::Config(format!(
                "all networks must run at the dataset resolution {res}"
            )));
        }
        if gen_config.d_emb != embedder.config.d_emb {
            return Err(Error::Config(format!(
                "generator expects {}-d embeddings, embedder produces {}",
                gen_config.d_emb, embedder.config.d_emb
            )));
        }
        let generator = Generator::new(gen_config, true)?;
        let discriminator = Discriminator::new(dis_config, true)?;
        let adam_g = AdamState::new(&generator.params, config.adam(config.lr_gen));
        let adam_d = AdamState::new(&discriminator.params, config.adam(config.lr_dis));
        let paths = out.map(|d| SwapPaths { dir: d.to_path_buf() });
        if let Some(p) = &paths {
            fs::create_dir_all(p.dir.join("checkpoints"))?;
            if config.grid_every > 0 {
                fs::create_dir_all(p.dir.join("grids"))?;
            }
        }
        Ok(Self {
            dataset,
            embedder,
            generator,
            discriminator,
            weights,
            config,
            log: Vec::new(),
            step: 0,
            adam_g,
            adam_d,
            train_ids: dataset.ids(synth::Split::Train),
            embedder_checksum: embedder.params.checksum(),
            paths,
        })
    }

    pub fn embedder_checksum(&self) -> &str {
        &self.embedder_checksum
    }

    /// Fails if the embedder weights changed since the run started.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.embedder.params.checksum();
        if now != self.embedder_checksum {
            return Err(Error::Contract(format!(
                "embedder weights changed during swap training ({} → {now})",
                self.embedder_checksum
            )));
        }
        Ok(())
    }

    pub fn batch(&self, step: u64) -> Result<SwapBatch> {
        let mut rng = stream(self.config.seed, purpose::SWAP_BATCH, step);
        let b = synth::sample_swap_batch(self.dataset, &self.train_ids, self.config.batch_size, &mut rng)?;
        b.check()?;
        Ok(b)
    }

    fn images(&self, refs: &[synth::ImageRef]) -> Result<Vec<Image>> {
        refs.iter().map(|r| self.dataset.labeled(*r).map(|l| l.image)).collect()
    }

    /// Tensors of one batch, with `z_src` from the embedder in eval mode.
    pub fn inputs(&self, batch: &SwapBatch) -> Result<(SwapInputs<T>, Tensor<T>)> {
        let tgt = self.images(&batch.targets)?;
        let src = self.images(&batch.sources)?;
        let x_tgt = synth::to_tensor::<T>(&tgt.iter().collect::<Vec<_>>())?;
        let x_src = synth::to_tensor::<T>(&src.iter().collect::<Vec<_>>())?;
        let z_src = no_grad(|| self.embedder.embed(&x_src))?;
        Ok((
            SwapInputs {
                x_tgt,
                z_src,
                flags: batch.flags(),
            },
            x_src,
        ))
    }

    /// One discriminator update followed by one generator update against
    /// the updated discriminator. An update whose loss is not finite is
    /// not applied.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch(self.step)?;
        let (inputs, x_src) = self.inputs(&batch)?;
        let diverged = |what: &str, step: u64| Error::Divergence {
            name: format!("{what} at swap step {step}"),
        };

        let fake = no_grad(|| self.generator.forward(&inputs.x_tgt, &inputs.z_src))?;
        let real_logits = self.discriminator.logits(&x_src)?;
        let fake_logits = self.discriminator.logits(&fake)?;
        let d_adv = adversary::d_loss(&real_logits, &fake_logits);
        let r1 = adversary::r1_penalty(&self.discriminator, &x_src, self.discriminator.config.r1_gamma)?;
        let (d_value, r1_value) = (d_adv.item().primal(), r1.item().primal());
        if !(d_value.is_finite() && r1_value.is_finite()) {
            return Err(diverged("discriminator loss", self.step));
        }
        self.discriminator.params.zero_grad();
        d_adv.add(&r1)?.backward()?;
        self.adam_d.step(&self.discriminator.params, self.config.lr_dis)?;

        let (g_total, report) = total_generator_loss(
            &self.generator,
            self.embedder,
            &self.discriminator,
            &inputs,
            &self.weights,
        )?;
        let metrics = StepMetrics {
            step: self.step,
            l_id: report.l_id,
            l_chg: report.l_chg,
            l_adv: report.l_adv,
            d_loss: d_value,
            r1: r1_value,
            lr_gen: self.config.lr_gen,
            lr_dis: self.config.lr_dis,
        };
        if !metrics.all_finite() {
            return Err(diverged("generator loss", self.step));
        }
        self.generator.params.zero_grad();
        g_total.backward()?;
        self.adam_g.step(&self.generator.params, self.config.lr_gen)?;
        self.discriminator.params.zero_grad();

        self.log.push(metrics);
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `total_steps` (or `stop_at`), writing the log, grids and
    /// checkpoints on their cadences. On divergence the current state is
    /// checkpointed before the error is returned.
    pub fn run(&mut self) -> Result<&[StepMetrics]> {
        let end = self
            .config
            .stop_at
            .map_or(self.config.total_steps, |s| s.min(self.config.total_steps));
        while self.step < end {
            match self.train_step() {
                Ok(m) => {
                    if m.step % 100 == 0 {
                        info!(
                            "swap step {} L_id {:.4} L_chg {:.5} L_adv {:.4} d {:.4} r1 {:.4}",
                            m.step, m.l_id, m.l_chg, m.l_adv, m.d_loss, m.r1
                        );
                    }
                }
                Err(e @ Error::Divergence { .. }) => {
                    self.save_checkpoint()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            let every = |k: u64| k > 0 && self.step % k == 0;
            if every(self.config.grid_every) {
                self.write_grid(self.step)?;
            }
            if every(self.config.checkpoint_every) && self.step < end {
                self.verify_frozen()?;
                self.save_checkpoint()?;
            }
        }
        self.verify_frozen()?;
        self.save_checkpoint()?;
        if let Some(p) = &self.paths {
            if self.step == self.config.total_steps {
                self.generator.save(&p.generator())?;
                self.discriminator.save(&p.discriminator())?;
            }
        }
        Ok(&self.log)
    }

    pub fn save_checkpoint(&self) -> Result<()> {
        let Some(p) = &self.paths else { return Ok(()) };
        let meta = serde_json::json!({
            "step": self.step,
            "embedder_checksum": self.embedder_checksum,
            "generator": self.generator.config,
            "discriminator": self.discriminator.config,
        });
        let mut g: Vec<NamedArray<T>> = checkpoint::arrays_of(&self.generator.params);
        g.extend(checkpoint::adam_arrays("adam", &self.generator.params, &self.adam_g));
        checkpoint::write_arrays(&p.checkpoint("gen"), &g, meta.clone())?;
        let mut d: Vec<NamedArray<T>> = checkpoint::arrays_of(&self.discriminator.params);
        d.extend(checkpoint::adam_arrays(
            "adam",
            &self.discriminator.params,
            &self.adam_d,
        ));
        checkpoint::write_arrays(&p.checkpoint("dis"), &d, meta)?;
        write_log(&p.log(), &self.log)
    }

    /// Restores the latest checkpoint in the output directory, if any.
    /// Returns the step training will continue from.
    pub fn resume(&mut self) -> Result<u64> {
        let Some(p) = &self.paths else { return Ok(self.step) };
        if !checkpoint::manifest_path(&p.checkpoint("gen")).exists() {
            return Ok(self.step);
        }
        let (gm, ga) = checkpoint::read_arrays::<T>(&p.checkpoint("gen"))?;
        let (_, da) = checkpoint::read_arrays::<T>(&p.checkpoint("dis"))?;
        if gm.meta["embedder_checksum"].as_str() != Some(self.embedder_checksum.as_str()) {
            return Err(Error::Checkpoint(
                "checkpoint was trained against a different embedder".into(),
            ));
        }
        let step = gm.meta["step"].as_u64().unwrap_or(0);
        checkpoint::assign(&self.generator.params, &ga)?;
        checkpoint::assign(&self.discriminator.params, &da)?;
        checkpoint::restore_adam("adam", &self.generator.params, &mut self.adam_g, &ga, step)?;
        checkpoint::restore_adam("adam", &self.discriminator.params, &mut self.adam_d, &da, step)?;
        self.log = read_log(&p.log())?;
        self.log.retain(|m| m.step < step);
        self.step = step;
        info!("resuming swap training at step {step}");
        Ok(step)
    }

    /// Source, target and swap of the first four pairs of the step's batch, one triple per row.
    pub fn write_grid(&self, step: u64) -> Result<()> {
        let Some(p) = &self.paths else { return Ok(()) };
        let batch = self.batch(step)?;
        let (inputs, x_src) = self.inputs(&batch)?;
        let swap = no_grad(|| self.generator.generate(&inputs.x_tgt, &inputs.z_src))?;
        let (src, tgt, out) = (
            synth::from_tensor(&x_src)?,
            synth::from_tensor(&inputs.x_tgt)?,
            synth::from_tensor(&swap)?,
        );
        let mut tiles = Vec::new();
        for i in 0..src.len().min(4) {
            tiles.extend([src[i].clone(), tgt[i].clone(), out[i].clone()]);
        }
        ppm::write(&p.grid(step), &ppm::grid(&tiles, 3)?)
    }
}

pub fn write_log(path: &Path, log: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in log {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<StepMetrics>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Inference swaps: each target takes the identity of the matching source.
pub fn swap_images<T: Real>(
    gen: &Generator<T>,
    emb: &Embedder<T>,
    targets: &[&Image],
    sources: &[&Image],
    chunk: usize,
) -> Result<Vec<Image>> {
    if targets.len() != sources.len() {
        return Err(Error::dim("swap_images", &[targets.len()], &[sources.len()]));
    }
    no_grad(|| {
        let mut out = Vec::with_capacity(targets.len());
        for (t, s) in targets.chunks(chunk.max(1)).zip(sources.chunks(chunk.max(1))) {
            let z = emb.embed(&synth::to_tensor(s)?)?;
            out.extend(synth::from_tensor(&gen.generate(&synth::to_tensor(t)?, &z)?)?);
        }
        Ok(out)
    })
}

/// Trailing moving average of `values` over `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Smoothed `L_id` divided by its first smoothed value, so runs with
/// different embedders share a scale.
pub fn normalized_identity_curve(log: &[StepMetrics], window: usize) -> Vec<f64> {
    let l: Vec<f64> = log.iter().map(|m| m.l_id).collect();
    let s = moving_average(&l, window);
    let l0 = log.first().map(|m| m.l_id).unwrap_or(1.0);
    s.iter().map(|v| v / l0).collect()
}

/// Smoothed `L_chg` at the first step where the normalized identity curve
/// reaches `level`, or `None` if the run never gets there.
pub fn change_at_identity_level(log: &[StepMetrics], window: usize, level: f64) -> Option<f64> {
    let id = normalized_identity_curve(log, window);
    let chg = moving_average(&log.iter().map(|m| m.l_chg).collect::<Vec<_>>(), window);
    id.iter().position(|&v| v <= level).map(|i| chg[i])
}
