//! Identity embedder: a small conv trunk, a two-layer head with batch norm,
//! and unit-length output. Trained either with the supervised contrastive
//! loss or, for the ablation twin, with softmax cross-entropy on the
//! pre-normalization feature.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedArray};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm1d, Conv2d, GroupNorm, Init, Linear, ParamBuilder, ParamSet};
use crate::optim::{AdamConfig, AdamState, StepDecay};
use crate::rng::{purpose, stream};
use crate::synth::{self, Dataset, ImageRef};
use crate::tensor::{no_grad, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Contrastive,
    CrossEntropy { num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    /// Trunk width per stage; each stage starts by halving the resolution.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub d_emb: usize,
    pub temperature: f64,
    pub resolution: usize,
    pub head: Head,
    pub init_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32, 64],
            hidden: 128,
            d_emb: 64,
            temperature: 0.07,
            resolution: 32,
            head: Head::Contrastive,
            init_seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.d_emb < 2 {
            return Err(Error::Config(format!("d_emb must be at least 2, got {}", self.d_emb)));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("trunk needs at least one stage of positive width".into()));
        }
        if self.resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.channels.len()
            )));
        }
        if let Head::CrossEntropy { num_classes } = self.head {
            if num_classes < 2 {
                return Err(Error::Config("cross-entropy head needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}

struct Stage<T: Real> {
    conv1: Conv2d<T>,
    norm1: GroupNorm<T>,
    conv2: Conv2d<T>,
    norm2: GroupNorm<T>,
}

pub struct Embedder<T: Real> {
    pub config: EmbedderConfig,
    pub params: ParamSet<T>,
    stem: Conv2d<T>,
    stages: Vec<Stage<T>>,
    fc1: Linear<T>,
    fc2: Linear<T>,
    bn: BatchNorm1d<T>,
    classifier: Option<Linear<T>>,
}

/// Unit-length embedding and the feature it was normalized from.
pub struct EmbedOutput<T: Real> {
    pub z: Tensor<T>,
    pub feature: Tensor<T>,
}

impl<T: Real> Embedder<T> {
    /// `trainable = false` builds a frozen network: gradients still flow to
    /// the input but never into the weights.
    pub fn new(config: EmbedderConfig, trainable: bool) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.init_seed, trainable);
        let u = Init::Uniform { scale: 1.0 };
        let stem = Conv2d::new(&mut b, "stem", 3, config.channels[0], 3, u);
        let mut c_in = config.channels[0];
        let stages = b.scope("trunk", |b| {
            config
                .channels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let s = b.scope(&format!("stage{i}"), |b| Stage {
                        conv1: Conv2d::new(b, "conv1", c_in, c, 3, u),
                        norm1: GroupNorm::new(b, "norm1", c),
                        conv2: Conv2d::new(b, "conv2", c, c, 3, u),
                        norm2: GroupNorm::new(b, "norm2", c),
                    });
                    c_in = c;
                    s
                })
                .collect()
        });
        let (fc1, fc2, bn) = b.scope("head", |b| {
            (
                Linear::new(b, "fc1", c_in, config.hidden, u),
                Linear::new(b, "fc2", config.hidden, config.d_emb, u),
                BatchNorm1d::new(b, "bn", config.d_emb),
            )
        });
        let classifier = match config.head {
            Head::CrossEntropy { num_classes } => Some(Linear::new(&mut b, "classifier", config.d_emb, num_classes, u)),
            Head::Contrastive => None,
        };
        Ok(Self {
            config,
            params: b.finish(),
            stem,
            stages,
            fc1,
            fc2,
            bn,
            classifier,
        })
    }

    pub fn forward(&self, images: &Tensor<T>, training: bool) -> Result<EmbedOutput<T>> {
        let s = images.shape();
        let r = self.config.resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::dim("embed", s, &[s.first().copied().unwrap_or(0), 3, r, r]));
        }
        let mut h = self.stem.forward(images)?;
        for st in &self.stages {
            h = h.avg_pool2x()?;
            h = st.norm1.forward(&st.conv1.forward(&h)?)?.silu();
            h = st.norm2.forward(&st.conv2.forward(&h)?)?.silu();
        }
        let pooled = h.mean_spatial()?;
        let hidden = self.fc1.forward(&pooled)?.silu();
        let feature = self.bn.forward(&self.fc2.forward(&hidden)?, training)?;
        let z = feature.l2_normalize_rows()?;
        Ok(EmbedOutput { z, feature })
    }

    /// Unit-length embeddings in eval mode.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(images, false)?.z)
    }

    /// Embeds images in chunks without recording a graph.
    pub fn embed_images(&self, images: &[&synth::Image], chunk: usize) -> Result<Vec<Vec<f64>>> {
        no_grad(|| {
            let mut out = Vec::with_capacity(images.len());
            for c in images.chunks(chunk.max(1)) {
                let z = self.embed(&synth::to_tensor(c)?)?;
                out.extend(z.to_f64_vec().chunks(self.config.d_emb).map(|r| r.to_vec()));
            }
            Ok(out)
        })
    }

    pub fn logits(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.classifier {
            Some(c) => c.forward(feature),
            None => Err(Error::Config("contrastive embedder has no classifier".into())),
        }
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        checkpoint::save_params(stem, &self.params, serde_json::json!({ "embedder": self.config }))
    }

    /// A weight-frozen copy, as used while training the swap generator.
    pub fn frozen(&self) -> Result<Self> {
        let f = Self::new(self.config.clone(), false)?;
        f.params.copy_from(&self.params, |v| v)?;
        Ok(f)
    }

    /// Loads weights and config written by [`Embedder::save`] or by training.
    pub fn load(stem: &Path, trainable: bool) -> Result<Self> {
        let (manifest, arrays) = checkpoint::read_arrays::<T>(stem)?;
        let config: EmbedderConfig = serde_json::from_value(manifest.meta["embedder"].clone())
            .map_err(|e| Error::Checkpoint(format!("embedder config missing from checkpoint: {e}")))?;
        let emb = Self::new(config, trainable)?;
        checkpoint::assign(&emb.params, &arrays)?;
        Ok(emb)
    }
}

/// Mean supervised contrastive loss over all anchors.
pub fn supcon_loss<T: Real>(z: &Tensor<T>, ids: &[usize], temperature: f64) -> Result<Tensor<T>> {
    let anchors: Vec<usize> = (0..ids.len()).collect();
    supcon_loss_anchors(z, ids, temperature, &anchors)
}

/// Supervised contrastive loss averaged over the given anchors and over each
/// anchor's positives. For anchor `i` and positive `p` the term is
/// `−log(e^{s_ip} / (e^{s_ip} + Σ_n e^{s_in}))` with `s = ⟨z_i, z_j⟩/τ` and
/// `n` ranging over the other identities. The anchor never pairs with itself.
pub fn supcon_loss_anchors<T: Real>(
    z: &Tensor<T>,
    ids: &[usize],
    temperature: f64,
    anchors: &[usize],
) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 2 || s[0] != ids.len() {
        return Err(Error::dim("supcon_loss", s, &[ids.len(), 0]));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if anchors.is_empty() {
        return Err(Error::Contract("supcon_loss needs at least one anchor".into()));
    }
    let (n, d) = (s[0], s[1]);
    for &i in anchors {
        if i >= n {
            return Err(Error::Contract(format!("anchor {i} outside a batch of {n}")));
        }
        if !(0..n).any(|p| p != i && ids[p] == ids[i]) {
            return Err(Error::Contract(format!(
                "identity {} has no positive for anchor {i}",
                ids[i]
            )));
        }
    }
    let inv_tau = 1.0 / temperature;
    let zd: Vec<f64> = z.to_f64_vec();
    let sim = |i: usize, j: usize| inv_tau * (0..d).map(|k| zd[i * d + k] * zd[j * d + k]).sum::<f64>();
    // dL/dS, accumulated per (anchor, other)
    let mut g = vec![0.0f64; n * n];
    let mut total = 0.0;
    let a_count = anchors.len() as f64;
    for &i in anchors {
        let row: Vec<f64> = (0..n)
            .map(|j| if j == i { f64::NEG_INFINITY } else { sim(i, j) })
            .collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && ids[p] == ids[i]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&q| ids[q] != ids[i]).collect();
        let neg_sum: f64 = negatives.iter().map(|&q| (row[q] - m).exp()).sum();
        let w = 1.0 / (a_count * positives.len() as f64);
        for &p in &positives {
            let ep = (row[p] - m).exp();
            let denom = ep + neg_sum;
            total += w * (denom.ln() - (row[p] - m));
            g[i * n + p] += w * (ep / denom - 1.0);
            for &q in &negatives {
                g[i * n + q] += w * (row[q] - m).exp() / denom;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![T::from_f64(total)],
        vec![],
        "supcon_loss",
        vec![z.clone()],
        Box::new(move |go, _, parents| {
            let zd = parents[0].data();
            let scale = go[0].primal() * inv_tau;
            let mut gz = vec![T::zero(); n * d];
            for i in 0..n {
                for j in 0..n {
                    let c = g[i * n + j] + g[j * n + i];
                    if c != 0.0 {
                        let c = T::from_f64(c * scale);
                        for k in 0..d {
                            gz[i * d + k] += c * zd[j * d + k];
                        }
                    }
                }
            }
            vec![Some(gz)]
        }),
    ))
}

/// Softmax cross-entropy of the classifier applied to `feature`.
pub fn cross_entropy_head_loss<T: Real>(
    emb: &Embedder<T>,
    feature: &Tensor<T>,
    classes: &[usize],
) -> Result<Tensor<T>> {
    emb.logits(feature)?.softmax_cross_entropy(classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTrainConfig {
    pub steps: u64,
    pub identities_per_batch: usize,
    pub instances_per_identity: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Halt after this many steps with a resumable checkpoint; the schedule
    /// still follows `steps`.
    pub stop_at: Option<u64>,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            identities_per_batch: 16,
            instances_per_identity: 4,
            adam: AdamConfig::default(),
            checkpoint_every: 1000,
            seed: 0,
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// `K` distinct identities × `M` distinct instances, drawn from `ids` as a
/// pure function of `(seed, step)`.
pub fn identity_batch(
    dataset: &Dataset,
    ids: &[usize],
    k: usize,
    m: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<ImageRef>> {
    if ids.len() < k || k < 2 {
        return Err(Error::Dataset(format!(
            "need {k} ≥ 2 identities per batch, split has {}",
            ids.len()
        )));
    }
    if dataset.config.instances_per_identity < m {
        return Err(Error::Dataset(format!(
            "need {m} instances per identity, dataset has {}",
            dataset.config.instances_per_identity
        )));
    }
    let mut rng = stream(seed, purpose::EMBED_BATCH, step);
    let chosen: Vec<usize> = ids.choose_multiple(&mut rng, k).copied().collect();
    let inst: Vec<usize> = (0..dataset.config.instances_per_identity).collect();
    let mut out = Vec::with_capacity(k * m);
    for id in chosen {
        for &i in inst.choose_multiple(&mut rng, m) {
            out.push(ImageRef {
                identity_id: id,
                instance: i,
            });
        }
    }
    Ok(out)
}

pub struct TrainPaths {
    pub dir: PathBuf,
}

impl TrainPaths {
    pub fn latest(&self) -> PathBuf {
        self.dir.join("checkpoints").join("latest")
    }
    pub fn weights(&self) -> PathBuf {
        self.dir.join("embedder")
    }
    pub fn curve(&self) -> PathBuf {
        self.dir.join("loss_curve.csv")
    }
}

pub(crate) fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Runs the training loop. With `out` set, writes the loss curve, the final
/// weights and a resumable checkpoint every `checkpoint_every` steps; with
/// `resume` it continues from that checkpoint. On divergence the last good
/// checkpoint is left untouched and [`Error::Divergence`] is returned.
pub fn train_embedder<T: Real>(
    emb: &Embedder<T>,
    dataset: &Dataset,
    cfg: &EmbedderTrainConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<Vec<CurvePoint>> {
    if emb.config.resolution != dataset.config.resolution {
        return Err(Error::Config(format!(
            "embedder resolution {} does not match dataset resolution {}",
            emb.config.resolution, dataset.config.resolution
        )));
    }
    let train_ids = dataset.ids(synth::Split::Train);
    if let Head::CrossEntropy { num_classes } = emb.config.head {
        if num_classes != train_ids.len() {
            return Err(Error::Config(format!(
                "cross-entropy head has {num_classes} classes but the train split has {} identities",
                train_ids.len()
            )));
        }
    }
    let class_of = |id: usize| train_ids.iter().position(|&x| x == id).unwrap_or(usize::MAX);
    let schedule = StepDecay::new(cfg.adam.learning_rate, cfg.steps);
    let mut adam = AdamState::new(&emb.params, cfg.adam);
    let paths = out.map(|d| TrainPaths { dir: d.to_path_buf() });
    let mut curve = Vec::new();
    let mut start = 0;
    if let (Some(p), true) = (&paths, resume) {
        if p.latest().with_extension("json").exists() {
            let (manifest, arrays) = checkpoint::read_arrays::<T>(&p.latest())?;
            checkpoint::assign(&emb.params, &arrays)?;
            start = manifest.meta["step"].as_u64().unwrap_or(0);
            checkpoint::restore_adam("adam", &emb.params, &mut adam, &arrays, start)?;
            curve = read_curve(&p.curve())?;
            curve.retain(|c| c.step < start);
            info!("resuming embedder training at step {start}");
        }
    }
    if let Some(p) = &paths {
        fs::create_dir_all(p.dir.join("checkpoints"))?;
    }
    let save = |step: u64, adam: &AdamState<T>| -> Result<()> {
        if let Some(p) = &paths {
            let mut arrays: Vec<NamedArray<T>> = checkpoint::arrays_of(&emb.params);
            arrays.extend(checkpoint::adam_arrays("adam", &emb.params, adam));
            checkpoint::write_arrays(
                &p.latest(),
                &arrays,
                serde_json::json!({ "step": step, "embedder": emb.config }),
            )?;
        }
        Ok(())
    };
    let end = cfg.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    for step in start..end {
        let refs = identity_batch(
            dataset,
            &train_ids,
            cfg.identities_per_batch,
            cfg.instances_per_identity,
            cfg.seed,
            step,
        )?;
        let images: Vec<_> = refs
            .iter()
            .map(|r| dataset.labeled(*r).map(|l| l.image))
            .collect::<Result<_>>()?;
        let x = synth::to_tensor::<T>(&images.iter().collect::<Vec<_>>())?;
        let ids: Vec<usize> = refs.iter().map(|r| r.identity_id).collect();
        let out = emb.forward(&x, true)?;
        let loss = match emb.config.head {
            Head::Contrastive => supcon_loss(&out.z, &ids, emb.config.temperature)?,
            Head::CrossEntropy { .. } => {
                let classes: Vec<usize> = ids.iter().map(|&i| class_of(i)).collect();
                cross_entropy_head_loss(emb, &out.feature, &classes)?
            }
        };
        let value = loss.item().primal();
        if !value.is_finite() {
            return Err(Error::Divergence {
                name: "embedder loss".into(),
            });
        }
        emb.params.zero_grad();
        loss.backward()?;
        let lr = schedule.lr_at(step);
        adam.step(&emb.params, lr)?;
        curve.push(CurvePoint { step, loss: value, lr });
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < end {
            save(done, &adam)?;
            if let Some(p) = &paths {
                write_curve(&p.curve(), &curve)?;
            }
        }
        if step % 100 == 0 {
            info!("embedder step {step} loss {value:.4} lr {lr:.1e}");
        }
    }
    if let Some(p) = &paths {
        save(end, &adam)?;
        write_curve(&p.curve(), &curve)?;
        if end == cfg.steps {
            emb.save(&p.weights())?;
        }
    }
    Ok(curve)
}
