//! Evaluation protocols shared by the command line and the acceptance
//! suite: embedder smoothness and verification, probe-based swap metrics
//! and the interpolation retrieval chain.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::metrics::{self, Direction, MetricRecord, ProbeEvaluation, Reference, SmoothnessReport, SwapSample};
use crate::rng::{purpose, stream};
use crate::swap::swap_images;
use crate::synth::{Dataset, Image, ImageRef, Split};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Slerp ratios at which d_smooth is reported.
    pub ratios: Vec<f64>,
    /// Test-split pairs interpolated for d_smooth and retrieval counts.
    pub smooth_pairs: usize,
    /// Random pairs averaged for the second d_smooth normalization.
    pub random_pairs: usize,
    /// Held-out (target, source) pairs for the swap probe metrics.
    pub swap_triples: usize,
    pub seed: u64,
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.25, 0.5],
            smooth_pairs: 64,
            random_pairs: 4000,
            swap_triples: 200,
            seed: 0,
            chunk: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "d_smooth ratios must lie in [0, 1], got {:?}",
                self.ratios
            )));
        }
        if self.smooth_pairs == 0 || self.random_pairs == 0 || self.swap_triples == 0 || self.chunk == 0 {
            return Err(Error::Config("evaluation counts must be positive".into()));
        }
        Ok(())
    }
}

/// Embeddings of every image of one split, with their identity labels.
pub struct EmbeddingTable {
    pub refs: Vec<ImageRef>,
    pub z: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn build<T: Real>(emb: &Embedder<T>, ds: &Dataset, split: Split, chunk: usize) -> Result<Self> {
        let refs = ds.refs(&ds.ids(split));
        let images = refs
            .iter()
            .map(|r| ds.labeled(*r).map(|l| l.image))
            .collect::<Result<Vec<_>>>()?;
        let z = emb.embed_images(&images.iter().collect::<Vec<_>>(), chunk)?;
        Ok(Self { refs, z })
    }

    /// Reference set whose record ids index `refs`.
    pub fn reference(&self) -> Vec<Reference> {
        self.z
            .iter()
            .enumerate()
            .map(|(i, z)| Reference {
                z: z.clone(),
                record: i,
            })
            .collect()
    }
}

/// `n` index pairs of different identities, drawn without regard to order.
pub fn interpolation_pairs(table: &EmbeddingTable, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let ids: std::collections::HashSet<usize> = table.refs.iter().map(|r| r.identity_id).collect();
    if ids.len() < 2 {
        return Err(Error::Dataset(
            "interpolation pairs need at least two identities".into(),
        ));
    }
    let mut rng = stream(seed, purpose::EVAL_PAIRS, 0);
    let all: Vec<usize> = (0..table.refs.len()).collect();
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let pick: Vec<usize> = all.choose_multiple(&mut rng, 2).copied().collect();
        if table.refs[pick[0]].identity_id != table.refs[pick[1]].identity_id {
            pairs.push((pick[0], pick[1]));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderEvaluation {
    pub verification_auc: f64,
    pub random_pair_norm: f64,
    pub smoothness: Vec<SmoothnessReport>,
    pub unique_retrievals: Vec<f64>,
}

impl EmbedderEvaluation {
    pub fn smoothness_at(&self, r: f64) -> Option<&SmoothnessReport> {
        self.smoothness.iter().find(|s| s.ratio == r)
    }

    pub fn mean_unique_retrievals(&self) -> f64 {
        self.unique_retrievals.iter().sum::<f64>() / self.unique_retrievals.len().max(1) as f64
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = vec![MetricRecord::new(
            "verification_auc",
            Direction::HigherBetter,
            vec![self.verification_auc],
        )];
        for s in &self.smoothness {
            out.push(MetricRecord::new(
                &format!("d_smooth@{}", s.ratio),
                Direction::LowerBetter,
                s.per_pair.clone(),
            ));
            let norm: Vec<f64> = s.gaps.iter().map(|g| g / self.random_pair_norm).collect();
            out.push(MetricRecord::new(
                &format!("d_smooth_random_norm@{}", s.ratio),
                Direction::LowerBetter,
                norm,
            ));
        }
        out.push(MetricRecord::new(
            "unique_retrievals",
            Direction::HigherBetter,
            self.unique_retrievals.clone(),
        ));
        out
    }
}

/// Verification AUC over all test-split image pairs, then d_smooth and
/// retrieval counts for test pairs against the train split as reference.
pub fn evaluate_embedder<T: Real>(emb: &Embedder<T>, ds: &Dataset, cfg: &EvalConfig) -> Result<EmbedderEvaluation> {
    cfg.validate()?;
    let train = EmbeddingTable::build(emb, ds, Split::Train, cfg.chunk)?;
    let test = EmbeddingTable::build(emb, ds, Split::Test, cfg.chunk)?;
    if train.z.is_empty() || test.z.len() < 2 {
        return Err(Error::Dataset(
            "evaluation needs train images and at least two test images".into(),
        ));
    }
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for i in 0..test.z.len() {
        for j in i + 1..test.z.len() {
            let s = metrics::dot(&test.z[i], &test.z[j]);
            if test.refs[i].identity_id == test.refs[j].identity_id {
                same.push(s);
            } else {
                diff.push(s);
            }
        }
    }
    let verification_auc = metrics::verification_auc(&same, &diff)?;

    let reference = train.reference();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = interpolation_pairs(&test, cfg.smooth_pairs, cfg.seed)?
        .into_iter()
        .map(|(a, b)| (test.z[a].clone(), test.z[b].clone()))
        .collect();
    let mut rng = stream(cfg.seed, purpose::EVAL_PAIRS, 1);
    let random_pair_norm = metrics::random_pair_mean_distance(&test.z, cfg.random_pairs, &mut rng)?;
    let smoothness = cfg
        .ratios
        .iter()
        .map(|&r| metrics::d_smooth(&pairs, &reference, r, Some(random_pair_norm)))
        .collect::<Result<Vec<_>>>()?;
    let unique_retrievals = pairs
        .iter()
        .map(|(a, b)| metrics::unique_retrieval_count(a, b, &reference, &metrics::RETRIEVAL_RATIOS).map(|c| c as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbedderEvaluation {
        verification_auc,
        random_pair_norm,
        smoothness,
        unique_retrievals,
    })
}

/// Held-out `(target, source)` pairs with different identities.
pub fn swap_pairs(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<(ImageRef, ImageRef)>> {
    let refs = ds.refs(&ds.ids(Split::Test));
    if ds.ids(Split::Test).len() < 2 {
        return Err(Error::Dataset(
            "swap evaluation needs at least two test identities".into(),
        ));
    }
    let mut rng = stream(seed, purpose::EVAL_PAIRS, 2);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = refs[rng.gen_range(0..refs.len())];
        let s = refs[rng.gen_range(0..refs.len())];
        if t.identity_id != s.identity_id {
            out.push((t, s));
        }
    }
    Ok(out)
}

/// Probe metrics of `gen` on held-out pairs; `None` evaluates the
/// identity-map bypass, which returns every target unchanged.
pub fn evaluate_swaps<T: Real>(
    gen: Option<&Generator<T>>,
    emb: &Embedder<T>,
    ds: &Dataset,
    pairs: &[(ImageRef, ImageRef)],
    chunk: usize,
) -> Result<ProbeEvaluation> {
    let mut tgt = Vec::with_capacity(pairs.len());
    let mut src = Vec::with_capacity(pairs.len());
    for (t, s) in pairs {
        tgt.push(ds.labeled(*t)?);
        src.push(ds.labeled(*s)?);
    }
    let swaps: Vec<Image> = match gen {
        Some(g) => swap_images(
            g,
            emb,
            &tgt.iter().map(|l| &l.image).collect::<Vec<_>>(),
            &src.iter().map(|l| &l.image).collect::<Vec<_>>(),
            chunk,
        )?,
        None => tgt.iter().map(|l| l.image.clone()).collect(),
    };
    let samples: Vec<SwapSample> = swaps
        .into_iter()
        .zip(tgt.iter().zip(&src))
        .map(|(swap, (t, s))| SwapSample {
            swap,
            source: s.identity_factors.clone(),
            target: t.identity_factors.clone(),
            source_nuisance: s.nuisance.clone(),
            target_nuisance: t.nuisance.clone(),
        })
        .collect();
    metrics::swap_identity_probe_eval(&samples)
}

/// One step of the nearest-neighbour chain between two test images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub ratio: f64,
    pub identity_id: usize,
    pub instance: usize,
    pub distance: f64,
}

/// Train images retrieved along the Slerp path between test pair `pair`
/// (indexing [`interpolation_pairs`]), framed by the two endpoints.
pub fn interpolation_chain<T: Real>(
    emb: &Embedder<T>,
    ds: &Dataset,
    cfg: &EvalConfig,
    pair: usize,
) -> Result<(Vec<ChainStep>, Vec<Image>)> {
    let train = EmbeddingTable::build(emb, ds, Split::Train, cfg.chunk)?;
    let test = EmbeddingTable::build(emb, ds, Split::Test, cfg.chunk)?;
    let pairs = interpolation_pairs(&test, pair + 1, cfg.seed)?;
    let (a, b) = pairs[pair];
    let chain = metrics::retrieval_chain(&test.z[a], &test.z[b], &train.reference(), &metrics::RETRIEVAL_RATIOS)?;
    let mut images = vec![ds.labeled(test.refs[a])?.image];
    let mut steps = Vec::with_capacity(chain.len());
    for (ratio, record, distance) in chain {
        let r = train.refs[record];
        images.push(ds.labeled(r)?.image);
        steps.push(ChainStep {
            ratio,
            identity_id: r.identity_id,
            instance: r.instance,
            distance,
        });
    }
    images.push(ds.labeled(test.refs[b])?.image);
    Ok((steps, images))
}
