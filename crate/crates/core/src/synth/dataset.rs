use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

use super::{ppm, render, sample_identity, sample_nuisance, IdentityFactors, Image, NuisanceFactors, RESOLUTIONS};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub identities: usize,
    pub instances_per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Fraction of identities held out for testing.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 64,
            instances_per_identity: 16,
            resolution: 32,
            seed: 0,
            test_fraction: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!("unsupported resolution {}", self.resolution)));
        }
        if self.instances_per_identity == 0 {
            return Err(Error::Config("instances_per_identity must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} outside [0, 1)",
                self.test_fraction
            )));
        }
        if self.identities < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        if self.test_fraction == 0.0 {
            0
        } else {
            ((self.identities as f64 * self.test_fraction).round() as usize).clamp(1, self.identities - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    pub factors: IdentityFactors,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub identity_id: usize,
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub identity_id: usize,
    pub identity_factors: IdentityFactors,
    pub nuisance: NuisanceFactors,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    identity_id: usize,
    instance: usize,
    seed: u64,
    identity_factors: IdentityFactors,
    nuisance: NuisanceFactors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub identities: Vec<IdentityRecord>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub images: Vec<String>,
}

/// Identity table plus the rule that turns `(identity, instance)` into an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub identities: Vec<IdentityRecord>,
}

impl Dataset {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let mut order: Vec<usize> = (0..config.identities).collect();
        order.shuffle(&mut stream(config.seed, purpose::SPLIT, 0));
        let mut split = vec![Split::Train; config.identities];
        for &i in &order[..config.test_count()] {
            split[i] = Split::Test;
        }
        let identities = (0..config.identities)
            .map(|id| IdentityRecord {
                id,
                factors: sample_identity(stream(config.seed, purpose::IDENTITY, id as u64).gen()),
                split: split[id],
            })
            .collect();
        Ok(Self { config, identities })
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.identities
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id)
            .collect()
    }

    pub fn identity(&self, id: usize) -> Result<&IdentityRecord> {
        self.identities
            .get(id)
            .ok_or_else(|| Error::Dataset(format!("identity {id} not in a table of {}", self.identities.len())))
    }

    pub fn image_seed(&self, r: ImageRef) -> u64 {
        let index = (r.identity_id * self.config.instances_per_identity + r.instance) as u64;
        stream(self.config.seed, purpose::NUISANCE, index).gen()
    }

    pub fn labeled(&self, r: ImageRef) -> Result<LabeledImage> {
        let rec = self.identity(r.identity_id)?;
        if r.instance >= self.config.instances_per_identity {
            return Err(Error::Dataset(format!(
                "instance {} of identity {} out of range",
                r.instance, r.identity_id
            )));
        }
        let seed = self.image_seed(r);
        let nuisance = sample_nuisance(seed);
        Ok(LabeledImage {
            image: render(&rec.factors, &nuisance, self.config.resolution)?,
            identity_id: r.identity_id,
            identity_factors: rec.factors,
            nuisance,
            seed,
        })
    }

    pub fn refs(&self, ids: &[usize]) -> Vec<ImageRef> {
        ids.iter()
            .flat_map(|&identity_id| {
                (0..self.config.instances_per_identity).map(move |instance| ImageRef { identity_id, instance })
            })
            .collect()
    }

    fn file_stem(r: ImageRef) -> String {
        format!("id{:05}_{:03}", r.identity_id, r.instance)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            config: self.config.clone(),
            identities: self.identities.clone(),
            train_ids: self.ids(Split::Train),
            test_ids: self.ids(Split::Test),
            images: self
                .refs(&(0..self.identities.len()).collect::<Vec<_>>())
                .into_iter()
                .map(|r| format!("images/{}.ppm", Self::file_stem(r)))
                .collect(),
        }
    }

    /// Renders every image to `dir/images` and writes `dir/manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        for r in self.refs(&(0..self.identities.len()).collect::<Vec<_>>()) {
            let li = self.labeled(r)?;
            let stem = images.join(Self::file_stem(r));
            ppm::write(&stem.with_extension("ppm"), &li.image)?;
            let side = Sidecar {
                identity_id: r.identity_id,
                instance: r.instance,
                seed: li.seed,
                identity_factors: li.identity_factors,
                nuisance: li.nuisance,
            };
            fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&side)?)?;
        }
        let manifest = self.manifest();
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Rebuilds the dataset from `dir/manifest.json`, checking that the stored
    /// identity table matches what the config regenerates.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        let ds = Self::new(manifest.config.clone())?;
        if ds.identities != manifest.identities {
            return Err(Error::Dataset(format!(
                "{} does not match its own config",
                path.display()
            )));
        }
        Ok(ds)
    }
}

/// Aligned `(target, source)` pairs. The pair at `reconstruction` uses the
/// target image as its own source.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapBatch {
    pub targets: Vec<ImageRef>,
    pub sources: Vec<ImageRef>,
    pub reconstruction: usize,
}

impl SwapBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Flags per pair, `true` only for the reconstruction pair.
    pub fn flags(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i == self.reconstruction).collect()
    }

    /// Exactly one pair has `source == target`; every other pair crosses identities.
    pub fn check(&self) -> Result<()> {
        let same: Vec<usize> = (0..self.len())
            .filter(|&i| self.targets[i] == self.sources[i])
            .collect();
        if same != [self.reconstruction] {
            return Err(Error::Contract(format!(
                "expected exactly one reconstruction pair at {}, found {:?}",
                self.reconstruction, same
            )));
        }
        for i in (0..self.len()).filter(|&i| i != self.reconstruction) {
            if self.targets[i].identity_id == self.sources[i].identity_id {
                return Err(Error::Contract(format!("pair {i} does not cross identities")));
            }
        }
        Ok(())
    }
}

pub fn sample_swap_batch(dataset: &Dataset, ids: &[usize], batch_size: usize, rng: &mut impl Rng) -> Result<SwapBatch> {
    if ids.len() < 2 {
        return Err(Error::Dataset(format!(
            "swap batches need at least 2 identities, got {}",
            ids.len()
        )));
    }
    if batch_size < 2 {
        return Err(Error::Contract(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let inst = dataset.config.instances_per_identity;
    let pick = |rng: &mut dyn rand::RngCore, id: usize| ImageRef {
        identity_id: id,
        instance: rng.gen_range(0..inst),
    };
    let reconstruction = rng.gen_range(0..batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    let mut sources = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let t = ids[rng.gen_range(0..ids.len())];
        let tgt = pick(rng, t);
        let src = if i == reconstruction {
            tgt
        } else {
            let k = rng.gen_range(0..ids.len() - 1);
            let t_pos = ids.iter().position(|&x| x == t).unwrap_or(0);
            let s = ids[if k >= t_pos { k + 1 } else { k }];
            pick(rng, s)
        };
        targets.push(tgt);
        sources.push(src);
    }
    let batch = SwapBatch {
        targets,
        sources,
        reconstruction,
    };
    batch.check()?;
    Ok(batch)
}
