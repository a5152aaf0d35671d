//! Checkpoint files: a JSON manifest (`<stem>.json`) describing every tensor
//! and a single little-endian blob (`<stem>.bin`) holding their values back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Kind, ParamSet};
use crate::optim::AdamState;
use crate::tensor::Real;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A named array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: String,
    pub data: Vec<T>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn write_arrays<T: Real>(stem: &Path, arrays: &[NamedArray<T>], meta: serde_json::Value) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::dim("checkpoint::write", &a.shape, &[a.data.len()]));
        }
        let offset = blob.len() as u64;
        a.data.iter().for_each(|v| v.to_le(&mut blob));
        tensors.push(TensorEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: blob.len() as u64 - offset,
            kind: a.kind.clone(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        total_bytes: blob.len() as u64,
        tensors,
        meta,
    };
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob_path(stem), &blob)?;
    fs::write(manifest_path(stem), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_arrays<T: Real>(stem: &Path) -> Result<(Manifest, Vec<NamedArray<T>>)> {
    let mpath = manifest_path(stem);
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} but {} was requested",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let bpath = blob_path(stem);
    if !bpath.exists() {
        return Err(Error::MissingArtifact(bpath));
    }
    let blob = fs::read(&bpath)?;
    if blob.len() as u64 != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut arrays = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.nbytes as usize != count * T::BYTES || (e.offset + e.nbytes) as usize > blob.len() {
            return Err(Error::Checkpoint(format!("bad extent for tensor `{}`", e.name)));
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.nbytes) as usize];
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            kind: e.kind.clone(),
            data: bytes.chunks(T::BYTES).map(T::from_le).collect(),
        });
    }
    Ok((manifest, arrays))
}

fn kind_tag(k: Kind) -> &'static str {
    match k {
        Kind::Param => "param",
        Kind::Buffer => "buffer",
    }
}

pub fn arrays_of<T: Real>(set: &ParamSet<T>) -> Vec<NamedArray<T>> {
    set.iter()
        .map(|(name, t, kind)| NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            kind: kind_tag(kind).to_string(),
            data: t.to_vec(),
        })
        .collect()
}

pub fn save_params<T: Real>(stem: &Path, set: &ParamSet<T>, meta: serde_json::Value) -> Result<()> {
    write_arrays(stem, &arrays_of(set), meta)
}

/// Loads values into `set` by name. Every tensor of `set` must be present with the same shape.
pub fn load_params<T: Real>(stem: &Path, set: &ParamSet<T>) -> Result<Manifest> {
    let (manifest, arrays) = read_arrays::<T>(stem)?;
    assign(set, &arrays)?;
    Ok(manifest)
}

pub fn assign<T: Real>(set: &ParamSet<T>, arrays: &[NamedArray<T>]) -> Result<()> {
    for (name, t, _) in set.iter() {
        let a = arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` not in checkpoint")))?;
        if a.shape != t.shape() {
            return Err(Error::dim("checkpoint::load", t.shape(), &a.shape));
        }
        *t.data_mut() = a.data.clone();
    }
    Ok(())
}

/// Adam moments of `params`, named `<tag>.m.<param>` and `<tag>.v.<param>`.
pub fn adam_arrays<T: Real>(tag: &str, params: &ParamSet<T>, state: &AdamState<T>) -> Vec<NamedArray<T>> {
    let mut out = Vec::new();
    for (i, (name, t)) in params.params().enumerate() {
        for (kind, data) in [("m", &state.first_moment[i]), ("v", &state.second_moment[i])] {
            out.push(NamedArray {
                name: format!("{tag}.{kind}.{name}"),
                shape: t.shape().to_vec(),
                kind: "optimizer".to_string(),
                data: data.clone(),
            });
        }
    }
    out
}

pub fn restore_adam<T: Real>(
    tag: &str,
    params: &ParamSet<T>,
    state: &mut AdamState<T>,
    arrays: &[NamedArray<T>],
    step_count: u64,
) -> Result<()> {
    for (i, (name, _)) in params.params().enumerate() {
        for kind in ["m", "v"] {
            let key = format!("{tag}.{kind}.{name}");
            let a = arrays
                .iter()
                .find(|a| a.name == key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer tensor `{key}` not in checkpoint")))?;
            let slot = if kind == "m" {
                &mut state.first_moment[i]
            } else {
                &mut state.second_moment[i]
            };
            if a.data.len() != slot.len() {
                return Err(Error::dim("checkpoint::restore_adam", &[slot.len()], &[a.data.len()]));
            }
            slot.clone_from(&a.data);
        }
    }
    state.step_count = step_count;
    Ok(())
}
