//! Procedural "faces" with known generative factors.
//!
//! A face is an ellipse on a flat background. Its shape, skin colour, eye
//! spacing and hair band belong to the identity; pose, position, mouth
//! curvature, background colour and illumination are nuisance. Because the
//! renderer is exact, the analytic probes in [`probe`] can read the factors
//! back and act as oracles for identity change and attribute preservation.

mod dataset;
pub mod ppm;
pub mod probe;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::{Real, Tensor};

pub use dataset::{
    sample_swap_batch, Dataset, DatasetConfig, DatasetManifest, IdentityRecord, ImageRef, LabeledImage, Split,
    SwapBatch,
};
pub use probe::{identity_errors, nuisance_errors, probe, FactorEstimate, ProbeResult};

pub const FACE_ASPECT: (f64, f64) = (0.6, 1.4);
pub const EYE_SPACING: (f64, f64) = (0.2, 0.5);
pub const HAIR_BAND_HEIGHT: (f64, f64) = (0.0, 0.3);
pub const POSE_DEGREES: (f64, f64) = (-30.0, 30.0);
pub const TRANSLATION: (f64, f64) = (-0.1, 0.1);
pub const EXPRESSION: (f64, f64) = (-1.0, 1.0);
pub const ILLUMINATION: (f64, f64) = (0.7, 1.3);

/// Half-height of the face ellipse in normalized `[-1, 1]` image coordinates.
pub(crate) const FACE_HALF_HEIGHT: f64 = 0.5;
pub(crate) const EYE_RADIUS: f64 = 0.08;
pub(crate) const MOUTH_Q: f64 = 0.25;
pub(crate) const MOUTH_HALF_WIDTH: f64 = 0.16;
pub(crate) const MOUTH_BEND: f64 = 0.07;
pub(crate) const MOUTH_THICKNESS: f64 = 0.035;

/// (saturation, value) of each region before illumination.
pub(crate) const BACKGROUND_SV: (f64, f64) = (0.3, 0.55);
pub(crate) const SKIN_SV: (f64, f64) = (0.6, 0.7);
pub(crate) const HAIR_SV: (f64, f64) = (0.85, 0.45);
pub(crate) const INK_VALUE: f64 = 0.12;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors {
    /// Width/height ratio of the face ellipse.
    pub face_aspect: f64,
    pub skin_hue: f64,
    /// Eye offset from the face axis as a fraction of the half-width.
    pub eye_spacing: f64,
    /// Fraction of the face height covered by hair, from the top.
    pub hair_band_height: f64,
    pub hair_hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFactors {
    /// Degrees, positive is clockwise on screen.
    pub pose_angle: f64,
    /// Face centre offset as a fraction of the image width.
    pub translation: (f64, f64),
    /// Mouth curvature, positive is a smile.
    pub expression_curve: f64,
    pub background_hue: f64,
    pub illumination: f64,
}

impl NuisanceFactors {
    /// Upright, centred, neutral mouth, unit illumination.
    pub fn neutral(background_hue: f64) -> Self {
        Self {
            pose_angle: 0.0,
            translation: (0.0, 0.0),
            expression_curve: 0.0,
            background_hue,
            illumination: 1.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

pub fn sample_identity(seed: u64) -> IdentityFactors {
    let mut rng = stream(seed, purpose::IDENTITY, 0);
    IdentityFactors {
        face_aspect: uniform(&mut rng, FACE_ASPECT),
        skin_hue: rng.gen(),
        eye_spacing: uniform(&mut rng, EYE_SPACING),
        hair_band_height: uniform(&mut rng, HAIR_BAND_HEIGHT),
        hair_hue: rng.gen(),
    }
}

pub fn sample_nuisance(seed: u64) -> NuisanceFactors {
    let mut rng = stream(seed, purpose::NUISANCE, 0);
    NuisanceFactors {
        pose_angle: uniform(&mut rng, POSE_DEGREES),
        translation: (uniform(&mut rng, TRANSLATION), uniform(&mut rng, TRANSLATION)),
        expression_curve: uniform(&mut rng, EXPRESSION),
        background_hue: rng.gen(),
        illumination: uniform(&mut rng, ILLUMINATION),
    }
}

/// Square RGB image, row-major `H×W×3`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::dim("Image::new", &[size, size, 3], &[data.len()]));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        Self {
            size,
            data: rgb.iter().copied().cycle().take(size * size * 3).collect(),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// SHA-256 of the little-endian pixel values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// Converts from one `[1, 3, H, W]` slice of a tensor.
    pub fn from_chw(size: usize, chw: &[f64]) -> Result<Self> {
        if chw.len() != 3 * size * size {
            return Err(Error::dim("Image::from_chw", &[3, size, size], &[chw.len()]));
        }
        let plane = size * size;
        let mut data = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * plane + p] as f32;
            }
        }
        Ok(Self { size, data })
    }

    pub fn clamped(&self) -> Self {
        Self {
            size: self.size,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let size = images
        .first()
        .map(|i| i.size)
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let plane = size * size;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.size != size {
            return Err(Error::dim("synth::to_tensor", &[size, size], &[img.size, img.size]));
        }
        for c in 0..3 {
            data.extend((0..plane).map(|p| T::from_f64(img.data[p * 3 + c] as f64)));
        }
    }
    Tensor::new(data, &[images.len(), 3, size, size])
}

/// Splits an `[N, 3, H, W]` tensor back into images.
pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::dim("synth::from_tensor", s, &[0, 3, 0, 0]));
    }
    let v = t.to_f64_vec();
    v.chunks(3 * s[2] * s[3]).map(|c| Image::from_chw(s[2], c)).collect()
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `(hue, saturation, value)` of an RGB triple in `[0, 1]`.
pub(crate) fn rgb_to_hsv(c: [f64; 3]) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        (c[2] - c[0]) / d + 2.0
    } else {
        (c[0] - c[1]) / d + 4.0
    };
    (h / 6.0, s, max)
}

/// Distance between two hues on the unit circle, in `[0, 0.5]`.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[derive(Clone, Copy, PartialEq)]
enum Region {
    Background,
    Skin,
    Hair,
    Ink,
}

struct Scene {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half_w: f64,
    hair_line: f64,
    eye_offset: f64,
    bend: f64,
}

impl Scene {
    fn new(id: &IdentityFactors, nu: &NuisanceFactors) -> Self {
        let theta = nu.pose_angle.to_radians();
        let half_w = FACE_HALF_HEIGHT * id.face_aspect;
        Self {
            cx: 2.0 * nu.translation.0,
            cy: 2.0 * nu.translation.1,
            cos: theta.cos(),
            sin: theta.sin(),
            half_w,
            hair_line: -FACE_HALF_HEIGHT + 2.0 * FACE_HALF_HEIGHT * id.hair_band_height,
            eye_offset: id.eye_spacing * half_w,
            bend: MOUTH_BEND * nu.expression_curve,
        }
    }

    fn region(&self, u: f64, v: f64) -> Region {
        let (x, y) = (u - self.cx, v - self.cy);
        let p = self.cos * x + self.sin * y;
        let q = -self.sin * x + self.cos * y;
        let b = FACE_HALF_HEIGHT;
        if (p / self.half_w).powi(2) + (q / b).powi(2) > 1.0 {
            return Region::Background;
        }
        if q < self.hair_line {
            return Region::Hair;
        }
        let r2 = EYE_RADIUS * EYE_RADIUS;
        if (p - self.eye_offset).powi(2) + q * q <= r2 || (p + self.eye_offset).powi(2) + q * q <= r2 {
            return Region::Ink;
        }
        if p.abs() <= MOUTH_HALF_WIDTH {
            let t = p / MOUTH_HALF_WIDTH;
            let mouth = MOUTH_Q + self.bend * (1.0 - t * t);
            if (q - mouth).abs() <= MOUTH_THICKNESS {
                return Region::Ink;
            }
        }
        Region::Skin
    }
}

pub const RESOLUTIONS: [usize; 2] = [32, 64];

/// Rasterizes one face with 4×4 supersampling.
pub fn render(id: &IdentityFactors, nu: &NuisanceFactors, resolution: usize) -> Result<Image> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::Config(format!(
            "unsupported resolution {resolution}, expected one of {RESOLUTIONS:?}"
        )));
    }
    let light = nu.illumination;
    let shade = |h: f64, (s, v): (f64, f64)| hsv_to_rgb(h, s, v).map(|c| (c * light).clamp(0.0, 1.0));
    let colors = [
        shade(nu.background_hue, BACKGROUND_SV),
        shade(id.skin_hue, SKIN_SV),
        shade(id.hair_hue, HAIR_SV),
        shade(0.0, (0.0, INK_VALUE)),
    ];
    let scene = Scene::new(id, nu);
    let n = resolution;
    let step = 2.0 / (n * SUPERSAMPLE) as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut data = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let mut acc = [0.0f64; 3];
            for si in 0..SUPERSAMPLE {
                let v = -1.0 + ((row * SUPERSAMPLE + si) as f64 + 0.5) * step;
                for sj in 0..SUPERSAMPLE {
                    let u = -1.0 + ((col * SUPERSAMPLE + sj) as f64 + 0.5) * step;
                    let c = &colors[scene.region(u, v) as usize];
                    acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                }
            }
            data.extend(acc.iter().map(|a| ((2.0 * a * weight - 1.0).clamp(-1.0, 1.0)) as f32));
        }
    }
    Image::new(n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for i in 0..50 {
            let h = i as f64 / 50.0;
            let (h2, s2, v2) = rgb_to_hsv(hsv_to_rgb(h, 0.6, 0.7));
            assert!(hue_distance(h, h2) < 1e-12);
            assert!((s2 - 0.6).abs() < 1e-12 && (v2 - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn region_order_matches_enum() {
        assert_eq!(Region::Background as usize, 0);
        assert_eq!(Region::Ink as usize, 3);
    }

    #[test]
    fn unsupported_resolution() {
        let id = sample_identity(0);
        assert!(matches!(
            render(&id, &NuisanceFactors::neutral(0.1), 48),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tensor_round_trip() {
        let img = render(&sample_identity(3), &sample_nuisance(4), 32).unwrap();
        let t = to_tensor::<f64>(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 32, 32]);
        let back = from_tensor(&t).unwrap();
        assert_eq!(back[1], img);
    }
}
