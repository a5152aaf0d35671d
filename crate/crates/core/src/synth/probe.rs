//! Analytic factor probe calibrated to the renderer.
//!
//! The background colour is read from the image border; the face silhouette
//! is whatever the background flood fill cannot reach. Skin, hair and ink
//! (eyes and mouth) colours are estimated from pure pixels, and boundary
//! pixels are unmixed against those colours to get sub-pixel coverage. Shape
//! comes from the second moments of the coverage map, hair height from the
//! area of the hair cap, and eye spacing and mouth curvature from the ink
//! layout in the face frame.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{
    hsv_to_rgb, hue_distance, render, rgb_to_hsv, IdentityFactors, Image, NuisanceFactors, BACKGROUND_SV,
    FACE_HALF_HEIGHT, HAIR_SV, INK_VALUE, MOUTH_HALF_WIDTH, SKIN_SV,
};

/// Everything the probe reads back from one image. Fields the image does
/// not determine (hair hue without visible hair, say) are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorEstimate {
    pub face_aspect: f64,
    pub skin_hue: f64,
    pub eye_spacing: Option<f64>,
    pub hair_band_height: f64,
    pub hair_hue: Option<f64>,
    pub pose_angle: f64,
    pub translation: (f64, f64),
    pub expression_curve: Option<f64>,
    pub background_hue: f64,
    pub illumination: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub estimate: Option<FactorEstimate>,
    pub low_confidence: bool,
    pub note: Option<String>,
}

impl ProbeResult {
    fn failed(note: &str) -> Self {
        Self {
            estimate: None,
            low_confidence: true,
            note: Some(note.to_string()),
        }
    }

    /// The estimate, if the probe trusts it.
    pub fn confident(&self) -> Option<&FactorEstimate> {
        if self.low_confidence {
            None
        } else {
            self.estimate.as_ref()
        }
    }
}

/// Hair visible below this many pixels of area gives no usable hue.
const MIN_HAIR_AREA: f64 = 1.5;
const BG_TOLERANCE: f64 = 0.04;
/// Ink rows below this local height belong to the mouth.
const EYE_MOUTH_SPLIT: f64 = 0.13;

type Rgb = [f64; 3];

fn sub(a: Rgb, b: Rgb) -> Rgb {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Rgb, b: Rgb) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Rgb) -> f64 {
    dot(a, a).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_color(px: &[Rgb]) -> Rgb {
    [0, 1, 2].map(|c| median(px.iter().map(|p| p[c]).collect()))
}

fn mean_color(px: &[Rgb]) -> Rgb {
    let n = px.len() as f64;
    [0, 1, 2].map(|c| px.iter().map(|p| p[c]).sum::<f64>() / n)
}

fn mean_hue(px: &[Rgb]) -> f64 {
    // circular mean so that hues near 0 and 1 do not cancel
    let (s, c) = px.iter().fold((0.0, 0.0), |(s, c), p| {
        let a = rgb_to_hsv(*p).0 * std::f64::consts::TAU;
        (s + a.sin(), c + a.cos())
    });
    (s.atan2(c) / std::f64::consts::TAU).rem_euclid(1.0)
}

/// Least squares `r ≈ x·a + y·b` with `x, y ≥ 0`.
fn unmix2(r: Rgb, a: Rgb, b: Rgb) -> (f64, f64) {
    let (aa, bb, ab) = (dot(a, a), dot(b, b), dot(a, b));
    let (ra, rb) = (dot(r, a), dot(r, b));
    let det = aa * bb - ab * ab;
    if det > 1e-6 * aa * bb {
        let x = (ra * bb - rb * ab) / det;
        let y = (rb * aa - ra * ab) / det;
        if x >= 0.0 && y >= 0.0 {
            return (x, y);
        }
    }
    let x = (ra / aa).max(0.0);
    let y = (rb / bb).max(0.0);
    let res_x = norm(sub(r, a.map(|v| v * x)));
    let res_y = norm(sub(r, b.map(|v| v * y)));
    if res_x <= res_y {
        (x, 0.0)
    } else {
        (0.0, y)
    }
}

/// Fraction of a disk's area above a chord placed so that the cap spans
/// `h` of the diameter.
pub(crate) fn cap_fraction(h: f64) -> f64 {
    let d = (1.0 - 2.0 * h).clamp(-1.0, 1.0);
    (d.acos() - d * (1.0 - d * d).sqrt()) / std::f64::consts::PI
}

fn invert_cap(f: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cap_fraction(mid) < f {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn probe(image: &Image) -> ProbeResult {
    let n = image.size;
    if n < 8 {
        return ProbeResult::failed("image too small");
    }
    let px: Vec<Rgb> = image
        .data
        .chunks(3)
        .map(|c| [0, 1, 2].map(|i| ((c[i] as f64 + 1.0) * 0.5).clamp(0.0, 1.0)))
        .collect();
    let idx = |r: usize, c: usize| r * n + c;

    let border: Vec<usize> = (0..n)
        .flat_map(|i| [idx(0, i), idx(n - 1, i), idx(i, 0), idx(i, n - 1)])
        .collect();
    let bg = median_color(&border.iter().map(|&i| px[i]).collect::<Vec<_>>());
    let agree = border.iter().filter(|&&i| norm(sub(px[i], bg)) <= BG_TOLERANCE).count();
    if (agree as f64) < 0.75 * border.len() as f64 {
        return ProbeResult::failed("border is not a uniform background");
    }
    let (bg_hue, _, bg_v) = rgb_to_hsv(bg);
    let illum = bg_v / BACKGROUND_SV.1;
    if illum <= 0.05 {
        return ProbeResult::failed("background too dark");
    }

    // flood fill the background from the border
    let mut is_bg = vec![false; n * n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &i in &border {
        if !is_bg[i] && norm(sub(px[i], bg)) <= BG_TOLERANCE {
            is_bg[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / n, i % n);
        let nbrs = [
            (r > 0).then(|| i - n),
            (r + 1 < n).then(|| i + n),
            (c > 0).then(|| i - 1),
            (c + 1 < n).then(|| i + 1),
        ];
        for j in nbrs.into_iter().flatten() {
            if !is_bg[j] && norm(sub(px[j], bg)) <= BG_TOLERANCE {
                is_bg[j] = true;
                queue.push_back(j);
            }
        }
    }
    let face_count = is_bg.iter().filter(|b| !**b).count();
    if face_count < 12 {
        return ProbeResult::failed("no face region");
    }
    let neighbours8 = |i: usize| {
        let (r, c) = ((i / n) as isize, (i % n) as isize);
        let mut out = Vec::with_capacity(8);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                    out.push(rr as usize * n + cc as usize);
                }
            }
        }
        out
    };
    let interior: Vec<bool> = (0..n * n)
        .map(|i| !is_bg[i] && neighbours8(i).len() == 8 && neighbours8(i).iter().all(|&j| !is_bg[j]))
        .collect();
    let near_face: Vec<bool> = (0..n * n)
        .map(|i| !is_bg[i] || neighbours8(i).iter().any(|&j| !is_bg[j]))
        .collect();

    let hsv: Vec<(f64, f64, f64)> = px.iter().map(|p| rgb_to_hsv(*p)).collect();
    let signature = |i: usize, (s, v): (f64, f64), tol_v: f64, tol_s: f64| {
        (hsv[i].2 / illum - v).abs() < tol_v && (hsv[i].1 - s).abs() < tol_s
    };

    let pure_skin: Vec<Rgb> = (0..n * n)
        .filter(|&i| interior[i] && signature(i, SKIN_SV, 0.015, 0.02))
        .map(|i| px[i])
        .collect();
    let skin = if pure_skin.len() >= 3 {
        mean_color(&pure_skin)
    } else {
        let bright: Vec<Rgb> = (0..n * n)
            .filter(|&i| interior[i] && hsv[i].2 / illum > 0.55)
            .map(|i| px[i])
            .collect();
        if bright.is_empty() {
            return ProbeResult::failed("no skin pixels");
        }
        median_color(&bright)
    };
    let skin_hue = if pure_skin.len() >= 3 {
        mean_hue(&pure_skin)
    } else {
        rgb_to_hsv(skin).0
    };

    let pure_hair: Vec<Rgb> = (0..n * n)
        .filter(|&i| !is_bg[i] && signature(i, HAIR_SV, 0.015, 0.02))
        .map(|i| px[i])
        .collect();
    let hair_seen = if !pure_hair.is_empty() {
        Some(mean_color(&pure_hair))
    } else {
        let loose: Vec<Rgb> = (0..n * n)
            .filter(|&i| !is_bg[i] && (0.3..0.55).contains(&(hsv[i].2 / illum)) && hsv[i].1 > 0.72)
            .map(|i| px[i])
            .collect();
        (loose.len() >= 2).then(|| median_color(&loose))
    };
    let hair = hair_seen;
    let ink = hsv_to_rgb(0.0, 0.0, INK_VALUE * illum);

    // a thin band has no pure pixels: pick the hair hue that best explains
    // the upper boundary as a skin/hair/background mixture
    let hair = hair.or_else(|| {
        let rows: Vec<usize> = (0..n * n).filter(|&i| !is_bg[i]).map(|i| i / n).collect();
        let mid_row = rows.iter().sum::<usize>() as f64 / rows.len() as f64;
        let upper: Vec<usize> = (0..n * n)
            .filter(|&i| near_face[i] && ((i / n) as f64) < mid_row)
            .collect();
        let residual = |h: Rgb| -> f64 {
            upper
                .iter()
                .map(|&i| {
                    let (base, a, b) = if interior[i] {
                        (skin, sub(h, skin), sub(ink, skin))
                    } else {
                        (bg, sub(skin, bg), sub(h, bg))
                    };
                    let r = sub(px[i], base);
                    let (x, y) = unmix2(r, a, b);
                    let fit = [0, 1, 2].map(|c| x * a[c] + y * b[c]);
                    dot(sub(r, fit), sub(r, fit))
                })
                .sum()
        };
        let color = |hue: f64| hsv_to_rgb(hue, HAIR_SV.0, HAIR_SV.1 * illum);
        let base = residual(color(0.0));
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..180 {
            let hue = k as f64 / 180.0;
            let r = residual(color(hue));
            if r < best.0 {
                best = (r, hue);
            }
        }
        (best.0 < base || best.1 == 0.0).then(|| color(best.1))
    });

    // coverage of face, hair and ink per pixel
    let mut cover = vec![0.0f64; n * n];
    let mut hair_cover = vec![0.0f64; n * n];
    let mut ink_cover = vec![0.0f64; n * n];
    for i in 0..n * n {
        if interior[i] {
            cover[i] = 1.0;
            let r = sub(px[i], skin);
            let (h, k) = match hair {
                Some(h) => unmix2(r, sub(h, skin), sub(ink, skin)),
                None => (
                    0.0,
                    (dot(r, sub(ink, skin)) / dot(sub(ink, skin), sub(ink, skin))).max(0.0),
                ),
            };
            hair_cover[i] = h.min(1.0);
            ink_cover[i] = if k > 0.02 { k.min(1.0) } else { 0.0 };
        } else if near_face[i] {
            let r = sub(px[i], bg);
            let (s, h) = match hair {
                Some(h) => unmix2(r, sub(skin, bg), sub(h, bg)),
                None => (
                    (dot(r, sub(skin, bg)) / dot(sub(skin, bg), sub(skin, bg))).max(0.0),
                    0.0,
                ),
            };
            let total = (s + h).min(1.0);
            cover[i] = total;
            hair_cover[i] = if s + h > 0.0 { h * total / (s + h) } else { 0.0 };
        }
    }

    let step = 2.0 / n as f64;
    let coord = |i: usize| {
        (
            -1.0 + ((i % n) as f64 + 0.5) * step,
            -1.0 + ((i / n) as f64 + 0.5) * step,
        )
    };
    let mass: f64 = cover.iter().sum();
    let (mut mx, mut my) = (0.0, 0.0);
    for (i, w) in cover.iter().enumerate() {
        let (x, y) = coord(i);
        mx += w * x;
        my += w * y;
    }
    mx /= mass;
    my /= mass;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, w) in cover.iter().enumerate() {
        let (x, y) = coord(i);
        sxx += w * (x - mx) * (x - mx);
        syy += w * (y - my) * (y - my);
        sxy += w * (x - mx) * (y - my);
    }
    let sheppard = step * step / 12.0;
    sxx = sxx / mass + sheppard;
    syy = syy / mass + sheppard;
    sxy /= mass;

    // eigenvector nearest the vertical is the face height axis
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) / 4.0 + sxy * sxy).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    let e1 = if sxy.abs() > 1e-15 {
        let v = (l1 - syy, sxy);
        let m = (v.0 * v.0 + v.1 * v.1).sqrt();
        (v.0 / m, v.1 / m)
    } else if sxx >= syy {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (vertical, var_v, var_h) = if e1.1.abs() >= e1.0.abs() {
        (e1, l1, l2)
    } else {
        ((-e1.1, e1.0), l2, l1)
    };
    let vertical = if vertical.1 < 0.0 {
        (-vertical.0, -vertical.1)
    } else {
        vertical
    };
    let face_aspect = (var_h / var_v).sqrt();
    let half_h = 2.0 * var_v.sqrt();
    let half_w = 2.0 * var_h.sqrt();

    let ink_mass: f64 = ink_cover.iter().sum();
    let pose = if (face_aspect - 1.0).abs() > 0.12 || ink_mass * step * step < 1e-4 {
        (-vertical.0).atan2(vertical.1)
    } else {
        let (mut ix, mut iy) = (0.0, 0.0);
        for (i, w) in ink_cover.iter().enumerate() {
            let (x, y) = coord(i);
            ix += w * (x - mx);
            iy += w * (y - my);
        }
        (-ix).atan2(iy)
    };
    let (cos, sin) = (pose.cos(), pose.sin());
    let local = |i: usize| {
        let (x, y) = coord(i);
        let (x, y) = (x - mx, y - my);
        (cos * x + sin * y, -sin * x + cos * y)
    };

    let hair_area: f64 = hair_cover.iter().sum();
    let hair_band_height = invert_cap(hair_area / mass).clamp(0.0, 0.3);
    let hair_hue = match hair_seen {
        Some(_) if !pure_hair.is_empty() && hair_area >= MIN_HAIR_AREA => Some(mean_hue(&pure_hair)),
        Some(h) if hair_area >= MIN_HAIR_AREA => Some(rgb_to_hsv(h).0),
        _ => None,
    };

    // eyes: ink above the split, one blob per side of the face axis
    let (mut left, mut right) = ((0.0, 0.0), (0.0, 0.0));
    for (i, w) in ink_cover.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        let (p, q) = local(i);
        if q < EYE_MOUTH_SPLIT && q > -EYE_MOUTH_SPLIT {
            if p < 0.0 {
                left = (left.0 + w * p, left.1 + w);
            } else {
                right = (right.0 + w * p, right.1 + w);
            }
        }
    }
    let eye_spacing = (left.1 > 0.0 && right.1 > 0.0).then(|| (right.0 / right.1 - left.0 / left.1) / 2.0 / half_w);

    // mouth: re-render with every other factor fixed at its estimate and
    // search the curvature that best reproduces the mouth window
    let window: Vec<usize> = (0..n * n)
        .filter(|&i| {
            let (p, q) = local(i);
            interior[i] && q >= EYE_MOUTH_SPLIT && q <= 0.45 && p.abs() <= MOUTH_HALF_WIDTH + 0.1
        })
        .collect();
    let identity = IdentityFactors {
        face_aspect,
        skin_hue,
        eye_spacing: eye_spacing.unwrap_or(0.35),
        hair_band_height,
        hair_hue: hair.map(|h| rgb_to_hsv(h).0).unwrap_or(0.0),
    };
    let mut nuisance = NuisanceFactors {
        pose_angle: pose.to_degrees(),
        translation: (mx / 2.0, my / 2.0),
        expression_curve: 0.0,
        background_hue: bg_hue,
        illumination: illum,
    };
    let expression_curve = if window.len() >= 3 && ink_mass > 0.0 {
        let mut misfit = |e: f64| -> f64 {
            nuisance.expression_curve = e;
            match render(&identity, &nuisance, n) {
                Ok(img) => window
                    .iter()
                    .map(|&i| {
                        (0..3)
                            .map(|c| (img.data[3 * i + c] as f64 - image.data[3 * i + c] as f64).powi(2))
                            .sum::<f64>()
                    })
                    .sum(),
                Err(_) => f64::INFINITY,
            }
        };
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=40 {
            let e = -1.0 + k as f64 * 0.05;
            let m = misfit(e);
            if m < best.0 {
                best = (m, e);
            }
        }
        let (mut lo, mut hi) = ((best.1 - 0.05f64).max(-1.0), (best.1 + 0.05f64).min(1.0));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..24 {
            let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if misfit(a) <= misfit(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        Some(0.5 * (lo + hi))
    } else {
        None
    };

    let mut notes = Vec::new();
    if (half_h - FACE_HALF_HEIGHT).abs() > 0.15 {
        notes.push(format!("face height {:.3} far from the rendered size", 2.0 * half_h));
    }
    let touches_border = border.iter().any(|&i| !is_bg[i]);
    if touches_border {
        notes.push("face touches the image border".to_string());
    }
    ProbeResult {
        estimate: Some(FactorEstimate {
            face_aspect,
            skin_hue,
            eye_spacing,
            hair_band_height,
            hair_hue,
            pose_angle: nuisance.pose_angle,
            translation: nuisance.translation,
            expression_curve,
            background_hue: bg_hue,
            illumination: illum,
        }),
        low_confidence: !notes.is_empty(),
        note: (!notes.is_empty()).then(|| notes.join("; ")),
    }
}

/// Per-field tolerance of the probe on clean renders, as a fraction of the
/// field's range.
pub const TOLERANCE: f64 = 0.05;

pub const IDENTITY_FIELDS: [&str; 5] = ["face_aspect", "skin_hue", "eye_spacing", "hair_band_height", "hair_hue"];
pub const NUISANCE_FIELDS: [&str; 5] = [
    "pose_angle",
    "translation",
    "expression_curve",
    "background_hue",
    "illumination",
];

fn span((lo, hi): (f64, f64)) -> f64 {
    hi - lo
}

/// Absolute errors of the identity fields as fractions of each field's
/// range, in [`IDENTITY_FIELDS`] order. Hue errors are circular.
pub fn identity_errors(est: &FactorEstimate, truth: &IdentityFactors) -> [Option<f64>; 5] {
    [
        Some((est.face_aspect - truth.face_aspect).abs() / span(super::FACE_ASPECT)),
        Some(hue_distance(est.skin_hue, truth.skin_hue)),
        est.eye_spacing
            .map(|v| (v - truth.eye_spacing).abs() / span(super::EYE_SPACING)),
        Some((est.hair_band_height - truth.hair_band_height).abs() / span(super::HAIR_BAND_HEIGHT)),
        est.hair_hue.map(|v| hue_distance(v, truth.hair_hue)),
    ]
}

/// Same for the nuisance fields, in [`NUISANCE_FIELDS`] order. Translation
/// uses the larger of the two axis errors.
pub fn nuisance_errors(est: &FactorEstimate, truth: &NuisanceFactors) -> [Option<f64>; 5] {
    let t = span(super::TRANSLATION);
    [
        Some((est.pose_angle - truth.pose_angle).abs() / span(super::POSE_DEGREES)),
        Some(
            ((est.translation.0 - truth.translation.0).abs() / t)
                .max((est.translation.1 - truth.translation.1).abs() / t),
        ),
        est.expression_curve
            .map(|v| (v - truth.expression_curve).abs() / span(super::EXPRESSION)),
        Some(hue_distance(est.background_hue, truth.background_hue)),
        Some((est.illumination - truth.illumination).abs() / span(super::ILLUMINATION)),
    ]
}
